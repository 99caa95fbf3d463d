//! Annotation-free object counting.
//!
//! The pipeline trains a counting network without a single human-annotated
//! count. A deterministic scene renderer (and, optionally, a remote image
//! generation service) produces ranked image triplets for sorting
//! pre-training, prompt-derived counts anchor a calibration head, and a
//! density classifier steers partitioned recounting at inference time.

pub mod dcgp;
pub mod eval;
pub mod models;
pub mod opt;
pub mod genclient;
pub mod manifest;
pub mod ranking;
pub mod scene_lab;
pub mod train;

pub use ranking::{rk, rk_grad, sort_loss, RankError, SortLoss};
pub use scene_lab::{ImageSample, RankedTriplet, SampleSource, SceneError, SceneSpec};
