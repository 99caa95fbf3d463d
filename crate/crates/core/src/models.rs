//! Network definitions: a small strided convolutional encoder plus linear
//! heads, with explicit forward/backward passes in f64.
//!
//! Everything here is deterministic: initialization draws from a seeded
//! generator, there is no threading, and checkpoints serialize weights
//! losslessly, so a reloaded model reproduces forward passes bit for bit.

use std::fs;
use std::path::Path;

use image::RgbImage;
use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("bad shape: expected {expected}, got {got}")]
    BadShape { expected: String, got: String },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("checkpoint missing file {0}")]
    MissingFile(String),
}

/// Encoder architecture. Each stage halves spatial resolution, so the
/// feature grid is `input_size / 2^stages` on a side.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Square input resolution in pixels; must be divisible by `2^stages`.
    pub input_size: u32,
    /// Output channels per stage; the last entry is the feature dimension.
    pub widths: Vec<usize>,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_size: 96,
            widths: vec![8, 16, 32, 64],
            seed: 17,
        }
    }
}

impl EncoderConfig {
    pub fn feature_dim(&self) -> usize {
        *self.widths.last().expect("at least one stage")
    }

    pub fn grid_side(&self) -> usize {
        (self.input_size as usize) >> self.widths.len()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let down = 1u32 << self.widths.len();
        if self.widths.is_empty() || self.input_size % down != 0 || self.input_size < down {
            return Err(ModelError::BadShape {
                expected: format!("input divisible by 2^{}", self.widths.len()),
                got: format!("input_size {}", self.input_size),
            });
        }
        Ok(())
    }
}

/// Spatial feature grid, laid out channel-first: `(channels, rows, cols)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureMap {
    pub values: Array3<f64>,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    pub fn grid(&self) -> (usize, usize) {
        let (_, h, w) = self.values.dim();
        (h, w)
    }

    /// Feature vector of one grid cell.
    pub fn cell(&self, row: usize, col: usize) -> Array1<f64> {
        self.values
            .slice(ndarray::s![.., row, col])
            .to_owned()
    }
}

/// Channel-wise mean over the grid.
pub fn global_pool(features: &FeatureMap) -> Array1<f64> {
    let (c, h, w) = features.values.dim();
    let mut out = Array1::zeros(c);
    for ci in 0..c {
        let mut acc = 0.0;
        for y in 0..h {
            for x in 0..w {
                acc += features.values[(ci, y, x)];
            }
        }
        out[ci] = acc / (h * w) as f64;
    }
    out
}

/// One 3x3 stride-2 conv stage with ReLU. The kernel is stored flattened as
/// a `(9 * c_in, c_out)` matrix so forward/backward are plain matmuls over
/// an im2col patch matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvStage {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvStage {
    fn new(c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        // He-uniform over the 3x3 receptive field.
        let fan_in = 9 * c_in;
        let limit = (6.0 / fan_in as f64).sqrt();
        let weight =
            Array2::from_shape_fn((fan_in, c_out), |_| rng.random_range(-limit..=limit));
        Self {
            weight,
            bias: Array1::zeros(c_out),
            c_in,
            c_out,
        }
    }
}

/// Patch matrix for stride-2 3x3 convolution with padding 1. Row `oy*ow+ox`
/// holds the flattened receptive field of output pixel `(oy, ox)`.
fn im2col(x: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut patches = Array2::zeros((oh * ow, 9 * c));
    for oy in 0..oh {
        for ox in 0..ow {
            let row = oy * ow + ox;
            for ci in 0..c {
                for ky in 0..3 {
                    let y = (2 * oy + ky) as i64 - 1;
                    if y < 0 || y >= h as i64 {
                        continue;
                    }
                    for kx in 0..3 {
                        let x_pos = (2 * ox + kx) as i64 - 1;
                        if x_pos < 0 || x_pos >= w as i64 {
                            continue;
                        }
                        patches[(row, ci * 9 + ky * 3 + kx)] = x[(ci, y as usize, x_pos as usize)];
                    }
                }
            }
        }
    }
    patches
}

/// Scatter-add of patch-space gradients back to input space; the adjoint of
/// [`im2col`].
fn col2im(d_patches: &Array2<f64>, c: usize, h: usize, w: usize) -> Array3<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = Array3::zeros((c, h, w));
    for oy in 0..oh {
        for ox in 0..ow {
            let row = oy * ow + ox;
            for ci in 0..c {
                for ky in 0..3 {
                    let y = (2 * oy + ky) as i64 - 1;
                    if y < 0 || y >= h as i64 {
                        continue;
                    }
                    for kx in 0..3 {
                        let x_pos = (2 * ox + kx) as i64 - 1;
                        if x_pos < 0 || x_pos >= w as i64 {
                            continue;
                        }
                        dx[(ci, y as usize, x_pos as usize)] +=
                            d_patches[(row, ci * 9 + ky * 3 + kx)];
                    }
                }
            }
        }
    }
    dx
}

struct StageCache {
    patches: Array2<f64>,
    /// ReLU pass-through mask in `(out_pixels, c_out)` layout.
    active: Array2<f64>,
    in_dim: (usize, usize, usize),
}

/// Per-image state captured during `forward`, consumed by `backward`.
pub struct EncoderCache {
    stages: Vec<StageCache>,
}

/// Gradients for every encoder parameter, in stage order.
#[derive(Debug, Clone)]
pub struct EncoderGrads {
    pub d_weight: Vec<Array2<f64>>,
    pub d_bias: Vec<Array1<f64>>,
}

impl EncoderGrads {
    pub fn zeros_like(encoder: &Encoder) -> Self {
        Self {
            d_weight: encoder
                .stages
                .iter()
                .map(|s| Array2::zeros(s.weight.dim()))
                .collect(),
            d_bias: encoder
                .stages
                .iter()
                .map(|s| Array1::zeros(s.bias.len()))
                .collect(),
        }
    }

    pub fn add(&mut self, other: &EncoderGrads) {
        for (a, b) in self.d_weight.iter_mut().zip(&other.d_weight) {
            *a += b;
        }
        for (a, b) in self.d_bias.iter_mut().zip(&other.d_bias) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in self.d_weight.iter_mut() {
            *a *= s;
        }
        for a in self.d_bias.iter_mut() {
            *a *= s;
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub stages: Vec<ConvStage>,
}

impl Encoder {
    pub fn new(cfg: &EncoderConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut stages = Vec::with_capacity(cfg.widths.len());
        let mut c_in = 3;
        for &c_out in &cfg.widths {
            stages.push(ConvStage::new(c_in, c_out, &mut rng));
            c_in = c_out;
        }
        Ok(Self {
            cfg: cfg.clone(),
            stages,
        })
    }

    /// Forward pass over a preprocessed image tensor `(3, S, S)`.
    pub fn forward_array(&self, x: &Array3<f64>) -> Result<(FeatureMap, EncoderCache), ModelError> {
        let s = self.cfg.input_size as usize;
        if x.dim() != (3, s, s) {
            return Err(ModelError::BadShape {
                expected: format!("(3, {s}, {s})"),
                got: format!("{:?}", x.dim()),
            });
        }
        let mut cur = x.clone();
        let mut caches = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let (c, h, w) = cur.dim();
            let (oh, ow) = (h / 2, w / 2);
            let patches = im2col(&cur);
            let mut out2 = patches.dot(&stage.weight);
            for mut row in out2.rows_mut() {
                row += &stage.bias;
            }
            let active = out2.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
            out2.mapv_inplace(|v| v.max(0.0));
            let mut next = Array3::zeros((stage.c_out, oh, ow));
            for oy in 0..oh {
                for ox in 0..ow {
                    for co in 0..stage.c_out {
                        next[(co, oy, ox)] = out2[(oy * ow + ox, co)];
                    }
                }
            }
            caches.push(StageCache {
                patches,
                active,
                in_dim: (c, h, w),
            });
            cur = next;
        }
        Ok((FeatureMap { values: cur }, EncoderCache { stages: caches }))
    }

    /// Preprocess then forward.
    pub fn forward_image(
        &self,
        img: &RgbImage,
        stats: &ChannelStats,
    ) -> Result<(FeatureMap, EncoderCache), ModelError> {
        let x = preprocess(img, self.cfg.input_size, stats);
        self.forward_array(&x)
    }

    /// Backpropagate a feature-space gradient into parameter gradients.
    pub fn backward(&self, cache: &EncoderCache, d_features: &Array3<f64>) -> EncoderGrads {
        let mut grads = EncoderGrads::zeros_like(self);
        let mut d_cur = d_features.clone();
        for (idx, stage) in self.stages.iter().enumerate().rev() {
            let sc = &cache.stages[idx];
            let (c_in, h, w) = sc.in_dim;
            let (oh, ow) = (h / 2, w / 2);
            let mut d_out2 = Array2::zeros((oh * ow, stage.c_out));
            for oy in 0..oh {
                for ox in 0..ow {
                    for co in 0..stage.c_out {
                        d_out2[(oy * ow + ox, co)] = d_cur[(co, oy, ox)];
                    }
                }
            }
            d_out2 *= &sc.active;
            grads.d_weight[idx] = sc.patches.t().dot(&d_out2);
            grads.d_bias[idx] = d_out2.sum_axis(ndarray::Axis(0));
            let d_patches = d_out2.dot(&stage.weight.t());
            d_cur = col2im(&d_patches, c_in, h, w);
        }
        grads
    }
}

/// Per-channel pixel statistics (in [0,1] units) used to normalize inputs.
/// Training computes these over its manifest; they ride along in the
/// checkpoint so inference preprocesses identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for ChannelStats {
    fn default() -> Self {
        Self {
            mean: [0.5; 3],
            std: [0.25; 3],
        }
    }
}

impl ChannelStats {
    /// Exact per-channel mean/std over a set of images.
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a RgbImage>) -> Self {
        let mut sum = [0.0f64; 3];
        let mut sum_sq = [0.0f64; 3];
        let mut n = 0u64;
        for img in images {
            for px in img.pixels() {
                for c in 0..3 {
                    let v = px[c] as f64 / 255.0;
                    sum[c] += v;
                    sum_sq[c] += v * v;
                }
            }
            n += (img.width() * img.height()) as u64;
        }
        if n == 0 {
            return Self::default();
        }
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        for c in 0..3 {
            mean[c] = sum[c] / n as f64;
            let var = (sum_sq[c] / n as f64 - mean[c] * mean[c]).max(0.0);
            std[c] = var.sqrt().max(1e-3);
        }
        Self { mean, std }
    }
}

/// Resize to a square `size` and normalize channels with the given stats.
pub fn preprocess(img: &RgbImage, size: u32, stats: &ChannelStats) -> Array3<f64> {
    let resized = if img.width() == size && img.height() == size {
        img.clone()
    } else {
        image::imageops::resize(img, size, size, image::imageops::FilterType::Triangle)
    };
    let s = size as usize;
    let mut x = Array3::zeros((3, s, s));
    for y in 0..s {
        for ximg in 0..s {
            let px = resized.get_pixel(ximg as u32, y as u32);
            for c in 0..3 {
                x[(c, y, ximg)] = (px[c] as f64 / 255.0 - stats.mean[c]) / stats.std[c];
            }
        }
    }
    x
}

/// Linear scalar head: `w . z + b`. Used for both the sorting score and the
/// calibrated count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalarHead {
    pub w: Array1<f64>,
    pub b: f64,
}

impl ScalarHead {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let limit = (1.0 / dim as f64).sqrt();
        Self {
            w: Array1::from_shape_fn(dim, |_| rng.random_range(-limit..=limit)),
            b: 0.0,
        }
    }

    pub fn forward(&self, z: &Array1<f64>) -> f64 {
        self.w.dot(z) + self.b
    }

    /// Gradients of `d_out * forward(z)` with respect to (w, b, z).
    pub fn backward(&self, z: &Array1<f64>, d_out: f64) -> (Array1<f64>, f64, Array1<f64>) {
        (z * d_out, d_out, &self.w * d_out)
    }
}

/// Linear classifier head producing one logit per class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassHead {
    /// `(classes, dim)`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl ClassHead {
    pub fn new(classes: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let limit = (1.0 / dim as f64).sqrt();
        Self {
            w: Array2::from_shape_fn((classes, dim), |_| rng.random_range(-limit..=limit)),
            b: Array1::zeros(classes),
        }
    }

    pub fn classes(&self) -> usize {
        self.w.dim().0
    }

    pub fn logits(&self, z: &Array1<f64>) -> Array1<f64> {
        self.w.dot(z) + &self.b
    }

    pub fn probabilities(&self, z: &Array1<f64>) -> Array1<f64> {
        softmax(&self.logits(z))
    }

    pub fn predict(&self, z: &Array1<f64>) -> usize {
        let logits = self.logits(z);
        let mut best = 0;
        for i in 1..logits.len() {
            if logits[i] > logits[best] {
                best = i;
            }
        }
        best
    }

    /// Cross-entropy loss and gradients (d_w, d_b, d_z) for one example.
    pub fn cross_entropy(
        &self,
        z: &Array1<f64>,
        target: usize,
    ) -> (f64, Array2<f64>, Array1<f64>, Array1<f64>) {
        let probs = self.probabilities(z);
        let loss = -(probs[target].max(1e-300)).ln();
        let mut d_logits = probs;
        d_logits[target] -= 1.0;
        let mut d_w = Array2::zeros(self.w.dim());
        for (k, mut row) in d_w.rows_mut().into_iter().enumerate() {
            row.assign(&(z * d_logits[k]));
        }
        let d_z = self.w.t().dot(&d_logits);
        (loss, d_w, d_logits, d_z)
    }
}

pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = logits.mapv(|v| (v - max).exp());
    let sum = out.sum();
    out /= sum;
    out
}

/// Full model bundle persisted between pipeline stages.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub encoder: Encoder,
    pub norm: ChannelStats,
    pub sort_head: Option<ScalarHead>,
    pub count_head: Option<ScalarHead>,
    pub density_head: Option<ClassHead>,
}

const ENCODER_FILE: &str = "encoder.json";
const SORT_HEAD_FILE: &str = "sort_head.json";
const COUNT_HEAD_FILE: &str = "count_head.json";
const DENSITY_HEAD_FILE: &str = "density_head.json";
const META_FILE: &str = "meta.json";

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: EncoderConfig,
    norm: ChannelStats,
}

fn write_optional<T: Serialize>(dir: &Path, name: &str, head: &Option<T>) -> Result<(), ModelError> {
    let path = dir.join(name);
    match head {
        Some(h) => fs::write(path, serde_json::to_vec(h)?)?,
        None => {
            if path.exists() {
                fs::remove_file(path)?;
            }
        }
    }
    Ok(())
}

fn read_optional<T: for<'de> Deserialize<'de>>(
    dir: &Path,
    name: &str,
) -> Result<Option<T>, ModelError> {
    let path = dir.join(name);
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_slice(&fs::read(path)?)?))
}

impl Checkpoint {
    pub fn new(cfg: &EncoderConfig) -> Result<Self, ModelError> {
        Ok(Self {
            encoder: Encoder::new(cfg)?,
            norm: ChannelStats::default(),
            sort_head: None,
            count_head: None,
            density_head: None,
        })
    }

    /// Preprocess an image with this checkpoint's normalization and encode it.
    pub fn features(&self, img: &RgbImage) -> Result<FeatureMap, ModelError> {
        Ok(self.encoder.forward_image(img, &self.norm)?.0)
    }

    /// Write the model into a directory (created if absent): one weight file
    /// per component plus a meta manifest of config and normalization stats.
    pub fn save(&self, dir: &Path) -> Result<(), ModelError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(ENCODER_FILE), serde_json::to_vec(&self.encoder)?)?;
        write_optional(dir, SORT_HEAD_FILE, &self.sort_head)?;
        write_optional(dir, COUNT_HEAD_FILE, &self.count_head)?;
        write_optional(dir, DENSITY_HEAD_FILE, &self.density_head)?;
        let meta = CheckpointMeta {
            config: self.encoder.cfg.clone(),
            norm: self.norm.clone(),
        };
        fs::write(dir.join(META_FILE), serde_json::to_vec_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, ModelError> {
        let enc_path = dir.join(ENCODER_FILE);
        if !enc_path.exists() {
            return Err(ModelError::MissingFile(enc_path.display().to_string()));
        }
        let encoder: Encoder = serde_json::from_slice(&fs::read(enc_path)?)?;
        encoder.cfg.validate()?;
        let meta_path = dir.join(META_FILE);
        if !meta_path.exists() {
            return Err(ModelError::MissingFile(meta_path.display().to_string()));
        }
        let meta: CheckpointMeta = serde_json::from_slice(&fs::read(meta_path)?)?;
        Ok(Self {
            encoder,
            norm: meta.norm,
            sort_head: read_optional(dir, SORT_HEAD_FILE)?,
            count_head: read_optional(dir, COUNT_HEAD_FILE)?,
            density_head: read_optional(dir, DENSITY_HEAD_FILE)?,
        })
    }
}

/// Hex digest over the encoder's serialized weights. Two encoders with the
/// same digest produce identical features.
pub fn encoder_checksum(encoder: &Encoder) -> String {
    let bytes = serde_json::to_vec(encoder).expect("encoder serializes");
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            input_size: 16,
            widths: vec![4, 6],
            seed: 5,
        }
    }

    fn random_input(size: usize, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((3, size, size), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn forward_shapes_follow_config() {
        let cfg = EncoderConfig::default();
        let enc = Encoder::new(&cfg).unwrap();
        let x = random_input(96, 1);
        let (f, _) = enc.forward_array(&x).unwrap();
        assert_eq!(f.values.dim(), (64, 6, 6));
        assert_eq!(f.channels(), 64);
        assert_eq!(f.grid(), (6, 6));
        assert_eq!(cfg.grid_side(), 6);
        assert_eq!(cfg.feature_dim(), 64);
    }

    #[test]
    fn bad_input_shape_is_rejected() {
        let enc = Encoder::new(&tiny_cfg()).unwrap();
        let x = random_input(8, 1);
        assert!(matches!(
            enc.forward_array(&x),
            Err(ModelError::BadShape { .. })
        ));
    }

    #[test]
    fn indivisible_input_size_is_rejected() {
        let cfg = EncoderConfig {
            input_size: 50,
            widths: vec![4, 6],
            seed: 0,
        };
        assert!(Encoder::new(&cfg).is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let a = Encoder::new(&tiny_cfg()).unwrap();
        let b = Encoder::new(&tiny_cfg()).unwrap();
        assert_eq!(encoder_checksum(&a), encoder_checksum(&b));
        let c = Encoder::new(&EncoderConfig {
            seed: 6,
            ..tiny_cfg()
        })
        .unwrap();
        assert_ne!(encoder_checksum(&a), encoder_checksum(&c));
    }

    #[test]
    fn global_pool_is_channel_mean() {
        let values = Array3::from_shape_fn((2, 2, 2), |(c, y, x)| (c * 100 + y * 10 + x) as f64);
        let pooled = global_pool(&FeatureMap { values });
        assert_eq!(pooled, array![5.5, 105.5]);
    }

    #[test]
    fn im2col_adjoint_matches_col2im() {
        // <im2col(x), g> == <x, col2im(g)> for random x, g.
        let x = random_input(8, 3);
        let p = im2col(&x);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = Array2::from_shape_fn(p.dim(), |_| rng.random::<f64>() - 0.5);
        let lhs = (&p * &g).sum();
        let back = col2im(&g, 3, 8, 8);
        let rhs = (&x * &back).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn encoder_gradients_match_finite_difference() {
        let cfg = tiny_cfg();
        let mut enc = Encoder::new(&cfg).unwrap();
        let x = random_input(16, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (f0, cache) = enc.forward_array(&x).unwrap();
        let probe = Array3::from_shape_fn(f0.values.dim(), |_| rng.random::<f64>() - 0.5);
        let loss = |f: &FeatureMap| (&f.values * &probe).sum();
        let analytic = enc.backward(&cache, &probe);

        let eps = 1e-6;
        for stage in 0..enc.stages.len() {
            // Spot-check a handful of weights and biases per stage.
            let (rows, cols) = enc.stages[stage].weight.dim();
            for k in 0..6 {
                let r = (k * 7) % rows;
                let c = (k * 3) % cols;
                let orig = enc.stages[stage].weight[(r, c)];
                enc.stages[stage].weight[(r, c)] = orig + eps;
                let (fp, _) = enc.forward_array(&x).unwrap();
                enc.stages[stage].weight[(r, c)] = orig - eps;
                let (fm, _) = enc.forward_array(&x).unwrap();
                enc.stages[stage].weight[(r, c)] = orig;
                let numeric = (loss(&fp) - loss(&fm)) / (2.0 * eps);
                let got = analytic.d_weight[stage][(r, c)];
                assert!(
                    (numeric - got).abs() < 1e-5 * (1.0 + numeric.abs()),
                    "stage {stage} w({r},{c}): {numeric} vs {got}"
                );
            }
            for bi in 0..enc.stages[stage].bias.len().min(4) {
                let orig = enc.stages[stage].bias[bi];
                enc.stages[stage].bias[bi] = orig + eps;
                let (fp, _) = enc.forward_array(&x).unwrap();
                enc.stages[stage].bias[bi] = orig - eps;
                let (fm, _) = enc.forward_array(&x).unwrap();
                enc.stages[stage].bias[bi] = orig;
                let numeric = (loss(&fp) - loss(&fm)) / (2.0 * eps);
                let got = analytic.d_bias[stage][bi];
                assert!(
                    (numeric - got).abs() < 1e-5 * (1.0 + numeric.abs()),
                    "stage {stage} b({bi}): {numeric} vs {got}"
                );
            }
        }
    }

    #[test]
    fn scalar_head_gradients_match_finite_difference() {
        let head = ScalarHead::new(5, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let z = Array1::from_shape_fn(5, |_| rng.random::<f64>() - 0.5);
        let (dw, db, dz) = head.backward(&z, 1.0);
        let eps = 1e-7;
        for i in 0..5 {
            let mut h2 = head.clone();
            h2.w[i] += eps;
            let numeric = (h2.forward(&z) - head.forward(&z)) / eps;
            assert!((numeric - dw[i]).abs() < 1e-5);
            let mut zp = z.clone();
            zp[i] += eps;
            let numeric_z = (head.forward(&zp) - head.forward(&z)) / eps;
            assert!((numeric_z - dz[i]).abs() < 1e-5);
        }
        assert!((db - 1.0).abs() < 1e-12);
    }

    #[test]
    fn class_head_cross_entropy_gradients() {
        let head = ClassHead::new(3, 4, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = Array1::from_shape_fn(4, |_| rng.random::<f64>() - 0.5);
        let (loss, d_w, d_b, d_z) = head.cross_entropy(&z, 1);
        assert!(loss > 0.0);
        let eps = 1e-6;
        let f = |h: &ClassHead, z: &Array1<f64>| -> f64 {
            let p = h.probabilities(z);
            -p[1].ln()
        };
        for k in 0..3 {
            for i in 0..4 {
                let mut h2 = head.clone();
                h2.w[(k, i)] += eps;
                let numeric = (f(&h2, &z) - loss) / eps;
                assert!(
                    (numeric - d_w[(k, i)]).abs() < 1e-4,
                    "w({k},{i}): {numeric} vs {}",
                    d_w[(k, i)]
                );
            }
            let mut h2 = head.clone();
            h2.b[k] += eps;
            let numeric = (f(&h2, &z) - loss) / eps;
            assert!((numeric - d_b[k]).abs() < 1e-4);
        }
        for i in 0..4 {
            let mut zp = z.clone();
            zp[i] += eps;
            let numeric = (f(&head, &zp) - loss) / eps;
            assert!((numeric - d_z[i]).abs() < 1e-4);
        }
    }

    #[test]
    fn softmax_sums_to_one_and_orders() {
        let p = softmax(&array![1.0, 2.0, 3.0]);
        assert!((p.sum() - 1.0).abs() < 1e-12);
        assert!(p[2] > p[1] && p[1] > p[0]);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let mut ckpt = Checkpoint::new(&cfg).unwrap();
        ckpt.norm = ChannelStats {
            mean: [0.4, 0.5, 0.6],
            std: [0.2, 0.25, 0.3],
        };
        ckpt.sort_head = Some(ScalarHead::new(cfg.feature_dim(), 1));
        ckpt.count_head = Some(ScalarHead::new(cfg.feature_dim(), 2));
        ckpt.density_head = Some(ClassHead::new(3, cfg.feature_dim(), 3));
        ckpt.save(dir.path()).unwrap();
        let loaded = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(ckpt.norm, loaded.norm);
        assert!(loaded.density_head.is_some());
        assert_eq!(
            encoder_checksum(&ckpt.encoder),
            encoder_checksum(&loaded.encoder)
        );
        let x = random_input(16, 99);
        let (fa, _) = ckpt.encoder.forward_array(&x).unwrap();
        let (fb, _) = loaded.encoder.forward_array(&x).unwrap();
        assert_eq!(fa.values, fb.values);
        let za = global_pool(&fa);
        assert_eq!(
            ckpt.sort_head.as_ref().unwrap().forward(&za),
            loaded.sort_head.as_ref().unwrap().forward(&za)
        );
    }

    #[test]
    fn checksum_detects_weight_changes() {
        let mut enc = Encoder::new(&tiny_cfg()).unwrap();
        let before = encoder_checksum(&enc);
        enc.stages[0].weight[(0, 0)] += 1e-12;
        assert_ne!(before, encoder_checksum(&enc));
    }

    #[test]
    fn missing_checkpoint_reports_file() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            Checkpoint::load(&dir.path().join("nope")),
            Err(ModelError::MissingFile(_))
        ));
    }

    #[test]
    fn preprocess_centers_pixel_range() {
        let mut img = RgbImage::new(4, 4);
        for p in img.pixels_mut() {
            *p = image::Rgb([255, 0, 127]);
        }
        let stats = ChannelStats::default();
        let x = preprocess(&img, 4, &stats);
        assert!((x[(0, 0, 0)] - 2.0).abs() < 1e-12);
        assert!((x[(1, 0, 0)] + 2.0).abs() < 1e-12);
        assert!(x[(2, 0, 0)].abs() < 0.01);
        // Resizing path produces the right shape.
        let y = preprocess(&img, 8, &stats);
        assert_eq!(y.dim(), (3, 8, 8));
    }

    #[test]
    fn channel_stats_match_hand_computation() {
        let mut img = RgbImage::new(2, 1);
        img.put_pixel(0, 0, image::Rgb([0, 100, 200]));
        img.put_pixel(1, 0, image::Rgb([255, 100, 0]));
        let stats = ChannelStats::from_images([&img]);
        assert!((stats.mean[0] - 0.5).abs() < 1e-12);
        assert!((stats.mean[1] - 100.0 / 255.0).abs() < 1e-12);
        assert!((stats.std[0] - 0.5).abs() < 1e-12);
        // Constant channel bottoms out at the floor, never zero.
        assert!(stats.std[1] >= 1e-3);
    }
}
