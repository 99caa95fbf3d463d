//! Generation-service client and dataset builders.
//!
//! A [`GenBackend`] turns a [`GenTask`] into an image. The remote backend
//! speaks a small HTTP protocol to an image generation service; the oracle
//! backend delegates to the procedural renderer and therefore knows every
//! true count. Builders on top assemble the three synthetic datasets
//! (sorting triplets, prompt counts, density classes) and account for every
//! attempted row: nothing is dropped silently.

use std::io::Cursor;
use std::path::Path;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use image::{GrayImage, ImageFormat, RgbImage};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::{
    CountRow, DataLayout, DensityRow, ManifestError, ManifestWriter, SortingRow,
};
use crate::scene_lab::{
    add_objects, remove_objects, render_scene_with, EditSize, ImageSample, LabConfig, ObjectStyle,
    SampleSource, SceneError, SceneSpec,
};

/// Scene names bundled for zero-object prompts.
const SCENE_NAMES: &str = include_str!("../resources/scene_names.txt");

pub fn scene_names() -> Vec<&'static str> {
    SCENE_NAMES.lines().filter(|l| !l.trim().is_empty()).collect()
}

#[derive(Debug, Error)]
pub enum GenError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("generation rejected: {0}")]
    GenerationRejected(String),
    #[error("band fraction {0} outside (0, 0.5)")]
    BadFraction(f64),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("image decode: {0}")]
    Image(String),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Binary mask that is 1 on a perimeter band of thickness
/// `floor(side * band_fraction)` along each edge and 0 in the interior.
pub fn perimeter_mask(
    height: usize,
    width: usize,
    band_fraction: f64,
) -> Result<Array2<bool>, GenError> {
    if !(band_fraction > 0.0 && band_fraction < 0.5) {
        return Err(GenError::BadFraction(band_fraction));
    }
    let t_rows = (height as f64 * band_fraction).floor() as usize;
    let t_cols = (width as f64 * band_fraction).floor() as usize;
    let mut mask = Array2::from_elem((height, width), true);
    for y in t_rows..height.saturating_sub(t_rows) {
        for x in t_cols..width.saturating_sub(t_cols) {
            mask[(y, x)] = false;
        }
    }
    Ok(mask)
}

/// One generation request, mirroring the wire protocol.
#[derive(Debug, Clone)]
pub struct GenRequest {
    pub prompt: String,
    pub negative_prompt: String,
    pub init_image: Option<ImageSample>,
    pub mask: Option<Array2<bool>>,
    pub seed: u64,
    /// Image-to-image strength in (0, 1].
    pub strength: f64,
}

impl GenRequest {
    pub fn text(prompt: impl Into<String>, negative: impl Into<String>, seed: u64) -> Self {
        Self {
            prompt: prompt.into(),
            negative_prompt: negative.into(),
            init_image: None,
            mask: None,
            seed,
            strength: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), GenError> {
        if !(self.strength > 0.0 && self.strength <= 1.0) {
            return Err(GenError::BadRequest(format!(
                "strength {} outside (0, 1]",
                self.strength
            )));
        }
        if let Some(mask) = &self.mask {
            let init = self.init_image.as_ref().ok_or_else(|| {
                GenError::BadRequest("mask present without init_image".into())
            })?;
            let dims = (init.image.height() as usize, init.image.width() as usize);
            if mask.dim() != dims {
                return Err(GenError::BadRequest(format!(
                    "mask dims {:?} do not match init image {:?}",
                    mask.dim(),
                    dims
                )));
            }
        }
        Ok(())
    }
}

/// What the requested image is supposed to contain. The remote backend works
/// purely from the request text; the oracle backend honors the intent
/// exactly.
#[derive(Debug, Clone)]
pub enum GenIntent {
    /// A fresh scene with the given object count.
    Scene { count: u32 },
    /// `init_image` with `k` objects removed.
    Fewer { k: u32 },
    /// `init_image` with `k` objects added inside the perimeter band.
    More { k: u32, band_fraction: f64 },
}

#[derive(Debug, Clone)]
pub struct GenTask {
    pub request: GenRequest,
    pub intent: GenIntent,
}

pub trait GenBackend: Send + Sync {
    fn info(&self) -> String;
    fn generate(&self, task: &GenTask) -> Result<ImageSample, GenError>;
}

/// Deterministic backend over the procedural scene renderer.
#[derive(Debug, Clone)]
pub struct OracleBackend {
    pub lab: LabConfig,
    pub canvas: (u32, u32),
    pub style: ObjectStyle,
    pub size_gradient: f64,
}

impl Default for OracleBackend {
    fn default() -> Self {
        Self {
            lab: LabConfig::default(),
            canvas: (192, 192),
            style: ObjectStyle::Blob,
            size_gradient: 0.5,
        }
    }
}

impl OracleBackend {
    pub fn with_canvas(canvas: (u32, u32)) -> Self {
        Self {
            canvas,
            ..Self::default()
        }
    }
}

impl GenBackend for OracleBackend {
    fn info(&self) -> String {
        "oracle-renderer".into()
    }

    fn generate(&self, task: &GenTask) -> Result<ImageSample, GenError> {
        task.request.validate()?;
        let mut sample = match task.intent {
            GenIntent::Scene { count } => {
                let spec = SceneSpec {
                    seed: task.request.seed,
                    count,
                    canvas: self.canvas,
                    background_id: (task.request.seed % 1024) as u32,
                    object_style: self.style,
                    size_gradient: self.size_gradient,
                };
                render_scene_with(&spec, &self.lab)?
            }
            GenIntent::Fewer { k } => {
                let base = task.request.init_image.as_ref().ok_or_else(|| {
                    GenError::BadRequest("fewer-intent task without init_image".into())
                })?;
                remove_objects(base, k, task.request.seed)?
            }
            GenIntent::More { k, band_fraction } => {
                let base = task.request.init_image.as_ref().ok_or_else(|| {
                    GenError::BadRequest("more-intent task without init_image".into())
                })?;
                add_objects(base, k, band_fraction, task.request.seed)?
            }
        };
        stamp_meta(&mut sample, &task.request, &self.info());
        Ok(sample)
    }
}

fn stamp_meta(sample: &mut ImageSample, request: &GenRequest, backend_info: &str) {
    sample
        .meta
        .insert("prompt".into(), request.prompt.clone());
    if !request.negative_prompt.is_empty() {
        sample
            .meta
            .insert("negative_prompt".into(), request.negative_prompt.clone());
    }
    sample.meta.insert("seed".into(), request.seed.to_string());
    sample
        .meta
        .insert("backend_info".into(), backend_info.to_string());
}

#[derive(Serialize)]
struct WireRequest {
    prompt: String,
    negative_prompt: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    init_image_b64: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mask_b64: Option<String>,
    seed: u64,
    strength: f64,
}

#[derive(Deserialize)]
struct WireResponse {
    image_b64: String,
    backend_info: String,
}

fn png_b64(img: &RgbImage) -> Result<String, GenError> {
    let mut buf = Vec::new();
    image::DynamicImage::ImageRgb8(img.clone())
        .write_to(&mut Cursor::new(&mut buf), ImageFormat::Png)
        .map_err(|e| GenError::Image(e.to_string()))?;
    Ok(B64.encode(buf))
}

fn mask_b64(mask: &Array2<bool>) -> Result<String, GenError> {
    let (h, w) = mask.dim();
    let mut img = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(x as u32, y as u32, image::Luma([if mask[(y, x)] { 255 } else { 0 }]));
        }
    }
    let mut buf = Vec::new();
    image::DynamicImage::ImageLuma8(img)
        .write_to(&mut Cursor::new(&mut buf), ImageFormat::Png)
        .map_err(|e| GenError::Image(e.to_string()))?;
    Ok(B64.encode(buf))
}

/// HTTP client for a remote generation service.
pub struct RemoteBackend {
    endpoint: String,
    client: reqwest::blocking::Client,
    attempts: u32,
    backoff: Duration,
}

impl RemoteBackend {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self::with_retry(endpoint, 3, Duration::from_millis(500))
    }

    pub fn with_retry(endpoint: impl Into<String>, attempts: u32, backoff: Duration) -> Self {
        Self {
            endpoint: endpoint.into(),
            client: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(120))
                .build()
                .expect("client builds"),
            attempts: attempts.max(1),
            backoff,
        }
    }

    fn encode(&self, request: &GenRequest) -> Result<WireRequest, GenError> {
        Ok(WireRequest {
            prompt: request.prompt.clone(),
            negative_prompt: request.negative_prompt.clone(),
            init_image_b64: request
                .init_image
                .as_ref()
                .map(|s| png_b64(&s.image))
                .transpose()?,
            mask_b64: request.mask.as_ref().map(mask_b64).transpose()?,
            seed: request.seed,
            strength: request.strength,
        })
    }
}

impl GenBackend for RemoteBackend {
    fn info(&self) -> String {
        format!("remote:{}", self.endpoint)
    }

    fn generate(&self, task: &GenTask) -> Result<ImageSample, GenError> {
        task.request.validate()?;
        let wire = self.encode(&task.request)?;
        let mut last_err = String::new();
        for attempt in 0..self.attempts {
            if attempt > 0 {
                std::thread::sleep(self.backoff * 2u32.pow(attempt - 1));
            }
            let sent = self.client.post(&self.endpoint).json(&wire).send();
            let resp = match sent {
                Ok(r) => r,
                Err(e) => {
                    last_err = e.to_string();
                    continue;
                }
            };
            let status = resp.status();
            if status.is_client_error() {
                let body = resp.text().unwrap_or_default();
                return Err(GenError::GenerationRejected(format!("{status}: {body}")));
            }
            if !status.is_success() {
                last_err = format!("http {status}");
                continue;
            }
            let parsed: WireResponse = match resp.json() {
                Ok(p) => p,
                Err(e) => {
                    last_err = format!("bad response body: {e}");
                    continue;
                }
            };
            let bytes = B64
                .decode(parsed.image_b64.as_bytes())
                .map_err(|e| GenError::Image(e.to_string()))?;
            let image = image::load_from_memory(&bytes)
                .map_err(|e| GenError::Image(e.to_string()))?
                .to_rgb8();
            let mut sample = ImageSample {
                image,
                true_count: None,
                source: SampleSource::Generated,
                path: None,
                meta: Default::default(),
            };
            stamp_meta(&mut sample, &task.request, &parsed.backend_info);
            return Ok(sample);
        }
        Err(GenError::BackendUnavailable(format!(
            "{} after {} attempts: {last_err}",
            self.endpoint, self.attempts
        )))
    }
}

/// One prompt-count category of the count dataset schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CountPromptCategory {
    pub prompt_count: u32,
    pub prompt_template: String,
    pub n_images: u32,
}

/// Near-geometric default schedule; denser at low counts where prompt
/// labels are most reliable.
pub const DEFAULT_COUNT_SCHEDULE: [u32; 17] = [
    1, 2, 3, 5, 8, 12, 18, 27, 40, 60, 90, 135, 200, 300, 450, 675, 1000,
];

pub fn default_count_schedule(n_images: u32, template: &str) -> Vec<CountPromptCategory> {
    DEFAULT_COUNT_SCHEDULE
        .iter()
        .map(|&c| CountPromptCategory {
            prompt_count: c,
            prompt_template: template.to_string(),
            n_images,
        })
        .collect()
}

/// Density class labels, in manifest encoding order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DensityLabel {
    NoCrowd,
    Sparse,
    Dense,
}

impl DensityLabel {
    pub const ALL: [DensityLabel; 3] = [DensityLabel::NoCrowd, DensityLabel::Sparse, DensityLabel::Dense];

    pub fn index(self) -> u8 {
        match self {
            DensityLabel::NoCrowd => 0,
            DensityLabel::Sparse => 1,
            DensityLabel::Dense => 2,
        }
    }

    pub fn from_index(idx: u8) -> Option<Self> {
        match idx {
            0 => Some(DensityLabel::NoCrowd),
            1 => Some(DensityLabel::Sparse),
            2 => Some(DensityLabel::Dense),
            _ => None,
        }
    }
}

/// Density class with its prompt template.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DensityCategory {
    pub label: DensityLabel,
    pub prompt_template: String,
}

/// Oracle count thresholds per density class: 0 / 1-25 / 60+, with the gap
/// assigned sparse so the classes keep a margin.
pub const SPARSE_MAX: u32 = 25;
pub const DENSE_MIN: u32 = 60;

pub fn oracle_density_label(count: u32) -> DensityLabel {
    if count == 0 {
        DensityLabel::NoCrowd
    } else if count < DENSE_MIN {
        DensityLabel::Sparse
    } else {
        DensityLabel::Dense
    }
}

/// Client-side knobs for edits and prompts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenConfig {
    pub band_fraction: f64,
    pub strength: f64,
    pub remove: EditSize,
    pub add: EditSize,
    pub count_template: String,
    pub empty_template: String,
    pub empty_negative: String,
    pub more_prompt: String,
    pub density_templates: [String; 3],
    /// Count range sampled for oracle density classes (sparse, dense).
    pub sparse_range: (u32, u32),
    pub dense_range: (u32, u32),
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            band_fraction: 1.0 / 3.0,
            strength: 0.8,
            remove: EditSize::Fraction(0.2, 0.45),
            add: EditSize::Fraction(0.2, 0.45),
            count_template: "a photo of {count} people".into(),
            empty_template: "an empty place, {scene}".into(),
            empty_negative: "pedestrians, humans, people, crowds".into(),
            more_prompt: "a photo of people, a crowd".into(),
            density_templates: [
                "a photo of an empty place with no crowd".into(),
                "a photo of a sparse crowd of people".into(),
                "a photo of a dense crowd of people".into(),
            ],
            sparse_range: (1, SPARSE_MAX),
            dense_range: (DENSE_MIN, 140),
        }
    }
}

/// Accounting for a dataset build: every attempted row is either written or
/// logged as failed.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BuildReport {
    pub rows_attempted: usize,
    pub rows_written: usize,
    pub rows_failed: usize,
    pub failures: Vec<String>,
}

impl BuildReport {
    pub fn consistent(&self) -> bool {
        self.rows_attempted == self.rows_written + self.rows_failed
            && self.rows_failed == self.failures.len()
    }

    fn wrote(&mut self) {
        self.rows_attempted += 1;
        self.rows_written += 1;
    }

    fn failed(&mut self, what: impl Into<String>) {
        self.rows_attempted += 1;
        self.rows_failed += 1;
        self.failures.push(what.into());
    }
}

/// Backend plus configuration; the dataset-facing surface.
pub struct GenClient {
    pub backend: Box<dyn GenBackend>,
    pub cfg: GenConfig,
}

impl GenClient {
    pub fn oracle(backend: OracleBackend) -> Self {
        Self {
            backend: Box::new(backend),
            cfg: GenConfig::default(),
        }
    }

    pub fn new(backend: Box<dyn GenBackend>, cfg: GenConfig) -> Self {
        Self { backend, cfg }
    }

    /// A reference image whose prompt states `count` objects.
    pub fn reference(&self, count: u32, seed: u64) -> Result<ImageSample, GenError> {
        let prompt = self
            .cfg
            .count_template
            .replace("{count}", &count.to_string());
        let task = GenTask {
            request: GenRequest::text(prompt, "", seed),
            intent: GenIntent::Scene { count },
        };
        self.backend.generate(&task)
    }

    /// A zero-object image prompted by scene name plus an excluding negative
    /// prompt.
    pub fn zero_reference(&self, scene_name: &str, seed: u64) -> Result<ImageSample, GenError> {
        let prompt = self.cfg.empty_template.replace("{scene}", scene_name);
        let task = GenTask {
            request: GenRequest::text(prompt, self.cfg.empty_negative.clone(), seed),
            intent: GenIntent::Scene { count: 0 },
        };
        self.backend.generate(&task)
    }

    /// A variant of `reference` intended to contain fewer objects.
    pub fn generate_fewer(
        &self,
        reference: &ImageSample,
        seed: u64,
    ) -> Result<ImageSample, GenError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base_count = reference.true_count.unwrap_or(16);
        let k = self.cfg.remove.draw_count(base_count, &mut rng).min(base_count);
        let request = GenRequest {
            prompt: "an empty place".into(),
            negative_prompt: self.cfg.empty_negative.clone(),
            init_image: Some(reference.clone()),
            mask: None,
            seed: rng.random(),
            strength: self.cfg.strength,
        };
        self.backend.generate(&GenTask {
            request,
            intent: GenIntent::Fewer { k },
        })
    }

    /// A variant of `reference` intended to contain more objects, painted
    /// into the perimeter band.
    pub fn generate_more(
        &self,
        reference: &ImageSample,
        seed: u64,
    ) -> Result<ImageSample, GenError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base_count = reference.true_count.unwrap_or(16);
        let k = self.cfg.add.draw_count(base_count, &mut rng);
        let (h, w) = (
            reference.image.height() as usize,
            reference.image.width() as usize,
        );
        let mask = perimeter_mask(h, w, self.cfg.band_fraction)?;
        let request = GenRequest {
            prompt: self.cfg.more_prompt.clone(),
            negative_prompt: String::new(),
            init_image: Some(reference.clone()),
            mask: Some(mask),
            seed: rng.random(),
            strength: self.cfg.strength,
        };
        let mut sample = self.backend.generate(&GenTask {
            request,
            intent: GenIntent::More {
                k,
                band_fraction: self.cfg.band_fraction,
            },
        })?;
        sample.meta.insert(
            "band_fraction".into(),
            format!("{}", self.cfg.band_fraction),
        );
        Ok(sample)
    }

    /// Build the sorting dataset: every reference fans out into `n_minus`
    /// decreased and `n_plus` increased variants, crossed into
    /// `n_minus * n_plus` ranked triplets.
    pub fn build_sorting_dataset(
        &self,
        refs: &[ImageSample],
        n_minus: u32,
        n_plus: u32,
        layout: &DataLayout,
        seed: u64,
    ) -> Result<BuildReport, GenError> {
        assert!(!refs.is_empty(), "refs must be non-empty");
        let images = layout.images_dir("sorting");
        std::fs::create_dir_all(&images)?;
        let mut writer = ManifestWriter::create(&layout.sorting_manifest())?;
        let mut report = BuildReport::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut triplet_id = 0u64;
        for (ri, reference) in refs.iter().enumerate() {
            let ref_path = images.join(format!("ref_{ri:04}.png"));
            if let Err(e) = reference.image.save(&ref_path) {
                for _ in 0..(n_minus * n_plus) {
                    report.failed(format!("ref {ri}: save failed: {e}"));
                }
                continue;
            }
            let mut fewer = Vec::new();
            for v in 0..n_minus {
                match self.generate_fewer(reference, rng.random()) {
                    Ok(s) => {
                        let p = images.join(format!("ref_{ri:04}_minus_{v}.png"));
                        match s.image.save(&p) {
                            Ok(()) => fewer.push((p, s)),
                            Err(e) => {
                                for _ in 0..n_plus {
                                    report.failed(format!("ref {ri} minus {v}: save failed: {e}"));
                                }
                            }
                        }
                    }
                    Err(e) => {
                        for _ in 0..n_plus {
                            report.failed(format!("ref {ri} minus {v}: {e}"));
                        }
                    }
                }
            }
            let mut more = Vec::new();
            for v in 0..n_plus {
                match self.generate_more(reference, rng.random()) {
                    Ok(s) => {
                        let p = images.join(format!("ref_{ri:04}_plus_{v}.png"));
                        match s.image.save(&p) {
                            Ok(()) => more.push((p, s)),
                            Err(e) => {
                                for _ in 0..fewer.len() {
                                    report.failed(format!("ref {ri} plus {v}: save failed: {e}"));
                                }
                            }
                        }
                    }
                    Err(e) => {
                        for _ in 0..fewer.len() {
                            report.failed(format!("ref {ri} plus {v}: {e}"));
                        }
                    }
                }
            }
            for (fp, fs) in &fewer {
                for (mp, ms) in &more {
                    let true_counts = match (fs.true_count, reference.true_count, ms.true_count) {
                        (Some(a), Some(b), Some(c)) => Some([a, b, c]),
                        _ => None,
                    };
                    let row = SortingRow {
                        triplet_id,
                        paths: [
                            layout.relative(fp),
                            layout.relative(&ref_path),
                            layout.relative(mp),
                        ],
                        ranks: [0, 1, 2],
                        true_counts,
                    };
                    triplet_id += 1;
                    match writer.append(&row) {
                        Ok(()) => report.wrote(),
                        Err(e) => report.failed(format!("triplet {}: {e}", triplet_id - 1)),
                    }
                }
            }
        }
        Ok(report)
    }

    /// Build the prompt-count dataset: `n_images` per schedule category plus
    /// `zero_count` zero-object rows prompted by scene names.
    pub fn build_count_dataset(
        &self,
        schedule: &[CountPromptCategory],
        zero_count: usize,
        layout: &DataLayout,
        seed: u64,
    ) -> Result<BuildReport, GenError> {
        let images = layout.images_dir("count");
        std::fs::create_dir_all(&images)?;
        let mut writer = ManifestWriter::create(&layout.count_manifest())?;
        let mut report = BuildReport::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for cat in schedule {
            for i in 0..cat.n_images {
                let prompt = cat
                    .prompt_template
                    .replace("{count}", &cat.prompt_count.to_string());
                let task = GenTask {
                    request: GenRequest::text(prompt, "", rng.random()),
                    intent: GenIntent::Scene {
                        count: cat.prompt_count,
                    },
                };
                let name = format!("count_{:04}_{i:04}.png", cat.prompt_count);
                match self.finish_count_row(task, &images.join(name), cat.prompt_count, layout) {
                    Ok(row) => match writer.append(&row) {
                        Ok(()) => report.wrote(),
                        Err(e) => report.failed(format!("count {} #{i}: {e}", cat.prompt_count)),
                    },
                    Err(e) => report.failed(format!("count {} #{i}: {e}", cat.prompt_count)),
                }
            }
        }
        let names = scene_names();
        for z in 0..zero_count {
            let scene = names[z % names.len()];
            let prompt = self.cfg.empty_template.replace("{scene}", scene);
            let task = GenTask {
                request: GenRequest::text(prompt, self.cfg.empty_negative.clone(), rng.random()),
                intent: GenIntent::Scene { count: 0 },
            };
            let name = format!("zero_{z:04}.png");
            match self.finish_count_row(task, &images.join(name), 0, layout) {
                Ok(row) => match writer.append(&row) {
                    Ok(()) => report.wrote(),
                    Err(e) => report.failed(format!("zero #{z}: {e}")),
                },
                Err(e) => report.failed(format!("zero #{z}: {e}")),
            }
        }
        Ok(report)
    }

    fn finish_count_row(
        &self,
        task: GenTask,
        path: &Path,
        prompt_count: u32,
        layout: &DataLayout,
    ) -> Result<CountRow, GenError> {
        let sample = self.backend.generate(&task)?;
        sample
            .image
            .save(path)
            .map_err(|e| GenError::Image(e.to_string()))?;
        Ok(CountRow {
            path: layout.relative(path),
            prompt_count,
            true_count: sample.true_count,
            kept: true,
        })
    }

    /// Build the density dataset: `per_class` rows per class. No-crowd rows
    /// reuse the zero-object pool when one is supplied; any shortfall is
    /// generated fresh.
    pub fn build_density_dataset(
        &self,
        per_class: usize,
        zero_pool: &[CountRow],
        layout: &DataLayout,
        seed: u64,
    ) -> Result<BuildReport, GenError> {
        assert!(per_class >= 1, "per_class must be >= 1");
        let images = layout.images_dir("density");
        std::fs::create_dir_all(&images)?;
        let mut writer = ManifestWriter::create(&layout.density_manifest())?;
        let mut report = BuildReport::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let mut no_crowd = 0usize;
        for row in zero_pool.iter().filter(|r| r.prompt_count == 0) {
            if no_crowd == per_class {
                break;
            }
            let out = DensityRow {
                path: row.path.clone(),
                density_label: DensityLabel::NoCrowd.index(),
                true_count: row.true_count,
            };
            match writer.append(&out) {
                Ok(()) => report.wrote(),
                Err(e) => report.failed(format!("no_crowd reuse {}: {e}", row.path)),
            }
            no_crowd += 1;
        }
        let names = scene_names();
        for i in no_crowd..per_class {
            let scene = names[i % names.len()];
            let prompt = self.cfg.empty_template.replace("{scene}", scene);
            let task = GenTask {
                request: GenRequest::text(prompt, self.cfg.empty_negative.clone(), rng.random()),
                intent: GenIntent::Scene { count: 0 },
            };
            let path = images.join(format!("no_crowd_{i:04}.png"));
            match self.finish_density_row(task, &path, DensityLabel::NoCrowd, layout) {
                Ok(row) => match writer.append(&row) {
                    Ok(()) => report.wrote(),
                    Err(e) => report.failed(format!("no_crowd #{i}: {e}")),
                },
                Err(e) => report.failed(format!("no_crowd #{i}: {e}")),
            }
        }

        for label in [DensityLabel::Sparse, DensityLabel::Dense] {
            let range = match label {
                DensityLabel::Sparse => self.cfg.sparse_range,
                _ => self.cfg.dense_range,
            };
            let template = &self.cfg.density_templates[label.index() as usize];
            for i in 0..per_class {
                let count = rng.random_range(range.0..=range.1);
                let task = GenTask {
                    request: GenRequest::text(template.clone(), "", rng.random()),
                    intent: GenIntent::Scene { count },
                };
                let path = images.join(format!("{label:?}_{i:04}.png").to_lowercase());
                match self.finish_density_row(task, &path, label, layout) {
                    Ok(row) => match writer.append(&row) {
                        Ok(()) => report.wrote(),
                        Err(e) => report.failed(format!("{label:?} #{i}: {e}")),
                    },
                    Err(e) => report.failed(format!("{label:?} #{i}: {e}")),
                }
            }
        }
        Ok(report)
    }

    /// Build a labeled evaluation set: one scene per requested count, rows
    /// carrying ground truth. Requires a backend that reports true counts
    /// (the oracle); rows without one are dropped as failures.
    pub fn build_test_dataset(
        &self,
        counts: &[u32],
        layout: &DataLayout,
        seed: u64,
    ) -> Result<BuildReport, GenError> {
        assert!(!counts.is_empty(), "counts must be non-empty");
        let images = layout.images_dir("test");
        std::fs::create_dir_all(&images)?;
        let mut writer = ManifestWriter::create(&layout.test_manifest())?;
        let mut report = BuildReport::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (i, &count) in counts.iter().enumerate() {
            let path = images.join(format!("test_{i:04}.png"));
            match self.finish_count_row(
                GenTask {
                    request: GenRequest::text(
                        self.cfg
                            .count_template
                            .replace("{count}", &count.to_string()),
                        "",
                        rng.random(),
                    ),
                    intent: GenIntent::Scene { count },
                },
                &path,
                count,
                layout,
            ) {
                Ok(row) if row.true_count.is_some() => match writer.append(&row) {
                    Ok(()) => report.wrote(),
                    Err(e) => report.failed(format!("test #{i}: {e}")),
                },
                Ok(_) => report.failed(format!("test #{i}: backend reports no true count")),
                Err(e) => report.failed(format!("test #{i}: {e}")),
            }
        }
        Ok(report)
    }

    fn finish_density_row(
        &self,
        task: GenTask,
        path: &Path,
        label: DensityLabel,
        layout: &DataLayout,
    ) -> Result<DensityRow, GenError> {
        let sample = self.backend.generate(&task)?;
        sample
            .image
            .save(path)
            .map_err(|e| GenError::Image(e.to_string()))?;
        Ok(DensityRow {
            path: layout.relative(path),
            density_label: label.index(),
            true_count: sample.true_count,
        })
    }
}

/// Corrupt a fraction of nonzero count rows by swapping their prompt count
/// to a far category (at least a third of the schedule away). Returns the
/// corrupted row indices; `true_count` is left intact so tests can audit.
pub fn inject_label_noise(
    rows: &mut [CountRow],
    fraction: f64,
    seed: u64,
) -> Vec<usize> {
    assert!((0.0..=1.0).contains(&fraction), "fraction outside [0,1]");
    let mut cats: Vec<u32> = rows
        .iter()
        .filter(|r| r.prompt_count > 0)
        .map(|r| r.prompt_count)
        .collect();
    cats.sort_unstable();
    cats.dedup();
    if cats.len() < 2 {
        return Vec::new();
    }
    let eligible: Vec<usize> = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.prompt_count > 0)
        .map(|(i, _)| i)
        .collect();
    let n_corrupt = (eligible.len() as f64 * fraction).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = rand::seq::index::sample(&mut rng, eligible.len(), n_corrupt);
    let min_gap = (cats.len() / 3).max(2).min(cats.len() - 1);
    let mut corrupted = Vec::with_capacity(n_corrupt);
    for pick in chosen.iter() {
        let idx = eligible[pick];
        let cur = rows[idx].prompt_count;
        let cur_pos = cats.binary_search(&cur).expect("category present");
        let far: Vec<u32> = cats
            .iter()
            .enumerate()
            .filter(|&(p, _)| p.abs_diff(cur_pos) >= min_gap)
            .map(|(_, &c)| c)
            .collect();
        let target = far[rng.random_range(0..far.len())];
        rows[idx].prompt_count = target;
        corrupted.push(idx);
    }
    corrupted.sort_unstable();
    corrupted
}
