//! Deterministic procedural scene renderer.
//!
//! Draws a known number of textured objects on a procedural background and
//! supports exact add/remove edits, so every derived image carries a ground
//! truth count by construction. Scenes serialize into sample metadata, which
//! lets later operations re-open a rendered sample and edit its object set
//! without any global state.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use image::{Rgb, RgbImage};
use ndarray::Array2;
use rand::seq::index::sample as index_sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const META_SCENE: &str = "scene";
pub const META_WIDTH: &str = "width";
pub const META_HEIGHT: &str = "height";

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("canvas too small: placed {placed} of {requested} objects within the overlap budget")]
    CanvasTooSmall { requested: u32, placed: u32 },
    #[error("too few objects: asked to remove {requested}, only {available} present")]
    TooFewObjects { requested: u32, available: u32 },
    #[error("perimeter band full: placed {placed} of {requested} objects")]
    BandFull { requested: u32, placed: u32 },
    #[error("operation requires a rendered sample")]
    NotRendered,
    #[error("rendered sample is missing its scene metadata")]
    MissingScene,
    #[error("scene metadata did not parse: {0}")]
    BadSceneMeta(String),
}

/// Visual family for rendered objects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum ObjectStyle {
    /// Filled textured ellipse.
    #[default]
    Blob,
    /// Annulus with a hollow center.
    Ring,
    /// Small high-contrast dot.
    Speck,
}

/// Full description of a scene to render. Identical specs render to
/// byte-identical images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub count: u32,
    /// (height, width) in pixels, each at least 32.
    pub canvas: (u32, u32),
    pub background_id: u32,
    pub object_style: ObjectStyle,
    /// 0 keeps object size uniform; 1 shrinks objects strongly toward the
    /// top of the frame, mimicking scene perspective.
    pub size_gradient: f64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.canvas.0 < 32 || self.canvas.1 < 32 {
            return Err(SceneError::InvalidSpec(format!(
                "canvas {}x{} below the 32 px minimum",
                self.canvas.0, self.canvas.1
            )));
        }
        if !(0.0..=1.0).contains(&self.size_gradient) {
            return Err(SceneError::InvalidSpec(format!(
                "size_gradient {} outside [0, 1]",
                self.size_gradient
            )));
        }
        Ok(())
    }
}

/// Renderer tunables that are properties of the lab, not of one scene.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabConfig {
    /// Base object radius as a fraction of the shorter canvas side.
    pub base_radius_frac: f64,
    /// Per-scene scale multiplier range (inclusive).
    pub scene_scale: (f64, f64),
    /// Per-object radius jitter range (inclusive).
    pub radius_jitter: (f64, f64),
    /// Maximum fraction of a new object's pixels that may land on already
    /// occupied pixels. 0 additionally enforces a one-pixel separation gap.
    pub max_overlap: f64,
    /// Placement attempts per object before giving up.
    pub max_attempts: u32,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self {
            base_radius_frac: 0.028,
            scene_scale: (0.8, 1.4),
            radius_jitter: (0.75, 1.3),
            max_overlap: 0.2,
            max_attempts: 300,
        }
    }
}

/// Where a sample came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleSource {
    Rendered,
    Generated,
    Real,
}

/// An image plus optional ground-truth count and provenance metadata.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub image: RgbImage,
    pub true_count: Option<u32>,
    pub source: SampleSource,
    pub path: Option<PathBuf>,
    pub meta: BTreeMap<String, String>,
}

impl ImageSample {
    /// Parse the scene carried in metadata. Only rendered samples have one.
    pub fn scene(&self) -> Result<Scene, SceneError> {
        if self.source != SampleSource::Rendered {
            return Err(SceneError::NotRendered);
        }
        let raw = self.meta.get(META_SCENE).ok_or(SceneError::MissingScene)?;
        serde_json::from_str(raw).map_err(|e| SceneError::BadSceneMeta(e.to_string()))
    }
}

/// Three samples ordered (fewer, reference, more) with rank labels {0,1,2}.
#[derive(Debug, Clone)]
pub struct RankedTriplet {
    pub members: [Arc<ImageSample>; 3],
    pub ranks: [u8; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: u64,
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub angle: f64,
    pub color: [u8; 3],
    pub tex_seed: u64,
    pub style: ObjectStyle,
}

/// A placed scene: background parameters plus the exact object list.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scene {
    pub canvas: (u32, u32),
    pub background_id: u32,
    pub bg_seed: u64,
    pub size_gradient: f64,
    pub scene_scale: f64,
    pub base_radius_frac: f64,
    pub next_id: u64,
    /// Style used for objects placed after construction (e.g. band fills on
    /// a scene that started empty).
    #[serde(default)]
    pub style_hint: ObjectStyle,
    pub objects: Vec<SceneObject>,
}

/// Rasterized scene: pixels plus the exact object coverage mask.
pub struct Raster {
    pub rgb: RgbImage,
    pub mask: Array2<bool>,
}

// Deterministic per-pixel noise; splitmix-style finalizer.
fn hash01(x: u32, y: u32, seed: u64) -> f64 {
    let mut h = seed
        ^ (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (y as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^= h >> 30;
    h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^= h >> 31;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

const BG_PALETTES: [([u8; 3], [u8; 3]); 6] = [
    ([188, 199, 214], [148, 158, 172]), // overcast pavement
    ([210, 196, 164], [176, 158, 122]), // sand
    ([164, 188, 150], [120, 148, 104]), // grass
    ([200, 208, 224], [170, 182, 204]), // haze
    ([182, 170, 158], [140, 128, 116]), // dirt
    ([196, 188, 200], [156, 148, 164]), // stone
];

fn background_pixel(x: u32, y: u32, h: u32, id: u32, seed: u64) -> [u8; 3] {
    let (top, bottom) = BG_PALETTES[(id as usize) % BG_PALETTES.len()];
    let t = y as f64 / (h.max(2) - 1) as f64;
    let n = hash01(x, y, seed) - 0.5;
    let mut px = [0u8; 3];
    for c in 0..3 {
        let base = top[c] as f64 * (1.0 - t) + bottom[c] as f64 * t;
        px[c] = clamp_u8(base + n * 22.0);
    }
    px
}

/// Perspective-like size multiplier: 1 at the bottom row, shrinking toward
/// the top as the gradient strengthens.
fn size_factor(cy: f64, height: u32, gradient: f64) -> f64 {
    let t = (cy / (height.max(2) - 1) as f64).clamp(0.0, 1.0);
    (1.0 - gradient) + gradient * (0.35 + 0.65 * t)
}

impl SceneObject {
    /// All pixels covered by this object, clipped to the canvas.
    fn pixels(&self, canvas: (u32, u32)) -> Vec<(u32, u32)> {
        let (h, w) = canvas;
        let rmax = self.rx.max(self.ry);
        let x0 = (self.cx - rmax).floor().max(0.0) as u32;
        let x1 = (self.cx + rmax).ceil().min(w as f64 - 1.0) as u32;
        let y0 = (self.cy - rmax).floor().max(0.0) as u32;
        let y1 = (self.cy + rmax).ceil().min(h as f64 - 1.0) as u32;
        let (sin, cos) = self.angle.sin_cos();
        let mut out = Vec::new();
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dx = x as f64 - self.cx;
                let dy = y as f64 - self.cy;
                let u = (dx * cos + dy * sin) / self.rx;
                let v = (-dx * sin + dy * cos) / self.ry;
                let rho2 = u * u + v * v;
                let inside = match self.style {
                    ObjectStyle::Blob | ObjectStyle::Speck => rho2 <= 1.0,
                    ObjectStyle::Ring => (0.3025..=1.0).contains(&rho2),
                };
                if inside {
                    out.push((x, y));
                }
            }
        }
        out
    }

    fn shade(&self, x: u32, y: u32) -> [u8; 3] {
        let dx = x as f64 - self.cx;
        let dy = y as f64 - self.cy;
        let (sin, cos) = self.angle.sin_cos();
        let u = (dx * cos + dy * sin) / self.rx;
        let v = (-dx * sin + dy * cos) / self.ry;
        let rho2 = (u * u + v * v).min(1.0);
        let radial = 0.72 + 0.28 * (1.0 - rho2);
        let speckle = 0.82 + 0.36 * hash01(x, y, self.tex_seed);
        let mut px = [0u8; 3];
        for c in 0..3 {
            px[c] = clamp_u8(self.color[c] as f64 * radial * speckle);
        }
        px
    }
}

const OBJECT_COLORS: [[u8; 3]; 8] = [
    [52, 48, 58],
    [84, 44, 40],
    [38, 58, 86],
    [96, 82, 46],
    [46, 74, 52],
    [104, 56, 78],
    [60, 60, 96],
    [90, 90, 84],
];

/// Region a new object's center may occupy.
enum PlacementRegion {
    Anywhere,
    /// Perimeter band of the given thickness per axis (rows, cols).
    Band { t_rows: u32, t_cols: u32 },
}

impl PlacementRegion {
    fn contains(&self, cx: f64, cy: f64, canvas: (u32, u32)) -> bool {
        match *self {
            PlacementRegion::Anywhere => true,
            PlacementRegion::Band { t_rows, t_cols } => {
                let (h, w) = (canvas.0 as f64, canvas.1 as f64);
                cy < t_rows as f64
                    || cy >= h - t_rows as f64
                    || cx < t_cols as f64
                    || cx >= w - t_cols as f64
            }
        }
    }
}

struct Placer<'a> {
    scene: &'a mut Scene,
    occupied: Array2<bool>,
    cfg: LabConfig,
}

impl<'a> Placer<'a> {
    fn new(scene: &'a mut Scene, cfg: LabConfig) -> Self {
        let (h, w) = scene.canvas;
        let mut occupied = Array2::from_elem((h as usize, w as usize), false);
        for obj in &scene.objects {
            for (x, y) in obj.pixels(scene.canvas) {
                occupied[(y as usize, x as usize)] = true;
            }
        }
        Self {
            scene,
            occupied,
            cfg,
        }
    }

    fn conflicts(&self, pixels: &[(u32, u32)]) -> bool {
        if pixels.is_empty() {
            return true;
        }
        if self.cfg.max_overlap <= 0.0 {
            // Strict mode: demand a one-pixel gap so components stay separate.
            let (h, w) = self.occupied.dim();
            for &(x, y) in pixels {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let ny = y as i64 + dy;
                        let nx = x as i64 + dx;
                        if ny >= 0
                            && nx >= 0
                            && (ny as usize) < h
                            && (nx as usize) < w
                            && self.occupied[(ny as usize, nx as usize)]
                        {
                            return true;
                        }
                    }
                }
            }
            false
        } else {
            let hits = pixels
                .iter()
                .filter(|&&(x, y)| self.occupied[(y as usize, x as usize)])
                .count();
            hits as f64 / pixels.len() as f64 > self.cfg.max_overlap
        }
    }

    /// Place `k` objects; returns how many were placed before giving up.
    fn place(&mut self, k: u32, region: &PlacementRegion, rng: &mut ChaCha8Rng) -> u32 {
        let (h, w) = self.scene.canvas;
        let base_px = self.scene.base_radius_frac * h.min(w) as f64 * self.scene.scene_scale;
        for placed in 0..k {
            let mut done = false;
            for _ in 0..self.cfg.max_attempts {
                let cy = rng.random_range(0.0..h as f64);
                let cx = rng.random_range(0.0..w as f64);
                if !region.contains(cx, cy, self.scene.canvas) {
                    continue;
                }
                let jitter = rng.random_range(self.cfg.radius_jitter.0..=self.cfg.radius_jitter.1);
                let r = (base_px * size_factor(cy, h, self.scene.size_gradient) * jitter).max(0.9);
                let aspect = rng.random_range(0.6..=1.0);
                let angle = rng.random_range(0.0..std::f64::consts::PI);
                let color = OBJECT_COLORS[rng.random_range(0..OBJECT_COLORS.len())];
                let tex_seed: u64 = rng.random();
                // Keep the object fully inside the frame.
                let rmax = r;
                if cx < rmax + 1.0
                    || cy < rmax + 1.0
                    || cx > w as f64 - rmax - 2.0
                    || cy > h as f64 - rmax - 2.0
                {
                    continue;
                }
                let obj = SceneObject {
                    id: self.scene.next_id,
                    cx,
                    cy,
                    rx: r,
                    ry: r * aspect,
                    angle,
                    color,
                    tex_seed,
                    style: match self.scene.objects.first().map(|o| o.style) {
                        Some(style) => style,
                        None => self.scene_style(),
                    },
                };
                let pixels = obj.pixels(self.scene.canvas);
                if self.conflicts(&pixels) {
                    continue;
                }
                for (x, y) in &pixels {
                    self.occupied[(*y as usize, *x as usize)] = true;
                }
                self.scene.next_id += 1;
                self.scene.objects.push(obj);
                done = true;
                break;
            }
            if !done {
                return placed;
            }
        }
        k
    }

    fn scene_style(&self) -> ObjectStyle {
        self.scene.style_hint
    }
}

impl Scene {
    pub fn build(spec: &SceneSpec, cfg: &LabConfig) -> Result<Scene, SceneError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let bg_seed: u64 = rng.random();
        let scene_scale = rng.random_range(cfg.scene_scale.0..=cfg.scene_scale.1);
        let mut scene = Scene {
            canvas: spec.canvas,
            background_id: spec.background_id,
            bg_seed,
            size_gradient: spec.size_gradient,
            scene_scale,
            base_radius_frac: cfg.base_radius_frac,
            next_id: 0,
            objects: Vec::new(),
            style_hint: spec.object_style,
        };
        let mut placer = Placer::new(&mut scene, cfg.clone());
        let placed = placer.place(spec.count, &PlacementRegion::Anywhere, &mut rng);
        if placed < spec.count {
            return Err(SceneError::CanvasTooSmall {
                requested: spec.count,
                placed,
            });
        }
        Ok(scene)
    }

    pub fn raster(&self) -> Raster {
        let (h, w) = self.canvas;
        let mut rgb = RgbImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                rgb.put_pixel(x, y, Rgb(background_pixel(x, y, h, self.background_id, self.bg_seed)));
            }
        }
        let mut mask = Array2::from_elem((h as usize, w as usize), false);
        // Painter order: far (top, small) objects first.
        let mut order: Vec<usize> = (0..self.objects.len()).collect();
        order.sort_by(|&a, &b| {
            let oa = &self.objects[a];
            let ob = &self.objects[b];
            oa.cy
                .partial_cmp(&ob.cy)
                .unwrap()
                .then(oa.cx.partial_cmp(&ob.cx).unwrap())
                .then(oa.id.cmp(&ob.id))
        });
        for idx in order {
            let obj = &self.objects[idx];
            for (x, y) in obj.pixels(self.canvas) {
                rgb.put_pixel(x, y, Rgb(obj.shade(x, y)));
                mask[(y as usize, x as usize)] = true;
            }
        }
        Raster { rgb, mask }
    }

    pub fn to_sample(&self) -> ImageSample {
        let raster = self.raster();
        let mut meta = BTreeMap::new();
        meta.insert(
            META_SCENE.to_string(),
            serde_json::to_string(self).expect("scene serializes"),
        );
        meta.insert(META_WIDTH.to_string(), self.canvas.1.to_string());
        meta.insert(META_HEIGHT.to_string(), self.canvas.0.to_string());
        ImageSample {
            image: raster.rgb,
            true_count: Some(self.objects.len() as u32),
            source: SampleSource::Rendered,
            path: None,
            meta,
        }
    }
}

/// Render a scene spec with the default lab configuration.
pub fn render_scene(spec: &SceneSpec) -> Result<ImageSample, SceneError> {
    render_scene_with(spec, &LabConfig::default())
}

pub fn render_scene_with(spec: &SceneSpec, cfg: &LabConfig) -> Result<ImageSample, SceneError> {
    Ok(Scene::build(spec, cfg)?.to_sample())
}

/// Remove `k` randomly chosen objects; everything else re-renders in place.
pub fn remove_objects(sample: &ImageSample, k: u32, seed: u64) -> Result<ImageSample, SceneError> {
    let mut scene = sample.scene()?;
    let n = scene.objects.len() as u32;
    if k > n {
        return Err(SceneError::TooFewObjects {
            requested: k,
            available: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let drop = index_sample(&mut rng, n as usize, k as usize);
    let dropped: std::collections::BTreeSet<usize> = drop.into_iter().collect();
    scene.objects = scene
        .objects
        .into_iter()
        .enumerate()
        .filter(|(i, _)| !dropped.contains(i))
        .map(|(_, o)| o)
        .collect();
    Ok(scene.to_sample())
}

/// Add `k` objects whose centers fall in a perimeter band covering
/// `band_fraction` of each side.
pub fn add_objects(
    sample: &ImageSample,
    k: u32,
    band_fraction: f64,
    seed: u64,
) -> Result<ImageSample, SceneError> {
    if !(0.0..0.5).contains(&band_fraction) || band_fraction <= 0.0 {
        return Err(SceneError::InvalidSpec(format!(
            "band_fraction {band_fraction} outside (0, 0.5)"
        )));
    }
    let mut scene = sample.scene()?;
    let (h, w) = scene.canvas;
    let region = PlacementRegion::Band {
        t_rows: (h as f64 * band_fraction).floor() as u32,
        t_cols: (w as f64 * band_fraction).floor() as u32,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = LabConfig::default();
    let mut placer = Placer::new(&mut scene, cfg);
    let placed = placer.place(k, &region, &mut rng);
    if placed < k {
        return Err(SceneError::BandFull {
            requested: k,
            placed,
        });
    }
    Ok(scene.to_sample())
}

/// How edit sizes are drawn when building triplets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum EditSize {
    /// Inclusive absolute range of objects to add/remove.
    Absolute(u32, u32),
    /// Inclusive range as a fraction of the reference count.
    Fraction(f64, f64),
}

impl EditSize {
    /// Draw an edit size for a reference with `ref_count` objects.
    pub fn draw_count(&self, ref_count: u32, rng: &mut ChaCha8Rng) -> u32 {
        match *self {
            EditSize::Absolute(lo, hi) => rng.random_range(lo..=hi.max(lo)),
            EditSize::Fraction(lo, hi) => {
                let f = rng.random_range(lo..=hi.max(lo));
                ((ref_count as f64 * f).round() as u32).max(1)
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TripletConfig {
    pub remove: EditSize,
    pub add: EditSize,
    pub band_fraction: f64,
    pub seed: u64,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            remove: EditSize::Fraction(0.2, 0.45),
            add: EditSize::Fraction(0.2, 0.45),
            band_fraction: 1.0 / 3.0,
            seed: 0,
        }
    }
}

/// Build `n_minus * n_plus` ordered triplets from a rendered reference:
/// every decreased variant pairs with every increased variant, ranked
/// (fewer=0, reference=1, more=2).
pub fn make_triplets(
    reference: &ImageSample,
    n_minus: u32,
    n_plus: u32,
    cfg: &TripletConfig,
) -> Result<Vec<RankedTriplet>, SceneError> {
    assert!(n_minus >= 1 && n_plus >= 1, "need at least one variant each way");
    let ref_count = reference
        .true_count
        .ok_or(SceneError::NotRendered)?;
    if ref_count == 0 {
        return Err(SceneError::TooFewObjects {
            requested: 1,
            available: 0,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut fewer = Vec::with_capacity(n_minus as usize);
    for _ in 0..n_minus {
        let k = cfg.remove.draw_count(ref_count, &mut rng).min(ref_count);
        let sub_seed: u64 = rng.random();
        fewer.push(Arc::new(remove_objects(reference, k, sub_seed)?));
    }
    let mut more = Vec::with_capacity(n_plus as usize);
    for _ in 0..n_plus {
        let k = cfg.add.draw_count(ref_count, &mut rng);
        let sub_seed: u64 = rng.random();
        more.push(Arc::new(add_objects(
            reference,
            k,
            cfg.band_fraction,
            sub_seed,
        )?));
    }
    let reference = Arc::new(reference.clone());
    let mut triplets = Vec::with_capacity((n_minus * n_plus) as usize);
    for f in &fewer {
        for m in &more {
            triplets.push(RankedTriplet {
                members: [Arc::clone(f), Arc::clone(&reference), Arc::clone(m)],
                ranks: [0, 1, 2],
            });
        }
    }
    Ok(triplets)
}
