//! Density-classifier-guided partitioning at inference time.
//!
//! The count head is linear, so the whole-image prediction decomposes
//! exactly into per-cell regional counts plus the bias. A density map over
//! the same feature grid marks crowded regions; grid cells whose area is
//! mostly dense are re-counted from a high-resolution crop instead of the
//! map, and everything sums into the final count with an audit trail.

use image::RgbImage;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::genclient::DensityLabel;
use crate::models::{global_pool, Checkpoint, ModelError};

#[derive(Debug, Error)]
pub enum DcgpError {
    #[error("partition rate must be at least 1, got {0}")]
    BadM(usize),
    #[error("checkpoint has no {0} head")]
    MissingHead(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Per-region counts. `values[(i, j)]` is the linear part of the count head
/// applied to `z_ij / (H*W)`; the head bias is kept separate so the map sums
/// to the whole-image prediction exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CountMap {
    pub values: Array2<f64>,
    pub bias: f64,
}

impl CountMap {
    /// Whole-image prediction reassembled from the map.
    pub fn total(&self) -> f64 {
        self.values.sum() + self.bias
    }
}

/// Density class of every feature-grid region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityMap {
    pub classes: Array2<DensityLabel>,
}

/// Pixel rectangle of one partition cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

/// An M x M overlay on the density map: which cells are re-counted and
/// where their pixels live in the source image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub m: usize,
    /// Row-major M x M recount decisions.
    pub recount: Array2<bool>,
    /// Row-major M x M pixel boxes; they tile the source image exactly.
    pub patch_boxes: Vec<PatchBox>,
}

impl PartitionPlan {
    pub fn recount_cells(&self) -> usize {
        self.recount.iter().filter(|&&r| r).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellMode {
    UseMap,
    Recount,
}

/// Audit row for one partition cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellReport {
    pub idx: usize,
    pub mode: CellMode,
    pub contribution: f64,
    /// Pixel size of the region the contribution was computed from.
    pub source_res: (u32, u32),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferConfig {
    /// Partition rate M.
    pub m: usize,
    /// A cell recounts when its dense area fraction exceeds this.
    pub tau: f64,
    /// Crop recount patches from the native-resolution image when it is
    /// larger than the inference resolution.
    pub hybrid: bool,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            m: 3,
            tau: 0.5,
            hybrid: true,
        }
    }
}

/// Everything produced by one inference pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferenceOutcome {
    pub final_count: f64,
    pub m: usize,
    pub count_map: CountMap,
    pub density_map: DensityMap,
    pub plan: PartitionPlan,
    pub cells: Vec<CellReport>,
    /// True when recounts had to crop from the resized image because no
    /// higher-resolution source was available (or hybrid was off).
    pub fallback: bool,
}

/// The serialized per-image record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferenceReport {
    pub final_count: f64,
    #[serde(rename = "M")]
    pub m: usize,
    pub cells: Vec<CellReport>,
}

impl InferenceOutcome {
    pub fn report(&self) -> InferenceReport {
        InferenceReport {
            final_count: self.final_count,
            m: self.m,
            cells: self.cells.clone(),
        }
    }
}

/// Regional counts for one image (Density map Eq.): the linear count-head
/// response to each cell's feature scaled by 1/(H*W), bias kept aside.
pub fn count_map(img: &RgbImage, ckpt: &Checkpoint) -> Result<CountMap, DcgpError> {
    let head = ckpt
        .count_head
        .as_ref()
        .ok_or(DcgpError::MissingHead("count"))?;
    let features = ckpt.features(img)?;
    let (_, h, w) = features.values.dim();
    let scale = 1.0 / (h * w) as f64;
    let values = Array2::from_shape_fn((h, w), |(i, j)| {
        head.w.dot(&features.cell(i, j)) * scale
    });
    Ok(CountMap {
        values,
        bias: head.b,
    })
}

/// Density class of every feature cell. Cell features share the pooled
/// feature's scale (pooling is a mean), so the classifier applies directly.
pub fn density_map(img: &RgbImage, ckpt: &Checkpoint) -> Result<DensityMap, DcgpError> {
    let head = ckpt
        .density_head
        .as_ref()
        .ok_or(DcgpError::MissingHead("density"))?;
    let features = ckpt.features(img)?;
    let (_, h, w) = features.values.dim();
    let classes = Array2::from_shape_fn((h, w), |(i, j)| {
        let idx = head.predict(&features.cell(i, j));
        DensityLabel::from_index(idx as u8).expect("3-class head")
    });
    Ok(DensityMap { classes })
}

fn overlap_1d(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// Fraction of grid cell (gi, gj) of an m x m overlay covered by density
/// cells labeled dense, with fractional cell overlap weighted by area.
fn dense_fraction(dmap: &DensityMap, m: usize, gi: usize, gj: usize) -> f64 {
    let (h, w) = dmap.classes.dim();
    let (gy0, gy1) = (gi as f64 / m as f64, (gi + 1) as f64 / m as f64);
    let (gx0, gx1) = (gj as f64 / m as f64, (gj + 1) as f64 / m as f64);
    let mut dense_area = 0.0;
    for r in 0..h {
        let (fy0, fy1) = (r as f64 / h as f64, (r + 1) as f64 / h as f64);
        let dy = overlap_1d(fy0, fy1, gy0, gy1);
        if dy == 0.0 {
            continue;
        }
        for c in 0..w {
            if dmap.classes[(r, c)] != DensityLabel::Dense {
                continue;
            }
            let (fx0, fx1) = (c as f64 / w as f64, (c + 1) as f64 / w as f64);
            dense_area += dy * overlap_1d(fx0, fx1, gx0, gx1);
        }
    }
    let cell_area = 1.0 / (m * m) as f64;
    dense_area / cell_area
}

/// Map mass of grid cell (gi, gj): area-weighted share of every overlapping
/// count-map cell plus the cell's share of the head bias. Summing over all
/// m*m cells recovers `CountMap::total` exactly up to float addition order.
fn cell_mass(cmap: &CountMap, m: usize, gi: usize, gj: usize) -> f64 {
    let (h, w) = cmap.values.dim();
    let (gy0, gy1) = (gi as f64 / m as f64, (gi + 1) as f64 / m as f64);
    let (gx0, gx1) = (gj as f64 / m as f64, (gj + 1) as f64 / m as f64);
    let mut mass = 0.0;
    for r in 0..h {
        let (fy0, fy1) = (r as f64 / h as f64, (r + 1) as f64 / h as f64);
        let dy = overlap_1d(fy0, fy1, gy0, gy1);
        if dy == 0.0 {
            continue;
        }
        for c in 0..w {
            let (fx0, fx1) = (c as f64 / w as f64, (c + 1) as f64 / w as f64);
            let frac = dy * overlap_1d(fx0, fx1, gx0, gx1) * (h * w) as f64;
            mass += cmap.values[(r, c)] * frac;
        }
    }
    mass + cmap.bias / (m * m) as f64
}

fn boxes_for(dims: (u32, u32), m: usize) -> Vec<PatchBox> {
    let (width, height) = dims;
    let mut boxes = Vec::with_capacity(m * m);
    for gi in 0..m {
        let y0 = (gi as u64 * height as u64 / m as u64) as u32;
        let y1 = ((gi + 1) as u64 * height as u64 / m as u64) as u32;
        for gj in 0..m {
            let x0 = (gj as u64 * width as u64 / m as u64) as u32;
            let x1 = ((gj + 1) as u64 * width as u64 / m as u64) as u32;
            boxes.push(PatchBox {
                x: x0,
                y: y0,
                w: x1 - x0,
                h: y1 - y0,
            });
        }
    }
    boxes
}

/// Overlay an m x m grid on the density map and mark cells whose dense area
/// fraction exceeds `tau` for recounting. `dims` is (width, height) of the
/// image the patch boxes should index into.
pub fn partition_plan(
    dmap: &DensityMap,
    m: usize,
    tau: f64,
    dims: (u32, u32),
) -> Result<PartitionPlan, DcgpError> {
    if m == 0 {
        return Err(DcgpError::BadM(m));
    }
    let recount = Array2::from_shape_fn((m, m), |(gi, gj)| {
        dense_fraction(dmap, m, gi, gj) > tau
    });
    Ok(PartitionPlan {
        m,
        recount,
        patch_boxes: boxes_for(dims, m),
    })
}

/// Pooled whole-image count prediction (resizes internally).
pub fn whole_image_count(img: &RgbImage, ckpt: &Checkpoint) -> Result<f64, DcgpError> {
    let head = ckpt
        .count_head
        .as_ref()
        .ok_or(DcgpError::MissingHead("count"))?;
    let z = global_pool(&ckpt.features(img)?);
    Ok(head.forward(&z))
}

fn crop(img: &RgbImage, b: PatchBox) -> RgbImage {
    image::imageops::crop_imm(img, b.x, b.y, b.w.max(1), b.h.max(1)).to_image()
}

/// Full DCGP inference: count map + density map at inference resolution,
/// recount dense cells from high-resolution crops, sum everything.
pub fn infer_count(
    img: &RgbImage,
    ckpt: &Checkpoint,
    cfg: &InferConfig,
) -> Result<InferenceOutcome, DcgpError> {
    if cfg.m == 0 {
        return Err(DcgpError::BadM(cfg.m));
    }
    let input = ckpt.encoder.cfg.input_size;
    let cmap = count_map(img, ckpt)?;
    let dmap = density_map(img, ckpt)?;

    let native = cfg.hybrid && (img.width() > input || img.height() > input);
    let source: RgbImage = if native {
        img.clone()
    } else {
        image::imageops::resize(img, input, input, image::imageops::FilterType::Triangle)
    };
    let plan = partition_plan(&dmap, cfg.m, cfg.tau, source.dimensions())?;
    let map_boxes = boxes_for((input, input), cfg.m);

    let mut cells = Vec::with_capacity(cfg.m * cfg.m);
    let mut final_count = 0.0;
    let mut any_recount = false;
    for gi in 0..cfg.m {
        for gj in 0..cfg.m {
            let idx = gi * cfg.m + gj;
            let (mode, contribution, source_res) = if plan.recount[(gi, gj)] {
                any_recount = true;
                let b = plan.patch_boxes[idx];
                let patch = crop(&source, b);
                let pred = whole_image_count(&patch, ckpt)?;
                (CellMode::Recount, pred, (b.w, b.h))
            } else {
                let b = map_boxes[idx];
                (
                    CellMode::UseMap,
                    cell_mass(&cmap, cfg.m, gi, gj),
                    (b.w, b.h),
                )
            };
            final_count += contribution;
            cells.push(CellReport {
                idx,
                mode,
                contribution,
                source_res,
            });
        }
    }
    Ok(InferenceOutcome {
        final_count,
        m: cfg.m,
        count_map: cmap,
        density_map: dmap,
        plan,
        cells,
        fallback: any_recount && !native,
    })
}

/// Per-patch audit rows for an unconditional m x m recount.
pub fn fixed_partition_cells(
    img: &RgbImage,
    ckpt: &Checkpoint,
    m: usize,
) -> Result<Vec<CellReport>, DcgpError> {
    if m == 0 {
        return Err(DcgpError::BadM(m));
    }
    let mut cells = Vec::with_capacity(m * m);
    for (idx, b) in boxes_for(img.dimensions(), m).into_iter().enumerate() {
        cells.push(CellReport {
            idx,
            mode: CellMode::Recount,
            contribution: whole_image_count(&crop(img, b), ckpt)?,
            source_res: (b.w, b.h),
        });
    }
    Ok(cells)
}

/// Ablation baseline: recount every cell of the m x m grid unconditionally.
pub fn fixed_partition_count(
    img: &RgbImage,
    ckpt: &Checkpoint,
    m: usize,
) -> Result<f64, DcgpError> {
    Ok(fixed_partition_cells(img, ckpt, m)?
        .iter()
        .map(|c| c.contribution)
        .sum())
}

/// Whole-image density verdict from pooled features.
pub fn whole_image_density(img: &RgbImage, ckpt: &Checkpoint) -> Result<DensityLabel, DcgpError> {
    let head = ckpt
        .density_head
        .as_ref()
        .ok_or(DcgpError::MissingHead("density"))?;
    let z = global_pool(&ckpt.features(img)?);
    Ok(DensityLabel::from_index(head.predict(&z) as u8).expect("3-class head"))
}

/// Partition rate the whole-image gate selects: m when dense, else 1.
pub fn gated_rate(img: &RgbImage, ckpt: &Checkpoint, m: usize) -> Result<usize, DcgpError> {
    if m == 0 {
        return Err(DcgpError::BadM(m));
    }
    Ok(if whole_image_density(img, ckpt)? == DensityLabel::Dense {
        m
    } else {
        1
    })
}

/// Ablation baseline: one whole-image density verdict gates between the
/// 1 x 1 and m x m fixed partitions.
pub fn gated_partition_count(
    img: &RgbImage,
    ckpt: &Checkpoint,
    m: usize,
) -> Result<f64, DcgpError> {
    let rate = gated_rate(img, ckpt, m)?;
    fixed_partition_count(img, ckpt, rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ClassHead, EncoderConfig, ScalarHead};
    use crate::scene_lab::{LabConfig, ObjectStyle, Scene, SceneSpec};
    use ndarray::{array, Array1};

    fn scene_image(count: u32, seed: u64) -> RgbImage {
        let spec = SceneSpec {
            seed,
            count,
            canvas: (64, 64),
            background_id: seed as u32,
            object_style: ObjectStyle::Blob,
            size_gradient: 0.4,
        };
        Scene::build(&spec, &LabConfig::default()).unwrap().raster().rgb
    }

    fn test_ckpt(grid_one: bool) -> Checkpoint {
        let cfg = if grid_one {
            EncoderConfig {
                input_size: 16,
                widths: vec![4, 6, 8, 10],
                seed: 11,
            }
        } else {
            EncoderConfig {
                input_size: 32,
                widths: vec![6, 10, 16],
                seed: 11,
            }
        };
        let mut ckpt = Checkpoint::new(&cfg).unwrap();
        ckpt.count_head = Some(ScalarHead::new(cfg.feature_dim(), 3));
        ckpt.density_head = Some(ClassHead::new(3, cfg.feature_dim(), 4));
        ckpt
    }

    fn forced_density_head(dim: usize, label: DensityLabel) -> ClassHead {
        let mut b = Array1::zeros(3);
        b[label.index() as usize] = 50.0;
        ClassHead {
            w: Array2::zeros((3, dim)),
            b,
        }
    }

    #[test]
    fn one_by_one_grid_equals_whole_image_prediction() {
        let ckpt = test_ckpt(true);
        let img = scene_image(5, 1);
        let cmap = count_map(&img, &ckpt).unwrap();
        assert_eq!(cmap.values.dim(), (1, 1));
        let whole = whole_image_count(&img, &ckpt).unwrap();
        assert!((cmap.total() - whole).abs() < 1e-12);
    }

    #[test]
    fn count_map_sum_identity() {
        let ckpt = test_ckpt(false);
        for seed in 0..4 {
            let img = scene_image(8 + seed as u32 * 5, seed);
            let cmap = count_map(&img, &ckpt).unwrap();
            assert_eq!(cmap.values.dim(), (4, 4));
            let whole = whole_image_count(&img, &ckpt).unwrap();
            let rel = (cmap.total() - whole).abs() / whole.abs().max(1e-12);
            assert!(rel < 1e-5, "seed {seed}: {} vs {whole}", cmap.total());
        }
    }

    #[test]
    fn density_map_matches_count_map_grid_and_is_deterministic() {
        let ckpt = test_ckpt(false);
        let img = scene_image(20, 9);
        let d1 = density_map(&img, &ckpt).unwrap();
        let d2 = density_map(&img, &ckpt).unwrap();
        let cmap = count_map(&img, &ckpt).unwrap();
        assert_eq!(d1.classes.dim(), cmap.values.dim());
        assert_eq!(d1, d2);
    }

    #[test]
    fn all_sparse_map_never_recounts_and_all_dense_always_does() {
        let sparse = DensityMap {
            classes: Array2::from_elem((6, 6), DensityLabel::Sparse),
        };
        let dense = DensityMap {
            classes: Array2::from_elem((6, 6), DensityLabel::Dense),
        };
        let p1 = partition_plan(&sparse, 3, 0.5, (300, 300)).unwrap();
        assert_eq!(p1.recount_cells(), 0);
        let p2 = partition_plan(&dense, 3, 0.5, (300, 300)).unwrap();
        assert_eq!(p2.recount_cells(), 9);
    }

    #[test]
    fn twelve_grid_single_dense_block_marks_one_cell() {
        // 12x12 map, M=3: each grid cell covers a 4x4 block exactly. One
        // dense 4x4 block at block-row 0, block-col 1.
        let mut classes = Array2::from_elem((12, 12), DensityLabel::Sparse);
        for r in 0..4 {
            for c in 4..8 {
                classes[(r, c)] = DensityLabel::Dense;
            }
        }
        let plan = partition_plan(&DensityMap { classes }, 3, 0.5, (384, 384)).unwrap();
        assert_eq!(plan.recount_cells(), 1);
        assert!(plan.recount[(0, 1)]);
    }

    #[test]
    fn patch_boxes_tile_exactly() {
        for (w, h, m) in [(100u32, 37u32, 3usize), (64, 64, 2), (97, 53, 5), (10, 10, 1)] {
            let boxes = boxes_for((w, h), m);
            let mut coverage = vec![0u8; (w * h) as usize];
            for b in &boxes {
                for y in b.y..b.y + b.h {
                    for x in b.x..b.x + b.w {
                        coverage[(y * w + x) as usize] += 1;
                    }
                }
            }
            assert!(
                coverage.iter().all(|&c| c == 1),
                "({w},{h},{m}): gaps or overlaps"
            );
        }
    }

    #[test]
    fn all_sparse_inference_reduces_to_whole_image_prediction() {
        let mut ckpt = test_ckpt(false);
        let dim = ckpt.encoder.cfg.feature_dim();
        ckpt.density_head = Some(forced_density_head(dim, DensityLabel::Sparse));
        let img = scene_image(12, 2);
        let out = infer_count(&img, &ckpt, &InferConfig::default()).unwrap();
        assert_eq!(out.plan.recount_cells(), 0);
        let whole = whole_image_count(&img, &ckpt).unwrap();
        assert!(
            (out.final_count - whole).abs() < 1e-9,
            "{} vs {whole}",
            out.final_count
        );
        assert!(!out.fallback);
    }

    #[test]
    fn all_dense_inference_sums_patch_predictions() {
        let mut ckpt = test_ckpt(false);
        let dim = ckpt.encoder.cfg.feature_dim();
        ckpt.density_head = Some(forced_density_head(dim, DensityLabel::Dense));
        let img = scene_image(30, 3);
        let cfg = InferConfig::default();
        let out = infer_count(&img, &ckpt, &cfg).unwrap();
        assert_eq!(out.plan.recount_cells(), 9);
        let fixed = fixed_partition_count(&img, &ckpt, 3).unwrap();
        assert!((out.final_count - fixed).abs() < 1e-9);
        assert!(out.cells.iter().all(|c| c.mode == CellMode::Recount));
    }

    #[test]
    fn bookkeeping_closes() {
        let ckpt = test_ckpt(false);
        let img = scene_image(25, 4);
        let out = infer_count(&img, &ckpt, &InferConfig::default()).unwrap();
        let sum: f64 = out.cells.iter().map(|c| c.contribution).sum();
        assert!((sum - out.final_count).abs() < 1e-6);
        assert_eq!(out.cells.len(), 9);
        let report = out.report();
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"M\":"));
        assert!(json.contains("\"final_count\":"));
    }

    #[test]
    fn fixed_m1_is_whole_image_prediction() {
        let ckpt = test_ckpt(false);
        let img = scene_image(7, 5);
        let fixed = fixed_partition_count(&img, &ckpt, 1).unwrap();
        // The single box is the full frame, so only resize kernels differ.
        let whole = whole_image_count(&img, &ckpt).unwrap();
        assert!((fixed - whole).abs() < 1e-9);
    }

    #[test]
    fn constant_image_m2_is_four_identical_patches() {
        let ckpt = test_ckpt(false);
        let img = RgbImage::from_pixel(64, 64, image::Rgb([120, 90, 60]));
        let m2 = fixed_partition_count(&img, &ckpt, 2).unwrap();
        let one_patch = whole_image_count(
            &image::imageops::crop_imm(&img, 0, 0, 32, 32).to_image(),
            &ckpt,
        )
        .unwrap();
        assert!((m2 - 4.0 * one_patch).abs() < 1e-9);
    }

    #[test]
    fn gate_selects_between_one_and_m() {
        let mut ckpt = test_ckpt(false);
        let dim = ckpt.encoder.cfg.feature_dim();
        let img = scene_image(18, 6);

        ckpt.density_head = Some(forced_density_head(dim, DensityLabel::Sparse));
        let gated = gated_partition_count(&img, &ckpt, 3).unwrap();
        let fixed1 = fixed_partition_count(&img, &ckpt, 1).unwrap();
        assert_eq!(gated, fixed1);

        ckpt.density_head = Some(forced_density_head(dim, DensityLabel::Dense));
        let gated = gated_partition_count(&img, &ckpt, 3).unwrap();
        let fixed3 = fixed_partition_count(&img, &ckpt, 3).unwrap();
        assert_eq!(gated, fixed3);
    }

    #[test]
    fn zero_partition_rate_is_rejected() {
        let ckpt = test_ckpt(false);
        let img = scene_image(4, 7);
        assert!(matches!(
            infer_count(&img, &ckpt, &InferConfig { m: 0, ..InferConfig::default() }),
            Err(DcgpError::BadM(0))
        ));
        assert!(matches!(
            fixed_partition_count(&img, &ckpt, 0),
            Err(DcgpError::BadM(0))
        ));
        assert!(matches!(
            gated_partition_count(&img, &ckpt, 0),
            Err(DcgpError::BadM(0))
        ));
        let dmap = DensityMap {
            classes: Array2::from_elem((4, 4), DensityLabel::Sparse),
        };
        assert!(matches!(
            partition_plan(&dmap, 0, 0.5, (64, 64)),
            Err(DcgpError::BadM(0))
        ));
    }

    #[test]
    fn missing_heads_are_reported() {
        let cfg = EncoderConfig {
            input_size: 32,
            widths: vec![6, 10, 16],
            seed: 11,
        };
        let ckpt = Checkpoint::new(&cfg).unwrap();
        let img = scene_image(4, 8);
        assert!(matches!(
            count_map(&img, &ckpt),
            Err(DcgpError::MissingHead("count"))
        ));
        assert!(matches!(
            density_map(&img, &ckpt),
            Err(DcgpError::MissingHead("density"))
        ));
    }

    #[test]
    fn hybrid_recounts_from_native_resolution() {
        let mut ckpt = test_ckpt(false);
        let dim = ckpt.encoder.cfg.feature_dim();
        ckpt.density_head = Some(forced_density_head(dim, DensityLabel::Dense));
        // 64x64 native vs 32 inference: native crops are 32x32.
        let img = scene_image(40, 9);
        let out = infer_count(&img, &ckpt, &InferConfig { m: 2, ..InferConfig::default() }).unwrap();
        assert!(!out.fallback);
        assert!(out.cells.iter().all(|c| c.source_res == (32, 32)));

        // Image no larger than the inference resolution: fallback crops
        // from the resized copy.
        let small = image::imageops::resize(
            &img,
            32,
            32,
            image::imageops::FilterType::Triangle,
        );
        let out = infer_count(&small, &ckpt, &InferConfig { m: 2, ..InferConfig::default() }).unwrap();
        assert!(out.fallback);
        assert!(out.cells.iter().all(|c| c.source_res == (16, 16)));

        // Hybrid off forces the fallback path even with a big image.
        let out = infer_count(
            &img,
            &ckpt,
            &InferConfig {
                m: 2,
                hybrid: false,
                ..InferConfig::default()
            },
        )
        .unwrap();
        assert!(out.fallback);
        assert!(out.cells.iter().all(|c| c.source_res == (16, 16)));
    }

    #[test]
    fn fractional_overlap_partition_plan() {
        // 4x4 density map with M=3: grid cells straddle feature cells.
        // Dense strip = rows 0..2, cols 0..1 (x in [0, 1/4), y in [0, 1/2)).
        // Cell (0,0) spans [0,1/3)^2: dense area (1/3)(1/4), fraction
        // 9/12 = 0.75 -> recount. Cell (1,0) spans y in [1/3,2/3): dense
        // area (1/6)(1/4), fraction 9/24 = 0.375 -> keep the map.
        let mut classes = Array2::from_elem((4, 4), DensityLabel::Sparse);
        classes[(0, 0)] = DensityLabel::Dense;
        classes[(1, 0)] = DensityLabel::Dense;
        let plan = partition_plan(&DensityMap { classes }, 3, 0.5, (96, 96)).unwrap();
        assert!(plan.recount[(0, 0)]);
        assert!(!plan.recount[(0, 1)]);
        assert!(!plan.recount[(1, 0)]);
        assert_eq!(plan.recount_cells(), 1);
    }

    #[test]
    fn cell_mass_splits_preserve_total_under_any_rate() {
        let ckpt = test_ckpt(false);
        let img = scene_image(15, 10);
        let cmap = count_map(&img, &ckpt).unwrap();
        for m in 1..=5 {
            let mut sum = 0.0;
            for gi in 0..m {
                for gj in 0..m {
                    sum += cell_mass(&cmap, m, gi, gj);
                }
            }
            assert!(
                (sum - cmap.total()).abs() < 1e-9,
                "m={m}: {sum} vs {}",
                cmap.total()
            );
        }
    }

    #[test]
    fn forced_density_head_probabilities_are_valid() {
        let head = forced_density_head(5, DensityLabel::Dense);
        let z = array![0.3, -0.2, 0.9, 0.0, 1.4];
        let p = head.probabilities(&z);
        assert!((p.sum() - 1.0).abs() < 1e-12);
        assert_eq!(head.predict(&z), 2);
    }
}
