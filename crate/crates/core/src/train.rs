//! The three training stages.
//!
//! Stage 1 pre-trains encoder and sort head on ranked triplets through the
//! blackbox rank gradient. Stage 2 freezes the encoder, filters noisy count
//! rows against per-category prototypes, and fits the linear count head.
//! Stage 3 fits the density classifier, also on frozen features. Stages 2
//! and 3 never touch encoder weights; the acceptance suite checks this with
//! a checksum.

use std::collections::BTreeMap;
use std::path::Path;

use image::RgbImage;
use ndarray::{Array1, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::{self, CountRow, DataLayout, DensityRow, ManifestError, SortingRow};
use crate::models::{
    global_pool, ChannelStats, Checkpoint, ClassHead, Encoder, EncoderConfig, EncoderGrads,
    ModelError, ScalarHead,
};
use crate::opt::{Adam, EncoderOpt, ScalarAdam};
use crate::ranking::{
    feature_similarity, feature_similarity_backward, label_similarity, pred_similarity,
    pred_similarity_backward, sort_loss, sort_loss_backward, RankError,
};

/// Heads train at `lr`; when the encoder is trainable it moves slower by
/// this factor.
const ENCODER_LR_RATIO: f64 = 0.1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("manifest empty: {0}")]
    ManifestEmpty(String),
    #[error("non-finite loss in stage {stage} at epoch {epoch}: {value}")]
    NonFiniteLoss {
        stage: String,
        epoch: usize,
        value: f64,
    },
    #[error("no rows for category {0}")]
    EmptyCategory(u32),
    #[error("image {path}: {msg}")]
    BadImage { path: String, msg: String },
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Rank(#[from] RankError),
}

/// Hyperparameters for one training stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Weight of the feature-space sorting term.
    pub lambda_weight: f64,
    /// Blackbox rank-gradient perturbation scale.
    pub lambda_bb: f64,
    /// Stages 2-3 only; sorting pre-training always trains the encoder.
    pub freeze_encoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 30,
            batch_size: 8,
            seed: 7,
            lambda_weight: 5.0,
            lambda_bb: 0.5,
            freeze_encoder: true,
        }
    }
}

impl TrainConfig {
    /// Defaults suited to the full-batch linear stages (2-3).
    pub fn head_stage() -> Self {
        Self {
            lr: 0.02,
            epochs: 800,
            batch_size: usize::MAX,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.lr <= 0.0 || self.epochs == 0 || self.batch_size == 0 || self.lambda_bb <= 0.0 {
            return Err(TrainError::NonFiniteLoss {
                stage: "config".into(),
                epoch: 0,
                value: f64::NAN,
            });
        }
        Ok(())
    }
}

/// One line of the training-curve log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRow {
    pub stage: String,
    pub epoch: usize,
    pub loss: f64,
    pub metric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    fn push(&mut self, stage: &str, epoch: usize, loss: f64, metric: f64) {
        self.rows.push(LogRow {
            stage: stage.into(),
            epoch,
            loss,
            metric,
        });
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.rows.first().map(|r| r.loss)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }

    pub fn save(&self, path: &Path) -> Result<(), ManifestError> {
        manifest::write_all(path, &self.rows)
    }
}

/// Images referenced by a manifest, loaded once and pre-resized to the
/// encoder input resolution.
struct ImageBank {
    images: Vec<RgbImage>,
    by_path: BTreeMap<String, usize>,
}

impl ImageBank {
    fn load<'a>(
        layout: &DataLayout,
        paths: impl IntoIterator<Item = &'a str>,
        input_size: u32,
    ) -> Result<Self, TrainError> {
        let mut images = Vec::new();
        let mut by_path = BTreeMap::new();
        for path in paths {
            if by_path.contains_key(path) {
                continue;
            }
            let img = load_rgb(layout, path)?;
            let img = if img.width() == input_size && img.height() == input_size {
                img
            } else {
                image::imageops::resize(
                    &img,
                    input_size,
                    input_size,
                    image::imageops::FilterType::Triangle,
                )
            };
            by_path.insert(path.to_string(), images.len());
            images.push(img);
        }
        Ok(Self { images, by_path })
    }

    fn index(&self, path: &str) -> usize {
        self.by_path[path]
    }
}

pub fn load_rgb(layout: &DataLayout, rel: &str) -> Result<RgbImage, TrainError> {
    let full = layout.resolve(rel);
    let img = image::open(&full).map_err(|e| TrainError::BadImage {
        path: full.display().to_string(),
        msg: e.to_string(),
    })?;
    Ok(img.to_rgb8())
}

/// Result of one triplet's forward/backward pass.
struct TripletPass {
    loss: f64,
    ordered: bool,
    grads: EncoderGrads,
    d_sort_w: Array1<f64>,
    d_sort_b: f64,
}

/// Luminance step that counts as foreground against the local backdrop;
/// sits above background noise and object-interior speckle.
const PROXY_CONTRAST: f64 = 0.15;

/// Label-free granularity statistic: squared edge mass over ink mass of
/// the luminance plane. For disk-like foreground shapes, perimeter² over
/// area grows with the number of distinct objects and cancels their size,
/// so unlike raw ink it ranks a few large objects below many small ones.
/// Computed on the native image; downsampling smears thin edges away.
fn count_proxy(img: &RgbImage) -> f64 {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut lum = vec![0f64; w * h];
    for (i, p) in img.pixels().enumerate() {
        lum[i] = (p[0] as f64 + p[1] as f64 + p[2] as f64) / (3.0 * 255.0);
    }
    let mut sorted = lum.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = sorted[sorted.len() / 2];
    let ink = lum
        .iter()
        .filter(|&&l| (l - median).abs() > PROXY_CONTRAST)
        .count() as f64;
    let mut edge = 0f64;
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w && (lum[y * w + x + 1] - lum[y * w + x]).abs() > PROXY_CONTRAST {
                edge += 1.0;
            }
            if y + 1 < h && (lum[(y + 1) * w + x] - lum[y * w + x]).abs() > PROXY_CONTRAST {
                edge += 1.0;
            }
        }
    }
    (edge.max(1.0).powi(2) / ink.max(1.0)).ln()
}

/// Solve the symmetric positive-definite system `a x = b` by Gaussian
/// elimination with partial pivoting. Sized for head dimensions, not BLAS.
fn solve_sym(mut a: Array2<f64>, mut b: Array1<f64>) -> Array1<f64> {
    let n = b.len();
    for col in 0..n {
        let mut pivot = col;
        for row in col + 1..n {
            if a[[row, col]].abs() > a[[pivot, col]].abs() {
                pivot = row;
            }
        }
        if pivot != col {
            for k in 0..n {
                let tmp = a[[col, k]];
                a[[col, k]] = a[[pivot, k]];
                a[[pivot, k]] = tmp;
            }
            b.swap(col, pivot);
        }
        let diag = a[[col, col]];
        if diag.abs() < 1e-12 {
            continue;
        }
        for row in col + 1..n {
            let factor = a[[row, col]] / diag;
            for k in col..n {
                a[[row, k]] -= factor * a[[col, k]];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = Array1::zeros(n);
    for col in (0..n).rev() {
        let mut acc = b[col];
        for k in col + 1..n {
            acc -= a[[col, k]] * x[k];
        }
        x[col] = if a[[col, col]].abs() < 1e-12 {
            0.0
        } else {
            acc / a[[col, col]]
        };
    }
    x
}

/// Point the scoring direction at generic content energy before sorting
/// training starts. The sorting loss compares rank rows of similarity
/// matrices, so it cannot tell a score ordering from its mirror image:
/// each triplet group settles into whichever orientation is nearest at
/// initialization and receives no gradient afterwards. A shared, roughly
/// count-monotone starting direction puts every group on the same side,
/// the role a generically pre-trained backbone plays at full scale, and
/// training then refines that single orientation instead of freezing a
/// random mixture of mirrored groups.
fn seed_orientation(
    head: &mut ScalarHead,
    encoder: &Encoder,
    proxy: &[f64],
    tensors: &[Array3<f64>],
) -> Result<(), TrainError> {
    let n = tensors.len();
    let dim = head.w.len();
    if n < 3 {
        return Ok(());
    }
    let mut zs = Array2::zeros((n, dim));
    for i in 0..n {
        let (f, _) = encoder.forward_array(&tensors[i])?;
        zs.row_mut(i).assign(&global_pool(&f));
    }
    let energy = Array1::from_iter(proxy.iter().cloned());
    let e_mean = energy.mean().unwrap_or(0.0);
    let e_sd = energy
        .mapv(|v| (v - e_mean).powi(2))
        .mean()
        .unwrap_or(0.0)
        .sqrt();
    if e_sd < 1e-12 {
        return Ok(());
    }
    let target = energy.mapv(|v| (v - e_mean) / e_sd);
    let mu = zs.mean_axis(Axis(0)).unwrap();
    let centered = &zs - &mu;
    let mut gram = centered.t().dot(&centered);
    let trace: f64 = (0..dim).map(|d| gram[[d, d]]).sum();
    let ridge = 1e-3 * (trace / dim as f64).max(1e-12);
    for d in 0..dim {
        gram[[d, d]] += ridge;
    }
    let w = solve_sym(gram, centered.t().dot(&target));
    let norm = w.dot(&w).sqrt();
    if norm > 1e-9 {
        head.w = w / norm;
        head.b = -head.w.dot(&mu);
    }
    Ok(())
}

/// Epochs of content-energy regression run before the sorting epochs.
const WARMUP_EPOCHS: usize = 16;

/// Optimizer rate for the energy pretext, independent of the refinement
/// rate so a gentle sorting schedule does not starve the warmup.
const WARMUP_LR: f64 = 0.01;

/// Stage-1 warmup: jointly fit encoder and scoring head to the
/// standardized granularity proxy. The sorting objective compares rank
/// rows of similarity matrices, so it cannot tell a score ordering from
/// its mirror image: each triplet group would settle into whichever
/// orientation is nearest at initialization and never reconcile with the
/// others. Starting from scores that rise with object granularity puts
/// every group on the same side, the role a generically pre-trained
/// backbone plays at full scale; the sorting epochs then refine one
/// global orientation.
fn proxy_warmup(
    encoder: &mut Encoder,
    head: &mut ScalarHead,
    proxy: &[f64],
    tensors: &[Array3<f64>],
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    let n = tensors.len();
    if n < 3 {
        return Ok(());
    }
    let mean = proxy.iter().sum::<f64>() / n as f64;
    let sd = (proxy.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    if sd < 1e-12 {
        return Ok(());
    }
    let targets: Vec<f64> = proxy.iter().map(|e| (e - mean) / sd).collect();

    let mut enc_opt = EncoderOpt::new(encoder, WARMUP_LR);
    let mut w_opt = Adam::new(WARMUP_LR, head.w.raw_dim());
    let mut b_opt = ScalarAdam::new(WARMUP_LR);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x77AB);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..WARMUP_EPOCHS {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size.min(n)) {
            let mut grads = EncoderGrads::zeros_like(encoder);
            let mut d_w = Array1::zeros(head.w.len());
            let mut d_b = 0.0;
            for &i in batch {
                let (f, cache) = encoder.forward_array(&tensors[i])?;
                let z = global_pool(&f);
                let pred = head.forward(&z);
                let d_pred = 2.0 * (pred - targets[i]);
                let (dw, db, dz) = head.backward(&z, d_pred);
                d_w += &dw;
                d_b += db;
                let (c, h, w) = f.values.dim();
                let cell = 1.0 / (h * w) as f64;
                let mut d_feat = Array3::zeros((c, h, w));
                for ci in 0..c {
                    let g = dz[ci] * cell;
                    d_feat.index_axis_mut(Axis(0), ci).mapv_inplace(|_| g);
                }
                grads.add(&encoder.backward(&cache, &d_feat));
            }
            let scale = 1.0 / batch.len() as f64;
            grads.scale(scale);
            d_w *= scale;
            d_b *= scale;
            enc_opt.step(encoder, &grads);
            w_opt.step(&mut head.w, &d_w);
            b_opt.step(&mut head.b, d_b);
        }
    }
    Ok(())
}

fn triplet_pass(
    encoder: &Encoder,
    sort_head: &ScalarHead,
    inputs: [&Array3<f64>; 3],
    lambda_weight: f64,
    lambda_bb: f64,
) -> Result<TripletPass, TrainError> {
    let mut pooled = Vec::with_capacity(3);
    let mut caches = Vec::with_capacity(3);
    let mut grids = Vec::with_capacity(3);
    for x in inputs {
        let (f, cache) = encoder.forward_array(x)?;
        pooled.push(global_pool(&f));
        grids.push(f.values.dim());
        caches.push(cache);
    }
    let preds: Vec<f64> = pooled.iter().map(|z| sort_head.forward(z)).collect();
    let ordered = preds[0] < preds[1] && preds[1] < preds[2];

    let s_y = label_similarity(&[0, 1, 2]);
    let s_yhat = pred_similarity(&preds);
    let s_z = feature_similarity(&pooled)?;
    let loss = sort_loss(&s_y, &s_yhat, &s_z, lambda_weight)?;
    let back = sort_loss_backward(&s_y, &s_yhat, &s_z, lambda_weight, lambda_bb)?;
    let d_preds = pred_similarity_backward(&preds, &back.d_s_yhat);
    let d_z_feat = feature_similarity_backward(&pooled, &back.d_s_z)?;

    let dim = sort_head.w.len();
    let mut d_sort_w = Array1::zeros(dim);
    let mut d_sort_b = 0.0;
    let mut grads = EncoderGrads::zeros_like(encoder);
    for m in 0..3 {
        let (dw, db, dz_head) = sort_head.backward(&pooled[m], d_preds[m]);
        d_sort_w += &dw;
        d_sort_b += db;
        let dz_total = &dz_head + &d_z_feat[m];
        let (c, h, w) = grids[m];
        let cell_scale = 1.0 / (h * w) as f64;
        let mut d_feat = Array3::zeros((c, h, w));
        for ci in 0..c {
            let g = dz_total[ci] * cell_scale;
            for y in 0..h {
                for x in 0..w {
                    d_feat[(ci, y, x)] = g;
                }
            }
        }
        grads.add(&encoder.backward(&caches[m], &d_feat));
    }
    Ok(TripletPass {
        loss: loss.total,
        ordered,
        grads,
        d_sort_w,
        d_sort_b,
    })
}

/// Stage 1: sorting pre-training over ranked triplets.
pub fn pretrain_sorting(
    layout: &DataLayout,
    encoder_cfg: &EncoderConfig,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainLog), TrainError> {
    cfg.validate()?;
    let rows = manifest::load_sorting(&layout.sorting_manifest())?;
    pretrain_sorting_rows(layout, &rows, encoder_cfg, cfg)
}

pub fn pretrain_sorting_rows(
    layout: &DataLayout,
    rows: &[SortingRow],
    encoder_cfg: &EncoderConfig,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainLog), TrainError> {
    cfg.validate()?;
    if rows.is_empty() {
        return Err(TrainError::ManifestEmpty(
            layout.sorting_manifest().display().to_string(),
        ));
    }
    let bank = ImageBank::load(
        layout,
        rows.iter().flat_map(|r| r.paths.iter().map(|p| p.as_str())),
        encoder_cfg.input_size,
    )?;
    let norm = ChannelStats::from_images(bank.images.iter());
    // Normalize once; triplets index into the shared tensor bank.
    let tensors: Vec<Array3<f64>> = bank
        .images
        .iter()
        .map(|img| crate::models::preprocess(img, encoder_cfg.input_size, &norm))
        .collect();
    let triplets: Vec<[usize; 3]> = rows
        .iter()
        .map(|r| {
            let mut idx = [0usize; 3];
            for (slot, path) in r.paths.iter().enumerate() {
                // ranks[slot] orders members (fewer, reference, more).
                idx[r.ranks[slot] as usize] = bank.index(path);
            }
            idx
        })
        .collect();

    let mut encoder = Encoder::new(encoder_cfg)?;
    let mut sort_head = ScalarHead::new(encoder_cfg.feature_dim(), cfg.seed ^ 0x5157);
    let mut proxy = vec![0f64; bank.images.len()];
    for (path, &idx) in &bank.by_path {
        proxy[idx] = count_proxy(&load_rgb(layout, path)?);
    }
    seed_orientation(&mut sort_head, &encoder, &proxy, &tensors)?;
    proxy_warmup(&mut encoder, &mut sort_head, &proxy, &tensors, cfg)?;
    let mut enc_opt = EncoderOpt::new(&encoder, cfg.lr * ENCODER_LR_RATIO);
    let mut w_opt = Adam::new(cfg.lr, sort_head.w.raw_dim());
    let mut b_opt = ScalarAdam::new(cfg.lr);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..triplets.len()).collect();
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_ordered = 0usize;
        for batch in order.chunks(cfg.batch_size.min(order.len())) {
            let mut grads = EncoderGrads::zeros_like(&encoder);
            let mut d_w = Array1::zeros(sort_head.w.len());
            let mut d_b = 0.0;
            for &t in batch {
                let [a, b, c] = triplets[t];
                let pass = triplet_pass(
                    &encoder,
                    &sort_head,
                    [&tensors[a], &tensors[b], &tensors[c]],
                    cfg.lambda_weight,
                    cfg.lambda_bb,
                )?;
                epoch_loss += pass.loss;
                epoch_ordered += pass.ordered as usize;
                grads.add(&pass.grads);
                d_w += &pass.d_sort_w;
                d_b += pass.d_sort_b;
            }
            let scale = 1.0 / batch.len() as f64;
            grads.scale(scale);
            d_w *= scale;
            d_b *= scale;
            enc_opt.step(&mut encoder, &grads);
            w_opt.step(&mut sort_head.w, &d_w);
            b_opt.step(&mut sort_head.b, d_b);
        }
        let mean_loss = epoch_loss / triplets.len() as f64;
        if !mean_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                stage: "sort".into(),
                epoch,
                value: mean_loss,
            });
        }
        log.push("sort", epoch, mean_loss, epoch_ordered as f64 / triplets.len() as f64);
    }
    let mut ckpt = Checkpoint {
        encoder,
        norm,
        sort_head: Some(sort_head),
        count_head: None,
        density_head: None,
    };
    // Keep deterministic field state even when untouched downstream.
    ckpt.count_head = None;
    Ok((ckpt, log))
}

/// Pooled feature for every row path, in row order.
fn embed_paths<'a>(
    layout: &DataLayout,
    ckpt: &Checkpoint,
    paths: impl Iterator<Item = &'a str>,
) -> Result<Vec<Array1<f64>>, TrainError> {
    let mut feats = Vec::new();
    let mut cache: BTreeMap<String, Array1<f64>> = BTreeMap::new();
    for path in paths {
        if let Some(z) = cache.get(path) {
            feats.push(z.clone());
            continue;
        }
        let img = load_rgb(layout, path)?;
        let f = ckpt.features(&img)?;
        let z = global_pool(&f);
        cache.insert(path.to_string(), z.clone());
        feats.push(z);
    }
    Ok(feats)
}

/// Per-category exact feature means (Eq. prototype table).
#[derive(Debug, Clone)]
pub struct Prototype {
    pub mean: Array1<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, Default)]
pub struct PrototypeTable {
    pub entries: BTreeMap<u32, Prototype>,
}

/// Stage 2a: per-category prototypes over pooled frozen features.
pub fn compute_prototypes(
    layout: &DataLayout,
    rows: &[CountRow],
    ckpt: &Checkpoint,
) -> Result<PrototypeTable, TrainError> {
    if rows.is_empty() {
        return Err(TrainError::ManifestEmpty("count manifest".into()));
    }
    let feats = embed_paths(layout, ckpt, rows.iter().map(|r| r.path.as_str()))?;
    Ok(prototypes_from_features(rows, &feats))
}

pub fn prototypes_from_features(rows: &[CountRow], feats: &[Array1<f64>]) -> PrototypeTable {
    let mut sums: BTreeMap<u32, (Array1<f64>, usize)> = BTreeMap::new();
    for (row, z) in rows.iter().zip(feats) {
        let entry = sums
            .entry(row.prompt_count)
            .or_insert_with(|| (Array1::zeros(z.len()), 0));
        entry.0 += z;
        entry.1 += 1;
    }
    PrototypeTable {
        entries: sums
            .into_iter()
            .map(|(c, (sum, n))| {
                (
                    c,
                    Prototype {
                        mean: sum / n as f64,
                        n,
                    },
                )
            })
            .collect(),
    }
}

fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.dot(b) / (na * nb)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FilterReport {
    /// category -> (kept, dropped)
    pub per_category: BTreeMap<u32, (usize, usize)>,
    pub kept: usize,
    pub dropped: usize,
}

/// Stage 2b: keep a row iff its feature is at least as close (cosine) to its
/// own category prototype as to every other. Zero-count rows are exempt.
pub fn filter_outliers(
    layout: &DataLayout,
    rows: &[CountRow],
    ckpt: &Checkpoint,
    table: &PrototypeTable,
) -> Result<(Vec<CountRow>, FilterReport), TrainError> {
    let feats = embed_paths(layout, ckpt, rows.iter().map(|r| r.path.as_str()))?;
    filter_from_features(rows, &feats, table)
}

pub fn filter_from_features(
    rows: &[CountRow],
    feats: &[Array1<f64>],
    table: &PrototypeTable,
) -> Result<(Vec<CountRow>, FilterReport), TrainError> {
    let mut out = Vec::with_capacity(rows.len());
    let mut report = FilterReport::default();
    for (row, z) in rows.iter().zip(feats) {
        let keep = if row.prompt_count == 0 {
            true
        } else {
            let own = table
                .entries
                .get(&row.prompt_count)
                .ok_or(TrainError::EmptyCategory(row.prompt_count))?;
            let own_sim = cosine(z, &own.mean);
            table
                .entries
                .iter()
                .filter(|(&c, _)| c != row.prompt_count)
                .all(|(_, proto)| own_sim >= cosine(z, &proto.mean))
        };
        let slot = report.per_category.entry(row.prompt_count).or_insert((0, 0));
        if keep {
            slot.0 += 1;
            report.kept += 1;
        } else {
            slot.1 += 1;
            report.dropped += 1;
        }
        out.push(CountRow {
            kept: keep,
            ..row.clone()
        });
    }
    Ok((out, report))
}

fn standardize(mut xs: Vec<Array1<f64>>) -> (Vec<Array1<f64>>, Array1<f64>, Array1<f64>) {
    let n = xs.len() as f64;
    let dim = xs[0].len();
    let mut mean = Array1::zeros(dim);
    for x in &xs {
        mean += x;
    }
    mean /= n;
    let mut var = Array1::<f64>::zeros(dim);
    for x in &xs {
        let d = x - &mean;
        var += &(&d * &d);
    }
    var /= n;
    let std = var.mapv(|v| v.sqrt().max(1e-8));
    for x in xs.iter_mut() {
        *x = (&*x - &mean) / &std;
    }
    (xs, mean, std)
}

/// Stage 2c: fit the count head to prompt counts by MSE. With
/// `freeze_encoder` the encoder is untouched and the fit is a linear probe
/// over cached features; otherwise the whole network fine-tunes (the
/// ablation mode).
pub fn train_count(
    layout: &DataLayout,
    rows: &[CountRow],
    ckpt: &Checkpoint,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainLog), TrainError> {
    cfg.validate()?;
    let used: Vec<&CountRow> = rows.iter().filter(|r| r.kept).collect();
    if used.is_empty() {
        return Err(TrainError::ManifestEmpty("count manifest (kept rows)".into()));
    }
    let targets: Vec<f64> = used.iter().map(|r| r.prompt_count as f64).collect();
    if cfg.freeze_encoder {
        let feats = embed_paths(layout, ckpt, used.iter().map(|r| r.path.as_str()))?;
        let (head, log) = fit_linear_probe(&feats, &targets, cfg, "count")?;
        let mut out = ckpt.clone();
        out.count_head = Some(head);
        Ok((out, log))
    } else {
        finetune_count(layout, &used, &targets, ckpt, cfg)
    }
}

/// Full-batch Adam on standardized features/targets, folded back into raw
/// units afterward.
fn fit_linear_probe(
    feats: &[Array1<f64>],
    targets: &[f64],
    cfg: &TrainConfig,
    stage: &str,
) -> Result<(ScalarHead, TrainLog), TrainError> {
    let (xs, x_mean, x_std) = standardize(feats.to_vec());
    let n = targets.len() as f64;
    let t_mean = targets.iter().sum::<f64>() / n;
    let t_var = targets.iter().map(|t| (t - t_mean).powi(2)).sum::<f64>() / n;
    let t_std = t_var.sqrt().max(1e-8);
    let ts: Vec<f64> = targets.iter().map(|t| (t - t_mean) / t_std).collect();

    let dim = xs[0].len();
    let mut w = Array1::<f64>::zeros(dim);
    let mut b = 0.0f64;
    let mut w_opt = Adam::new(cfg.lr, w.raw_dim());
    let mut b_opt = ScalarAdam::new(cfg.lr);
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let mut d_w = Array1::<f64>::zeros(dim);
        let mut d_b = 0.0;
        let mut loss = 0.0;
        let mut mae = 0.0;
        for (x, &t) in xs.iter().zip(&ts) {
            let pred = w.dot(x) + b;
            let r = pred - t;
            loss += r * r;
            mae += r.abs() * t_std;
            d_w.scaled_add(2.0 * r / n, x);
            d_b += 2.0 * r / n;
        }
        loss /= n;
        mae /= n;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                stage: stage.into(),
                epoch,
                value: loss,
            });
        }
        w_opt.step(&mut w, &d_w);
        b_opt.step(&mut b, d_b);
        log.push(stage, epoch, loss * t_std * t_std, mae);
    }
    // Fold the standardization into raw-space weights:
    // t = t_mean + t_std * (w . (x - x_mean)/x_std + b).
    let w_raw = Array1::from_shape_fn(dim, |d| w[d] * t_std / x_std[d]);
    let b_raw = t_mean + t_std * b - w_raw.dot(&x_mean);
    Ok((ScalarHead { w: w_raw, b: b_raw }, log))
}

fn finetune_count(
    layout: &DataLayout,
    rows: &[&CountRow],
    targets: &[f64],
    ckpt: &Checkpoint,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainLog), TrainError> {
    let input = ckpt.encoder.cfg.input_size;
    let bank = ImageBank::load(layout, rows.iter().map(|r| r.path.as_str()), input)?;
    let tensors: Vec<Array3<f64>> = bank
        .images
        .iter()
        .map(|img| crate::models::preprocess(img, input, &ckpt.norm))
        .collect();
    let row_tensor: Vec<usize> = rows.iter().map(|r| bank.index(&r.path)).collect();

    let mut encoder = ckpt.encoder.clone();
    let dim = encoder.cfg.feature_dim();
    // Warm-start the head with a frozen probe so fine-tuning competes from
    // the same starting point.
    let feats: Vec<Array1<f64>> = tensors
        .iter()
        .map(|x| Ok::<_, TrainError>(global_pool(&encoder.forward_array(x)?.0)))
        .collect::<Result<_, _>>()?;
    let row_feats: Vec<Array1<f64>> = row_tensor.iter().map(|&i| feats[i].clone()).collect();
    let probe_cfg = TrainConfig {
        epochs: 200,
        ..TrainConfig::head_stage()
    };
    let (mut head, _) = fit_linear_probe(&row_feats, targets, &probe_cfg, "count")?;

    let mut enc_opt = EncoderOpt::new(&encoder, cfg.lr * ENCODER_LR_RATIO);
    let mut w_opt = Adam::new(cfg.lr, head.w.raw_dim());
    let mut b_opt = ScalarAdam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut log = TrainLog::default();
    let batch_size = cfg.batch_size.min(order.len()).max(1);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_mae = 0.0;
        for batch in order.chunks(batch_size) {
            let mut grads = EncoderGrads::zeros_like(&encoder);
            let mut d_w = Array1::<f64>::zeros(dim);
            let mut d_b = 0.0;
            for &ri in batch {
                let x = &tensors[row_tensor[ri]];
                let (f, cache) = encoder.forward_array(x)?;
                let z = global_pool(&f);
                let pred = head.forward(&z);
                let r = pred - targets[ri];
                epoch_loss += r * r;
                epoch_mae += r.abs();
                let d_pred = 2.0 * r;
                let (dw, db, dz) = head.backward(&z, d_pred);
                d_w += &dw;
                d_b += db;
                let (c, h, w2) = f.values.dim();
                let cell = 1.0 / (h * w2) as f64;
                let mut d_feat = Array3::zeros((c, h, w2));
                for ci in 0..c {
                    let g = dz[ci] * cell;
                    for y in 0..h {
                        for x2 in 0..w2 {
                            d_feat[(ci, y, x2)] = g;
                        }
                    }
                }
                grads.add(&encoder.backward(&cache, &d_feat));
            }
            let scale = 1.0 / batch.len() as f64;
            grads.scale(scale);
            d_w *= scale;
            d_b *= scale;
            enc_opt.step(&mut encoder, &grads);
            w_opt.step(&mut head.w, &d_w);
            b_opt.step(&mut head.b, d_b);
        }
        let loss = epoch_loss / rows.len() as f64;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                stage: "count-finetune".into(),
                epoch,
                value: loss,
            });
        }
        log.push("count-finetune", epoch, loss, epoch_mae / rows.len() as f64);
    }
    let mut out = ckpt.clone();
    out.encoder = encoder;
    out.count_head = Some(head);
    Ok((out, log))
}

/// Stage 3: density classifier on frozen pooled features.
pub fn train_density(
    layout: &DataLayout,
    rows: &[DensityRow],
    ckpt: &Checkpoint,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainLog), TrainError> {
    cfg.validate()?;
    if rows.is_empty() {
        return Err(TrainError::ManifestEmpty("density manifest".into()));
    }
    let feats = embed_paths(layout, ckpt, rows.iter().map(|r| r.path.as_str()))?;
    let labels: Vec<usize> = rows.iter().map(|r| r.density_label as usize).collect();
    let (head, log) = fit_density_head(&feats, &labels, cfg)?;
    let mut out = ckpt.clone();
    out.density_head = Some(head);
    Ok((out, log))
}

pub fn fit_density_head(
    feats: &[Array1<f64>],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<(ClassHead, TrainLog), TrainError> {
    let (xs, _, _) = standardize(feats.to_vec());
    let dim = xs[0].len();
    let n = xs.len() as f64;
    // Standardization cannot ride along in a softmax head, so fold it here:
    // classify standardized features computed with stats kept inside the
    // head weights.
    let (raw_xs, x_mean, x_std) = {
        let mut mean = Array1::zeros(dim);
        for x in feats {
            mean += x;
        }
        mean /= n;
        let mut var = Array1::<f64>::zeros(dim);
        for x in feats {
            let d = x - &mean;
            var += &(&d * &d);
        }
        var /= n;
        (xs, mean, var.mapv(|v| v.sqrt().max(1e-8)))
    };
    let mut head = ClassHead {
        w: ndarray::Array2::zeros((3, dim)),
        b: Array1::zeros(3),
    };
    let mut w_opt = Adam::new(cfg.lr, head.w.raw_dim());
    let mut b_opt = Adam::new(cfg.lr, head.b.raw_dim());
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let mut d_w = ndarray::Array2::<f64>::zeros((3, dim));
        let mut d_b = Array1::<f64>::zeros(3);
        let mut loss = 0.0;
        let mut correct = 0usize;
        for (x, &label) in raw_xs.iter().zip(labels) {
            let (l, dw, db, _) = head.cross_entropy(x, label);
            loss += l;
            if head.predict(x) == label {
                correct += 1;
            }
            d_w += &dw;
            d_b += &db;
        }
        loss /= n;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                stage: "density".into(),
                epoch,
                value: loss,
            });
        }
        d_w /= n;
        d_b /= n;
        w_opt.step(&mut head.w, &d_w);
        b_opt.step(&mut head.b, &d_b);
        log.push("density", epoch, loss, correct as f64 / n);
    }
    // Fold standardization into the affine head: W x_std + b where
    // x_std = (x - mean)/std.
    let mut w_raw = ndarray::Array2::<f64>::zeros((3, dim));
    let mut b_raw = head.b.clone();
    for k in 0..3 {
        for d in 0..dim {
            w_raw[(k, d)] = head.w[(k, d)] / x_std[d];
            b_raw[k] -= head.w[(k, d)] * x_mean[d] / x_std[d];
        }
    }
    Ok((
        ClassHead {
            w: w_raw,
            b: b_raw,
        },
        log,
    ))
}
