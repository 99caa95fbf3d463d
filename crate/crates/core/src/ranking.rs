//! Rank-alignment losses over similarity matrices.
//!
//! Images in a ranked triplet are compared through three n×n similarity
//! matrices: label space (negated absolute label differences), prediction
//! space (same construction on the scalar head outputs), and feature space
//! (cosine). The sorting loss penalizes disagreement between the rank order
//! of each label-space row and the corresponding prediction/feature rows.
//!
//! Ranking itself (`rk`) is piecewise constant, so its "gradient" is the
//! blackbox-solver interpolation: perturb the input along the upstream
//! signal, re-rank, and divide the rank change by the perturbation scale.

use ndarray::{Array1, Array2};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RankError {
    #[error("similarity inputs must share one square shape, got {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("interpolation strength must be positive, got {0}")]
    BadLambda(f64),
    #[error("feature vector {0} has zero norm")]
    ZeroVector(usize),
}

/// Which space a similarity matrix was computed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimilaritySpace {
    Label,
    Prediction,
    Feature,
}

/// Symmetric n×n similarity matrix with maximal self-similarity on the
/// diagonal (0 for label/prediction space, 1 for feature space).
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    pub values: Array2<f64>,
    pub space: SimilaritySpace,
}

impl SimilarityMatrix {
    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.values.row(i).to_vec()
    }
}

/// Ranks of a vector's entries: 1 for the largest entry, n for the smallest.
/// Descending ranks in 1..=n; tied entries share their average rank, so
/// the sum is always n(n+1)/2.
#[derive(Debug, Clone, PartialEq)]
pub struct RankVector {
    pub ranks: Vec<f64>,
}

impl RankVector {
    pub fn as_f64(&self) -> Vec<f64> {
        self.ranks.clone()
    }
}

/// `[S]_{ij} = -|y_i - y_j|` over integer rank labels.
pub fn label_similarity(labels: &[u32]) -> SimilarityMatrix {
    assert!(labels.len() >= 2, "need at least two labels");
    let n = labels.len();
    let values = Array2::from_shape_fn((n, n), |(i, j)| {
        -((labels[i] as f64) - (labels[j] as f64)).abs()
    });
    SimilarityMatrix {
        values,
        space: SimilaritySpace::Label,
    }
}

/// `[S]_{ij} = -|y^_i - y^_j|` over the scalar head outputs.
pub fn pred_similarity(preds: &[f64]) -> SimilarityMatrix {
    assert!(preds.len() >= 2, "need at least two predictions");
    let n = preds.len();
    let values = Array2::from_shape_fn((n, n), |(i, j)| -(preds[i] - preds[j]).abs());
    SimilarityMatrix {
        values,
        space: SimilaritySpace::Prediction,
    }
}

/// Pairwise cosine similarity between feature vectors; diagonal is exactly 1.
pub fn feature_similarity(features: &[Array1<f64>]) -> Result<SimilarityMatrix, RankError> {
    assert!(features.len() >= 2, "need at least two feature vectors");
    let n = features.len();
    let mut norms = Vec::with_capacity(n);
    for (i, z) in features.iter().enumerate() {
        let norm = z.dot(z).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(RankError::ZeroVector(i));
        }
        norms.push(norm);
    }
    let mut values = Array2::zeros((n, n));
    for i in 0..n {
        values[(i, i)] = 1.0;
        for j in (i + 1)..n {
            let c = features[i].dot(&features[j]) / (norms[i] * norms[j]);
            values[(i, j)] = c;
            values[(j, i)] = c;
        }
    }
    Ok(SimilarityMatrix {
        values,
        space: SimilaritySpace::Feature,
    })
}

/// Rank the entries of `v` descending: the largest entry gets rank 1.
/// Tied entries share the average of the positions they span, the
/// fractional-rank convention. An index tie-break would instead impose an
/// arbitrary strict order on genuinely tied label entries, which turns
/// into a one-sided margin demand on the untied entries ranked against
/// them; averaging keeps ties orderless and the loss symmetric around
/// them.
pub fn rk(v: &[f64]) -> RankVector {
    assert!(!v.is_empty(), "cannot rank an empty vector");
    assert!(v.iter().all(|x| x.is_finite()), "rank input must be finite");
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap().then(a.cmp(&b)));
    let mut ranks = vec![0f64; v.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && v[order[end]] == v[order[start]] {
            end += 1;
        }
        // Positions are 1-based; a run of equals spans start+1..=end.
        let avg = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = avg;
        }
        start = end;
    }
    RankVector { ranks }
}

/// Blackbox interpolation gradient of `rk` at `v` for the given upstream
/// signal: `-(rk(v) - rk(v + lambda_bb * upstream)) / lambda_bb`.
///
/// The returned vector is an informative descent direction despite `rk`
/// being piecewise constant: it is zero exactly when the perturbation does
/// not change any rank.
pub fn rk_grad(v: &[f64], upstream: &[f64], lambda_bb: f64) -> Result<Vec<f64>, RankError> {
    if !(lambda_bb > 0.0) || !lambda_bb.is_finite() {
        return Err(RankError::BadLambda(lambda_bb));
    }
    assert_eq!(v.len(), upstream.len(), "upstream length mismatch");
    let base = rk(v);
    let perturbed: Vec<f64> = v
        .iter()
        .zip(upstream)
        .map(|(&x, &u)| x + lambda_bb * u)
        .collect();
    let shifted = rk(&perturbed);
    Ok(base
        .ranks
        .iter()
        .zip(&shifted.ranks)
        .map(|(&a, &b)| -(a - b) / lambda_bb)
        .collect())
}

/// Value of the combined sorting loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SortLoss {
    pub total: f64,
    pub l_y: f64,
    pub l_z: f64,
}

fn row_rank_sq(target: &SimilarityMatrix, other: &SimilarityMatrix) -> f64 {
    let n = target.n();
    let mut sum = 0.0;
    for i in 0..n {
        let rt = rk(&target.row(i));
        let ro = rk(&other.row(i));
        for (a, b) in rt.ranks.iter().zip(&ro.ranks) {
            let d = a - b;
            sum += d * d;
        }
    }
    sum
}

fn check_shapes(
    s_y: &SimilarityMatrix,
    s_yhat: &SimilarityMatrix,
    s_z: &SimilarityMatrix,
) -> Result<(), RankError> {
    let (a, b) = (s_y.values.nrows(), s_y.values.ncols());
    for m in [s_yhat, s_z] {
        let (c, d) = (m.values.nrows(), m.values.ncols());
        if (a, b) != (c, d) || a != b {
            return Err(RankError::ShapeMismatch(a, b, c, d));
        }
    }
    Ok(())
}

/// Row-wise squared rank disagreement of predictions and features against
/// the label matrix: `l_y + lambda_weight * l_z`.
///
/// Zero exactly when every prediction row and every feature row carries
/// the same rank vector as its label row, ties included.
pub fn sort_loss(
    s_y: &SimilarityMatrix,
    s_yhat: &SimilarityMatrix,
    s_z: &SimilarityMatrix,
    lambda_weight: f64,
) -> Result<SortLoss, RankError> {
    check_shapes(s_y, s_yhat, s_z)?;
    let l_y = row_rank_sq(s_y, s_yhat);
    let l_z = row_rank_sq(s_y, s_z);
    Ok(SortLoss {
        total: l_y + lambda_weight * l_z,
        l_y,
        l_z,
    })
}

/// Loss gradients with respect to the prediction and feature similarity
/// matrices, routed through the blackbox rank interpolation row by row.
#[derive(Debug, Clone)]
pub struct SortLossGrads {
    pub d_s_yhat: Array2<f64>,
    pub d_s_z: Array2<f64>,
}

/// Probe step for one row: `lambda_bb` scaled by the row's value spread.
/// Ranks only see relative order, so the probe has to live on the scale of
/// the values it perturbs; a fixed step dwarfs rows with tight spreads
/// (cosine rows sit within a few millis of each other), flips their ranks
/// on every probe, and turns the estimated gradient into permanent
/// full-strength chatter.
fn row_step(row: &[f64], lambda_bb: f64) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = row.iter().cloned().fold(f64::INFINITY, f64::min);
    lambda_bb * (max - min).max(1e-9)
}

/// Rank difference quotient with the probe and quotient scales split: the
/// probe follows the row's own units while the quotient stays at the fixed
/// `lambda_bb`, keeping gradient magnitude bounded by rank differences
/// instead of inflating as 1/spread on tight rows.
fn rk_grad_probed(v: &[f64], upstream: &[f64], probe: f64, quotient: f64) -> Vec<f64> {
    let base = rk(v);
    let perturbed: Vec<f64> = v
        .iter()
        .zip(upstream)
        .map(|(&x, &u)| x + probe * u)
        .collect();
    let shifted = rk(&perturbed);
    base.ranks
        .iter()
        .zip(&shifted.ranks)
        .map(|(&a, &b)| -(a - b) / quotient)
        .collect()
}

pub fn sort_loss_backward(
    s_y: &SimilarityMatrix,
    s_yhat: &SimilarityMatrix,
    s_z: &SimilarityMatrix,
    lambda_weight: f64,
    lambda_bb: f64,
) -> Result<SortLossGrads, RankError> {
    check_shapes(s_y, s_yhat, s_z)?;
    let n = s_y.n();
    let mut d_s_yhat = Array2::zeros((n, n));
    let mut d_s_z = Array2::zeros((n, n));
    for i in 0..n {
        let target = rk(&s_y.row(i)).as_f64();

        // Tied label entries carry fractional average ranks that no strict
        // ordering can produce; a difference quotient chasing them is pure
        // pressure toward an unreachable target (it demands the model
        // equalize the corresponding gaps exactly), so those positions are
        // masked out of the backward pass. The loss value keeps its tie
        // floor for reporting.
        let actionable = |j: usize| target[j].fract() == 0.0;

        let row = s_yhat.row(i);
        let got = rk(&row).as_f64();
        // d/d(rk) of sum (target - rk)^2
        let upstream: Vec<f64> = got
            .iter()
            .zip(&target)
            .enumerate()
            .map(|(j, (g, t))| if actionable(j) { 2.0 * (g - t) } else { 0.0 })
            .collect();
        let g = rk_grad_probed(&row, &upstream, row_step(&row, lambda_bb), lambda_bb);
        for (j, v) in g.into_iter().enumerate() {
            d_s_yhat[(i, j)] = v;
        }

        let row = s_z.row(i);
        let got = rk(&row).as_f64();
        let upstream: Vec<f64> = got
            .iter()
            .zip(&target)
            .enumerate()
            .map(|(j, (g, t))| {
                if actionable(j) {
                    lambda_weight * 2.0 * (g - t)
                } else {
                    0.0
                }
            })
            .collect();
        let g = rk_grad_probed(&row, &upstream, row_step(&row, lambda_bb), lambda_bb);
        for (j, v) in g.into_iter().enumerate() {
            d_s_z[(i, j)] = v;
        }
    }
    Ok(SortLossGrads { d_s_yhat, d_s_z })
}

/// Pull a gradient on the prediction similarity matrix back onto the
/// predictions themselves. `S_ij = -|p_i - p_j|` contributes
/// `-sign(p_i - p_j)` to both (i,j) and (j,i) entries' derivative in `p_i`;
/// ties contribute nothing.
pub fn pred_similarity_backward(preds: &[f64], d_s: &Array2<f64>) -> Vec<f64> {
    let n = preds.len();
    let mut grad = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let s = if preds[i] > preds[j] {
                1.0
            } else if preds[i] < preds[j] {
                -1.0
            } else {
                0.0
            };
            grad[i] += (d_s[(i, j)] + d_s[(j, i)]) * (-s);
        }
    }
    grad
}

/// Pull a gradient on the cosine similarity matrix back onto the feature
/// vectors. The diagonal is constant 1 and carries no gradient.
pub fn feature_similarity_backward(
    features: &[Array1<f64>],
    d_s: &Array2<f64>,
) -> Result<Vec<Array1<f64>>, RankError> {
    let n = features.len();
    let dim = features[0].len();
    let mut norms = Vec::with_capacity(n);
    for (i, z) in features.iter().enumerate() {
        let norm = z.dot(z).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(RankError::ZeroVector(i));
        }
        norms.push(norm);
    }
    let mut grads = vec![Array1::<f64>::zeros(dim); n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let w = d_s[(i, j)] + d_s[(j, i)];
            if w == 0.0 {
                continue;
            }
            // d cos(z_i, z_j) / d z_i = z_j/(|z_i||z_j|) - cos * z_i/|z_i|^2
            let cos = features[i].dot(&features[j]) / (norms[i] * norms[j]);
            let a = 1.0 / (norms[i] * norms[j]);
            let b = cos / (norms[i] * norms[i]);
            let gi = &features[j] * a - &features[i] * b;
            grads[i].scaled_add(w, &gi);
        }
    }
    Ok(grads)
}
