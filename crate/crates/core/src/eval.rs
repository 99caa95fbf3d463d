//! Counting-error reports.
//!
//! Per counting-literature convention the field named `mse` holds the ROOT
//! of the mean squared error; `mae <= mse` always holds (power-mean
//! inequality).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::CountRow;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no prediction for {0}")]
    MissingPrediction(String),
    #[error("row {0} has no ground-truth count")]
    MissingTruth(String),
    #[error("nothing to evaluate")]
    Empty,
}

/// Error summary over one evaluation set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub mae: f64,
    /// Root-mean-squared error, named `mse` by convention.
    pub mse: f64,
    /// (true, predicted) per image, input order.
    pub per_image: Vec<(f64, f64)>,
}

/// Build a report from (true, predicted) pairs.
pub fn report_from_pairs(pairs: &[(f64, f64)]) -> Result<EvalReport, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = pairs.len() as f64;
    let mae = pairs.iter().map(|(t, p)| (p - t).abs()).sum::<f64>() / n;
    let mse = (pairs.iter().map(|(t, p)| (p - t).powi(2)).sum::<f64>() / n).sqrt();
    Ok(EvalReport {
        n: pairs.len(),
        mae,
        mse,
        per_image: pairs.to_vec(),
    })
}

/// Join manifest truths with predictions keyed by image path.
pub fn evaluate(
    rows: &[CountRow],
    predictions: &BTreeMap<String, f64>,
) -> Result<EvalReport, EvalError> {
    let mut pairs = Vec::with_capacity(rows.len());
    for row in rows {
        let truth = row
            .true_count
            .ok_or_else(|| EvalError::MissingTruth(row.path.clone()))?;
        let pred = predictions
            .get(&row.path)
            .ok_or_else(|| EvalError::MissingPrediction(row.path.clone()))?;
        pairs.push((truth as f64, *pred));
    }
    report_from_pairs(&pairs)
}

/// Ranks with ties averaged, 1-based.
fn average_ranks(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average-rank tie handling. Returns 0 for
/// degenerate inputs (constant vectors).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    assert!(a.len() >= 2, "need at least two points");
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..a.len() {
        let da = ra[i] - ma;
        let db = rb[i] - mb;
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_predictions_are_zero_error() {
        let pairs: Vec<(f64, f64)> = (1..=10).map(|c| (c as f64, c as f64)).collect();
        let r = report_from_pairs(&pairs).unwrap();
        assert_eq!(r.mae, 0.0);
        assert_eq!(r.mse, 0.0);
        assert_eq!(r.n, 10);
    }

    #[test]
    fn hand_computed_example() {
        let r = report_from_pairs(&[(10.0, 12.0), (20.0, 16.0)]).unwrap();
        assert!((r.mae - 3.0).abs() < 1e-12);
        assert!((r.mse - 10.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn evaluate_joins_truth_and_predictions() {
        let rows = vec![
            CountRow {
                path: "a.png".into(),
                prompt_count: 10,
                true_count: Some(10),
                kept: true,
            },
            CountRow {
                path: "b.png".into(),
                prompt_count: 20,
                true_count: Some(20),
                kept: true,
            },
        ];
        let mut preds = BTreeMap::new();
        preds.insert("a.png".to_string(), 12.0);
        preds.insert("b.png".to_string(), 16.0);
        let r = evaluate(&rows, &preds).unwrap();
        assert!((r.mae - 3.0).abs() < 1e-12);
        assert_eq!(r.per_image, vec![(10.0, 12.0), (20.0, 16.0)]);

        preds.remove("b.png");
        match evaluate(&rows, &preds) {
            Err(EvalError::MissingPrediction(p)) => assert_eq!(p, "b.png"),
            other => panic!("expected MissingPrediction, got {other:?}"),
        }
    }

    #[test]
    fn missing_truth_is_reported() {
        let rows = vec![CountRow {
            path: "x.png".into(),
            prompt_count: 4,
            true_count: None,
            kept: true,
        }];
        let preds = BTreeMap::from([("x.png".to_string(), 4.0)]);
        assert!(matches!(
            evaluate(&rows, &preds),
            Err(EvalError::MissingTruth(_))
        ));
    }

    #[test]
    fn spearman_monotone_and_reversed() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [2.0, 4.0, 9.0, 16.0, 25.0];
        assert!((spearman(&a, &b) - 1.0).abs() < 1e-12);
        let rev = [25.0, 16.0, 9.0, 4.0, 2.0];
        assert!((spearman(&a, &rev) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_tie_handling_hand_case() {
        // a = (1, 2, 2, 4) -> ranks (1, 2.5, 2.5, 4).
        let ranks = average_ranks(&[1.0, 2.0, 2.0, 4.0]);
        assert_eq!(ranks, vec![1.0, 2.5, 2.5, 4.0]);
        // Constant vector degenerates to 0.
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), 0.0);
    }

    proptest! {
        #[test]
        fn mae_never_exceeds_mse(
            pairs in prop::collection::vec((0.0f64..500.0, 0.0f64..500.0), 1..100)
        ) {
            let r = report_from_pairs(&pairs).unwrap();
            prop_assert!(r.mae <= r.mse + 1e-12);
            prop_assert_eq!(r.n, pairs.len());
        }

        #[test]
        fn spearman_bounded(
            a in prop::collection::vec(-100.0f64..100.0, 2..40),
            seed in 0u64..500,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let b: Vec<f64> = (0..a.len()).map(|_| rng.random::<f64>()).collect();
            let s = spearman(&a, &b);
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&s));
        }
    }
}
