//! Recall at tIoU thresholds, mean tIoU, and reference predictors.

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];

/// Temporal intersection over union; 0 when the union is empty.
pub fn tiou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = a.1.max(b.1) - a.0.min(b.0);
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Percentages. `recall_at` keys are the thresholds formatted as `"0.3"` etc.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recall_at: BTreeMap<String, f64>,
    pub miou: f64,
    pub n_samples: usize,
}

impl EvalReport {
    pub fn recall(&self, threshold: f64) -> Option<f64> {
        self.recall_at.get(&threshold_key(threshold)).copied()
    }

    pub fn csv_header(&self) -> String {
        let mut cols: Vec<String> = self.recall_at.keys().map(|k| format!("r@{k}")).collect();
        cols.push("miou".into());
        cols.push("n".into());
        cols.join(",")
    }

    pub fn to_csv_line(&self) -> String {
        let mut cols: Vec<String> = self.recall_at.values().map(|v| format!("{v:.4}")).collect();
        cols.push(format!("{:.4}", self.miou));
        cols.push(self.n_samples.to_string());
        cols.join(",")
    }
}

fn threshold_key(t: f64) -> String {
    format!("{t}")
}

pub fn evaluate(preds: &[(f64, f64)], gts: &[(f64, f64)]) -> Result<EvalReport> {
    evaluate_at(preds, gts, &THRESHOLDS)
}

/// `R@τ` counts samples whose tIoU is strictly larger than `τ`.
pub fn evaluate_at(preds: &[(f64, f64)], gts: &[(f64, f64)], thresholds: &[f64]) -> Result<EvalReport> {
    if preds.len() != gts.len() {
        return Err(Error::LengthMismatch(preds.len(), gts.len()));
    }
    if preds.is_empty() {
        return Err(Error::Empty);
    }
    let ious: Vec<f64> = preds.iter().zip(gts).map(|(&p, &g)| tiou(p, g)).collect();
    let n = ious.len() as f64;
    let recall_at = thresholds
        .iter()
        .map(|&t| {
            let hits = ious.iter().filter(|&&v| v > t).count();
            (threshold_key(t), 100.0 * hits as f64 / n)
        })
        .collect();
    Ok(EvalReport {
        recall_at,
        miou: 100.0 * ious.iter().sum::<f64>() / n,
        n_samples: ious.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Random,
    CenterPrior,
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(BaselineKind::Random),
            "center_prior" | "center-prior" => Ok(BaselineKind::CenterPrior),
            other => Err(Error::InvalidArgument(format!("unknown baseline kind {other:?}"))),
        }
    }
}

/// Interval maximizing mean tIoU against `train_gts`, over a 0.01 grid with `s < e`.
pub fn center_prior(train_gts: &[(f64, f64)]) -> Result<(f64, f64)> {
    if train_gts.is_empty() {
        return Err(Error::Empty);
    }
    let mut best = (f64::NEG_INFINITY, (0.0, 1.0));
    for i in 0..100 {
        for j in (i + 1)..=100 {
            let cand = (i as f64 / 100.0, j as f64 / 100.0);
            let score: f64 = train_gts.iter().map(|&g| tiou(cand, g)).sum();
            if score > best.0 {
                best = (score, cand);
            }
        }
    }
    Ok(best.1)
}

/// Predictions for `n` samples. The center prior is fitted on `train_gts`.
pub fn baseline_predict(kind: BaselineKind, train_gts: &[(f64, f64)], n: usize, seed: u64) -> Result<Vec<(f64, f64)>> {
    if n == 0 {
        return Err(Error::Empty);
    }
    match kind {
        BaselineKind::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok((0..n)
                .map(|_| {
                    let a: f64 = rng.gen();
                    let b: f64 = rng.gen();
                    (a.min(b), a.max(b))
                })
                .collect())
        }
        BaselineKind::CenterPrior => Ok(vec![center_prior(train_gts)?; n]),
    }
}
