//! Correlation-based effective class prior.
//!
//! Within one batch, the same-class features are centered on the class
//! prototype and turned into a cosine (Pearson) matrix `R`. With uniform
//! weights `a = 1/|b|`, the batch contributes `1 / (aᵀ R a)` effective
//! samples: `|b|` when the deviations are mutually orthogonal, one when they
//! all point the same way. Summing over a local epoch gives the unnormalized
//! local prior, which the server averages across clients by sample count.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::losses::{PriorDistribution, PRIOR_FLOOR};

/// Deviations shorter than this are treated as uncorrelated with everything.
pub const DEGENERATE_NORM: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    size: usize,
    values: Vec<f64>,
}

impl CorrelationMatrix {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

pub fn pearson_matrix(rows: &[&[f64]], mu: &[f64]) -> Result<CorrelationMatrix> {
    if rows.is_empty() {
        return Err(Error::Contract("pearson_matrix needs at least one row".into()));
    }
    let units: Vec<Option<Vec<f64>>> = rows
        .iter()
        .map(|r| {
            if r.len() != mu.len() {
                return Err(Error::Dimension {
                    op: "pearson_matrix",
                    left: vec![r.len()],
                    right: vec![mu.len()],
                });
            }
            let dev: Vec<f64> = r.iter().zip(mu).map(|(x, m)| x - m).collect();
            let norm = dev.iter().map(|v| v * v).sum::<f64>().sqrt();
            Ok((norm >= DEGENERATE_NORM).then(|| dev.into_iter().map(|v| v / norm).collect()))
        })
        .collect::<Result<_>>()?;
    let n = rows.len();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
        for j in i + 1..n {
            let r = match (&units[i], &units[j]) {
                (Some(a), Some(b)) => a
                    .iter()
                    .zip(b)
                    .map(|(x, y)| x * y)
                    .sum::<f64>()
                    .clamp(-1.0, 1.0),
                _ => 0.0,
            };
            values[i * n + j] = r;
            values[j * n + i] = r;
        }
    }
    Ok(CorrelationMatrix { size: n, values })
}

/// `1 / max(aᵀRa, 1/|b|)` with `a` the uniform weight vector, so the result
/// lies in `[1, |b|]`.
pub fn batch_effective_count(r: &CorrelationMatrix) -> f64 {
    let b = r.size as f64;
    let quad = r.values.iter().sum::<f64>() / (b * b);
    1.0 / quad.max(1.0 / b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorEstimate {
    raw: Vec<f64>,
    normalized: PriorDistribution,
    seen: Vec<bool>,
}

impl PriorEstimate {
    pub fn from_raw(raw: Vec<f64>) -> Result<Self> {
        let normalized = PriorDistribution::new(raw.clone())?.normalized();
        let seen = raw.iter().map(|&r| r > 0.0).collect();
        Ok(Self {
            raw,
            normalized,
            seen,
        })
    }

    /// Unnormalized effective counts per class.
    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    pub fn normalized(&self) -> &PriorDistribution {
        &self.normalized
    }

    pub fn seen_classes(&self) -> &[bool] {
        &self.seen
    }
}

/// One batch of (detached) features and their labels.
#[derive(Debug, Clone)]
pub struct FeatureBatch {
    pub features: Tensor,
    pub labels: Vec<usize>,
}

fn class_rows<'a>(features: &'a Tensor, labels: &[usize], num_classes: usize) -> Vec<Vec<&'a [f64]>> {
    let mut out = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        out[y].push(features.row(i));
    }
    out
}

/// Effective prior over a set of batches with fixed class prototypes.
pub fn effective_prior(
    batches: &[FeatureBatch],
    prototypes: &BTreeMap<usize, Vec<f64>>,
    num_classes: usize,
) -> Result<PriorEstimate> {
    let mut raw = vec![0.0; num_classes];
    for batch in batches {
        for (c, rows) in class_rows(&batch.features, &batch.labels, num_classes)
            .into_iter()
            .enumerate()
        {
            if rows.is_empty() {
                continue;
            }
            let mu = prototypes.get(&c).ok_or_else(|| {
                Error::Contract(format!("no prototype supplied for class {c}"))
            })?;
            raw[c] += batch_effective_count(&pearson_matrix(&rows, mu)?);
        }
    }
    PriorEstimate::from_raw(raw)
}

/// Streaming estimator over one round of local training. Each class is
/// centered on the running prototype of the batches seen before it; the
/// first batch of a class falls back to its own mean.
#[derive(Debug, Clone)]
pub struct EffectivePriorAccumulator {
    num_classes: usize,
    proto_sum: Vec<Vec<f64>>,
    proto_n: Vec<usize>,
    raw: Vec<f64>,
}

impl EffectivePriorAccumulator {
    pub fn new(num_classes: usize, feature_dim: usize) -> Self {
        Self {
            num_classes,
            proto_sum: vec![vec![0.0; feature_dim]; num_classes],
            proto_n: vec![0; num_classes],
            raw: vec![0.0; num_classes],
        }
    }

    pub fn observe(&mut self, features: &Tensor, labels: &[usize]) -> Result<()> {
        let d = self.proto_sum[0].len();
        if features.cols() != d || features.rows() != labels.len() {
            return Err(Error::Dimension {
                op: "prior accumulator",
                left: features.shape().to_vec(),
                right: vec![labels.len(), d],
            });
        }
        for (c, rows) in class_rows(features, labels, self.num_classes)
            .into_iter()
            .enumerate()
        {
            if rows.is_empty() {
                continue;
            }
            let mu: Vec<f64> = if self.proto_n[c] > 0 {
                let n = self.proto_n[c] as f64;
                self.proto_sum[c].iter().map(|s| s / n).collect()
            } else {
                let n = rows.len() as f64;
                (0..d).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n).collect()
            };
            self.raw[c] += batch_effective_count(&pearson_matrix(&rows, &mu)?);
            for r in &rows {
                self.proto_sum[c].iter_mut().zip(*r).for_each(|(s, x)| *s += x);
            }
            self.proto_n[c] += rows.len();
        }
        Ok(())
    }

    pub fn finish(self) -> Result<PriorEstimate> {
        PriorEstimate::from_raw(self.raw)
    }
}

/// `m · old + (1 − m) · new`, renormalized.
pub fn ema_update(
    old: &PriorDistribution,
    new: &PriorDistribution,
    momentum: f64,
) -> Result<PriorDistribution> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::param("train.ema_m", format!("must lie in [0, 1], got {momentum}")));
    }
    if old.len() != new.len() {
        return Err(Error::Dimension {
            op: "ema_update",
            left: vec![old.len()],
            right: vec![new.len()],
        });
    }
    let (o, n) = (old.normalized(), new.normalized());
    let mixed = o
        .weights()
        .iter()
        .zip(n.weights())
        .map(|(a, b)| momentum * a + (1.0 - momentum) * b)
        .collect();
    Ok(PriorDistribution::new(mixed)?.normalized())
}

/// What a client sends to the server: its smoothed prior and sample count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorUpload {
    pub prior: Vec<f64>,
    pub num_samples: usize,
}

/// Sample-count-weighted mean of normalized client priors.
pub fn aggregate_global_prior(uploads: &[PriorUpload]) -> Result<PriorDistribution> {
    let first = uploads
        .first()
        .ok_or_else(|| Error::Aggregation("no client priors to aggregate".into()))?;
    let c = first.prior.len();
    let total: usize = uploads.iter().map(|u| u.num_samples).sum();
    if total == 0 {
        return Err(Error::Aggregation("client sample counts sum to zero".into()));
    }
    let mut acc = vec![0.0; c];
    for u in uploads {
        if u.prior.len() != c {
            return Err(Error::Aggregation(format!(
                "prior length {} differs from {c}",
                u.prior.len()
            )));
        }
        let w = u.num_samples as f64 / total as f64;
        let p = PriorDistribution::new(u.prior.clone())?.normalized();
        acc.iter_mut().zip(p.weights()).for_each(|(a, v)| *a += w * v);
    }
    Ok(PriorDistribution::new(acc)?.normalized())
}

/// `(1 − γ) · π_g + γ · π_k`, floored and renormalized.
pub fn fuse(
    global: &PriorDistribution,
    local: &PriorDistribution,
    gamma: f64,
) -> Result<PriorDistribution> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::param("train.gamma", format!("must lie in [0, 1], got {gamma}")));
    }
    if global.len() != local.len() {
        return Err(Error::Dimension {
            op: "fuse",
            left: vec![global.len()],
            right: vec![local.len()],
        });
    }
    let (g, l) = (global.normalized(), local.normalized());
    let mixed = g
        .weights()
        .iter()
        .zip(l.weights())
        .map(|(a, b)| (1.0 - gamma) * a + gamma * b)
        .collect();
    Ok(PriorDistribution::new(mixed)?.floored(PRIOR_FLOOR))
}
