//! Diagnostics: grouped accuracy, prototype angle statistics, prior
//! distance and global/local feature agreement.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::losses::PriorDistribution;
use crate::model::MlpClassifier;

/// How classes are split into many/medium/few-shot groups by their global
/// training counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GroupThresholds {
    /// Top, middle and bottom thirds of the count ranking. Classes with equal
    /// counts always land in the same group.
    Terciles,
    /// many: count > `many_above`; few: count < `few_below`; medium otherwise.
    Absolute { many_above: usize, few_below: usize },
}

impl Default for GroupThresholds {
    fn default() -> Self {
        GroupThresholds::Terciles
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Many,
    Medium,
    Few,
}

impl GroupThresholds {
    pub fn assign(&self, class_counts: &[usize]) -> Vec<Group> {
        let (many_above, few_below) = match *self {
            GroupThresholds::Absolute {
                many_above,
                few_below,
            } => (many_above, few_below),
            GroupThresholds::Terciles => {
                let mut sorted = class_counts.to_vec();
                sorted.sort_unstable_by(|a, b| b.cmp(a));
                let c = sorted.len();
                let hi = sorted[(c / 3).min(c - 1)];
                let lo = sorted[(2 * c / 3).saturating_sub(1).min(c - 1)];
                (hi, lo)
            }
        };
        class_counts
            .iter()
            .map(|&n| {
                if n > many_above {
                    Group::Many
                } else if n < few_below {
                    Group::Few
                } else {
                    Group::Medium
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupedAccuracy {
    pub all: f64,
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
}

pub fn grouped_accuracy(
    preds: &[usize],
    labels: &[usize],
    class_counts: &[usize],
    thresholds: GroupThresholds,
) -> Result<GroupedAccuracy> {
    if preds.len() != labels.len() {
        return Err(Error::Dimension {
            op: "grouped_accuracy",
            left: vec![preds.len()],
            right: vec![labels.len()],
        });
    }
    if preds.is_empty() {
        return Err(Error::Contract("grouped_accuracy needs at least one sample".into()));
    }
    let groups = thresholds.assign(class_counts);
    let mut hits = [0usize; 3];
    let mut totals = [0usize; 3];
    let mut correct = 0;
    for (&p, &y) in preds.iter().zip(labels) {
        let g = groups[y] as usize;
        totals[g] += 1;
        if p == y {
            hits[g] += 1;
            correct += 1;
        }
    }
    let rate = |g: usize| (totals[g] > 0).then(|| hits[g] as f64 / totals[g] as f64);
    Ok(GroupedAccuracy {
        all: correct as f64 / preds.len() as f64,
        many: rate(Group::Many as usize),
        medium: rate(Group::Medium as usize),
        few: rate(Group::Few as usize),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Centering {
    /// Subtract the mean of all prototypes first.
    Global,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NcAngles {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub etf_optimum: f64,
    /// Prototypes dropped for having (near) zero norm after centering.
    pub excluded: usize,
}

/// Pairwise equiangular optimum `arccos(-1/(C-1))` in degrees.
pub fn etf_optimum_degrees(num_classes: usize) -> f64 {
    (-1.0 / (num_classes as f64 - 1.0)).acos().to_degrees()
}

pub fn nc_angles(prototypes: &BTreeMap<usize, Vec<f64>>, centering: Centering) -> Result<NcAngles> {
    if prototypes.len() < 2 {
        return Err(Error::Contract("nc_angles needs at least two prototypes".into()));
    }
    let d = prototypes.values().next().map_or(0, Vec::len);
    let mut center = vec![0.0; d];
    if centering == Centering::Global {
        for p in prototypes.values() {
            center.iter_mut().zip(p).for_each(|(c, v)| *c += v);
        }
        let n = prototypes.len() as f64;
        center.iter_mut().for_each(|c| *c /= n);
    }
    let mut units = Vec::new();
    let mut excluded = 0;
    for p in prototypes.values() {
        let v: Vec<f64> = p.iter().zip(&center).map(|(a, c)| a - c).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            excluded += 1;
            continue;
        }
        units.push(v.into_iter().map(|x| x / norm).collect::<Vec<f64>>());
    }
    if units.len() < 2 {
        return Err(Error::Contract(format!(
            "fewer than two non-degenerate prototypes ({excluded} excluded)"
        )));
    }
    let (mut min, mut max, mut sum, mut n) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
    for i in 0..units.len() {
        for j in i + 1..units.len() {
            let cos: f64 = units[i].iter().zip(&units[j]).map(|(a, b)| a * b).sum();
            let angle = cos.clamp(-1.0, 1.0).acos().to_degrees();
            min = min.min(angle);
            max = max.max(angle);
            sum += angle;
            n += 1;
        }
    }
    Ok(NcAngles {
        min,
        max,
        mean: sum / n as f64,
        etf_optimum: etf_optimum_degrees(prototypes.len()),
        excluded,
    })
}

pub fn prior_l2(estimate: &PriorDistribution, oracle: &PriorDistribution) -> Result<f64> {
    if estimate.len() != oracle.len() {
        return Err(Error::Dimension {
            op: "prior_l2",
            left: vec![estimate.len()],
            right: vec![oracle.len()],
        });
    }
    Ok(estimate
        .weights()
        .iter()
        .zip(oracle.weights())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return None;
    }
    Some(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Mean cosine between global-model and client-model features of the same
/// probe rows. Pairs where either feature vector is zero are skipped.
pub fn feature_similarity(
    global: &MlpClassifier,
    clients: &[MlpClassifier],
    probe: &Tensor,
) -> Result<f64> {
    let g = global.features(probe)?;
    feature_similarity_from(&g, clients.iter().map(|c| c.features(probe)))
}

pub(crate) fn feature_similarity_from(
    global_features: &Tensor,
    client_features: impl Iterator<Item = Result<Tensor>>,
) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for cf in client_features {
        let cf = cf?;
        for i in 0..global_features.rows() {
            if let Some(c) = cosine(global_features.row(i), cf.row(i)) {
                sum += c;
                n += 1;
            }
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// One row of the round log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub algorithm: String,
    pub participants: usize,
    pub loss_total: Option<f64>,
    pub loss_dla: Option<f64>,
    pub loss_asd: Option<f64>,
    pub acc_all: f64,
    pub acc_many: Option<f64>,
    pub acc_medium: Option<f64>,
    pub acc_few: Option<f64>,
    pub nc_min_angle: Option<f64>,
    pub nc_max_angle: Option<f64>,
    pub nc_mean_angle: Option<f64>,
    pub nc_etf_angle: Option<f64>,
    pub prior_l2: Option<f64>,
    pub feat_cos_global_local: Option<f64>,
}

pub const CSV_COLUMNS: [&str; 16] = [
    "round",
    "algorithm",
    "participants",
    "loss_total",
    "loss_dla",
    "loss_asd",
    "acc_all",
    "acc_many",
    "acc_medium",
    "acc_few",
    "nc_min_angle",
    "nc_max_angle",
    "nc_mean_angle",
    "nc_etf_angle",
    "prior_l2",
    "feat_cos_global_local",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl RoundMetrics {
    pub fn csv_header() -> String {
        CSV_COLUMNS.join(",")
    }

    pub fn to_csv_row(&self) -> String {
        [
            self.round.to_string(),
            self.algorithm.clone(),
            self.participants.to_string(),
            opt(self.loss_total),
            opt(self.loss_dla),
            opt(self.loss_asd),
            self.acc_all.to_string(),
            opt(self.acc_many),
            opt(self.acc_medium),
            opt(self.acc_few),
            opt(self.nc_min_angle),
            opt(self.nc_max_angle),
            opt(self.nc_mean_angle),
            opt(self.nc_etf_angle),
            opt(self.prior_l2),
            opt(self.feat_cos_global_local),
        ]
        .join(",")
    }

    pub fn from_csv_row(line: &str, lineno: usize) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != CSV_COLUMNS.len() {
            return Err(Error::Parse {
                line: lineno,
                detail: format!("expected {} fields, got {}", CSV_COLUMNS.len(), f.len()),
            });
        }
        let err = |col: &str, e: String| Error::Parse {
            line: lineno,
            detail: format!("column {col}: {e}"),
        };
        let num = |i: usize| -> Result<Option<f64>> {
            if f[i].is_empty() {
                Ok(None)
            } else {
                f[i].parse::<f64>()
                    .map(Some)
                    .map_err(|e| err(CSV_COLUMNS[i], e.to_string()))
            }
        };
        let int = |i: usize| -> Result<usize> {
            f[i].parse::<usize>()
                .map_err(|e| err(CSV_COLUMNS[i], e.to_string()))
        };
        Ok(Self {
            round: int(0)?,
            algorithm: f[1].to_string(),
            participants: int(2)?,
            loss_total: num(3)?,
            loss_dla: num(4)?,
            loss_asd: num(5)?,
            acc_all: num(6)?.ok_or_else(|| err("acc_all", "missing".into()))?,
            acc_many: num(7)?,
            acc_medium: num(8)?,
            acc_few: num(9)?,
            nc_min_angle: num(10)?,
            nc_max_angle: num(11)?,
            nc_mean_angle: num(12)?,
            nc_etf_angle: num(13)?,
            prior_l2: num(14)?,
            feat_cos_global_local: num(15)?,
        })
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("round metrics serialize")
    }
}
