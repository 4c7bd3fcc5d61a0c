//! Prior-adjusted softmax and the training objectives built on it.
//!
//! All probabilities use `p(y|x) ∝ π_y · exp(f(x, y) / T)`. The prior enters
//! as the additive row bias `ln(π_y / max π)`, so a uniform prior adds exactly
//! zero and the adjusted path coincides bit-for-bit with plain softmax.

use crate::autodiff::{Tape, Tensor, Var, LOG_EPS};
use crate::error::{Error, Result};
use crate::model::argmax_rows;

/// Lower bound applied to normalized prior entries before use.
pub const PRIOR_FLOOR: f64 = 1e-8;

/// Nonnegative weights over classes. Not necessarily normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorDistribution {
    weights: Vec<f64>,
}

impl PriorDistribution {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::param("prior", "must have at least one class"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::param("prior", "entries must be finite and non-negative"));
        }
        Ok(Self { weights })
    }

    pub fn uniform(num_classes: usize) -> Self {
        Self {
            weights: vec![1.0 / num_classes as f64; num_classes],
        }
    }

    pub fn from_counts(counts: &[usize]) -> Self {
        Self {
            weights: counts.iter().map(|&c| c as f64).collect(),
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Rescaled to sum to one. An all-zero vector becomes uniform.
    pub fn normalized(&self) -> Self {
        let total = self.total();
        if total > 0.0 {
            Self {
                weights: self.weights.iter().map(|w| w / total).collect(),
            }
        } else {
            Self::uniform(self.len())
        }
    }

    /// Normalized, floored at `floor`, then normalized again.
    pub fn floored(&self, floor: f64) -> Self {
        let n = self.normalized();
        Self {
            weights: n.weights.iter().map(|w| w.max(floor)).collect(),
        }
        .normalized()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdjustedSoftmaxParams {
    prior: PriorDistribution,
    temperature: f64,
    log_adjust: Vec<f64>,
}

impl AdjustedSoftmaxParams {
    /// Normalizes the prior and floors each entry at [`PRIOR_FLOOR`]. Only
    /// ratios between entries affect the resulting probabilities.
    pub fn new(prior: &PriorDistribution, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::param(
                "train.temperature",
                format!("must be positive, got {temperature}"),
            ));
        }
        let weights: Vec<f64> = prior
            .normalized()
            .weights
            .into_iter()
            .map(|w| w.max(PRIOR_FLOOR))
            .collect();
        let max = weights.iter().copied().fold(f64::MIN, f64::max);
        let log_adjust = weights.iter().map(|w| (w / max).ln()).collect();
        Ok(Self {
            prior: PriorDistribution { weights },
            temperature,
            log_adjust,
        })
    }

    /// Plain softmax: uniform prior, T = 1.
    pub fn plain(num_classes: usize) -> Self {
        Self::new(&PriorDistribution::uniform(num_classes), 1.0).expect("valid")
    }

    pub fn prior(&self) -> &PriorDistribution {
        &self.prior
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn num_classes(&self) -> usize {
        self.log_adjust.len()
    }
}

fn check_logits(tape: &Tape, logits: Var, p: &AdjustedSoftmaxParams) -> Result<()> {
    let s = tape.value(logits).shape();
    if s.len() != 2 || s[1] != p.num_classes() {
        return Err(Error::Dimension {
            op: "adjusted_softmax",
            left: s.to_vec(),
            right: vec![p.num_classes()],
        });
    }
    if !tape.value(logits).is_finite() {
        return Err(Error::Numeric("adjusted_softmax"));
    }
    Ok(())
}

/// Row-wise `log p(y|x)` under the adjusted softmax.
pub fn adjusted_log_probs(tape: &mut Tape, logits: Var, p: &AdjustedSoftmaxParams) -> Result<Var> {
    check_logits(tape, logits, p)?;
    let scaled = tape.scale(logits, 1.0 / p.temperature);
    let bias = tape.constant(Tensor::vector(p.log_adjust.clone())?);
    let shifted = tape.add_row_bias(scaled, bias)?;
    tape.log_softmax_rows(shifted)
}

pub fn adjusted_softmax(tape: &mut Tape, logits: Var, p: &AdjustedSoftmaxParams) -> Result<Var> {
    let lp = adjusted_log_probs(tape, logits, p)?;
    Ok(tape.exp(lp))
}

/// Non-differentiable convenience wrapper.
pub fn adjusted_softmax_values(logits: &Tensor, p: &AdjustedSoftmaxParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let z = tape.constant(logits.clone());
    let probs = adjusted_softmax(&mut tape, z, p)?;
    Ok(tape.value(probs).clone())
}

/// Rows whose argmax (ties to the lowest class) equals the label.
pub fn teacher_mask(weak_probs: &Tensor, labels: &[usize]) -> Vec<bool> {
    argmax_rows(weak_probs)
        .into_iter()
        .zip(labels)
        .map(|(a, &y)| a == y)
        .collect()
}

fn one_hot(labels: &[usize], num_classes: usize) -> Result<Tensor> {
    let mut v = vec![0.0; labels.len() * num_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::param("label", format!("{y} outside [0, {num_classes})")));
        }
        v[i * num_classes + y] = 1.0;
    }
    Tensor::matrix(labels.len(), num_classes, v)
}

fn check_labels(tape: &Tape, logits: Var, labels: &[usize]) -> Result<()> {
    let rows = tape.value(logits).rows();
    if rows != labels.len() {
        return Err(Error::Dimension {
            op: "loss labels",
            left: vec![rows],
            right: vec![labels.len()],
        });
    }
    Ok(())
}

/// Sum over rows of `log max(p(label|x), ε)`.
fn label_log_prob_sum(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    p: &AdjustedSoftmaxParams,
) -> Result<Var> {
    check_labels(tape, logits, labels)?;
    let lp = adjusted_log_probs(tape, logits, p)?;
    let lp = tape.clamp_min(lp, LOG_EPS.ln());
    let oh = tape.constant(one_hot(labels, p.num_classes())?);
    let picked = tape.mul(lp, oh)?;
    Ok(tape.sum(picked))
}

/// Mean negative log-likelihood under the adjusted softmax. With
/// [`AdjustedSoftmaxParams::plain`] this is ordinary cross-entropy.
pub fn cross_entropy(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    p: &AdjustedSoftmaxParams,
) -> Result<Var> {
    let s = label_log_prob_sum(tape, logits, labels, p)?;
    Ok(tape.scale(s, -1.0 / labels.len() as f64))
}

/// Adjusted cross-entropy averaged over both augmented views.
pub fn dla_loss(
    tape: &mut Tape,
    weak_logits: Var,
    strong_logits: Var,
    labels: &[usize],
    p: &AdjustedSoftmaxParams,
) -> Result<Var> {
    let sw = label_log_prob_sum(tape, weak_logits, labels, p)?;
    let ss = label_log_prob_sum(tape, strong_logits, labels, p)?;
    let both = tape.add(sw, ss)?;
    Ok(tape.scale(both, -1.0 / (2 * labels.len()) as f64))
}

/// Mean over correctly classified weak rows of `KL(p(weak) || p(strong))`.
/// The weak side is a stop-gradient teacher. Returns the value together with
/// the teacher mask; an empty mask yields a constant zero.
pub fn asd_loss_with_mask(
    tape: &mut Tape,
    weak_logits: Var,
    strong_logits: Var,
    labels: &[usize],
    p: &AdjustedSoftmaxParams,
) -> Result<(Var, Vec<bool>)> {
    check_labels(tape, weak_logits, labels)?;
    check_labels(tape, strong_logits, labels)?;
    if tape.value(weak_logits).shape() != tape.value(strong_logits).shape() {
        return Err(Error::Dimension {
            op: "asd_loss",
            left: tape.value(weak_logits).shape().to_vec(),
            right: tape.value(strong_logits).shape().to_vec(),
        });
    }
    let teacher_logits = tape.detach(weak_logits);
    let teacher_lp = adjusted_log_probs(tape, teacher_logits, p)?;
    let teacher_lp = tape.value(teacher_lp).clone();
    let mask = teacher_mask(&teacher_lp, labels);
    let m = mask.iter().filter(|&&b| b).count();
    if m == 0 {
        return Ok((tape.constant(Tensor::scalar(0.0)), mask));
    }

    let floor = LOG_EPS.ln();
    let c = p.num_classes();
    let mut weights = vec![0.0; teacher_lp.len()];
    let mut teacher_log = vec![0.0; teacher_lp.len()];
    for (i, &keep) in mask.iter().enumerate() {
        for j in 0..c {
            let lp = teacher_lp.row(i)[j];
            teacher_log[i * c + j] = lp.max(floor);
            if keep {
                weights[i * c + j] = lp.exp() / m as f64;
            }
        }
    }
    let shape = teacher_lp.shape().to_vec();
    let student_lp = adjusted_log_probs(tape, strong_logits, p)?;
    let student_lp = tape.clamp_min(student_lp, floor);
    let teacher_log = tape.constant(Tensor::new(shape.clone(), teacher_log)?);
    let diff = tape.sub(teacher_log, student_lp)?;
    let w = tape.constant(Tensor::new(shape, weights)?);
    let weighted = tape.mul(w, diff)?;
    Ok((tape.sum(weighted), mask))
}

pub fn asd_loss(
    tape: &mut Tape,
    weak_logits: Var,
    strong_logits: Var,
    labels: &[usize],
    p: &AdjustedSoftmaxParams,
) -> Result<Var> {
    Ok(asd_loss_with_mask(tape, weak_logits, strong_logits, labels, p)?.0)
}

/// Handles to the combined objective and its two components.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub dla: Var,
    pub asd: Var,
}

/// `L_DLA + λ · L_ASD`. With `λ = 0` the total is the DLA node itself.
pub fn total_loss(
    tape: &mut Tape,
    weak_logits: Var,
    strong_logits: Var,
    labels: &[usize],
    p: &AdjustedSoftmaxParams,
    lambda: f64,
) -> Result<LossParts> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::param("train.lambda", format!("must be >= 0, got {lambda}")));
    }
    let dla = dla_loss(tape, weak_logits, strong_logits, labels, p)?;
    let asd = asd_loss(tape, weak_logits, strong_logits, labels, p)?;
    let total = if lambda == 0.0 {
        dla
    } else {
        let weighted = tape.scale(asd, lambda);
        tape.add(dla, weighted)?
    };
    Ok(LossParts { total, dla, asd })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn logits(tape: &mut Tape, rows: &[Vec<f64>]) -> Var {
        tape.leaf(Tensor::from_rows(rows).unwrap().with_requires_grad(true))
    }

    fn params(prior: &[f64], t: f64) -> AdjustedSoftmaxParams {
        AdjustedSoftmaxParams::new(&PriorDistribution::new(prior.to_vec()).unwrap(), t).unwrap()
    }

    #[test]
    fn adjusted_softmax_examples() {
        let z = Tensor::from_rows(&[vec![0.7, 0.7, 0.7]]).unwrap();
        for t in [0.5, 1.0, 3.0] {
            let out = adjusted_softmax_values(&z, &params(&[1.0, 1.0, 1.0], t)).unwrap();
            for v in out.values() {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
        let z = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let out = adjusted_softmax_values(&z, &params(&[3.0, 1.0], 1.0)).unwrap();
        assert!((out.values()[0] - 0.75).abs() < 1e-15);
        assert!((out.values()[1] - 0.25).abs() < 1e-15);

        let z = Tensor::from_rows(&[vec![2f64.ln(), 0.0]]).unwrap();
        let out = adjusted_softmax_values(&z, &params(&[1.0, 1.0], 1.0)).unwrap();
        assert!((out.values()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((out.values()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn adjusted_softmax_rejects_non_finite_logits() {
        let z = Tensor::from_rows(&[vec![f64::INFINITY, 0.0]]).unwrap();
        assert!(matches!(
            adjusted_softmax_values(&z, &params(&[1.0, 1.0], 1.0)),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn params_validate_temperature_and_floor_prior() {
        let prior = PriorDistribution::new(vec![1.0, 0.0]).unwrap();
        assert!(AdjustedSoftmaxParams::new(&prior, 0.0).is_err());
        let p = AdjustedSoftmaxParams::new(&prior, 1.5).unwrap();
        assert!(p.prior().weights().iter().all(|&w| w >= PRIOR_FLOOR));
        assert!(PriorDistribution::new(vec![1.0, -0.1]).is_err());
        assert!(PriorDistribution::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn uniform_prior_adds_exact_zero() {
        let p = params(&[0.25; 4], 1.0);
        let z = Tensor::from_rows(&[vec![0.3, -1.2, 4.0, 0.0]]).unwrap();
        let mut t = Tape::new();
        let zv = t.constant(z.clone());
        let a = adjusted_log_probs(&mut t, zv, &p).unwrap();
        let b = t.log_softmax_rows(zv).unwrap();
        assert_eq!(t.value(a).values(), t.value(b).values());
    }

    #[test]
    fn teacher_mask_examples() {
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(teacher_mask(&eye, &[0, 1]), vec![true, true]);
        let uni = Tensor::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        assert_eq!(teacher_mask(&uni, &[1, 1]), vec![false, false]);
        let mixed = Tensor::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        assert_eq!(teacher_mask(&mixed, &[0, 0]), vec![true, false]);
    }

    #[test]
    fn asd_zero_when_views_agree() {
        let mut t = Tape::new();
        let rows = vec![vec![2.0, -1.0, 0.5], vec![-0.3, 1.7, 0.1]];
        let w = logits(&mut t, &rows);
        let s = logits(&mut t, &rows);
        let l = asd_loss(&mut t, w, s, &[0, 1], &params(&[0.5, 0.3, 0.2], 1.5)).unwrap();
        assert!(t.value(l).item().abs() < 1e-15);
    }

    #[test]
    fn asd_empty_mask_is_constant_zero() {
        let mut t = Tape::new();
        let w = logits(&mut t, &[vec![5.0, 0.0]]);
        let s = logits(&mut t, &[vec![0.0, 3.0]]);
        let l = asd_loss(&mut t, w, s, &[1], &params(&[1.0, 1.0], 1.0)).unwrap();
        assert_eq!(t.value(l).item(), 0.0);
        t.backward(l).unwrap();
        assert!(t.grad(s).is_none());
        assert!(t.grad(w).is_none());
    }

    #[test]
    fn asd_hand_kl_value() {
        // teacher [0.75, 0.25] via prior [3, 1]; student uniform via logits that
        // cancel the prior: ln(1/3) shift on class 0.
        let p = params(&[3.0, 1.0], 1.0);
        let mut t = Tape::new();
        let w = logits(&mut t, &[vec![0.0, 0.0]]);
        let s = logits(&mut t, &[vec![-(3f64.ln()), 0.0]]);
        let l = asd_loss(&mut t, w, s, &[0], &p).unwrap();
        let expected = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((t.value(l).item() - expected).abs() < 1e-12);
        assert!((expected - 0.13081).abs() < 1e-5);
    }

    #[test]
    fn asd_divides_by_masked_count() {
        let p = params(&[3.0, 1.0], 1.0);
        let mut t = Tape::new();
        // second row is misclassified by the teacher and must be ignored
        let w = logits(&mut t, &[vec![0.0, 0.0], vec![0.0, 0.0]]);
        let s = logits(&mut t, &[vec![-(3f64.ln()), 0.0], vec![9.0, -9.0]]);
        let (l, mask) = asd_loss_with_mask(&mut t, w, s, &[0, 1], &p).unwrap();
        assert_eq!(mask, vec![true, false]);
        let expected = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((t.value(l).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn dla_examples() {
        let p = params(&[1.0, 1.0], 1.0);
        let mut t = Tape::new();
        let w = logits(&mut t, &[vec![0.0, 0.0]]);
        let s = logits(&mut t, &[vec![0.0, 0.0]]);
        let l = dla_loss(&mut t, w, s, &[1], &p).unwrap();
        assert!((t.value(l).item() - 2f64.ln()).abs() < 1e-15);

        let mut t = Tape::new();
        let w = logits(&mut t, &[vec![800.0, -800.0]]);
        let s = logits(&mut t, &[vec![900.0, -900.0]]);
        let l = dla_loss(&mut t, w, s, &[0], &p).unwrap();
        assert_eq!(t.value(l).item(), 0.0);
    }

    #[test]
    fn dla_is_mean_normalized() {
        let p = params(&[0.6, 0.3, 0.1], 1.5);
        let rows_w = vec![vec![0.2, -0.4, 1.0], vec![1.1, 0.0, -0.5]];
        let rows_s = vec![vec![0.9, 0.3, -0.2], vec![-1.0, 0.4, 0.4]];
        let mut t = Tape::new();
        let w = logits(&mut t, &rows_w);
        let s = logits(&mut t, &rows_s);
        let once = dla_loss(&mut t, w, s, &[2, 0], &p).unwrap();
        let dup = |r: &Vec<Vec<f64>>| r.iter().chain(r.iter()).cloned().collect::<Vec<_>>();
        let w2 = logits(&mut t, &dup(&rows_w));
        let s2 = logits(&mut t, &dup(&rows_s));
        let twice = dla_loss(&mut t, w2, s2, &[2, 0, 2, 0], &p).unwrap();
        assert!((t.value(once).item() - t.value(twice).item()).abs() < 1e-14);
    }

    #[test]
    fn dla_with_plain_params_is_cross_entropy_on_both_views() {
        let p = AdjustedSoftmaxParams::plain(3);
        let rows_w = vec![vec![0.2, -0.4, 1.0], vec![1.1, 0.0, -0.5]];
        let rows_s = vec![vec![0.9, 0.3, -0.2], vec![-1.0, 0.4, 0.4]];
        let labels = [2, 0];
        let ce = |rows: &[Vec<f64>]| -> f64 {
            rows.iter()
                .zip(&labels)
                .map(|(r, &y)| {
                    let lse = r.iter().map(|v| v.exp()).sum::<f64>().ln();
                    lse - r[y]
                })
                .sum::<f64>()
        };
        let expected = (ce(&rows_w) + ce(&rows_s)) / 4.0;
        let mut t = Tape::new();
        let w = logits(&mut t, &rows_w);
        let s = logits(&mut t, &rows_s);
        let l = dla_loss(&mut t, w, s, &labels, &p).unwrap();
        assert!((t.value(l).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn total_loss_linearity_and_arithmetic() {
        let p = params(&[0.5, 0.5], 1.0);
        let rows_w = vec![vec![1.0, -0.5], vec![0.3, 0.2]];
        let rows_s = vec![vec![0.1, 0.4], vec![-0.7, 0.9]];
        let mut t = Tape::new();
        let w = logits(&mut t, &rows_w);
        let s = logits(&mut t, &rows_s);
        let zero = total_loss(&mut t, w, s, &[0, 0], &p, 0.0).unwrap();
        assert_eq!(t.value(zero.total).item(), t.value(zero.dla).item());
        let one = total_loss(&mut t, w, s, &[0, 0], &p, 1.0).unwrap();
        let (a, b) = (t.value(one.dla).item(), t.value(one.asd).item());
        assert!((t.value(one.total).item() - (a + b)).abs() < 1e-12);
        assert!(total_loss(&mut t, w, s, &[0, 0], &p, -1.0).is_err());

        assert!((0.6931 + 4.0 * 0.13081 - 1.21634f64).abs() < 1e-12);
    }

    #[test]
    fn teacher_path_receives_no_gradient() {
        let p = params(&[0.7, 0.2, 0.1], 1.5);
        let mut t = Tape::new();
        let w = logits(&mut t, &[vec![2.0, 0.1, -0.3], vec![0.0, 1.5, 0.2]]);
        let s = logits(&mut t, &[vec![0.5, 0.4, 0.3], vec![0.2, 0.1, 0.6]]);
        let l = asd_loss(&mut t, w, s, &[0, 1], &p).unwrap();
        t.backward(l).unwrap();
        assert!(t.grad(w).is_none());
        assert!(t.grad(s).unwrap().iter().any(|g| *g != 0.0));
    }

    fn kl_oracle(pt: &[f64], ps: &[f64]) -> f64 {
        pt.iter().zip(ps).map(|(a, b)| if *a > 0.0 { a * (a / b).ln() } else { 0.0 }).sum()
    }

    proptest! {
        #[test]
        fn rows_sum_to_one(z in prop::collection::vec(-50.0f64..50.0, 12),
                           prior in prop::collection::vec(0.01f64..10.0, 4),
                           t in 0.2f64..4.0) {
            let z = Tensor::matrix(3, 4, z).unwrap();
            let out = adjusted_softmax_values(&z, &params(&prior, t)).unwrap();
            for i in 0..3 {
                let s: f64 = out.row(i).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn prior_scale_invariance(z in prop::collection::vec(-50.0f64..50.0, 8),
                                  prior in prop::collection::vec(0.01f64..10.0, 4),
                                  c in 1e-3f64..1e3) {
            let z = Tensor::matrix(2, 4, z).unwrap();
            let scaled: Vec<f64> = prior.iter().map(|w| w * c).collect();
            let a = adjusted_softmax_values(&z, &params(&prior, 1.5)).unwrap();
            let b = adjusted_softmax_values(&z, &params(&scaled, 1.5)).unwrap();
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn asd_is_nonnegative_and_matches_oracle(
            zw in prop::collection::vec(-5.0f64..5.0, 9),
            zs in prop::collection::vec(-5.0f64..5.0, 9),
            prior in prop::collection::vec(0.05f64..5.0, 3),
            labels in prop::collection::vec(0usize..3, 3)) {
            let p = params(&prior, 1.5);
            let mut t = Tape::new();
            let w = t.leaf(Tensor::matrix(3, 3, zw.clone()).unwrap());
            let s = t.leaf(Tensor::matrix(3, 3, zs.clone()).unwrap());
            let l = asd_loss(&mut t, w, s, &labels, &p).unwrap();
            let v = t.value(l).item();
            prop_assert!(v >= -1e-15);

            let pw = adjusted_softmax_values(&Tensor::matrix(3, 3, zw).unwrap(), &p).unwrap();
            let ps = adjusted_softmax_values(&Tensor::matrix(3, 3, zs).unwrap(), &p).unwrap();
            let mask = teacher_mask(&pw, &labels);
            let m = mask.iter().filter(|&&b| b).count();
            let expected = if m == 0 { 0.0 } else {
                (0..3).filter(|&i| mask[i]).map(|i| kl_oracle(pw.row(i), ps.row(i))).sum::<f64>() / m as f64
            };
            prop_assert!((v - expected).abs() < 1e-10);
        }
    }
}
