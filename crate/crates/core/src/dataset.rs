//! Synthetic long-tailed data, Dirichlet client partitioning and the
//! weak/strong vector augmentations.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::seed::{stream_rng, Stream};

pub const DATA_HEADER: &str = "FEDLT-DATA v1";

/// Exponential long-tail profile: `round(n_max * IF^(-c/(C-1)))` for
/// zero-based class `c`.
pub fn longtail_counts(num_classes: usize, n_max: usize, imbalance_factor: f64) -> Result<Vec<usize>> {
    if !(imbalance_factor >= 1.0) || !imbalance_factor.is_finite() {
        return Err(Error::param(
            "data.imbalance_factor",
            format!("must be >= 1, got {imbalance_factor}"),
        ));
    }
    if num_classes < 2 {
        return Err(Error::param("data.num_classes", "must be at least 2"));
    }
    if n_max < num_classes {
        return Err(Error::param("data.n_max", "must be at least the number of classes"));
    }
    let last = (num_classes - 1) as f64;
    Ok((0..num_classes)
        .map(|c| (n_max as f64 * imbalance_factor.powf(-(c as f64) / last)).round() as usize)
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    inputs: Tensor,
    labels: Vec<usize>,
    class_counts: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.shape().len() != 2 || inputs.rows() != labels.len() {
            return Err(Error::Dimension {
                op: "dataset",
                left: inputs.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        let mut class_counts = vec![0; num_classes];
        for &y in &labels {
            if y >= num_classes {
                return Err(Error::param("label", format!("{y} outside [0, {num_classes})")));
            }
            class_counts[y] += 1;
        }
        Ok(Self {
            inputs,
            labels,
            class_counts,
        })
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    pub fn num_classes(&self) -> usize {
        self.class_counts.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.inputs.row(i)
    }

    /// Normalized class frequencies.
    pub fn class_distribution(&self) -> Vec<f64> {
        let n = self.len() as f64;
        self.class_counts.iter().map(|&c| c as f64 / n).collect()
    }

    /// Rows at `indices` as a matrix plus their labels.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let d = self.input_dim();
        let mut values = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            values.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Ok((Tensor::matrix(indices.len(), d, values)?, labels))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{DATA_HEADER}")?;
        writeln!(w, "{} {} {}", self.len(), self.input_dim(), self.num_classes())?;
        for i in 0..self.len() {
            for v in self.row(i) {
                write!(w, "{v},")?;
            }
            writeln!(w, "{}", self.labels[i])?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let mut next = |what: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((i, l)) => Ok((i + 1, l?)),
                None => Err(Error::Parse {
                    line: 0,
                    detail: format!("missing {what}"),
                }),
            }
        };
        let (_, header) = next("header")?;
        if header.trim_end() != DATA_HEADER {
            return Err(Error::Parse {
                line: 1,
                detail: format!("expected `{DATA_HEADER}`"),
            });
        }
        let (ln, dims) = next("dims line")?;
        let dims: Vec<usize> = dims
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e: std::num::ParseIntError| Error::Parse {
                line: ln,
                detail: e.to_string(),
            })?;
        let [n, d, c] = dims[..] else {
            return Err(Error::Parse {
                line: ln,
                detail: "dims line must be `rows cols classes`".into(),
            });
        };
        let mut values = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let (ln, row) = next("data row")?;
            let fields: Vec<&str> = row.split(',').collect();
            if fields.len() != d + 1 {
                return Err(Error::Parse {
                    line: ln,
                    detail: format!("expected {} fields, got {}", d + 1, fields.len()),
                });
            }
            for f in &fields[..d] {
                values.push(f.parse::<f64>().map_err(|e| Error::Parse {
                    line: ln,
                    detail: e.to_string(),
                })?);
            }
            labels.push(fields[d].parse::<usize>().map_err(|e| Error::Parse {
                line: ln,
                detail: e.to_string(),
            })?);
        }
        Self::new(Tensor::matrix(n, d, values)?, labels, c)
    }
}

/// Gaussian class-conditional mixture with unit covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticMixture {
    means: Vec<Vec<f64>>,
}

impl SyntheticMixture {
    /// Class means are orthonormal directions scaled by `class_sep` when
    /// `num_classes <= in_dim`, otherwise random unit directions.
    pub fn new(num_classes: usize, in_dim: usize, class_sep: f64, seed: u64) -> Result<Self> {
        if in_dim < 2 {
            return Err(Error::param("data.in_dim", "must be at least 2"));
        }
        let mut rng = stream_rng(seed, Stream::ClassMeans, &[]);
        let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
        while dirs.len() < num_classes {
            let mut v: Vec<f64> = (0..in_dim).map(|_| rng.sample(StandardNormal)).collect();
            if dirs.len() < in_dim {
                for u in &dirs {
                    let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-8 {
                continue;
            }
            dirs.push(v.into_iter().map(|x| x / norm).collect());
        }
        let means = dirs
            .into_iter()
            .map(|d| d.into_iter().map(|x| x * class_sep).collect())
            .collect();
        Ok(Self { means })
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn num_classes(&self) -> usize {
        self.means.len()
    }

    /// Draws `counts[c]` samples of each class, grouped by class.
    pub fn sample<R: Rng>(&self, counts: &[usize], rng: &mut R) -> Result<LabeledDataset> {
        if counts.len() != self.means.len() {
            return Err(Error::Dimension {
                op: "sample",
                left: vec![self.means.len()],
                right: vec![counts.len()],
            });
        }
        let d = self.means[0].len();
        let n: usize = counts.iter().sum();
        if n == 0 {
            return Err(Error::param("counts", "at least one sample is required"));
        }
        let mut values = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for (c, &k) in counts.iter().enumerate() {
            for _ in 0..k {
                for &m in &self.means[c] {
                    let z: f64 = rng.sample(StandardNormal);
                    values.push(m + z);
                }
                labels.push(c);
            }
        }
        LabeledDataset::new(Tensor::matrix(n, d, values)?, labels, counts.len())
    }
}

pub fn generate_synthetic(
    num_classes: usize,
    counts: &[usize],
    in_dim: usize,
    class_sep: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    let mixture = SyntheticMixture::new(num_classes, in_dim, class_sep, seed)?;
    let mut rng = stream_rng(seed, Stream::TrainSamples, &[]);
    mixture.sample(counts, &mut rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientPartition {
    indices: Vec<Vec<usize>>,
    class_counts: Vec<Vec<usize>>,
}

impl ClientPartition {
    pub fn from_indices(indices: Vec<Vec<usize>>, labels: &[usize], num_classes: usize) -> Self {
        let class_counts = indices
            .iter()
            .map(|idx| {
                let mut c = vec![0; num_classes];
                idx.iter().for_each(|&i| c[labels[i]] += 1);
                c
            })
            .collect();
        Self {
            indices,
            class_counts,
        }
    }

    pub fn num_clients(&self) -> usize {
        self.indices.len()
    }

    pub fn client_indices(&self, k: usize) -> &[usize] {
        &self.indices[k]
    }

    /// `n_k^c` for client `k`.
    pub fn client_class_counts(&self, k: usize) -> &[usize] {
        &self.class_counts[k]
    }

    pub fn client_size(&self, k: usize) -> usize {
        self.indices[k].len()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        for idx in &self.indices {
            let s: Vec<String> = idx.iter().map(usize::to_string).collect();
            writeln!(w, "{}", s.join(","))?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R, ds: &LabeledDataset) -> Result<Self> {
        let mut indices = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let idx = if line.trim().is_empty() {
                Vec::new()
            } else {
                line.split(',')
                    .map(|f| {
                        let v: usize = f.trim().parse().map_err(|e: std::num::ParseIntError| {
                            Error::Parse {
                                line: i + 1,
                                detail: e.to_string(),
                            }
                        })?;
                        if v >= ds.len() {
                            return Err(Error::Parse {
                                line: i + 1,
                                detail: format!("index {v} out of range"),
                            });
                        }
                        Ok(v)
                    })
                    .collect::<Result<Vec<_>>>()?
            };
            indices.push(idx);
        }
        Ok(Self::from_indices(indices, ds.labels(), ds.num_classes()))
    }
}

/// Splits `total` into integer parts proportional to `props`; leftover units
/// go to the largest fractional remainders, ties to the lower index.
pub(crate) fn largest_remainder(props: &[f64], total: usize) -> Vec<usize> {
    let quotas: Vec<f64> = props.iter().map(|p| p * total as f64).collect();
    let mut parts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = parts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &k in order.iter().take(total.saturating_sub(assigned)) {
        parts[k] += 1;
    }
    parts
}

fn dirichlet<R: Rng>(k: usize, alpha: f64, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.into_iter().map(|g| g / total).collect()
    } else {
        // every gamma draw underflowed; put all mass on one client
        let mut p = vec![0.0; k];
        p[rng.random_range(0..k)] = 1.0;
        p
    }
}

/// Per-class Dirichlet(alpha) split of the dataset across `num_clients`.
pub fn dirichlet_partition(
    ds: &LabeledDataset,
    num_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<ClientPartition> {
    if num_clients == 0 {
        return Err(Error::param("data.num_clients", "must be at least 1"));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::param("data.alpha", format!("must be positive, got {alpha}")));
    }
    let mut rng = stream_rng(seed, Stream::Partition, &[]);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes()];
    for (i, &y) in ds.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    let mut indices = vec![Vec::new(); num_clients];
    for mut members in by_class {
        let props = dirichlet(num_clients, alpha, &mut rng);
        members.shuffle(&mut rng);
        let parts = largest_remainder(&props, members.len());
        let mut offset = 0;
        for (k, &n) in parts.iter().enumerate() {
            indices[k].extend_from_slice(&members[offset..offset + n]);
            offset += n;
        }
    }
    indices.iter_mut().for_each(|v| v.sort_unstable());
    Ok(ClientPartition::from_indices(indices, ds.labels(), ds.num_classes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub weak_noise_sigma: f64,
    pub strong_noise_sigma: f64,
    pub strong_mask_prob: f64,
    pub strong_scale_range: (f64, f64),
}

impl AugmentConfig {
    /// Corruption scaled to the class separation: weak 0.05, strong 0.15.
    pub fn for_class_sep(class_sep: f64) -> Self {
        Self {
            weak_noise_sigma: 0.05 * class_sep,
            strong_noise_sigma: 0.15 * class_sep,
            strong_mask_prob: 0.3,
            strong_scale_range: (0.8, 1.25),
        }
    }

    /// Both views equal the input.
    pub fn identity() -> Self {
        Self {
            weak_noise_sigma: 0.0,
            strong_noise_sigma: 0.0,
            strong_mask_prob: 0.0,
            strong_scale_range: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.weak_noise_sigma >= 0.0) {
            return Err(Error::param("augment.weak_sigma", "must be non-negative"));
        }
        // equality is allowed so the identity configuration is expressible
        if !(self.weak_noise_sigma <= self.strong_noise_sigma) {
            return Err(Error::param(
                "augment.strong_sigma",
                "must be at least augment.weak_sigma",
            ));
        }
        if !(0.0..=1.0).contains(&self.strong_mask_prob) {
            return Err(Error::param("augment.mask_prob", "must lie in [0, 1]"));
        }
        let (lo, hi) = self.strong_scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::param("augment.scale_lo", "need 0 < scale_lo <= scale_hi"));
        }
        Ok(())
    }
}

pub fn weak_augment<R: Rng>(x: &[f64], cfg: &AugmentConfig, rng: &mut R) -> Vec<f64> {
    let noise = Normal::new(0.0, cfg.weak_noise_sigma).expect("validated sigma");
    x.iter().map(|&v| v + noise.sample(rng)).collect()
}

pub fn strong_augment<R: Rng>(x: &[f64], cfg: &AugmentConfig, rng: &mut R) -> Vec<f64> {
    let noise = Normal::new(0.0, cfg.strong_noise_sigma).expect("validated sigma");
    let (lo, hi) = cfg.strong_scale_range;
    let scale = rng.random_range(lo..=hi);
    x.iter()
        .map(|&v| {
            let kept = if rng.random_bool(cfg.strong_mask_prob) { 0.0 } else { v };
            kept * scale + noise.sample(rng)
        })
        .collect()
}

/// Weak and strong views of the same rows.
pub fn augment_pair<R: Rng>(x: &Tensor, cfg: &AugmentConfig, rng: &mut R) -> Result<(Tensor, Tensor)> {
    let (n, d) = (x.rows(), x.cols());
    let mut weak = Vec::with_capacity(n * d);
    let mut strong = Vec::with_capacity(n * d);
    for i in 0..n {
        weak.extend(weak_augment(x.row(i), cfg, rng));
        strong.extend(strong_augment(x.row(i), cfg, rng));
    }
    Ok((Tensor::matrix(n, d, weak)?, Tensor::matrix(n, d, strong)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn longtail_examples() {
        assert_eq!(longtail_counts(10, 500, 1.0).unwrap(), vec![500; 10]);
        let lt = longtail_counts(10, 500, 100.0).unwrap();
        assert_eq!(lt[0], 500);
        assert_eq!(lt[9], 5);
        assert_eq!(longtail_counts(2, 100, 10.0).unwrap(), vec![100, 10]);
    }

    #[test]
    fn longtail_guards() {
        assert!(matches!(longtail_counts(10, 500, 0.5), Err(Error::Parameter { .. })));
        assert!(longtail_counts(1, 500, 2.0).is_err());
        assert!(longtail_counts(10, 5, 2.0).is_err());
    }

    #[test]
    fn synthetic_construction_and_determinism() {
        let ds = generate_synthetic(2, &[1, 1], 4, 3.0, 9).unwrap();
        assert_eq!(ds.labels(), &[0, 1]);
        let mix = SyntheticMixture::new(2, 4, 3.0, 9).unwrap();
        for i in 0..2 {
            let dist: f64 = ds
                .row(i)
                .iter()
                .zip(&mix.means()[i])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            // norm of a 4-d standard normal; 6 sigma per coordinate is very loose
            assert!(dist < 12.0);
        }
        let again = generate_synthetic(2, &[1, 1], 4, 3.0, 9).unwrap();
        assert_eq!(ds, again);
        assert!(generate_synthetic(2, &[1, 1], 1, 3.0, 9).is_err());
    }

    #[test]
    fn class_means_are_orthogonal_with_requested_norm() {
        let mix = SyntheticMixture::new(5, 8, 2.5, 1).unwrap();
        for (i, a) in mix.means().iter().enumerate() {
            let n = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 2.5).abs() < 1e-12);
            for b in &mix.means()[i + 1..] {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                assert!(dot.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_client_gets_everything() {
        let counts = longtail_counts(4, 40, 4.0).unwrap();
        let ds = generate_synthetic(4, &counts, 3, 1.0, 2).unwrap();
        let p = dirichlet_partition(&ds, 1, 0.5, 3).unwrap();
        assert_eq!(p.client_indices(0), (0..ds.len()).collect::<Vec<_>>().as_slice());
    }

    #[test]
    fn largest_remainder_is_exact() {
        assert_eq!(largest_remainder(&[0.5, 0.25, 0.25], 5), vec![3, 1, 1]);
        assert_eq!(largest_remainder(&[1.0 / 3.0; 3], 2), vec![1, 1, 0]);
        assert_eq!(largest_remainder(&[0.0, 1.0], 7), vec![0, 7]);
    }

    #[test]
    fn augment_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = vec![1.0, -2.0, 3.5];
        let mut cfg = AugmentConfig::for_class_sep(3.0);
        cfg.weak_noise_sigma = 0.0;
        assert_eq!(weak_augment(&x, &cfg, &mut rng), x);

        let cfg = AugmentConfig {
            weak_noise_sigma: 0.0,
            strong_noise_sigma: 0.0,
            strong_mask_prob: 1.0,
            strong_scale_range: (1.0, 1.0),
        };
        assert_eq!(strong_augment(&x, &cfg, &mut rng), vec![0.0; 3]);

        let id = AugmentConfig::identity();
        assert_eq!(strong_augment(&x, &id, &mut rng), x);
    }

    #[test]
    fn strong_corrupts_more_than_weak() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = AugmentConfig::for_class_sep(3.0);
        let x: Vec<f64> = (0..16).map(|i| (i as f64 - 8.0) / 4.0).collect();
        let dist = |a: &[f64]| a.iter().zip(&x).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        let (mut w, mut s) = (0.0, 0.0);
        for _ in 0..1000 {
            w += dist(&weak_augment(&x, &cfg, &mut rng));
            s += dist(&strong_augment(&x, &cfg, &mut rng));
        }
        assert!(s > w, "strong {s} weak {w}");
    }

    #[test]
    fn augment_config_validation() {
        assert!(AugmentConfig::for_class_sep(1.0).validate().is_ok());
        assert!(AugmentConfig::identity().validate().is_ok());
        let mut c = AugmentConfig::for_class_sep(1.0);
        c.strong_noise_sigma = 0.0;
        assert!(c.validate().is_err());
        let mut c = AugmentConfig::for_class_sep(1.0);
        c.strong_mask_prob = 1.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn dataset_file_roundtrip() {
        let ds = generate_synthetic(3, &[3, 2, 1], 2, 1.5, 4).unwrap();
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        assert!(buf.starts_with(b"FEDLT-DATA v1\n6 2 3\n"));
        let back = LabeledDataset::read_from(&buf[..]).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn dataset_parse_error_names_line() {
        let text = "FEDLT-DATA v1\n2 2 2\n0.5,1.0,0\n0.5,oops,1\n";
        match LabeledDataset::read_from(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn partition_file_roundtrip() {
        let counts = longtail_counts(3, 30, 3.0).unwrap();
        let ds = generate_synthetic(3, &counts, 2, 1.0, 1).unwrap();
        let p = dirichlet_partition(&ds, 4, 0.3, 2).unwrap();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        assert_eq!(ClientPartition::read_from(&buf[..], &ds).unwrap(), p);
    }
}
