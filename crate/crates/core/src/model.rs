//! MLP classifier: a relu feature extractor followed by a linear head.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sgd_step, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const CHECKPOINT_HEADER: &str = "FEDLT-CKPT v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Output width of each extractor layer; the last entry is the feature
    /// dimension. Empty means the raw input is used as the feature.
    pub extractor_dims: Vec<usize>,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn new(input_dim: usize, extractor_dims: Vec<usize>, num_classes: usize) -> Self {
        Self {
            input_dim,
            extractor_dims,
            num_classes,
        }
    }

    /// input → 64 → 64 → 32 features → head.
    pub fn default_for(input_dim: usize, num_classes: usize) -> Self {
        Self::new(input_dim, vec![64, 64, 32], num_classes)
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor_dims.last().copied().unwrap_or(self.input_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::param("model.input_dim", "must be positive"));
        }
        if self.num_classes == 0 {
            return Err(Error::param("model.num_classes", "must be positive"));
        }
        if self.extractor_dims.iter().any(|&d| d == 0) {
            return Err(Error::param("model.extractor_dims", "widths must be positive"));
        }
        Ok(())
    }

    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::new();
        let mut fan_in = self.input_dim;
        for &d in &self.extractor_dims {
            shapes.push((fan_in, d));
            fan_in = d;
        }
        shapes.push((fan_in, self.num_classes));
        shapes
    }

    pub fn manifest(&self) -> Vec<ParamSpec> {
        let shapes = self.layer_shapes();
        let last = shapes.len() - 1;
        let mut out = Vec::with_capacity(shapes.len() * 2);
        for (i, &(fan_in, fan_out)) in shapes.iter().enumerate() {
            let prefix = if i == last {
                "head".to_string()
            } else {
                format!("extractor.{i}")
            };
            out.push(ParamSpec {
                name: format!("{prefix}.weight"),
                shape: vec![fan_in, fan_out],
            });
            out.push(ParamSpec {
                name: format!("{prefix}.bias"),
                shape: vec![fan_out],
            });
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Flat ordered parameter vector plus its shape manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    manifest: Vec<ParamSpec>,
    values: Vec<f64>,
}

impl ModelParams {
    pub fn new(manifest: Vec<ParamSpec>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = manifest.iter().map(ParamSpec::numel).sum();
        if expected != values.len() {
            return Err(Error::Aggregation(format!(
                "manifest describes {expected} values, got {}",
                values.len()
            )));
        }
        Ok(Self { manifest, values })
    }

    pub fn manifest(&self) -> &[ParamSpec] {
        &self.manifest
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Header line, one `name dims...` line per tensor, a blank line, then
    /// the little-endian f64 payload.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{CHECKPOINT_HEADER}")?;
        for spec in &self.manifest {
            let dims: Vec<String> = spec.shape.iter().map(usize::to_string).collect();
            writeln!(w, "{} {}", spec.name, dims.join(" "))?;
        }
        writeln!(w)?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(mut r: R) -> Result<Self> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != CHECKPOINT_HEADER {
            return Err(Error::Parse {
                line: 1,
                detail: format!("expected `{CHECKPOINT_HEADER}`"),
            });
        }
        let mut manifest = Vec::new();
        let mut lineno = 1;
        loop {
            line.clear();
            lineno += 1;
            if r.read_line(&mut line)? == 0 {
                return Err(Error::Parse {
                    line: lineno,
                    detail: "unexpected end of manifest".into(),
                });
            }
            let l = line.trim_end_matches('\n');
            if l.is_empty() {
                break;
            }
            let mut parts = l.split(' ');
            let name = parts.next().unwrap_or_default().to_string();
            let shape = parts
                .map(|p| p.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    line: lineno,
                    detail: e.to_string(),
                })?;
            if name.is_empty() || shape.is_empty() {
                return Err(Error::Parse {
                    line: lineno,
                    detail: "manifest line needs a name and at least one dim".into(),
                });
            }
            manifest.push(ParamSpec { name, shape });
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        if payload.len() % 8 != 0 {
            return Err(Error::Parse {
                line: lineno + 1,
                detail: "payload is not a whole number of f64 values".into(),
            });
        }
        let values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Self::new(manifest, values)
    }
}

/// Parameter handles of one model bound onto a tape.
#[derive(Debug, Clone)]
pub struct BoundParams(Vec<Var>);

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpClassifier {
    config: ModelConfig,
    params: Vec<Tensor>,
}

impl MlpClassifier {
    /// Uniform(-s, s) initialization with s = 1/sqrt(fan_in).
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = Vec::new();
        for (fan_in, fan_out) in config.layer_shapes() {
            let s = 1.0 / (fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| rng.random_range(-s..s)).collect();
            let b = (0..fan_out).map(|_| rng.random_range(-s..s)).collect();
            params.push(Tensor::matrix(fan_in, fan_out, w)?.with_requires_grad(true));
            params.push(Tensor::vector(b)?.with_requires_grad(true));
        }
        Ok(Self { config, params })
    }

    /// All parameters zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = config
            .manifest()
            .into_iter()
            .map(|s| Tensor::zeros(s.shape).with_requires_grad(true))
            .collect();
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn flatten(&self) -> ModelParams {
        let values = self
            .params
            .iter()
            .flat_map(|p| p.values().iter().copied())
            .collect();
        ModelParams {
            manifest: self.config.manifest(),
            values,
        }
    }

    pub fn unflatten(&mut self, params: &ModelParams) -> Result<()> {
        if params.manifest != self.config.manifest() {
            return Err(Error::Aggregation(
                "parameter manifest does not match model architecture".into(),
            ));
        }
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.len();
            p.values_mut()
                .copy_from_slice(&params.values[offset..offset + n]);
            p.zero_grad();
            offset += n;
        }
        Ok(())
    }

    pub fn from_params(config: ModelConfig, params: &ModelParams) -> Result<Self> {
        let mut m = Self::zeros(config)?;
        m.unflatten(params)?;
        Ok(m)
    }

    /// Records every parameter as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams(self.params.iter().map(|p| tape.leaf(p.clone())).collect())
    }

    /// Records every parameter as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundParams {
        BoundParams(self.params.iter().map(|p| tape.constant(p.clone())).collect())
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let s = tape.value(x).shape();
        if s.len() != 2 || s[1] != self.config.input_dim {
            return Err(Error::Dimension {
                op: "forward",
                left: s.to_vec(),
                right: vec![self.config.input_dim],
            });
        }
        Ok(())
    }

    pub fn forward_features(&self, tape: &mut Tape, bound: &BoundParams, x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        let mut h = x;
        let layers = self.config.extractor_dims.len();
        for i in 0..layers {
            let z = tape.matmul(h, bound.0[2 * i])?;
            let z = tape.add_row_bias(z, bound.0[2 * i + 1])?;
            h = tape.relu(z);
        }
        Ok(h)
    }

    /// Applies the linear head to precomputed features.
    pub fn head(&self, tape: &mut Tape, bound: &BoundParams, features: Var) -> Result<Var> {
        let k = 2 * self.config.extractor_dims.len();
        let z = tape.matmul(features, bound.0[k])?;
        tape.add_row_bias(z, bound.0[k + 1])
    }

    pub fn forward_logits(&self, tape: &mut Tape, bound: &BoundParams, x: Var) -> Result<Var> {
        let h = self.forward_features(tape, bound, x)?;
        self.head(tape, bound, h)
    }

    /// Inference-only features for a batch.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let h = self.forward_features(&mut tape, &bound, xv)?;
        Ok(tape.value(h).clone())
    }

    /// Inference-only logits and features for a batch.
    pub fn logits_and_features(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let h = self.forward_features(&mut tape, &bound, xv)?;
        let z = self.head(&mut tape, &bound, h)?;
        Ok((tape.value(z).clone(), tape.value(h).clone()))
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.logits_and_features(x)?.0)
    }

    /// Copies leaf gradients from a tape back into the parameter buffers.
    pub fn absorb_grads(&mut self, tape: &Tape, bound: &BoundParams) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(&bound.0) {
            match tape.grad(v) {
                Some(g) => p.accumulate_grad(g)?,
                None => p.accumulate_grad(&vec![0.0; p.len()])?,
            }
        }
        Ok(())
    }

    pub fn sgd_step(&mut self, lr: f64) -> Result<()> {
        sgd_step(&mut self.params, lr)
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Tensor::zero_grad);
    }
}

/// Per-class arithmetic mean of feature rows. Classes with no rows are absent.
pub fn class_prototypes(features: &Tensor, labels: &[usize]) -> BTreeMap<usize, Vec<f64>> {
    let d = features.cols();
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        let entry = sums.entry(y).or_insert_with(|| (vec![0.0; d], 0));
        entry
            .0
            .iter_mut()
            .zip(features.row(i))
            .for_each(|(s, x)| *s += x);
        entry.1 += 1;
    }
    sums.into_iter()
        .map(|(c, (s, n))| (c, s.into_iter().map(|v| v / n as f64).collect()))
        .collect()
}

/// Row-wise argmax with ties broken toward the lowest index.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|i| {
            let row = t.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
