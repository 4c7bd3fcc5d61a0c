//! Experiment configuration: a flat `section.key = value` text file that
//! fully determines a run, plus the variants compared under shared data.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{
    dirichlet_partition, generate_synthetic, longtail_counts, AugmentConfig, ClientPartition,
    LabeledDataset, SyntheticMixture,
};
use crate::error::{Error, Result};
use crate::federation::{Algorithm, ExperimentData, PriorMode, TrainConfig};
use crate::metrics::GroupThresholds;
use crate::model::ModelConfig;
use crate::seed::{stream_rng, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub num_classes: usize,
    pub input_dim: usize,
    pub class_sep: f64,
    pub n_max: usize,
    pub imbalance_factor: f64,
    pub test_per_class: usize,
    pub num_clients: usize,
    pub alpha: f64,
    /// Directory written by `generate`; when set, data is loaded from it
    /// instead of being generated inline.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            input_dim: 32,
            class_sep: 3.0,
            n_max: 500,
            imbalance_factor: 100.0,
            test_per_class: 100,
            num_clients: 10,
            alpha: 0.5,
            dir: None,
        }
    }
}

pub const TRAIN_FILE: &str = "train.data";
pub const TEST_FILE: &str = "test.data";
pub const PARTITION_FILE: &str = "partition.txt";

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::param("data.num_classes", "must be at least 2"));
        }
        if self.input_dim < 2 {
            return Err(Error::param("data.input_dim", "must be at least 2"));
        }
        if !(self.class_sep > 0.0) || !self.class_sep.is_finite() {
            return Err(Error::param("data.class_sep", "must be positive"));
        }
        if self.n_max < self.num_classes {
            return Err(Error::param("data.n_max", "must be at least data.num_classes"));
        }
        if !(self.imbalance_factor >= 1.0) || !self.imbalance_factor.is_finite() {
            return Err(Error::param("data.imbalance_factor", "must be at least 1"));
        }
        if self.test_per_class == 0 {
            return Err(Error::param("data.test_per_class", "must be positive"));
        }
        if self.num_clients == 0 {
            return Err(Error::param("data.num_clients", "must be at least 1"));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::param("data.alpha", "must be positive"));
        }
        Ok(())
    }

    /// Generates train set, balanced test set and client partition.
    pub fn generate(&self, seed: u64) -> Result<ExperimentData> {
        self.validate()?;
        let counts = longtail_counts(self.num_classes, self.n_max, self.imbalance_factor)?;
        let train = generate_synthetic(self.num_classes, &counts, self.input_dim, self.class_sep, seed)?;
        let mixture = SyntheticMixture::new(self.num_classes, self.input_dim, self.class_sep, seed)?;
        let mut rng = stream_rng(seed, Stream::TestSamples, &[]);
        let test = mixture.sample(&vec![self.test_per_class; self.num_classes], &mut rng)?;
        let partition = dirichlet_partition(&train, self.num_clients, self.alpha, seed)?;
        Ok(ExperimentData {
            train,
            test,
            partition,
        })
    }

    /// Loads data from `dir` if set, otherwise generates it.
    pub fn load_or_generate(&self, seed: u64) -> Result<ExperimentData> {
        match &self.dir {
            Some(dir) => read_data_dir(dir),
            None => self.generate(seed),
        }
    }
}

pub fn write_data_dir(dir: &Path, data: &ExperimentData) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut buf = Vec::new();
    data.train.write_to(&mut buf)?;
    fs::write(dir.join(TRAIN_FILE), &buf)?;
    buf.clear();
    data.test.write_to(&mut buf)?;
    fs::write(dir.join(TEST_FILE), &buf)?;
    buf.clear();
    data.partition.write_to(&mut buf)?;
    fs::write(dir.join(PARTITION_FILE), &buf)?;
    Ok(())
}

pub fn read_data_dir(dir: &Path) -> Result<ExperimentData> {
    let open = |name: &str| -> Result<std::io::BufReader<fs::File>> {
        Ok(std::io::BufReader::new(fs::File::open(dir.join(name))?))
    };
    let train = LabeledDataset::read_from(open(TRAIN_FILE)?)?;
    let test = LabeledDataset::read_from(open(TEST_FILE)?)?;
    let partition = ClientPartition::read_from(open(PARTITION_FILE)?, &train)?;
    Ok(ExperimentData {
        train,
        test,
        partition,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub extractor_dims: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            extractor_dims: vec![64, 64, 32],
        }
    }
}

/// Augmentation strengths. Unset noise levels follow the class separation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weak_sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strong_sigma: Option<f64>,
    pub mask_prob: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
}

impl Default for AugmentSection {
    fn default() -> Self {
        let d = AugmentConfig::for_class_sep(1.0);
        Self {
            weak_sigma: None,
            strong_sigma: None,
            mask_prob: d.strong_mask_prob,
            scale_lo: d.strong_scale_range.0,
            scale_hi: d.strong_scale_range.1,
        }
    }
}

impl AugmentSection {
    pub fn resolve(&self, class_sep: f64) -> AugmentConfig {
        let d = AugmentConfig::for_class_sep(class_sep);
        AugmentConfig {
            weak_noise_sigma: self.weak_sigma.unwrap_or(d.weak_noise_sigma),
            strong_noise_sigma: self.strong_sigma.unwrap_or(d.strong_noise_sigma),
            strong_mask_prob: self.mask_prob,
            strong_scale_range: (self.scale_lo, self.scale_hi),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub clients_per_round: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub temperature: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub ema_m: f64,
    pub prox_mu: f64,
    pub prior_mode: PriorMode,
    pub parallel: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            clients_per_round: 10,
            rounds: 50,
            local_epochs: 2,
            batch_size: 32,
            lr: 0.05,
            temperature: 1.5,
            lambda: 4.0,
            gamma: 0.5,
            ema_m: 0.9,
            prox_mu: 0.01,
            prior_mode: PriorMode::Estimated,
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupMode {
    Terciles,
    Absolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub groups: GroupMode,
    pub many_above: usize,
    pub few_below: usize,
    pub probe_size: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            groups: GroupMode::Terciles,
            many_above: 100,
            few_below: 20,
            probe_size: 200,
        }
    }
}

impl EvalSection {
    pub fn thresholds(&self) -> GroupThresholds {
        match self.groups {
            GroupMode::Terciles => GroupThresholds::Terciles,
            GroupMode::Absolute => GroupThresholds::Absolute {
                many_above: self.many_above,
                few_below: self.few_below,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub variants: Vec<String>,
    pub out_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            variants: vec!["fedavg".into(), "fedyoyo".into()],
            out_dir: PathBuf::from("runs"),
        }
    }
}

/// Named algorithm setting run against the shared data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    FedYoYo,
    /// FedYoYo without the distillation term.
    FedYoYoNoAsd,
    /// FedYoYo with a uniform prior at unit temperature.
    FedYoYoNoDla,
    FedAvg,
    FedAvgBsm,
    FedProx,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::FedYoYo,
        Variant::FedYoYoNoAsd,
        Variant::FedYoYoNoDla,
        Variant::FedAvg,
        Variant::FedAvgBsm,
        Variant::FedProx,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::FedYoYo => "fedyoyo",
            Variant::FedYoYoNoAsd => "fedyoyo_no_asd",
            Variant::FedYoYoNoDla => "fedyoyo_no_dla",
            Variant::FedAvg => "fedavg",
            Variant::FedAvgBsm => "fedavg_bsm",
            Variant::FedProx => "fedprox",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s.trim())
            .ok_or_else(|| {
                let known: Vec<_> = Self::ALL.iter().map(|v| v.name()).collect();
                Error::param(
                    "run.variants",
                    format!("unknown variant `{s}` (known: {})", known.join(", ")),
                )
            })
    }

    pub fn algorithm(self) -> Algorithm {
        match self {
            Variant::FedYoYo | Variant::FedYoYoNoAsd | Variant::FedYoYoNoDla => Algorithm::FedYoYo,
            Variant::FedAvg => Algorithm::FedAvg,
            Variant::FedAvgBsm => Algorithm::FedAvgBsm,
            Variant::FedProx => Algorithm::FedProx,
        }
    }
}

/// Parameters `sweep` may vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Gamma,
    Lambda,
    Alpha,
    ImbalanceFactor,
}

impl SweepParam {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gamma" => Ok(SweepParam::Gamma),
            "lambda" => Ok(SweepParam::Lambda),
            "alpha" => Ok(SweepParam::Alpha),
            "IF" | "if" | "imbalance_factor" => Ok(SweepParam::ImbalanceFactor),
            other => Err(Error::Config(format!(
                "unknown sweep parameter `{other}` (expected gamma, lambda, alpha or IF)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Gamma => "gamma",
            SweepParam::Lambda => "lambda",
            SweepParam::Alpha => "alpha",
            SweepParam::ImbalanceFactor => "IF",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelSection,
    pub augment: AugmentSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub run: RunSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            data: DataConfig::default(),
            model: ModelSection::default(),
            augment: AugmentSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            run: RunSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates config text. Unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Flat `section.key = value` lines, sorted within each section.
    pub fn to_text(&self) -> String {
        let value = toml::Value::try_from(self).expect("config is always representable");
        let mut out = String::new();
        flatten_into(&mut out, "", &value);
        out
    }

    pub fn variants(&self) -> Result<Vec<Variant>> {
        if self.run.variants.is_empty() {
            return Err(Error::param("run.variants", "must list at least one variant"));
        }
        self.run.variants.iter().map(|s| Variant::parse(s)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        let variants = self.variants()?;
        for v in variants {
            self.train_config(v)?;
        }
        Ok(())
    }

    /// Resolved settings for one variant.
    pub fn train_config(&self, variant: Variant) -> Result<TrainConfig> {
        let t = &self.train;
        let mut cfg = TrainConfig {
            name: variant.name().to_string(),
            algorithm: variant.algorithm(),
            num_clients: self.data.num_clients,
            clients_per_round: t.clients_per_round,
            rounds: t.rounds,
            local_epochs: t.local_epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            temperature: t.temperature,
            lambda: t.lambda,
            gamma: t.gamma,
            ema_m: t.ema_m,
            prox_mu: t.prox_mu,
            prior_mode: t.prior_mode,
            seed: self.seed,
            parallel: t.parallel,
            model: ModelConfig::new(
                self.data.input_dim,
                self.model.extractor_dims.clone(),
                self.data.num_classes,
            ),
            augment: self.augment.resolve(self.data.class_sep),
            thresholds: self.eval.thresholds(),
            probe_size: self.eval.probe_size,
        };
        match variant {
            Variant::FedYoYoNoAsd => cfg.lambda = 0.0,
            Variant::FedYoYoNoDla => {
                cfg.prior_mode = PriorMode::Uniform;
                cfg.temperature = 1.0;
            }
            _ => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_param(&self, param: SweepParam, value: f64) -> Result<Self> {
        let mut cfg = self.clone();
        match param {
            SweepParam::Gamma => cfg.train.gamma = value,
            SweepParam::Lambda => cfg.train.lambda = value,
            SweepParam::Alpha => cfg.data.alpha = value,
            SweepParam::ImbalanceFactor => cfg.data.imbalance_factor = value,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn flatten_into(out: &mut String, prefix: &str, value: &toml::Value) {
    match value {
        toml::Value::Table(table) => {
            // scalars first so top-level keys precede every section
            let (tables, leaves): (Vec<_>, Vec<_>) = table.iter().partition(|(_, v)| v.is_table());
            for (k, v) in leaves.into_iter().chain(tables) {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten_into(out, &key, v);
            }
        }
        leaf => {
            out.push_str(prefix);
            out.push_str(" = ");
            out.push_str(&leaf.to_string());
            out.push('\n');
        }
    }
}
