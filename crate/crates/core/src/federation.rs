//! Round engine: client sampling, local training, FedAvg aggregation of
//! models and class priors, and per-round evaluation.

use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::dataset::{augment_pair, AugmentConfig, ClientPartition, LabeledDataset};
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, total_loss, AdjustedSoftmaxParams, PriorDistribution};
use crate::metrics::{
    feature_similarity_from, grouped_accuracy, nc_angles, prior_l2, Centering, GroupThresholds,
    RoundMetrics,
};
use crate::model::{argmax_rows, class_prototypes, MlpClassifier, ModelConfig, ModelParams};
use crate::prior::{aggregate_global_prior, ema_update, fuse, EffectivePriorAccumulator, PriorEstimate, PriorUpload};
use crate::seed::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[serde(rename = "fedyoyo")]
    FedYoYo,
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fedavg_bsm")]
    FedAvgBsm,
    #[serde(rename = "fedprox")]
    FedProx,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::FedYoYo => "fedyoyo",
            Algorithm::FedAvg => "fedavg",
            Algorithm::FedAvgBsm => "fedavg_bsm",
            Algorithm::FedProx => "fedprox",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedyoyo" => Ok(Algorithm::FedYoYo),
            "fedavg" => Ok(Algorithm::FedAvg),
            "fedavg_bsm" => Ok(Algorithm::FedAvgBsm),
            "fedprox" => Ok(Algorithm::FedProx),
            other => Err(Error::param("algorithm", format!("unknown algorithm `{other}`"))),
        }
    }
}

/// Source of the class prior used by the adjusted softmax in FedYoYo.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    /// Correlation-based estimate fused with the global prior.
    Estimated,
    /// Uniform prior at temperature 1, i.e. plain softmax.
    Uniform,
}

/// Fully resolved settings for one federated run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub name: String,
    pub algorithm: Algorithm,
    pub num_clients: usize,
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
    pub seed: u64,
    pub parallel: bool,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    pub thresholds: GroupThresholds,
    pub probe_size: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::param("data.num_clients", "must be at least 1"));
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.num_clients {
            return Err(Error::param(
                "train.clients_per_round",
                format!("must lie in [1, {}]", self.num_clients),
            ));
        }
        if self.local_epochs == 0 {
            return Err(Error::param("train.local_epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("train.batch_size", "must be positive"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::param("train.lr", "must be finite and non-negative"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::param("train.temperature", "must be positive"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::param("train.lambda", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::param("train.gamma", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.ema_m) {
            return Err(Error::param("train.ema_m", "must lie in [0, 1]"));
        }
        if !(self.prox_mu >= 0.0) {
            return Err(Error::param("train.prox_mu", "must be non-negative"));
        }
        self.model.validate()?;
        self.augment.validate()
    }
}

/// Per-client state that persists across rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: usize,
    pub indices: Vec<usize>,
    pub class_counts: Vec<usize>,
    /// EMA-smoothed local prior; uniform until the first estimate arrives.
    pub prior: PriorDistribution,
    /// Whether `prior` holds an estimate yet. The first estimate replaces the
    /// uniform placeholder instead of being averaged into it.
    pub estimated: bool,
}

impl ClientState {
    pub fn from_partition(partition: &ClientPartition, num_classes: usize) -> Vec<Self> {
        (0..partition.num_clients())
            .map(|k| ClientState {
                id: k,
                indices: partition.client_indices(k).to_vec(),
                class_counts: partition.client_class_counts(k).to_vec(),
                prior: PriorDistribution::uniform(num_classes),
                estimated: false,
            })
            .collect()
    }

    pub fn num_samples(&self) -> usize {
        self.indices.len()
    }

    /// Folds a fresh estimate into the smoothed prior.
    pub fn absorb_estimate(&mut self, estimate: &PriorEstimate, momentum: f64) -> Result<()> {
        self.prior = if self.estimated {
            ema_update(&self.prior, estimate.normalized(), momentum)?
        } else {
            estimate.normalized().clone()
        };
        self.estimated = true;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub params: ModelParams,
    pub global_prior: PriorDistribution,
    pub round: usize,
}

/// Batch-mean losses over one local epoch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossMeans {
    pub total: f64,
    pub dla: Option<f64>,
    pub asd: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub client_id: usize,
    pub num_samples: usize,
    pub model: MlpClassifier,
    pub estimate: Option<PriorEstimate>,
    pub first_epoch: LossMeans,
    pub last_epoch: LossMeans,
}

impl LocalOutcome {
    pub fn params(&self) -> ModelParams {
        self.model.flatten()
    }
}

fn epoch_batches(
    indices: &[usize],
    batch_size: usize,
    rng: &mut impl rand::Rng,
) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

#[derive(Default)]
struct EpochAccumulator {
    total: f64,
    dla: f64,
    asd: f64,
    batches: usize,
    components: bool,
}

impl EpochAccumulator {
    fn finish(&self) -> LossMeans {
        let n = self.batches.max(1) as f64;
        LossMeans {
            total: self.total / n,
            dla: self.components.then(|| self.dla / n),
            asd: self.components.then(|| self.asd / n),
        }
    }
}

/// Softmax parameters FedYoYo uses for one client in one round.
pub fn fedyoyo_softmax_params(
    client_prior: &PriorDistribution,
    global_prior: &PriorDistribution,
    cfg: &TrainConfig,
) -> Result<AdjustedSoftmaxParams> {
    match cfg.prior_mode {
        PriorMode::Estimated => {
            let mix = fuse(global_prior, client_prior, cfg.gamma)?;
            AdjustedSoftmaxParams::new(&mix, cfg.temperature)
        }
        PriorMode::Uniform => Ok(AdjustedSoftmaxParams::plain(client_prior.len())),
    }
}

/// Local FedYoYo update. Returns `None` for a client without samples.
pub fn local_train_fedyoyo(
    client: &ClientState,
    global: &ModelParams,
    global_prior: &PriorDistribution,
    cfg: &TrainConfig,
    data: &LabeledDataset,
    round: usize,
) -> Result<Option<LocalOutcome>> {
    if client.indices.is_empty() {
        return Ok(None);
    }
    let mut model = MlpClassifier::from_params(cfg.model.clone(), global)?;
    let params = fedyoyo_softmax_params(&client.prior, global_prior, cfg)?;
    let keys = [round as u64, client.id as u64];
    let mut shuffle_rng = stream_rng(cfg.seed, Stream::Shuffle, &keys);
    let mut aug_rng = stream_rng(cfg.seed, Stream::Augment, &keys);

    let mut first = None;
    let mut last = LossMeans::default();
    // one estimate per round, spanning every local epoch
    let mut prior_acc = EffectivePriorAccumulator::new(cfg.model.num_classes, cfg.model.feature_dim());
    for epoch in 0..cfg.local_epochs {
        let mut acc = EpochAccumulator {
            components: true,
            ..Default::default()
        };
        for batch in epoch_batches(&client.indices, cfg.batch_size, &mut shuffle_rng) {
            let (x, labels) = data.gather(&batch)?;
            let (weak, strong) = augment_pair(&x, &cfg.augment, &mut aug_rng)?;
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let xw = tape.constant(weak);
            let xs = tape.constant(strong);
            let hw = model.forward_features(&mut tape, &bound, xw)?;
            let zw = model.head(&mut tape, &bound, hw)?;
            let zs = model.forward_logits(&mut tape, &bound, xs)?;
            let parts = total_loss(&mut tape, zw, zs, &labels, &params, cfg.lambda)?;
            prior_acc.observe(tape.value(hw), &labels)?;
            tape.backward(parts.total)?;
            model.absorb_grads(&tape, &bound)?;
            model.sgd_step(cfg.lr)?;
            acc.total += tape.value(parts.total).item();
            acc.dla += tape.value(parts.dla).item();
            acc.asd += tape.value(parts.asd).item();
            acc.batches += 1;
        }
        let means = acc.finish();
        if epoch == 0 {
            first = Some(means);
        }
        last = means;
    }
    Ok(Some(LocalOutcome {
        client_id: client.id,
        num_samples: client.num_samples(),
        model,
        estimate: Some(prior_acc.finish()?),
        first_epoch: first.unwrap_or_default(),
        last_epoch: last,
    }))
}

/// FedAvg / FedProx / count-based balanced softmax on clean data.
pub fn local_train_baseline(
    client: &ClientState,
    global: &ModelParams,
    cfg: &TrainConfig,
    data: &LabeledDataset,
    round: usize,
) -> Result<Option<LocalOutcome>> {
    if client.indices.is_empty() {
        return Ok(None);
    }
    let mut model = MlpClassifier::from_params(cfg.model.clone(), global)?;
    let params = match cfg.algorithm {
        Algorithm::FedAvgBsm => AdjustedSoftmaxParams::new(
            &PriorDistribution::from_counts(&client.class_counts),
            cfg.temperature,
        )?,
        _ => AdjustedSoftmaxParams::plain(cfg.model.num_classes),
    };
    let prox_mu = if cfg.algorithm == Algorithm::FedProx {
        cfg.prox_mu
    } else {
        0.0
    };
    let anchor: Vec<Tensor> = MlpClassifier::from_params(cfg.model.clone(), global)?
        .params()
        .to_vec();
    let keys = [round as u64, client.id as u64];
    let mut shuffle_rng = stream_rng(cfg.seed, Stream::Shuffle, &keys);

    let mut first = None;
    let mut last = LossMeans::default();
    for epoch in 0..cfg.local_epochs {
        let mut acc = EpochAccumulator::default();
        for batch in epoch_batches(&client.indices, cfg.batch_size, &mut shuffle_rng) {
            let (x, labels) = data.gather(&batch)?;
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let xv = tape.constant(x);
            let z = model.forward_logits(&mut tape, &bound, xv)?;
            let mut loss = cross_entropy(&mut tape, z, &labels, &params)?;
            if prox_mu > 0.0 {
                let mut sq_terms = Vec::with_capacity(anchor.len());
                for (&p, a) in bound.vars().iter().zip(&anchor) {
                    let a = tape.constant(a.clone());
                    let d = tape.sub(p, a)?;
                    let sq = tape.mul(d, d)?;
                    sq_terms.push(tape.sum(sq));
                }
                let mut prox = sq_terms[0];
                for &t in &sq_terms[1..] {
                    prox = tape.add(prox, t)?;
                }
                let prox = tape.scale(prox, prox_mu / 2.0);
                loss = tape.add(loss, prox)?;
            }
            tape.backward(loss)?;
            model.absorb_grads(&tape, &bound)?;
            model.sgd_step(cfg.lr)?;
            acc.total += tape.value(loss).item();
            acc.batches += 1;
        }
        let means = acc.finish();
        if epoch == 0 {
            first = Some(means);
        }
        last = means;
    }
    Ok(Some(LocalOutcome {
        client_id: client.id,
        num_samples: client.num_samples(),
        model,
        estimate: None,
        first_epoch: first.unwrap_or_default(),
        last_epoch: last,
    }))
}

/// Coordinate-wise mean weighted by `weights / Σ weights`.
pub fn fedavg_aggregate(params: &[&ModelParams], weights: &[f64]) -> Result<ModelParams> {
    let first = params
        .first()
        .ok_or_else(|| Error::Aggregation("no client models to aggregate".into()))?;
    if params.len() != weights.len() {
        return Err(Error::Aggregation(format!(
            "{} models but {} weights",
            params.len(),
            weights.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || weights.iter().any(|w| *w < 0.0) {
        return Err(Error::Aggregation("weights must be non-negative with a positive sum".into()));
    }
    let mut out = vec![0.0; first.len()];
    for (p, w) in params.iter().zip(weights) {
        if p.manifest() != first.manifest() {
            return Err(Error::Aggregation("client manifests differ".into()));
        }
        let share = w / total;
        out.iter_mut()
            .zip(p.values())
            .for_each(|(o, v)| *o += share * v);
    }
    ModelParams::new(first.manifest().to_vec(), out)
}

/// Immutable data shared by every round of a run.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub partition: ClientPartition,
}

impl ExperimentData {
    pub fn oracle_prior(&self) -> PriorDistribution {
        PriorDistribution::from_counts(self.train.class_counts()).normalized()
    }

    fn probe_indices(&self, probe_size: usize) -> Vec<usize> {
        let n = self.test.len();
        let k = probe_size.min(n);
        (0..k).map(|i| i * n / k.max(1)).collect()
    }
}

/// Evaluates `model` on the balanced test set.
pub fn evaluate(
    model: &MlpClassifier,
    data: &ExperimentData,
    cfg: &TrainConfig,
    round: usize,
) -> Result<RoundMetrics> {
    let (logits, features) = model.logits_and_features(data.test.inputs())?;
    let preds = argmax_rows(&logits);
    let acc = grouped_accuracy(&preds, data.test.labels(), data.train.class_counts(), cfg.thresholds)?;
    let protos = class_prototypes(&features, data.test.labels());
    let nc = nc_angles(&protos, Centering::Global).ok();
    Ok(RoundMetrics {
        round,
        algorithm: cfg.name.clone(),
        participants: 0,
        loss_total: None,
        loss_dla: None,
        loss_asd: None,
        acc_all: acc.all,
        acc_many: acc.many,
        acc_medium: acc.medium,
        acc_few: acc.few,
        nc_min_angle: nc.map(|a| a.min),
        nc_max_angle: nc.map(|a| a.max),
        nc_mean_angle: nc.map(|a| a.mean),
        nc_etf_angle: nc.map(|a| a.etf_optimum),
        prior_l2: None,
        feat_cos_global_local: None,
    })
}

/// Participants of round `round`, ascending.
pub fn sample_clients(cfg: &TrainConfig, round: usize) -> Vec<usize> {
    if cfg.clients_per_round == cfg.num_clients {
        return (0..cfg.num_clients).collect();
    }
    let mut rng = stream_rng(cfg.seed, Stream::Sampling, &[round as u64]);
    let mut picked = index::sample(&mut rng, cfg.num_clients, cfg.clients_per_round).into_vec();
    picked.sort_unstable();
    picked
}

fn train_client(
    client: &ClientState,
    server: &ServerState,
    cfg: &TrainConfig,
    data: &ExperimentData,
    round: usize,
) -> Result<Option<LocalOutcome>> {
    match cfg.algorithm {
        Algorithm::FedYoYo => {
            local_train_fedyoyo(client, &server.params, &server.global_prior, cfg, &data.train, round)
        }
        _ => local_train_baseline(client, &server.params, cfg, &data.train, round),
    }
}

/// Metrics of one round plus the prior estimates clients uploaded.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundReport {
    #[serde(flatten)]
    pub metrics: RoundMetrics,
    pub uploads: Vec<PriorUpload>,
}

/// Runs one communication round.
pub fn run_round(
    server: &mut ServerState,
    clients: &mut [ClientState],
    cfg: &TrainConfig,
    data: &ExperimentData,
) -> Result<RoundReport> {
    let round = server.round + 1;
    let participants = sample_clients(cfg, round);
    let outcomes: Vec<Option<LocalOutcome>> = if cfg.parallel {
        participants
            .par_iter()
            .map(|&k| train_client(&clients[k], server, cfg, data, round))
            .collect::<Result<_>>()?
    } else {
        participants
            .iter()
            .map(|&k| train_client(&clients[k], server, cfg, data, round))
            .collect::<Result<_>>()?
    };
    let outcomes: Vec<LocalOutcome> = outcomes.into_iter().flatten().collect();

    if !outcomes.is_empty() {
        let flat: Vec<ModelParams> = outcomes.iter().map(LocalOutcome::params).collect();
        let refs: Vec<&ModelParams> = flat.iter().collect();
        let weights: Vec<f64> = outcomes.iter().map(|o| o.num_samples as f64).collect();
        server.params = fedavg_aggregate(&refs, &weights)?;
    }

    let mut uploads = Vec::new();
    for o in &outcomes {
        if let Some(est) = &o.estimate {
            let client = &mut clients[o.client_id];
            client.absorb_estimate(est, cfg.ema_m)?;
            uploads.push(PriorUpload {
                prior: client.prior.weights().to_vec(),
                num_samples: o.num_samples,
            });
        }
    }
    if !uploads.is_empty() {
        server.global_prior = aggregate_global_prior(&uploads)?;
    }
    server.round = round;

    let global = MlpClassifier::from_params(cfg.model.clone(), &server.params)?;
    let mut metrics = evaluate(&global, data, cfg, round)?;
    metrics.participants = outcomes.len();
    if !outcomes.is_empty() {
        let n = outcomes.len() as f64;
        let mean = |f: &dyn Fn(&LossMeans) -> Option<f64>| -> Option<f64> {
            outcomes
                .iter()
                .map(|o| f(&o.last_epoch))
                .sum::<Option<f64>>()
                .map(|s| s / n)
        };
        metrics.loss_total = mean(&|l| Some(l.total));
        metrics.loss_dla = mean(&|l| l.dla);
        metrics.loss_asd = mean(&|l| l.asd);

        let (probe, _) = data.test.gather(&data.probe_indices(cfg.probe_size))?;
        let g = global.features(&probe)?;
        metrics.feat_cos_global_local = Some(feature_similarity_from(
            &g,
            outcomes.iter().map(|o| o.model.features(&probe)),
        )?);
    }
    if !uploads.is_empty() {
        metrics.prior_l2 = Some(prior_l2(&server.global_prior, &data.oracle_prior())?);
    }
    Ok(RoundReport { metrics, uploads })
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    /// Evaluation of the initial model before any training.
    pub initial: RoundMetrics,
    pub rounds: Vec<RoundReport>,
    pub server: ServerState,
}

impl ExperimentResult {
    pub fn final_metrics(&self) -> &RoundMetrics {
        self.rounds.last().map_or(&self.initial, |r| &r.metrics)
    }

    pub fn metrics(&self) -> impl Iterator<Item = &RoundMetrics> {
        self.rounds.iter().map(|r| &r.metrics)
    }

    pub fn csv_log(&self) -> String {
        let mut s = RoundMetrics::csv_header();
        s.push('\n');
        for m in self.metrics() {
            s.push_str(&m.to_csv_row());
            s.push('\n');
        }
        s
    }

    /// One JSON object per round, including the uploaded priors.
    pub fn json_log(&self) -> String {
        self.rounds
            .iter()
            .map(|r| serde_json::to_string(r).expect("finite metrics serialize") + "\n")
            .collect()
    }
}

pub fn initial_model(cfg: &TrainConfig) -> Result<MlpClassifier> {
    let mut rng = stream_rng(cfg.seed, Stream::Init, &[]);
    MlpClassifier::new(cfg.model.clone(), &mut rng)
}

pub fn run_experiment(cfg: &TrainConfig, data: &ExperimentData) -> Result<ExperimentResult> {
    cfg.validate()?;
    if data.partition.num_clients() != cfg.num_clients {
        return Err(Error::param(
            "data.num_clients",
            format!(
                "partition has {} clients, config expects {}",
                data.partition.num_clients(),
                cfg.num_clients
            ),
        ));
    }
    let model = initial_model(cfg)?;
    let num_classes = cfg.model.num_classes;
    let mut server = ServerState {
        params: model.flatten(),
        global_prior: PriorDistribution::uniform(num_classes),
        round: 0,
    };
    let mut clients = ClientState::from_partition(&data.partition, num_classes);
    let initial = evaluate(&model, data, cfg, 0)?;
    let mut rounds = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        rounds.push(run_round(&mut server, &mut clients, cfg, data)?);
    }
    Ok(ExperimentResult {
        initial,
        rounds,
        server,
    })
}

/// Single-holder counterpart of FedYoYo: the whole training set on one
/// learner, with its own smoothed estimate serving as both global and local
/// prior. Returns the final parameters and prior.
pub fn train_centralized(
    cfg: &TrainConfig,
    train: &LabeledDataset,
) -> Result<(ModelParams, PriorDistribution)> {
    let num_classes = cfg.model.num_classes;
    let mut params = initial_model(cfg)?.flatten();
    let mut learner = ClientState {
        id: 0,
        indices: (0..train.len()).collect(),
        class_counts: train.class_counts().to_vec(),
        prior: PriorDistribution::uniform(num_classes),
        estimated: false,
    };
    let mut global_prior = PriorDistribution::uniform(num_classes);
    for round in 1..=cfg.rounds {
        let out = local_train_fedyoyo(&learner, &params, &global_prior, cfg, train, round)?
            .ok_or_else(|| Error::Contract("empty training set".into()))?;
        params = out.params();
        if let Some(est) = &out.estimate {
            learner.absorb_estimate(est, cfg.ema_m)?;
            global_prior = learner.prior.normalized();
        }
    }
    Ok((params, global_prior))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{dirichlet_partition, generate_synthetic, longtail_counts, SyntheticMixture};

    fn small_data(seed: u64, clients: usize) -> ExperimentData {
        let counts = longtail_counts(4, 40, 8.0).unwrap();
        let train = generate_synthetic(4, &counts, 6, 3.0, seed).unwrap();
        let mix = SyntheticMixture::new(4, 6, 3.0, seed).unwrap();
        let test = mix
            .sample(&[10; 4], &mut stream_rng(seed, Stream::TestSamples, &[]))
            .unwrap();
        let partition = dirichlet_partition(&train, clients, 0.5, seed).unwrap();
        ExperimentData {
            train,
            test,
            partition,
        }
    }

    fn small_cfg(algorithm: Algorithm, clients: usize) -> TrainConfig {
        TrainConfig {
            name: algorithm.to_string(),
            algorithm,
            num_clients: clients,
            clients_per_round: clients,
            rounds: 2,
            local_epochs: 2,
            batch_size: 8,
            lr: 0.05,
            temperature: 1.5,
            lambda: 4.0,
            gamma: 0.5,
            ema_m: 0.9,
            prox_mu: 0.01,
            prior_mode: PriorMode::Estimated,
            seed: 3,
            parallel: false,
            model: ModelConfig::new(6, vec![8, 5], 4),
            augment: AugmentConfig::for_class_sep(3.0),
            thresholds: GroupThresholds::Terciles,
            probe_size: 16,
        }
    }

    fn scalar_params(v: f64) -> ModelParams {
        ModelParams::new(
            vec![crate::model::ParamSpec {
                name: "w".into(),
                shape: vec![1],
            }],
            vec![v],
        )
        .unwrap()
    }

    #[test]
    fn aggregate_examples() {
        let a = scalar_params(0.0);
        let b = scalar_params(4.0);
        assert_eq!(fedavg_aggregate(&[&a, &b], &[1.0, 3.0]).unwrap().values(), &[3.0]);
        assert_eq!(fedavg_aggregate(&[&b], &[7.0]).unwrap(), b);
        let same = fedavg_aggregate(&[&b, &b, &b], &[1.0, 2.0, 5.0]).unwrap();
        assert!((same.values()[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn aggregate_guards() {
        let a = scalar_params(1.0);
        assert!(matches!(fedavg_aggregate(&[], &[]), Err(Error::Aggregation(_))));
        assert!(fedavg_aggregate(&[&a], &[0.0]).is_err());
        let other = ModelParams::new(
            vec![crate::model::ParamSpec {
                name: "v".into(),
                shape: vec![1],
            }],
            vec![1.0],
        )
        .unwrap();
        assert!(fedavg_aggregate(&[&a, &other], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn algorithm_names_roundtrip() {
        for a in [Algorithm::FedYoYo, Algorithm::FedAvg, Algorithm::FedAvgBsm, Algorithm::FedProx] {
            assert_eq!(a.as_str().parse::<Algorithm>().unwrap(), a);
        }
        assert!("fedsgd".parse::<Algorithm>().is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = small_cfg(Algorithm::FedAvg, 3);
        assert!(c.validate().is_ok());
        c.clients_per_round = 4;
        assert!(c.validate().is_err());
        let mut c = small_cfg(Algorithm::FedAvg, 3);
        c.gamma = 2.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn empty_client_is_skipped() {
        let data = small_data(1, 2);
        let cfg = small_cfg(Algorithm::FedYoYo, 2);
        let client = ClientState {
            id: 0,
            indices: vec![],
            class_counts: vec![0; 4],
            prior: PriorDistribution::uniform(4),
            estimated: false,
        };
        let g = initial_model(&cfg).unwrap().flatten();
        let out = local_train_fedyoyo(&client, &g, &PriorDistribution::uniform(4), &cfg, &data.train, 1);
        assert!(out.unwrap().is_none());
        assert!(local_train_baseline(&client, &g, &cfg, &data.train, 1).unwrap().is_none());
    }

    #[test]
    fn full_participation_is_deterministic() {
        let cfg = small_cfg(Algorithm::FedAvg, 3);
        assert_eq!(sample_clients(&cfg, 1), vec![0, 1, 2]);
        let mut partial = cfg.clone();
        partial.clients_per_round = 2;
        let s = sample_clients(&partial, 5);
        assert_eq!(s.len(), 2);
        assert_eq!(s, sample_clients(&partial, 5));
    }

    #[test]
    fn zero_lr_rounds_leave_params_unchanged() {
        let data = small_data(2, 3);
        for alg in [Algorithm::FedYoYo, Algorithm::FedAvg, Algorithm::FedProx] {
            let mut cfg = small_cfg(alg, 3);
            cfg.lr = 0.0;
            let res = run_experiment(&cfg, &data).unwrap();
            let init = initial_model(&cfg).unwrap().flatten();
            for (a, b) in res.server.params.values().iter().zip(init.values()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rounds_zero_evaluates_initial_model_only() {
        let data = small_data(3, 3);
        let mut cfg = small_cfg(Algorithm::FedYoYo, 3);
        cfg.rounds = 0;
        let res = run_experiment(&cfg, &data).unwrap();
        assert!(res.rounds.is_empty());
        assert_eq!(res.final_metrics().round, 0);
        assert_eq!(res.csv_log().lines().count(), 1);
    }

    #[test]
    fn round_metrics_are_populated() {
        let data = small_data(4, 3);
        let cfg = small_cfg(Algorithm::FedYoYo, 3);
        let res = run_experiment(&cfg, &data).unwrap();
        let m = &res.rounds[0].metrics;
        assert_eq!(m.round, 1);
        assert_eq!(res.rounds[0].uploads.len(), 3);
        assert!(m.loss_total.is_some() && m.loss_dla.is_some() && m.loss_asd.is_some());
        assert!(m.prior_l2.is_some());
        assert!(m.feat_cos_global_local.is_some());
        assert!(m.nc_mean_angle.is_some());
        assert!((0.0..=1.0).contains(&m.acc_all));

        let base = run_experiment(&small_cfg(Algorithm::FedAvg, 3), &data).unwrap();
        assert!(base.rounds[0].metrics.prior_l2.is_none());
        assert!(base.rounds[0].metrics.loss_asd.is_none());
        assert!(base.rounds[0].uploads.is_empty());
    }

    #[test]
    fn fedprox_with_zero_mu_matches_fedavg() {
        let data = small_data(5, 3);
        let mut prox = small_cfg(Algorithm::FedProx, 3);
        prox.prox_mu = 0.0;
        let avg = small_cfg(Algorithm::FedAvg, 3);
        let a = run_experiment(&prox, &data).unwrap();
        let b = run_experiment(&avg, &data).unwrap();
        assert_eq!(a.server.params, b.server.params);
    }

    #[test]
    fn fedprox_penalty_gradient_vanishes_at_anchor() {
        // with lr = 0 the model stays at the anchor, so the proximal term
        // contributes nothing and the losses match FedAvg exactly
        let data = small_data(6, 2);
        let mut prox = small_cfg(Algorithm::FedProx, 2);
        prox.prox_mu = 10.0;
        prox.lr = 0.0;
        let mut avg = small_cfg(Algorithm::FedAvg, 2);
        avg.lr = 0.0;
        let a = run_experiment(&prox, &data).unwrap();
        let b = run_experiment(&avg, &data).unwrap();
        assert_eq!(a.rounds[0].metrics.loss_total, b.rounds[0].metrics.loss_total);
    }

    #[test]
    fn bsm_with_balanced_counts_matches_fedavg_at_unit_temperature() {
        let train = generate_synthetic(3, &[12, 12, 12], 6, 3.0, 1).unwrap();
        let client = ClientState {
            id: 0,
            indices: (0..36).collect(),
            class_counts: train.class_counts().to_vec(),
            prior: PriorDistribution::uniform(3),
            estimated: false,
        };
        let mut bsm = small_cfg(Algorithm::FedAvgBsm, 1);
        bsm.model = ModelConfig::new(6, vec![8, 5], 3);
        bsm.temperature = 1.0;
        let mut avg = bsm.clone();
        avg.algorithm = Algorithm::FedAvg;
        let g = initial_model(&avg).unwrap().flatten();
        let a = local_train_baseline(&client, &g, &bsm, &train, 1).unwrap().unwrap();
        let b = local_train_baseline(&client, &g, &avg, &train, 1).unwrap().unwrap();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn local_training_is_deterministic() {
        let data = small_data(7, 2);
        let cfg = small_cfg(Algorithm::FedYoYo, 2);
        let clients = ClientState::from_partition(&data.partition, 4);
        let g = initial_model(&cfg).unwrap().flatten();
        let u = PriorDistribution::uniform(4);
        let a = local_train_fedyoyo(&clients[0], &g, &u, &cfg, &data.train, 1).unwrap().unwrap();
        let b = local_train_fedyoyo(&clients[0], &g, &u, &cfg, &data.train, 1).unwrap().unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(a.estimate, b.estimate);
    }
}
