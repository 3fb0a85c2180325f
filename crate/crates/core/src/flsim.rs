//! In-process FedSGD / FedAvg simulation with an interception point that
//! sees every client update after the defense transform.

use web_time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::defenses::{self, DefenseConfig, DefenseKind};
use crate::error::{ensure, Error, Result};
use crate::models::{evaluate_accuracy, sgd_step, Classifier, ParameterVector};
use crate::rng;
use crate::spoofl::SpoofDataset;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Fedsgd,
    Fedavg,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Self::Fedsgd => "fedsgd",
            Self::Fedavg => "fedavg",
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedsgd" => Ok(Self::Fedsgd),
            "fedavg" => Ok(Self::Fedavg),
            other => Err(Error::Config(format!("unknown protocol `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateKind {
    Gradient,
    WeightDelta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateMeta {
    pub client_id: usize,
    pub round: usize,
    pub local_steps: usize,
    pub local_lr: f64,
    pub batch_size: usize,
    /// Distinct samples touched across the local steps.
    pub num_samples: usize,
    #[serde(default)]
    pub reduction: Reduction,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub kind: UpdateKind,
    pub payload: ParameterVector,
    pub pre_update_model: ParameterVector,
    pub meta: UpdateMeta,
}

impl ClientUpdate {
    pub fn validate(&self) -> Result<()> {
        self.payload.check_layout(&self.pre_update_model)?;
        if self.kind == UpdateKind::Gradient {
            ensure!(self.meta.local_steps == 1, Precondition, "gradient updates come from exactly one local step");
        }
        Ok(())
    }

    /// Client model after local training (`pre + payload` for weight deltas,
    /// `pre - lr * payload` for gradients).
    pub fn post_update_model(&self) -> ParameterVector {
        match self.kind {
            UpdateKind::WeightDelta => self.pre_update_model.add(&self.payload),
            UpdateKind::Gradient => self.pre_update_model.sub(&self.payload.scale(self.meta.local_lr)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FLConfig {
    pub protocol: Protocol,
    pub num_clients: usize,
    pub local_steps: usize,
    pub local_lr: f64,
    pub batch_size: usize,
    pub rounds: usize,
    pub seed: u64,
    /// How per-sample losses combine into the client's batch loss.
    #[serde(default)]
    pub reduction: Reduction,
    #[serde(default)]
    pub defense: DefenseConfig,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

impl Reduction {
    /// Factor turning a mean-reduced quantity over `n` samples into this reduction.
    pub fn factor(self, n: usize) -> f64 {
        match self {
            Reduction::Mean => 1.0,
            Reduction::Sum => n as f64,
        }
    }
}

impl Default for FLConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::Fedavg,
            num_clients: 4,
            local_steps: 2,
            local_lr: 0.01,
            batch_size: 8,
            rounds: 10,
            seed: 0,
            reduction: Reduction::Mean,
            defense: DefenseConfig::none(),
        }
    }
}

impl FLConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_clients >= 1, Config, "num_clients must be at least 1");
        ensure!(self.batch_size >= 1, Config, "batch_size must be at least 1");
        ensure!(self.local_steps >= 1, Config, "local_steps must be at least 1");
        ensure!(self.local_lr >= 0.0 && self.local_lr.is_finite(), Config, "local_lr must be finite and non-negative");
        if self.protocol == Protocol::Fedsgd {
            ensure!(self.local_steps == 1, Config, "fedsgd requires local_steps = 1");
        }
        self.defense.validate()
    }
}

/// Disjoint, near-equal IID shards of `0..n` by seeded shuffle.
pub fn iid_partition(n: usize, clients: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut r = rng::stage_rng(seed, "partition", 0);
    let perm = rng::permutation(n, &mut r);
    let mut shards = vec![Vec::new(); clients];
    for (k, i) in perm.into_iter().enumerate() {
        shards[k % clients].push(i);
    }
    shards
}

/// Minibatches a client draws in one round: consecutive slices of a seeded
/// shuffle of its shard, reshuffled whenever the shard is exhausted. A
/// batch size at least the shard size means full-batch steps.
pub fn local_batches(shard_len: usize, steps: usize, batch_size: usize, round_seed: u64) -> Vec<Vec<usize>> {
    if batch_size >= shard_len {
        return vec![(0..shard_len).collect(); steps];
    }
    let mut out = Vec::with_capacity(steps);
    let mut pass = 0;
    let mut order = rng::permutation(shard_len, &mut rng::stage_rng(round_seed, "local-order", pass));
    let mut at = 0;
    for _ in 0..steps {
        if at + batch_size > shard_len {
            pass += 1;
            order = rng::permutation(shard_len, &mut rng::stage_rng(round_seed, "local-order", pass));
            at = 0;
        }
        out.push(order[at..at + batch_size].to_vec());
        at += batch_size;
    }
    out
}

/// Sample indices in order of first use.
pub fn distinct_in_order(batches: &[Vec<usize>]) -> Vec<usize> {
    let mut seen = std::collections::BTreeSet::new();
    batches.iter().flatten().copied().filter(|i| seen.insert(*i)).collect()
}

fn batch_gradient(model: &Classifier, images: &Tensor, labels: &[usize], reduction: Reduction) -> Result<ParameterVector> {
    let (_, g) = model.loss_gradient(images, labels)?;
    Ok(match reduction {
        Reduction::Mean => g,
        Reduction::Sum => g.scale(labels.len() as f64),
    })
}

/// Result of one client's local work, before any defense.
pub struct LocalRun {
    pub update: ClientUpdate,
    /// Shard-relative sample indices used at each local step.
    pub batches: Vec<Vec<usize>>,
}

/// Local training of one client from `global`.
///
/// FedSGD returns the mean cross-entropy gradient of one batch; FedAvg
/// returns `local_final - global` after `local_steps` SGD steps.
pub fn client_local_update(
    global: &Classifier,
    shard: &LabeledDataset,
    cfg: &FLConfig,
    client_id: usize,
    round: usize,
    round_seed: u64,
) -> Result<LocalRun> {
    ensure!(!shard.is_empty(), Precondition, "client {client_id} has an empty shard");
    let steps = if cfg.protocol == Protocol::Fedsgd { 1 } else { cfg.local_steps };
    let batches = local_batches(shard.len(), steps, cfg.batch_size, round_seed);
    let meta = UpdateMeta {
        client_id,
        round,
        local_steps: steps,
        local_lr: cfg.local_lr,
        batch_size: batches[0].len(),
        num_samples: distinct_in_order(&batches).len(),
        reduction: cfg.reduction,
    };
    let update = match cfg.protocol {
        Protocol::Fedsgd => {
            let b = &batches[0];
            let labels: Vec<usize> = b.iter().map(|&i| shard.labels[i]).collect();
            let g = batch_gradient(global, &shard.images.select_rows(b), &labels, cfg.reduction)?;
            ClientUpdate { kind: UpdateKind::Gradient, payload: g, pre_update_model: global.params.clone(), meta }
        }
        Protocol::Fedavg => {
            let mut local = global.clone();
            for b in &batches {
                let labels: Vec<usize> = b.iter().map(|&i| shard.labels[i]).collect();
                let g = batch_gradient(&local, &shard.images.select_rows(b), &labels, cfg.reduction)?;
                sgd_step(&mut local.params, &g, cfg.local_lr);
            }
            ClientUpdate {
                kind: UpdateKind::WeightDelta,
                payload: local.params.sub(&global.params),
                pre_update_model: global.params.clone(),
                meta,
            }
        }
    };
    Ok(LocalRun { update, batches })
}

/// New global model from one round of updates, combined in list order.
pub fn aggregate(
    updates: &[ClientUpdate],
    global: &ParameterVector,
    protocol: Protocol,
    server_lr: f64,
) -> Result<ParameterVector> {
    ensure!(!updates.is_empty(), Precondition, "no updates to aggregate");
    let kind = updates[0].kind;
    let expected = match protocol {
        Protocol::Fedsgd => UpdateKind::Gradient,
        Protocol::Fedavg => UpdateKind::WeightDelta,
    };
    ensure!(kind == expected, Precondition, "{} aggregation needs {:?} updates", protocol.name(), expected);
    let mut sum = global.zeros_like();
    for u in updates {
        ensure!(u.kind == kind, Precondition, "mixed update kinds in one round");
        global.check_layout(&u.payload)?;
        for (s, v) in sum.values.iter_mut().zip(&u.payload.values) {
            *s += v;
        }
    }
    let mean = sum.scale(1.0 / updates.len() as f64);
    Ok(match protocol {
        Protocol::Fedavg => global.add(&mean),
        Protocol::Fedsgd => global.sub(&mean.scale(server_lr)),
    })
}

/// What the interceptor receives for one client update.
pub struct Intercepted<'a> {
    /// The transmitted (defended) update: the attacker's view.
    pub update: &'a ClientUpdate,
    /// Pre-defense payload. Evaluation only; never given to attacks.
    pub raw_payload: &'a ParameterVector,
    /// Distinct private samples this client would have trained on this
    /// round, in order of first use. Evaluation only; never given to attacks.
    pub truth_images: Tensor,
    pub truth_labels: Vec<usize>,
}

pub struct FederationOutcome {
    pub final_model: Classifier,
    /// Held-out accuracy after each round.
    pub round_accuracy: Vec<f64>,
    /// Every defended update, in (round, client) order.
    pub log: Vec<ClientUpdate>,
    /// Wall time of each round's client computation, defense, and aggregation.
    pub round_wall_s: Vec<f64>,
}

/// Runs `cfg.rounds` rounds. With the spoofing defense active, each client
/// trains on its partition of `spoof` instead of its private shard.
pub fn run_federation(
    cfg: &FLConfig,
    init: &Classifier,
    private: &LabeledDataset,
    held_out: &LabeledDataset,
    spoof: Option<&SpoofDataset>,
    interceptor: &mut dyn FnMut(&Intercepted<'_>),
) -> Result<FederationOutcome> {
    cfg.validate()?;
    ensure!(
        private.len() >= cfg.num_clients,
        Precondition,
        "{} samples cannot be partitioned over {} clients",
        private.len(),
        cfg.num_clients
    );
    let shards: Vec<LabeledDataset> =
        iid_partition(private.len(), cfg.num_clients, cfg.seed).iter().map(|idx| private.subset(idx)).collect();
    let train_sets: Vec<LabeledDataset> = if cfg.defense.kind == DefenseKind::Spoofl {
        let spoof = spoof.ok_or_else(|| Error::Config("spoofl defense needs a spoof dataset".into()))?;
        let full = defenses::spoofl_substitute(&shards[0], spoof)?;
        ensure!(full.len() >= cfg.num_clients, Precondition, "spoof set smaller than the client count");
        iid_partition(full.len(), cfg.num_clients, rng::derive_seed(cfg.seed, "spoof-partition", 0))
            .iter()
            .map(|idx| full.subset(idx))
            .collect()
    } else {
        shards.clone()
    };
    let mut global = init.clone();
    let mut round_accuracy = Vec::with_capacity(cfg.rounds);
    let mut log = Vec::with_capacity(cfg.rounds * cfg.num_clients);
    let mut round_wall_s = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let mut updates = Vec::with_capacity(cfg.num_clients);
        let mut elapsed = 0.0;
        for (client, (train, shard)) in train_sets.iter().zip(&shards).enumerate() {
            let key = (round * cfg.num_clients + client) as u64;
            let round_seed = rng::derive_seed(cfg.seed, "client-round", key);
            let start = Instant::now();
            let run = client_local_update(&global, train, cfg, client, round, round_seed)?;
            let defended = defenses::apply(&run.update, &cfg.defense, rng::derive_seed(cfg.defense.seed, "defense", key))?;
            elapsed += start.elapsed().as_secs_f64();
            let truth_batches = if cfg.defense.kind == DefenseKind::Spoofl {
                let steps = run.batches.len();
                local_batches(shard.len(), steps, cfg.batch_size, round_seed)
            } else {
                run.batches.clone()
            };
            let flat = distinct_in_order(&truth_batches);
            interceptor(&Intercepted {
                update: &defended,
                raw_payload: &run.update.payload,
                truth_images: shard.images.select_rows(&flat),
                truth_labels: flat.iter().map(|&i| shard.labels[i]).collect(),
            });
            updates.push(defended);
        }
        let start = Instant::now();
        global.params = aggregate(&updates, &global.params, cfg.protocol, cfg.local_lr)?;
        elapsed += start.elapsed().as_secs_f64();
        round_wall_s.push(elapsed);
        round_accuracy.push(evaluate_accuracy(&global, held_out)?);
        log.extend(updates);
    }
    Ok(FederationOutcome { final_model: global, round_accuracy, log, round_wall_s })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::data::{load_dataset, Split};
    use crate::models::{build_classifier, Architecture, ClassifierSpec, Layout};

    fn tiny() -> (Classifier, LabeledDataset) {
        let ds = load_dataset("synth-digits", Split::Train, 8, Some(12)).unwrap();
        let m = build_classifier(&ClassifierSpec::for_dataset(Architecture::Mlp2, &ds), 3).unwrap();
        (m, ds)
    }

    #[test]
    fn fedavg_single_full_batch_step_is_negative_scaled_gradient() {
        let (m, ds) = tiny();
        let cfg = FLConfig { local_steps: 1, batch_size: 100, local_lr: 0.05, ..FLConfig::default() };
        let run = client_local_update(&m, &ds, &cfg, 0, 0, 9).unwrap();
        let (_, g) = m.loss_gradient(&ds.images, &ds.labels).unwrap();
        assert!(run.update.payload.max_abs_diff(&g.scale(-0.05)) < 1e-12);
        let zero = FLConfig { local_lr: 0.0, ..cfg.clone() };
        assert!(client_local_update(&m, &ds, &zero, 0, 0, 9).unwrap().update.payload.values.iter().all(|&v| v == 0.0));
        assert!(client_local_update(&m, &ds.subset(&[]), &cfg, 0, 0, 9).is_err());
    }

    /// One-parameter check: bias-only 2-class logits `[b0, b1]` with label 0
    /// have cross-entropy gradient `p - onehot`.
    #[test]
    fn fedsgd_gradient_matches_hand_derivative() {
        let spec = ClassifierSpec::new(Architecture::Mlp2, [1, 1, 1], 2);
        let mut m = build_classifier(&spec, 0).unwrap();
        m.params.values.iter_mut().for_each(|v| *v = 0.0);
        let bias = m.params.layout.ranges()[3].clone();
        m.params.values[bias.start] = 0.5;
        let one = LabeledDataset::new("one", Tensor::full(&[1, 1, 1, 1], 0.3), vec![0], vec!["a".into(), "b".into()]).unwrap();
        let cfg = FLConfig { protocol: Protocol::Fedsgd, local_steps: 1, ..FLConfig::default() };
        let run = client_local_update(&m, &one, &cfg, 0, 0, 1).unwrap();
        let p0 = 1.0 / (1.0 + (-0.5f64).exp());
        let g = &run.update.payload.values[bias];
        assert!((g[0] - (p0 - 1.0)).abs() < 1e-12 && (g[1] - (1.0 - p0)).abs() < 1e-12);
    }

    fn upd(values: Vec<f64>, kind: UpdateKind) -> ClientUpdate {
        let layout = Arc::new(Layout::new(vec![("w".into(), vec![values.len()])]));
        let payload = ParameterVector::new(layout, values).unwrap();
        ClientUpdate {
            kind,
            pre_update_model: payload.zeros_like(),
            payload,
            meta: UpdateMeta { client_id: 0, round: 0, local_steps: 1, local_lr: 0.1, batch_size: 1, num_samples: 1, reduction: Reduction::Mean },
        }
    }

    #[test]
    fn aggregation_cases() {
        let g = upd(vec![1.0, 1.0], UpdateKind::WeightDelta).payload.map(|_| 1.0);
        let u = upd(vec![0.5, -2.0], UpdateKind::WeightDelta);
        let one = aggregate(&[u.clone()], &g, Protocol::Fedavg, 0.1).unwrap();
        assert_eq!(aggregate(&[u.clone(), u.clone(), u.clone()], &g, Protocol::Fedavg, 0.1).unwrap(), one);
        let neg = upd(vec![-0.5, 2.0], UpdateKind::WeightDelta);
        assert_eq!(aggregate(&[u.clone(), neg], &g, Protocol::Fedavg, 0.1).unwrap().values, vec![1.0, 1.0]);
        let three = [
            upd(vec![1.0, 0.0], UpdateKind::WeightDelta),
            upd(vec![2.0, 3.0], UpdateKind::WeightDelta),
            upd(vec![0.0, 6.0], UpdateKind::WeightDelta),
        ];
        assert_eq!(aggregate(&three, &g, Protocol::Fedavg, 0.1).unwrap().values, vec![2.0, 4.0]);
        let grad = upd(vec![1.0, 2.0], UpdateKind::Gradient);
        assert!(aggregate(&[u.clone(), grad.clone()], &g, Protocol::Fedavg, 0.1).is_err());
        let sgd = aggregate(&[grad], &g, Protocol::Fedsgd, 0.1).unwrap();
        assert!((sgd.values[0] - 0.9).abs() < 1e-12 && (sgd.values[1] - 0.8).abs() < 1e-12);
        let other = upd(vec![1.0, 2.0, 3.0], UpdateKind::WeightDelta);
        assert!(aggregate(&[other], &g, Protocol::Fedavg, 0.1).is_err());
    }

    #[test]
    fn partition_is_disjoint_cover() {
        let shards = iid_partition(23, 4, 5);
        let mut all: Vec<usize> = shards.concat();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        assert!(shards.iter().all(|s| s.len() == 5 || s.len() == 6));
    }

    #[test]
    fn federation_bookkeeping_and_determinism() {
        let ds = load_dataset("synth-digits", Split::Train, 8, Some(32)).unwrap();
        let test = load_dataset("synth-digits", Split::Test, 8, Some(16)).unwrap();
        let m = build_classifier(&ClassifierSpec::for_dataset(Architecture::Mlp2, &ds), 1).unwrap();
        let cfg = FLConfig { rounds: 3, num_clients: 2, batch_size: 4, ..FLConfig::default() };
        let mut seen = 0;
        let mut identical = true;
        let a = run_federation(&cfg, &m, &ds, &test, None, &mut |i| {
            seen += 1;
            identical &= i.update.payload == *i.raw_payload;
            assert_eq!(i.truth_labels.len(), 8);
        })
        .unwrap();
        assert_eq!(seen, 6);
        assert!(identical);
        assert_eq!(a.log.len(), 6);
        let b = run_federation(&cfg, &m, &ds, &test, None, &mut |_| {}).unwrap();
        assert_eq!(a.round_accuracy, b.round_accuracy);
        assert_eq!(a.final_model, b.final_model);

        let noisy = FLConfig { defense: DefenseConfig::noise(1e-3), ..cfg };
        let mut differs = true;
        run_federation(&noisy, &m, &ds, &test, None, &mut |i| differs &= i.update.payload != *i.raw_payload).unwrap();
        assert!(differs);
    }

    #[test]
    fn single_client_fedavg_equals_centralized_sgd() {
        let ds = load_dataset("synth-digits", Split::Train, 8, Some(10)).unwrap();
        let m = build_classifier(&ClassifierSpec::for_dataset(Architecture::ConvnetSmall, &ds), 2).unwrap();
        let cfg = FLConfig { num_clients: 1, local_steps: 1, batch_size: 10, rounds: 5, local_lr: 0.05, ..FLConfig::default() };
        let fed = run_federation(&cfg, &m, &ds, &ds, None, &mut |_| {}).unwrap();
        let mut central = m.clone();
        for _ in 0..5 {
            let (_, g) = central.loss_gradient(&ds.images, &ds.labels).unwrap();
            sgd_step(&mut central.params, &g, 0.05);
        }
        assert!(fed.final_model.params.max_abs_diff(&central.params) < 1e-6);
    }
}
