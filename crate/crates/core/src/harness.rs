//! Experiment orchestration: configuration, the train → federate → attack →
//! score pipeline, preset sweeps, results files, plots and reports.
//!
//! Stage seeds come from the global seed as `derive_seed(seed, stage, 0)`
//! for the stages `model-init`, `private-classifier`, `spoof-classifier`,
//! `generator`, `expert`, `distill`, `fl`, `defense` and `attack`. Attack
//! runs on the update of client `c` in round `r` use
//! `derive_seed(attack_seed, "attack-update", r * 1000 + c)`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use web_time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::attacks::{run_attack, AttackConfig, AttackMethod};
use crate::data::{curate_blacklist, load_dataset, Blacklist, LabeledDataset, Normalization, Split};
use crate::defenses::{DefenseConfig, DefenseKind};
use crate::error::{ensure, Error, Result};
use crate::flsim::{run_federation, ClientUpdate, FLConfig, Protocol, Reduction};
use crate::imageio;
use crate::metrics::{self, MetricReport};
use crate::models::{
    build_classifier, evaluate_accuracy, sgd_step, train_classifier, train_generator, Architecture, Classifier,
    ClassifierSpec, ConditionalGenerator, GeneratorTrainConfig, TrainConfig, Trajectory,
};
use crate::rng::{self, derive_seed};
use crate::spoofl::{distill_dataset, DistillConfig, SpoofDataset};
use crate::store;
use crate::tensor::Tensor;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub private: String,
    pub spoof: String,
    pub resolution: usize,
    pub train_limit: usize,
    pub test_limit: usize,
    pub spoof_limit: usize,
    /// `(private class, spoof class)` name pairs that overlap.
    #[serde(default)]
    pub overlap_map: Vec<(String, String)>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            private: "synth-digits".into(),
            spoof: "synth-fashion".into(),
            resolution: 28,
            train_limit: 1000,
            test_limit: 500,
            spoof_limit: 2000,
            overlap_map: vec![],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierTraining {
    pub architecture: Architecture,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackPlan {
    /// Rounds whose updates are attacked; empty means the last round.
    #[serde(default)]
    pub rounds: Vec<usize>,
    pub clients: Vec<usize>,
}

impl Default for AttackPlan {
    fn default() -> Self {
        Self { rounds: vec![], clients: vec![0] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpooflConfig {
    pub spoof_classifier: ClassifierTraining,
    pub generator: GeneratorTrainConfig,
    /// Training run on the private data whose checkpoints are matched.
    pub expert: TrainConfig,
    pub distill: DistillConfig,
}

impl Default for SpooflConfig {
    fn default() -> Self {
        Self {
            spoof_classifier: ClassifierTraining {
                architecture: Architecture::ConvnetSmall,
                train: TrainConfig { epochs: 3, ..TrainConfig::default() },
            },
            generator: GeneratorTrainConfig::default(),
            expert: TrainConfig { epochs: 4, ..TrainConfig::default() },
            distill: DistillConfig { inner_lr: 0.1, outer_lr: 0.3, ..DistillConfig::default() },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricOptions {
    /// Also time a defense-free federation to report relative execution time.
    pub measure_ret: bool,
    /// Timed federations per side when measuring relative execution time.
    pub ret_repeats: usize,
    /// Federations (with derived seeds) whose final accuracy is averaged.
    pub accuracy_repeats: usize,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self { measure_ret: true, ret_repeats: 25, accuracy_repeats: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    /// Where files are written; not part of the digest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub model: Architecture,
    pub private_classifier: ClassifierTraining,
    pub fl: FLConfig,
    pub attack: AttackConfig,
    #[serde(default)]
    pub attack_plan: AttackPlan,
    #[serde(default)]
    pub spoofl: SpooflConfig,
    #[serde(default)]
    pub metrics: MetricOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    /// Desk-scale benchmark: synthetic digits as the private task, synthetic
    /// fashion items as the spoof source, FedAvg with 4 clients.
    pub fn desk() -> Self {
        Self {
            name: "desk".into(),
            seed: 0,
            out_dir: None,
            data: DataConfig::default(),
            model: Architecture::Mlp2,
            private_classifier: ClassifierTraining {
                architecture: Architecture::ConvnetSmall,
                train: TrainConfig { epochs: 10, ..TrainConfig::default() },
            },
            fl: FLConfig { local_lr: 0.1, ..FLConfig::default() },
            attack: AttackConfig::desk(AttackMethod::Sme),
            attack_plan: AttackPlan { rounds: vec![0], clients: vec![0] },
            spoofl: SpooflConfig::default(),
            metrics: MetricOptions::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.name.is_empty(), Config, "experiment name is empty");
        ensure!(self.data.train_limit >= self.fl.num_clients, Config, "train_limit below the client count");
        self.fl.validate()?;
        self.attack.validate()?;
        ensure!(!self.attack_plan.clients.is_empty(), Config, "attack plan names no clients");
        ensure!(self.metrics.accuracy_repeats >= 1, Config, "accuracy_repeats must be at least 1");
        ensure!(self.metrics.ret_repeats >= 1, Config, "ret_repeats must be at least 1");
        if let Some(&c) = self.attack_plan.clients.iter().find(|&&c| c >= self.fl.num_clients) {
            return Err(Error::Config(format!("attack plan names client {c} of {}", self.fl.num_clients)));
        }
        if let Some(&r) = self.attack_plan.rounds.iter().find(|&&r| r >= self.fl.rounds) {
            return Err(Error::Config(format!("attack plan names round {r} of {}", self.fl.rounds)));
        }
        let wants_gradient = self.attack.method.needs_gradient();
        ensure!(
            wants_gradient == (self.fl.protocol == Protocol::Fedsgd),
            Config,
            "attack {} does not apply to {} updates",
            self.attack.method.name(),
            self.fl.protocol.name()
        );
        if self.fl.defense.kind == DefenseKind::Spoofl {
            self.spoofl.distill.validate()?;
            ensure!(
                self.spoofl.distill.budget <= self.data.train_limit,
                Config,
                "distillation budget exceeds the private set"
            );
        }
        Ok(())
    }

    /// Digest over the canonical JSON form with the output directory removed.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        rng::digest_bytes(&serde_json::to_vec(&c).expect("config serializes"))
    }

    /// The configuration with every stage seed replaced by its derived value.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        let s = self.seed;
        c.fl.seed = derive_seed(s, "fl", 0);
        c.fl.defense.seed = derive_seed(s, "defense", 0);
        c.attack.seed = derive_seed(s, "attack", 0);
        c.private_classifier.train.seed = derive_seed(s, "private-classifier", 0);
        c.spoofl.spoof_classifier.train.seed = derive_seed(s, "spoof-classifier", 0);
        c.spoofl.generator.seed = derive_seed(s, "generator", 0);
        c.spoofl.expert.seed = derive_seed(s, "expert", 0);
        c.spoofl.distill.seed = derive_seed(s, "distill", 0);
        c
    }

    fn attack_rounds(&self) -> Vec<usize> {
        if self.attack_plan.rounds.is_empty() {
            vec![self.fl.rounds - 1]
        } else {
            self.attack_plan.rounds.clone()
        }
    }
}

/// One results-table row. Every field is deterministic given the config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsRow {
    pub schema_version: u32,
    pub experiment: String,
    pub dataset: String,
    pub model: String,
    pub protocol: String,
    pub defense: String,
    pub defense_param: String,
    pub attack: String,
    pub attack_round: usize,
    pub attacked_samples: usize,
    pub ssim: f64,
    pub psnr_db: f64,
    pub fmse: f64,
    pub lpips_like: f64,
    pub plc: f64,
    pub accuracy: f64,
    pub private_classifier_accuracy: f64,
    pub config_digest: String,
}

/// Wall-clock measurements, kept apart from [`ResultsRow`] so results files
/// stay byte-reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub experiment: String,
    pub config_digest: String,
    pub round_wall_s: f64,
    pub baseline_round_wall_s: f64,
    pub relative_execution_time: f64,
    pub attack_wall_s: f64,
    pub finished_unix_s: u64,
}

/// A point of a figure curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub figure: String,
    pub curve: String,
    pub x: f64,
    pub y: f64,
}

pub struct ExperimentOutput {
    pub rows: Vec<ResultsRow>,
    pub timing: TimingRow,
    pub round_accuracy: Vec<f64>,
    /// `(round, reconstruction, truth)` per attacked round.
    pub reconstructions: Vec<(usize, Tensor, Tensor)>,
    pub spoof_set: Option<SpoofDataset>,
}

/// Artifacts shared between experiments of one process, keyed by the digest
/// of everything that determines them.
#[derive(Default)]
pub struct Cache {
    datasets: HashMap<String, LabeledDataset>,
    classifiers: HashMap<String, (Classifier, f64)>,
    generators: HashMap<String, ConditionalGenerator>,
    trajectories: HashMap<String, Trajectory>,
    spoof_sets: HashMap<String, SpoofDataset>,
}

fn key(parts: serde_json::Value) -> String {
    rng::digest_bytes(&serde_json::to_vec(&parts).expect("key serializes"))
}

impl Cache {
    fn dataset(&mut self, name: &str, split: Split, resolution: usize, limit: usize) -> Result<LabeledDataset> {
        let k = key(json!(["dataset", name, split.as_str(), resolution, limit]));
        if let Some(d) = self.datasets.get(&k) {
            return Ok(d.clone());
        }
        let d = load_dataset(name, split, resolution, Some(limit))?;
        self.datasets.insert(k, d.clone());
        Ok(d)
    }

    /// Trains (or reuses) a classifier and its held-out accuracy.
    fn classifier(
        &mut self,
        how: &ClassifierTraining,
        train: &LabeledDataset,
        test: &LabeledDataset,
    ) -> Result<(Classifier, f64)> {
        let k = key(json!(["classifier", how, train.id, train.len(), test.id, test.len()]));
        if let Some(c) = self.classifiers.get(&k) {
            return Ok(c.clone());
        }
        let init = build_classifier(&ClassifierSpec::for_dataset(how.architecture, train), how.train.seed)?
            .with_normalization(Normalization::fit(train));
        let trained = train_classifier(&init, train, &how.train)?.classifier;
        let acc = evaluate_accuracy(&trained, test)?;
        self.classifiers.insert(k, (trained.clone(), acc));
        Ok((trained, acc))
    }

    fn generator(&mut self, cfg: &GeneratorTrainConfig, data: &LabeledDataset) -> Result<ConditionalGenerator> {
        let k = key(json!(["generator", cfg, data.id, data.len()]));
        if let Some(g) = self.generators.get(&k) {
            return Ok(g.clone());
        }
        let (g, _) = train_generator(data, cfg)?;
        self.generators.insert(k, g.clone());
        Ok(g)
    }
}

/// Model every experiment starts from: seeded init with normalization fitted
/// to the private training split.
pub fn initial_model(cfg: &ExperimentConfig, private: &LabeledDataset) -> Result<Classifier> {
    let seed = derive_seed(cfg.seed, "model-init", 0);
    Ok(build_classifier(&ClassifierSpec::for_dataset(cfg.model, private), seed)?.with_normalization(Normalization::fit(private)))
}

pub struct Loaded {
    pub private: LabeledDataset,
    pub test: LabeledDataset,
}

pub fn load_private(cfg: &ExperimentConfig, cache: &mut Cache) -> Result<Loaded> {
    let d = &cfg.data;
    Ok(Loaded {
        private: cache.dataset(&d.private, Split::Train, d.resolution, d.train_limit)?,
        test: cache.dataset(&d.private, Split::Test, d.resolution, d.test_limit)?,
    })
}

/// Everything the spoofing pipeline needs before distillation.
pub struct SpoofInputs {
    pub spoof_data: LabeledDataset,
    pub spoof_classifier: Classifier,
    pub spoof_classifier_accuracy: f64,
    pub generator: ConditionalGenerator,
    pub blacklist: Blacklist,
    pub expert: Trajectory,
}

pub fn spoof_inputs(cfg: &ExperimentConfig, private: &LabeledDataset, cache: &mut Cache) -> Result<SpoofInputs> {
    let d = &cfg.data;
    let spoof_data = cache.dataset(&d.spoof, Split::Train, d.resolution, d.spoof_limit).map_err(|e| e.in_stage("data"))?;
    let spoof_test = cache
        .dataset(&d.spoof, Split::Test, d.resolution, d.test_limit)
        .map_err(|e| e.in_stage("data"))?;
    let (spoof_classifier, spoof_classifier_accuracy) = cache
        .classifier(&cfg.spoofl.spoof_classifier, &spoof_data, &spoof_test)
        .map_err(|e| e.in_stage("spoof-classifier"))?;
    let generator = cache.generator(&cfg.spoofl.generator, &spoof_data).map_err(|e| e.in_stage("generator"))?;
    let blacklist = curate_blacklist(private, &spoof_data, &d.overlap_map).map_err(|e| e.in_stage("blacklist"))?;
    let init = initial_model(cfg, private)?;
    let k = key(json!(["expert", cfg.spoofl.expert, init.params.digest(), private.id, private.len()]));
    let expert = match cache.trajectories.get(&k) {
        Some(t) => t.clone(),
        None => {
            let t = train_classifier(&init, private, &cfg.spoofl.expert).map_err(|e| e.in_stage("expert"))?.trajectory;
            cache.trajectories.insert(k, t.clone());
            t
        }
    };
    Ok(SpoofInputs { spoof_data, spoof_classifier, spoof_classifier_accuracy, generator, blacklist, expert })
}

/// Builds (or loads) the spoof set for a resolved configuration.
pub fn prepare_spoof_set(cfg: &ExperimentConfig, cache: &mut Cache) -> Result<SpoofDataset> {
    let cfg = cfg.resolved();
    if let Some(path) = &cfg.fl.defense.spoof_dataset {
        let s = store::load_spoof_dataset(path).map_err(|e| e.in_stage("spoof-artifact"))?;
        s.check_architecture(cfg.model.name());
        return Ok(s);
    }
    let loaded = load_private(&cfg, cache).map_err(|e| e.in_stage("data"))?;
    let k = key(json!(["spoof-set", cfg.data, cfg.model, cfg.seed, cfg.spoofl]));
    if let Some(s) = cache.spoof_sets.get(&k) {
        return Ok(s.clone());
    }
    let inputs = spoof_inputs(&cfg, &loaded.private, cache)?;
    let init = initial_model(&cfg, &loaded.private)?;
    let out = distill_dataset(
        &loaded.private,
        &inputs.generator,
        &inputs.spoof_classifier,
        &inputs.blacklist,
        &init,
        &inputs.expert,
        &cfg.spoofl.distill,
    )
    .map_err(|e| e.in_stage("distill"))?;
    if let Some(it) = out.diverged_at {
        log::warn!("distillation stopped at iteration {it} on a non-finite loss");
    }
    cache.spoof_sets.insert(k, out.dataset.clone());
    Ok(out.dataset)
}

/// Captured update and its evaluation-only ground truth.
struct Captured {
    round: usize,
    client: usize,
    update: ClientUpdate,
    truth: Tensor,
    labels: Vec<usize>,
}

/// Scores of several attacked updates pooled per sample.
fn pool_reports(parts: &[(MetricReport, usize)]) -> MetricReport {
    let total: usize = parts.iter().map(|p| p.1).sum();
    let w = |f: &dyn Fn(&MetricReport) -> f64| parts.iter().map(|(r, n)| f(r) * *n as f64).sum::<f64>() / total as f64;
    let mut per = metrics::PerSample::default();
    for (r, _) in parts {
        per.ssim.extend(&r.per_sample.ssim);
        per.psnr_db.extend(&r.per_sample.psnr_db);
        per.true_class_confidence.extend(&r.per_sample.true_class_confidence);
    }
    MetricReport {
        ssim: w(&|r| r.ssim),
        psnr_db: w(&|r| r.psnr_db),
        fmse: w(&|r| r.fmse),
        lpips_like: w(&|r| r.lpips_like),
        plc: w(&|r| r.plc),
        accuracy: None,
        relative_execution_time: None,
        per_sample: per,
    }
}

fn defense_param(d: &DefenseConfig) -> String {
    match d.parameter() {
        Some(v) => format!("{v}"),
        None => "-".into(),
    }
}

/// Train → federate (with defense) → intercept → attack → score.
pub fn run_experiment(cfg: &ExperimentConfig, cache: &mut Cache) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let digest = cfg.digest();
    let rc = cfg.resolved();
    let loaded = load_private(&rc, cache).map_err(|e| e.in_stage("data"))?;
    let (f_private, f_private_acc) = cache
        .classifier(&rc.private_classifier, &loaded.private, &loaded.test)
        .map_err(|e| e.in_stage("private-classifier"))?;
    let init = initial_model(&rc, &loaded.private).map_err(|e| e.in_stage("model-init"))?;
    let spoof_set = match rc.fl.defense.kind {
        DefenseKind::Spoofl => {
            let s = prepare_spoof_set(cfg, cache)?;
            s.check_architecture(rc.model.name());
            Some(s)
        }
        _ => None,
    };

    let rounds = rc.attack_rounds();
    let mut captured: Vec<Captured> = Vec::new();
    let fed = run_federation(&rc.fl, &init, &loaded.private, &loaded.test, spoof_set.as_ref(), &mut |i| {
        let (r, c) = (i.update.meta.round, i.update.meta.client_id);
        if rounds.contains(&r) && rc.attack_plan.clients.contains(&c) {
            captured.push(Captured {
                round: r,
                client: c,
                update: i.update.clone(),
                truth: i.truth_images.clone(),
                labels: i.truth_labels.clone(),
            });
        }
    })
    .map_err(|e| e.in_stage("federate"))?;

    let mut final_accuracy = vec![*fed.round_accuracy.last().expect("at least one round")];
    for r in 1..rc.metrics.accuracy_repeats {
        let mut c = rc.fl.clone();
        c.seed = derive_seed(rc.fl.seed, "repeat", r as u64);
        c.defense.seed = derive_seed(rc.fl.defense.seed, "repeat", r as u64);
        let o = run_federation(&c, &init, &loaded.private, &loaded.test, spoof_set.as_ref(), &mut |_| {})
            .map_err(|e| e.in_stage("accuracy-repeat"))?;
        final_accuracy.push(*o.round_accuracy.last().expect("at least one round"));
    }
    let accuracy = final_accuracy.iter().sum::<f64>() / final_accuracy.len() as f64;

    let (ret, round_wall, baseline_wall) = if rc.metrics.measure_ret {
        measure_ret(&rc, &init, &loaded, spoof_set.as_ref())?
    } else {
        let m = metrics::median(&fed.round_wall_s);
        (1.0, m, m)
    };

    let attack_start = Instant::now();
    let mut rows = Vec::new();
    let mut reconstructions = Vec::new();
    for &round in &rounds {
        let mut parts = Vec::new();
        let mut recon_all = Vec::new();
        let mut truth_all = Vec::new();
        for cap in captured.iter().filter(|c| c.round == round) {
            let mut acfg = rc.attack.clone();
            acfg.seed = derive_seed(rc.attack.seed, "attack-update", (cap.round * 1000 + cap.client) as u64);
            let result = run_attack(&cap.update, &init, &acfg).map_err(|e| e.in_stage("attack"))?;
            let report = metrics::score_reconstruction(&result.images, &cap.truth, &cap.labels, &f_private)
                .map_err(|e| e.in_stage("score"))?;
            parts.push((report, cap.labels.len()));
            recon_all.push(result.images);
            truth_all.push(cap.truth.clone());
        }
        ensure!(!parts.is_empty(), Precondition, "no updates captured for round {round}");
        let pooled = pool_reports(&parts);
        rows.push(ResultsRow {
            schema_version: SCHEMA_VERSION,
            experiment: rc.name.clone(),
            dataset: loaded.private.id.clone(),
            model: rc.model.name().into(),
            protocol: rc.fl.protocol.name().into(),
            defense: rc.fl.defense.kind.name().into(),
            defense_param: defense_param(&rc.fl.defense),
            attack: rc.attack.method.name().into(),
            attack_round: round,
            attacked_samples: parts.iter().map(|p| p.1).sum(),
            ssim: pooled.ssim,
            psnr_db: pooled.psnr_db,
            fmse: pooled.fmse,
            lpips_like: pooled.lpips_like,
            plc: pooled.plc,
            accuracy,
            private_classifier_accuracy: f_private_acc,
            config_digest: digest.clone(),
        });
        reconstructions.push((round, concat(&recon_all), concat(&truth_all)));
    }
    let timing = TimingRow {
        experiment: rc.name.clone(),
        config_digest: digest,
        round_wall_s: round_wall,
        baseline_round_wall_s: baseline_wall,
        relative_execution_time: ret,
        attack_wall_s: attack_start.elapsed().as_secs_f64(),
        finished_unix_s: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
    };
    let out = ExperimentOutput { rows, timing, round_accuracy: fed.round_accuracy, reconstructions, spoof_set };
    if let Some(dir) = &cfg.out_dir {
        write_experiment(dir, cfg, &out)?;
    }
    Ok(out)
}

/// Relative execution time of the configured defense with per-round wall
/// times of both sides. Defended and defense-free federations run back to
/// back, in alternating order, `ret_repeats` times; each pair gives a ratio
/// of total round time and the median ratio is reported, which cancels slow
/// drift in machine load.
fn measure_ret(
    rc: &ExperimentConfig,
    init: &Classifier,
    loaded: &Loaded,
    spoof: Option<&SpoofDataset>,
) -> Result<(f64, f64, f64)> {
    let mut plain = rc.fl.clone();
    plain.defense = DefenseConfig::none();
    let run = |cfg: &FLConfig, spoof: Option<&SpoofDataset>| -> Result<f64> {
        let o = run_federation(cfg, init, &loaded.private, &loaded.test, spoof, &mut |_| {}).map_err(|e| e.in_stage("ret"))?;
        Ok(o.round_wall_s.iter().sum())
    };
    let (mut ratios, mut defended, mut baseline) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..rc.metrics.ret_repeats {
        let (d, b) = if i % 2 == 0 {
            let d = run(&rc.fl, spoof)?;
            (d, run(&plain, None)?)
        } else {
            let b = run(&plain, None)?;
            (run(&rc.fl, spoof)?, b)
        };
        ratios.push(metrics::relative_execution_time(d, b)?);
        defended.push(d / rc.fl.rounds as f64);
        baseline.push(b / rc.fl.rounds as f64);
    }
    Ok((metrics::median(&ratios), metrics::median(&defended), metrics::median(&baseline)))
}

fn concat(parts: &[Tensor]) -> Tensor {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    Tensor::new(shape, parts.iter().flat_map(|p| p.data().iter().copied()).collect())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format { path: path.into(), reason: e.to_string() })?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format { path: path.into(), reason: e.to_string() })?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.into()));
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format { path: path.into(), reason: e.to_string() })?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Format { path: path.into(), reason: e.to_string() }))
        .collect()
}

/// Writes `results.csv`, `timing.csv`, `config.toml`, `metadata.json` and
/// per-round reconstruction grids and arrays under `dir`.
pub fn write_experiment(dir: &Path, cfg: &ExperimentConfig, out: &ExperimentOutput) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_csv(&dir.join("results.csv"), &out.rows)?;
    write_csv(&dir.join("timing.csv"), std::slice::from_ref(&out.timing))?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()).map_err(io_err(dir))?;
    let meta = json!({
        "schema_version": SCHEMA_VERSION,
        "config_digest": cfg.digest(),
        "resolved_seeds": {
            "fl": cfg.resolved().fl.seed,
            "defense": cfg.resolved().fl.defense.seed,
            "attack": cfg.resolved().attack.seed,
            "distill": cfg.resolved().spoofl.distill.seed,
        },
        "round_accuracy": out.round_accuracy,
        "metric_notes": {
            "fmse": "penultimate embeddings of the private-task classifier",
            "lpips_like": "unit-normalized feature maps of the private-task classifier",
        },
        "attack_iterations": cfg.attack.iterations,
    });
    std::fs::write(dir.join("metadata.json"), serde_json::to_vec_pretty(&meta)?).map_err(io_err(dir))?;
    for (round, recon, truth) in &out.reconstructions {
        let n = recon.shape()[0];
        let both = concat(&[truth.clone(), recon.clone()]);
        imageio::write_image_grid(&dir.join(format!("recon-round{round}.png")), &both, n.min(16), 3)?;
        store::Container::new("reconstruction", json!({ "round": round }))
            .with("recon", recon.clone())
            .with("truth", truth.clone())
            .write(&dir.join(format!("recon-round{round}.bin")))?;
    }
    if let Some(s) = &out.spoof_set {
        store::save_spoof_dataset(&dir.join("spoofset.bin"), s)?;
        imageio::write_image_grid(&dir.join("spoofset.png"), &s.images, 10, 3)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Table1,
    Table2,
    Table3,
    Table4,
    Fig3,
    Fig4,
}

pub const PRESETS: [Preset; 6] = [Preset::Table1, Preset::Table2, Preset::Table3, Preset::Table4, Preset::Fig3, Preset::Fig4];

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Table1 => "table1",
            Preset::Table2 => "table2",
            Preset::Table3 => "table3",
            Preset::Table4 => "table4",
            Preset::Fig3 => "fig3",
            Preset::Fig4 => "fig4",
        }
    }
}

impl Preset {
    /// Base configuration a preset expands when none is given. `table1` uses a
    /// lower client learning rate over more rounds, where the accuracy cost
    /// of each defense level is measurable.
    pub fn default_base(self) -> ExperimentConfig {
        let mut c = ExperimentConfig::desk();
        c.name = self.name().into();
        if self == Preset::Table1 {
            c.fl.local_lr = 0.05;
            c.fl.rounds = 30;
        }
        c
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.strip_suffix("-desk").unwrap_or(s);
        PRESETS
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset `{s}`")))
    }
}

pub const NOISE_LEVELS: [f64; 4] = [1e-3, 2.5e-3, 5e-3, 1e-2];
pub const CLIP_LEVELS: [f64; 4] = [20.0, 15.0, 10.0, 5.0];
pub const COMPRESSION_RATES: [f64; 4] = [0.90, 0.925, 0.95, 0.975];
pub const PRESET_NOISE: f64 = 2.5e-3;
pub const PRESET_CLIP: f64 = 20.0;
pub const PRESET_COMPRESSION: f64 = 0.95;
pub const FIG3_SIZES: [usize; 5] = [50, 100, 250, 500, 1000];

/// Protocol used for a defense family: clipping is evaluated on summed
/// FedSGD gradients under the `dlg` attack so that the norm bounds bind;
/// every other family uses FedAvg deltas under `sme`.
pub fn family_protocol(base: &ExperimentConfig, kind: DefenseKind) -> ExperimentConfig {
    let mut c = base.clone();
    if kind == DefenseKind::Clip {
        c.fl.protocol = Protocol::Fedsgd;
        c.fl.local_steps = 1;
        c.fl.reduction = Reduction::Sum;
        c.fl.local_lr = 0.01;
        c.attack = AttackConfig { iterations: base.attack.iterations, ..AttackConfig::desk(AttackMethod::Dlg) };
    }
    c
}

fn cell(base: &ExperimentConfig, name: &str, defense: DefenseConfig) -> ExperimentConfig {
    let mut c = family_protocol(base, defense.kind);
    c.name = name.into();
    c.fl.defense = defense;
    c
}

fn classical_cells(base: &ExperimentConfig, prefix: &str) -> Vec<ExperimentConfig> {
    vec![
        cell(base, &format!("{prefix}none"), DefenseConfig::none()),
        cell(base, &format!("{prefix}noise"), DefenseConfig::noise(PRESET_NOISE)),
        cell(base, &format!("{prefix}clip"), DefenseConfig::clip(PRESET_CLIP)),
        cell(base, &format!("{prefix}compress"), DefenseConfig::compress(PRESET_COMPRESSION)),
    ]
}

/// Rounds for every client to pass once over its private shard.
pub fn rounds_per_epoch(cfg: &ExperimentConfig) -> usize {
    let shard = cfg.data.train_limit / cfg.fl.num_clients;
    shard.div_ceil(cfg.fl.local_steps * cfg.fl.batch_size).max(1)
}

/// Cells of a table preset, defense-free cell first.
pub fn preset_cells(preset: Preset, base: &ExperimentConfig) -> Result<Vec<ExperimentConfig>> {
    Ok(match preset {
        Preset::Table1 => {
            let mut cells = vec![cell(base, "none", DefenseConfig::none())];
            cells.extend(NOISE_LEVELS.iter().map(|&s| cell(base, &format!("noise-{s}"), DefenseConfig::noise(s))));
            cells.extend(CLIP_LEVELS.iter().map(|&m| cell(base, &format!("clip-{m}"), DefenseConfig::clip(m))));
            cells.extend(COMPRESSION_RATES.iter().map(|&r| cell(base, &format!("compress-{r}"), DefenseConfig::compress(r))));
            cells
        }
        Preset::Table2 => {
            let mut cells = classical_cells(base, "");
            cells.push(cell(base, "spoofl", DefenseConfig::spoofl(None)));
            cells
        }
        Preset::Table3 => {
            let mut cells = Vec::new();
            for method in [AttackMethod::Gradinv, AttackMethod::Dlf, AttackMethod::Sme, AttackMethod::Dlg] {
                for defense in [DefenseConfig::none(), DefenseConfig::spoofl(None)] {
                    let mut c = base.clone();
                    c.name = format!("{}-{}", method.name(), defense.kind.name());
                    c.attack = AttackConfig { iterations: base.attack.iterations, ..AttackConfig::desk(method) };
                    c.fl.protocol = if method.needs_gradient() { Protocol::Fedsgd } else { Protocol::Fedavg };
                    if method.needs_gradient() {
                        c.fl.local_steps = 1;
                    }
                    c.fl.defense = defense;
                    cells.push(c);
                }
            }
            cells
        }
        Preset::Table4 => {
            let mut cells = Vec::new();
            for arch in [Architecture::Mlp2, Architecture::ConvnetSmall, Architecture::ResnetLike] {
                let mut b = base.clone();
                b.model = arch;
                let prefix = format!("{}-", arch.name());
                cells.extend(classical_cells(&b, &prefix));
                cells.push(cell(&b, &format!("{prefix}spoofl"), DefenseConfig::spoofl(None)));
            }
            cells
        }
        Preset::Fig4 => {
            let per_epoch = rounds_per_epoch(base);
            let mut b = base.clone();
            b.fl.rounds = 5 * per_epoch;
            b.attack_plan.rounds = (1..=5).map(|e| e * per_epoch - 1).collect();
            let mut cells = classical_cells(&b, "");
            cells.push(cell(&b, "spoofl", DefenseConfig::spoofl(None)));
            cells
        }
        Preset::Fig3 => return Err(Error::Config("fig3 is a dataset-size sweep, not a table of cells".into())),
    })
}

/// Held-out accuracy after `inner_steps` full-batch SGD steps at `inner_lr`
/// from `init` on `train`: the budget a distilled set is optimized for.
pub fn short_training_accuracy(init: &Classifier, train: &LabeledDataset, test: &LabeledDataset, distill: &DistillConfig) -> Result<f64> {
    let mut m = init.clone();
    for _ in 0..distill.inner_steps {
        let (_, g) = m.loss_gradient(&train.images, &train.labels)?;
        sgd_step(&mut m.params, &g, distill.inner_lr);
    }
    evaluate_accuracy(&m, test)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeRow {
    pub size: usize,
    pub seed: u64,
    pub real_accuracy: f64,
    pub distilled_accuracy: f64,
}

/// Accuracy of short training on `size` distilled images versus `size`
/// random real images, for one global seed.
pub fn size_comparison(base: &ExperimentConfig, size: usize, cache: &mut Cache) -> Result<SizeRow> {
    let mut cfg = base.clone();
    cfg.spoofl.distill.budget = size;
    cfg.fl.defense = DefenseConfig::spoofl(None);
    cfg.validate()?;
    let rc = cfg.resolved();
    let loaded = load_private(&rc, cache).map_err(|e| e.in_stage("data"))?;
    let init = initial_model(&rc, &loaded.private)?;
    let spoof = prepare_spoof_set(&cfg, cache)?;
    let distilled = short_training_accuracy(&init, &spoof.as_labeled()?, &loaded.test, &rc.spoofl.distill)?;
    let mut r = rng::stage_rng(cfg.seed, "real-subset", size as u64);
    let idx = rng::permutation(loaded.private.len(), &mut r)[..size].to_vec();
    let real = short_training_accuracy(&init, &loaded.private.subset(&idx), &loaded.test, &rc.spoofl.distill)?;
    Ok(SizeRow { size, seed: cfg.seed, real_accuracy: real, distilled_accuracy: distilled })
}

pub struct SweepOutput {
    pub rows: Vec<ResultsRow>,
    pub timings: Vec<TimingRow>,
    pub curves: Vec<CurveRow>,
    pub sizes: Vec<SizeRow>,
}

/// Runs a preset and writes its files under `out` (when given).
pub fn run_sweep(preset: Preset, base: &ExperimentConfig, out: Option<&Path>, cache: &mut Cache) -> Result<SweepOutput> {
    let mut res = SweepOutput { rows: vec![], timings: vec![], curves: vec![], sizes: vec![] };
    if preset == Preset::Fig3 {
        for size in FIG3_SIZES {
            let row = size_comparison(base, size, cache)?;
            res.curves.push(CurveRow { figure: "fig3".into(), curve: "real".into(), x: size as f64, y: row.real_accuracy });
            res.curves.push(CurveRow {
                figure: "fig3".into(),
                curve: "spoofl".into(),
                x: size as f64,
                y: row.distilled_accuracy,
            });
            res.sizes.push(row);
        }
    } else {
        for mut c in preset_cells(preset, base)? {
            c.out_dir = out.map(|o| o.join("cells").join(&c.name));
            log::info!("{}: running cell {}", preset.name(), c.name);
            let o = match run_experiment(&c, cache) {
                Ok(o) => o,
                Err(e) => {
                    if let Some(dir) = out {
                        write_sweep_files(dir, preset, &res)?;
                    }
                    return Err(e);
                }
            };
            if preset == Preset::Fig4 {
                for r in &o.rows {
                    res.curves.push(CurveRow {
                        figure: "fig4".into(),
                        curve: r.defense.clone(),
                        x: ((r.attack_round + 1) / rounds_per_epoch(base)) as f64,
                        y: r.ssim,
                    });
                }
            }
            res.rows.extend(o.rows);
            res.timings.push(o.timing);
        }
    }
    if let Some(dir) = out {
        write_sweep_files(dir, preset, &res)?;
    }
    Ok(res)
}

fn write_sweep_files(dir: &Path, preset: Preset, res: &SweepOutput) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    std::fs::write(dir.join("preset.txt"), preset.name()).map_err(io_err(dir))?;
    if !res.rows.is_empty() {
        write_csv(&dir.join("results.csv"), &res.rows)?;
        write_csv(&dir.join("timing.csv"), &res.timings)?;
    }
    if !res.sizes.is_empty() {
        write_csv(&dir.join("sizes.csv"), &res.sizes)?;
    }
    if !res.curves.is_empty() {
        write_csv(&dir.join("curves.csv"), &res.curves)?;
        plot_curves(&dir.join(format!("{}.png", preset.name())), &res.curves)?;
    }
    Ok(())
}

/// Line chart with one series per curve name, in first-appearance order.
pub fn plot_curves(path: &Path, curves: &[CurveRow]) -> Result<()> {
    let mut names: Vec<&str> = Vec::new();
    for c in curves {
        if !names.contains(&c.curve.as_str()) {
            names.push(&c.curve);
        }
    }
    let series: Vec<Vec<(f64, f64)>> =
        names.iter().map(|n| curves.iter().filter(|c| c.curve == *n).map(|c| (c.x, c.y)).collect()).collect();
    imageio::line_chart(&series, 480, 320).write_png(path)
}

/// Published full-scale numbers shown beside desk results. Never asserted.
pub struct PublishedReference {
    pub table: &'static str,
    pub key: &'static str,
    pub accuracy: Option<f64>,
    pub ssim: Option<f64>,
    pub plc: Option<f64>,
}

const fn published(table: &'static str, key: &'static str, accuracy: Option<f64>, ssim: Option<f64>, plc: Option<f64>) -> PublishedReference {
    PublishedReference { table, key, accuracy, ssim, plc }
}

pub const PUBLISHED_REFERENCE: &[PublishedReference] = &[
    published("table1", "none", Some(75.43), Some(0.587), None),
    published("table1", "noise-0.001", Some(72.56), Some(0.335), None),
    published("table1", "noise-0.0025", Some(63.33), Some(0.273), None),
    published("table1", "noise-0.005", Some(51.99), Some(0.147), None),
    published("table1", "noise-0.01", Some(35.86), Some(0.138), None),
    published("table1", "clip-20", Some(65.74), Some(0.460), None),
    published("table1", "clip-15", Some(54.74), Some(0.421), None),
    published("table1", "clip-10", Some(46.70), Some(0.375), None),
    published("table1", "clip-5", Some(26.80), Some(0.196), None),
    published("table1", "compress-0.9", Some(57.82), Some(0.484), None),
    published("table1", "compress-0.925", Some(57.20), Some(0.435), None),
    published("table1", "compress-0.95", Some(56.62), Some(0.321), None),
    published("table1", "compress-0.975", Some(40.06), Some(0.093), None),
    published("table2", "none", Some(73.0), Some(0.609), Some(3.832)),
    published("table2", "noise", Some(63.0), Some(0.273), Some(2.353)),
    published("table2", "clip", Some(66.0), Some(0.460), Some(3.126)),
    published("table2", "compress", Some(56.0), Some(0.321), Some(3.067)),
    published("table2", "spoofl", Some(63.0), Some(0.139), Some(1.689)),
    published("table3", "gradinv-none", None, Some(0.078), Some(0.864)),
    published("table3", "gradinv-spoofl", None, Some(0.023), Some(0.165)),
    published("table3", "dlf-none", None, Some(0.253), Some(2.392)),
    published("table3", "dlf-spoofl", None, Some(0.125), Some(1.891)),
    published("table3", "sme-none", None, Some(0.609), Some(3.832)),
    published("table3", "sme-spoofl", None, Some(0.139), Some(1.689)),
    published("table4", "convnet-small-none", None, Some(0.621), Some(3.162)),
    published("table4", "convnet-small-noise", None, Some(0.443), Some(2.087)),
    published("table4", "convnet-small-clip", None, Some(0.421), Some(1.987)),
    published("table4", "convnet-small-compress", None, Some(0.512), Some(2.435)),
    published("table4", "convnet-small-spoofl", None, Some(0.155), Some(1.030)),
    published("table4", "resnet-like-none", None, Some(0.609), Some(3.832)),
    published("table4", "resnet-like-noise", None, Some(0.273), Some(2.353)),
    published("table4", "resnet-like-clip", None, Some(0.460), Some(3.126)),
    published("table4", "resnet-like-compress", None, Some(0.321), Some(3.067)),
    published("table4", "resnet-like-spoofl", None, Some(0.139), Some(1.689)),
];

fn reference(table: &str, key: &str) -> Option<&'static PublishedReference> {
    PUBLISHED_REFERENCE.iter().find(|r| r.table == table && r.key == key)
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map(|x| format!("{x:.digits$}")).unwrap_or_else(|| "-".into())
}

/// Markdown summary of a results directory written by [`run_sweep`].
pub fn render_report(dir: &Path) -> Result<String> {
    let preset = std::fs::read_to_string(dir.join("preset.txt")).ok();
    let table = preset.as_deref().map(str::trim).unwrap_or("custom").to_string();
    let mut md = format!("# Results: {table}\n\n");
    let results = dir.join("results.csv");
    let sizes = dir.join("sizes.csv");
    if results.exists() {
        let rows: Vec<ResultsRow> = read_csv(&results)?;
        ensure!(!rows.is_empty(), Precondition, "no result rows in {}", dir.display());
        let timings: Vec<TimingRow> = read_csv(&dir.join("timing.csv")).unwrap_or_default();
        md.push_str(
            "| cell | defense | param | attack | round | SSIM | PSNR | FMSE | LPIPS-like | PLC | accuracy | RET | \
             published (full scale) acc / SSIM / PLC |\n",
        );
        md.push_str("|---|---|---|---|---|---|---|---|---|---|---|---|---|\n");
        for r in &rows {
            let ret = timings.iter().find(|t| t.experiment == r.experiment).map(|t| t.relative_execution_time);
            let p = reference(&table, &r.experiment);
            md.push_str(&format!(
                "| {} | {} | {} | {} | {} | {:.3} | {:.2} | {:.3} | {:.3} | {:.3} | {:.1}% | {} | {} |\n",
                r.experiment,
                r.defense,
                r.defense_param,
                r.attack,
                r.attack_round,
                r.ssim,
                r.psnr_db,
                r.fmse,
                r.lpips_like,
                r.plc,
                100.0 * r.accuracy,
                fmt_opt(ret, 2),
                p.map(|p| format!("{} / {} / {}", fmt_opt(p.accuracy, 2), fmt_opt(p.ssim, 3), fmt_opt(p.plc, 3)))
                    .unwrap_or_else(|| "-".into()),
            ));
        }
        let acc = rows[0].private_classifier_accuracy;
        md.push_str(&format!(
            "\nPLC, FMSE and LPIPS-like use the private-task classifier (held-out accuracy {:.1}%). \
             Published values come from full-scale models and datasets and are shown for direction only.\n",
            100.0 * acc
        ));
    } else if sizes.exists() {
        let rows: Vec<SizeRow> = read_csv(&sizes)?;
        ensure!(!rows.is_empty(), Precondition, "no size rows in {}", dir.display());
        md.push_str("| size | seed | random real | distilled spoof |\n|---|---|---|---|\n");
        for r in &rows {
            md.push_str(&format!(
                "| {} | {} | {:.1}% | {:.1}% |\n",
                r.size,
                r.seed,
                100.0 * r.real_accuracy,
                100.0 * r.distilled_accuracy
            ));
        }
    } else {
        return Err(Error::Precondition(format!("no results in {}", dir.display())));
    }
    if dir.join(format!("{table}.png")).exists() {
        md.push_str(&format!("\n![{table}]({table}.png)\n"));
    }
    Ok(md)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table1_preset_has_thirteen_cells_none_first() {
        let cells = preset_cells(Preset::Table1, &ExperimentConfig::desk()).unwrap();
        assert_eq!(cells.len(), 1 + 4 + 4 + 4);
        assert_eq!(cells[0].fl.defense.kind, DefenseKind::None);
        for c in &cells {
            c.validate().unwrap();
        }
    }

    #[test]
    fn config_toml_round_trip_and_digest_ignores_out_dir() {
        let mut c = ExperimentConfig::desk();
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        let d = c.digest();
        c.out_dir = Some("elsewhere".into());
        assert_eq!(c.digest(), d);
        c.seed = 1;
        assert_ne!(c.digest(), d);
    }

    #[test]
    fn invalid_configs_are_config_errors() {
        let mut c = ExperimentConfig::desk();
        c.attack = AttackConfig::desk(AttackMethod::Dlg);
        assert!(c.validate().unwrap_err().is_config());
        assert!(ExperimentConfig::from_toml("name = 3").unwrap_err().is_config());
        assert!("table9".parse::<Preset>().is_err());
        assert_eq!("table1-desk".parse::<Preset>().unwrap(), Preset::Table1);
    }
}
