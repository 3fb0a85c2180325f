use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use spoofl_core::attacks::{run_attack, AttackConfig, AttackMethod, FULL_SCALE_ITERATIONS};
use spoofl_core::data::{curate_blacklist, load_dataset, Normalization, Split};
use spoofl_core::defenses::{DefenseConfig, DefenseKind};
use spoofl_core::error::Error;
use spoofl_core::flsim::{run_federation, FLConfig, Protocol};
use spoofl_core::harness::{self, Cache, ExperimentConfig, Preset, ResultsRow, SCHEMA_VERSION};
use spoofl_core::metrics;
use spoofl_core::models::{
    build_classifier, evaluate_accuracy, train_classifier, train_generator, Architecture, ClassifierSpec,
    GeneratorTrainConfig, TrainConfig,
};
use spoofl_core::spoofl::{distill_dataset, DistillConfig};
use spoofl_core::{imageio, store};

#[derive(Parser)]
#[command(name = "spoofl-bench", version, about = "Federated-learning privacy benchmark: attacks, defenses and spoofing")]
struct Cli {
    /// Log level filter (error, warn, info, debug).
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a classifier and write its checkpoint (and optionally its trajectory).
    TrainClassifier(TrainClassifierArgs),
    /// Train the class-conditional generator on a spoof-source dataset.
    TrainGenerator(TrainGeneratorArgs),
    /// Simulate federated training and persist intercepted updates.
    Federate(FederateArgs),
    /// Reconstruct client data from one intercepted update.
    Attack(AttackArgs),
    /// Distill a spoof dataset by trajectory matching.
    Distill(DistillArgs),
    /// Score a reconstruction against its ground truth.
    Score(ScoreArgs),
    /// Run one experiment from a TOML config.
    Run(RunArgs),
    /// Run a preset grid of experiments.
    Sweep(SweepArgs),
    /// Render a markdown report of a results directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct DataArgs {
    #[arg(long, default_value = "synth-digits")]
    dataset: String,
    #[arg(long, default_value_t = 28)]
    resolution: usize,
    /// Use at most this many training samples.
    #[arg(long, default_value_t = 1000)]
    limit: usize,
}

#[derive(Args)]
struct TrainClassifierArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "convnet-small")]
    arch: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 1)]
    checkpoint_every: usize,
    #[arg(long)]
    out: PathBuf,
    /// Also write the training trajectory here.
    #[arg(long)]
    trajectory: Option<PathBuf>,
}

#[derive(Args)]
struct TrainGeneratorArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 2e-3)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    latent_dim: usize,
    /// Write an intermediate checkpoint every this many epochs (0 = final only).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FederateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "mlp2")]
    arch: String,
    #[arg(long, default_value = "fedavg")]
    protocol: String,
    #[arg(long, default_value_t = 4)]
    clients: usize,
    #[arg(long, default_value_t = 10)]
    rounds: usize,
    #[arg(long, default_value_t = 2)]
    local_steps: usize,
    #[arg(long, default_value_t = 0.1)]
    local_lr: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value = "none")]
    defense: String,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    max_norm: Option<f64>,
    #[arg(long)]
    rate: Option<f64>,
    /// Spoof dataset file for the spoofl defense.
    #[arg(long)]
    spoof_set: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Persist updates of these rounds only (default: all).
    #[arg(long, value_delimiter = ',')]
    save_rounds: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long, default_value = "sme")]
    method: String,
    #[arg(long, default_value_t = spoofl_core::attacks::DESK_ITERATIONS)]
    iterations: usize,
    /// Use the full-scale iteration count instead of `--iterations`.
    #[arg(long)]
    full_scale: bool,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Intercepted update written by `federate`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DistillArgs {
    #[arg(long, default_value_t = 100)]
    budget: usize,
    #[arg(long, default_value_t = 200)]
    outer_iters: usize,
    #[arg(long, default_value_t = 0.1)]
    outer_lr: f64,
    #[arg(long, default_value_t = 10)]
    inner_steps: usize,
    #[arg(long, default_value_t = 0.01)]
    inner_lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    generator: PathBuf,
    /// Expert trajectory on the private data (from `train-classifier --trajectory`).
    #[arg(long)]
    traj: PathBuf,
    /// Classifier checkpoint of the trajectory's architecture, giving the
    /// student spec and normalization.
    #[arg(long)]
    student: PathBuf,
    /// Classifier trained on the spoof-source dataset.
    #[arg(long)]
    spoof_classifier: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Spoof-source dataset the generator was trained on (for blacklist names).
    #[arg(long, default_value = "synth-fashion")]
    spoof_dataset: String,
    /// Overlapping classes as `private:spoof` name pairs.
    #[arg(long, value_delimiter = ',')]
    overlap: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    /// Directory written by `attack`.
    #[arg(long)]
    result: PathBuf,
    /// Ground truth: an update file with truth or a dataset container.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Private-task classifier checkpoint.
    #[arg(long)]
    classifier: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    full_scale: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    preset: String,
    #[arg(long)]
    out: PathBuf,
    /// Base config replacing the preset default.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    full_scale: bool,
}

#[derive(Args)]
struct ReportArgs {
    dir: PathBuf,
    /// Write the report here instead of `<dir>/report.md`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse<T: std::str::FromStr>(what: &str, s: &str) -> Result<T, Error> {
    s.parse().map_err(|_| Error::Config(format!("unknown {what} `{s}`")))
}

fn architecture(s: &str) -> Result<Architecture, Error> {
    serde_json::from_value(json!(s)).map_err(|_| Error::Config(format!("unknown architecture `{s}`")))
}

fn train_set(d: &DataArgs) -> Result<spoofl_core::data::LabeledDataset, Error> {
    load_dataset(&d.dataset, Split::Train, d.resolution, Some(d.limit))
}

fn test_set(d: &DataArgs) -> Result<spoofl_core::data::LabeledDataset, Error> {
    load_dataset(&d.dataset, Split::Test, d.resolution, None)
}

fn train_classifier_cmd(a: TrainClassifierArgs) -> anyhow::Result<()> {
    let arch = architecture(&a.arch)?;
    let train = train_set(&a.data)?;
    let test = test_set(&a.data)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        batch_size: a.batch_size,
        seed: a.seed,
        checkpoint_every: a.checkpoint_every,
    };
    let init = build_classifier(&ClassifierSpec::for_dataset(arch, &train), a.seed)?.with_normalization(Normalization::fit(&train));
    let out = train_classifier(&init, &train, &cfg)?;
    let acc = evaluate_accuracy(&out.classifier, &test)?;
    let digest = spoofl_core::rng::digest_bytes(&serde_json::to_vec(&json!([a.data.dataset, a.arch, cfg]))?);
    store::save_classifier(&a.out, &out.classifier, &digest)?;
    if let Some(t) = &a.trajectory {
        store::save_trajectory(t, &out.trajectory)?;
    }
    println!("{}", json!({ "checkpoint": a.out, "test_accuracy": acc, "epoch_accuracy": out.epoch_accuracy }));
    Ok(())
}

fn train_generator_cmd(a: TrainGeneratorArgs) -> anyhow::Result<()> {
    let data = train_set(&a.data)?;
    let base = GeneratorTrainConfig { latent_dim: a.latent_dim, lr: a.lr, seed: a.seed, ..GeneratorTrainConfig::default() };
    let digest = |cfg: &GeneratorTrainConfig| {
        spoofl_core::rng::digest_bytes(&serde_json::to_vec(&json!([a.data.dataset, cfg])).expect("config serializes"))
    };
    if a.checkpoint_every > 0 {
        let mut at = a.checkpoint_every;
        while at < a.epochs {
            let cfg = GeneratorTrainConfig { epochs: at, ..base.clone() };
            let (g, _) = train_generator(&data, &cfg)?;
            let stem = a.out.file_stem().and_then(|s| s.to_str()).unwrap_or("generator");
            store::save_generator(&a.out.with_file_name(format!("{stem}-epoch{at}.bin")), &g, &digest(&cfg))?;
            at += a.checkpoint_every;
        }
    }
    let cfg = GeneratorTrainConfig { epochs: a.epochs, ..base };
    let (g, losses) = train_generator(&data, &cfg)?;
    store::save_generator(&a.out, &g, &digest(&cfg))?;
    println!("{}", json!({ "checkpoint": a.out, "epoch_loss": losses }));
    Ok(())
}

fn federate_cmd(a: FederateArgs) -> anyhow::Result<()> {
    let arch = architecture(&a.arch)?;
    let private = train_set(&a.data)?;
    let test = load_dataset(&a.data.dataset, Split::Test, a.data.resolution, Some(500))?;
    let defense = DefenseConfig {
        kind: parse::<DefenseKind>("defense", &a.defense)?,
        sigma: a.sigma,
        max_norm: a.max_norm,
        rate: a.rate,
        spoof_dataset: a.spoof_set.clone(),
        seed: spoofl_core::rng::derive_seed(a.seed, "defense", 0),
    };
    let cfg = FLConfig {
        protocol: parse::<Protocol>("protocol", &a.protocol)?,
        num_clients: a.clients,
        rounds: a.rounds,
        local_steps: a.local_steps,
        local_lr: a.local_lr,
        batch_size: a.batch_size,
        defense,
        seed: spoofl_core::rng::derive_seed(a.seed, "fl", 0),
        ..FLConfig::default()
    };
    cfg.validate()?;
    let spoof = match &cfg.defense.spoof_dataset {
        Some(p) if cfg.defense.kind == DefenseKind::Spoofl => Some(store::load_spoof_dataset(p)?),
        _ => None,
    };
    let init = build_classifier(&ClassifierSpec::for_dataset(arch, &private), spoofl_core::rng::derive_seed(a.seed, "model-init", 0))?
        .with_normalization(Normalization::fit(&private));
    let updates_dir = a.out.join("updates");
    std::fs::create_dir_all(&updates_dir).with_context(|| format!("creating {}", updates_dir.display()))?;
    let context = json!({
        "dataset": private.id,
        "model": arch.name(),
        "protocol": cfg.protocol.name(),
        "defense": cfg.defense.kind.name(),
        "defense_param": cfg.defense.parameter(),
    });
    let mut saved = Vec::new();
    let mut failure = None;
    let outcome = run_federation(&cfg, &init, &private, &test, spoof.as_ref(), &mut |i| {
        let m = &i.update.meta;
        if failure.is_some() || (!a.save_rounds.is_empty() && !a.save_rounds.contains(&m.round)) {
            return;
        }
        let path = updates_dir.join(format!("round{:03}-client{:02}.bin", m.round, m.client_id));
        let shell = match init.with_params(i.update.pre_update_model.clone()) {
            Ok(s) => s,
            Err(e) => {
                failure = Some(e);
                return;
            }
        };
        let written = store::update_container(i.update, &shell, Some((&i.truth_images, &i.truth_labels))).and_then(|mut c| {
            c.meta["context"] = context.clone();
            c.write(&path)
        });
        match written {
            Ok(()) => saved.push(path),
            Err(e) => failure = Some(e),
        }
    })?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    store::save_classifier(&a.out.join("final-model.bin"), &outcome.final_model, &spoofl_core::rng::digest_bytes(&serde_json::to_vec(&cfg)?))?;
    std::fs::write(
        a.out.join("federation.json"),
        serde_json::to_vec_pretty(&json!({
            "config": cfg,
            "round_accuracy": outcome.round_accuracy,
            "round_wall_s": outcome.round_wall_s,
            "updates": saved,
        }))?,
    )?;
    println!("{}", json!({ "updates": saved.len(), "final_accuracy": outcome.round_accuracy.last() }));
    Ok(())
}

fn attack_cmd(a: AttackArgs) -> anyhow::Result<()> {
    let method = parse::<AttackMethod>("attack method", &a.method)?;
    let stored = store::load_update(&a.input)?;
    let mut cfg = AttackConfig::new(method);
    cfg.iterations = if a.full_scale { FULL_SCALE_ITERATIONS } else { a.iterations };
    cfg.seed = a.seed;
    if let Some(lr) = a.lr {
        cfg.opt_lr = lr;
    }
    let result = run_attack(&stored.update, &stored.model, &cfg)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let n = result.images.shape()[0];
    imageio::write_image_grid(&a.out.join("recon.png"), &result.images, n.min(16), 3)?;
    let mut c = store::Container::new("reconstruction", json!({ "method": method.name() })).with("recon", result.images.clone());
    if let Some(l) = &result.inferred_labels {
        c = c.with_labels("inferred_labels", l);
    }
    c.write(&a.out.join("recon.bin"))?;
    let meta = json!({
        "result": result,
        "input": a.input,
        "update_meta": stored.update.meta,
        "architecture": stored.model.spec.architecture.name(),
        "context": stored.context,
    });
    std::fs::write(a.out.join("result.json"), serde_json::to_vec_pretty(&meta)?)?;
    println!(
        "{}",
        json!({ "out": a.out, "final_matching_loss": result.final_matching_loss, "iterations_run": result.iterations_run })
    );
    Ok(())
}

fn distill_cmd(a: DistillArgs) -> anyhow::Result<()> {
    let private = train_set(&a.data)?;
    let generator = store::load_generator(&a.generator)?;
    let traj = store::load_trajectory(&a.traj)?;
    let student = store::load_classifier(&a.student)?;
    let spoof_classifier = store::load_classifier(&a.spoof_classifier)?;
    let spoof_data = load_dataset(&a.spoof_dataset, Split::Train, a.data.resolution, Some(100))?;
    let overlap = a
        .overlap
        .iter()
        .map(|p| match p.split_once(':') {
            Some((x, y)) => Ok((x.to_string(), y.to_string())),
            None => Err(Error::Config(format!("overlap `{p}` is not a private:spoof pair"))),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let blacklist = curate_blacklist(&private, &spoof_data, &overlap)?;
    let cfg = DistillConfig {
        budget: a.budget,
        outer_iterations: a.outer_iters,
        outer_lr: a.outer_lr,
        inner_steps: a.inner_steps,
        inner_lr: a.inner_lr,
        seed: a.seed,
        ..DistillConfig::default()
    };
    let out = distill_dataset(&private, &generator, &spoof_classifier, &blacklist, &student, &traj, &cfg)?;
    store::save_spoof_dataset(&a.out, &out.dataset)?;
    imageio::write_image_grid(&a.out.with_extension("png"), &out.dataset.images, 10, 3)?;
    println!(
        "{}",
        json!({
            "out": a.out,
            "final_loss": out.dataset.provenance.loss_curve.last(),
            "claimed": out.audit.claimed,
            "diverged_at": out.diverged_at,
        })
    );
    Ok(())
}

fn score_cmd(a: ScoreArgs) -> anyhow::Result<()> {
    let recon = store::Container::read(&a.result.join("recon.bin"))?.expect_kind("reconstruction")?;
    let images = recon.array("recon")?.clone();
    let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(a.result.join("result.json")).context("reading result.json")?)?;
    let truth_path = match &a.truth {
        Some(p) => p.clone(),
        None => PathBuf::from(meta["input"].as_str().ok_or_else(|| Error::Config("no --truth and no input recorded".into()))?),
    };
    let truth_c = store::Container::read(&truth_path)?;
    let (truth, labels) = match truth_c.kind.as_str() {
        "client-update" => (truth_c.array("truth_images")?.clone(), truth_c.labels("truth_labels")?),
        "dataset" => {
            let d = store::dataset_from(truth_c)?;
            (d.images, d.labels)
        }
        other => bail!(Error::Config(format!("{} holds a {other}, not ground truth", truth_path.display()))),
    };
    let f_private = store::load_classifier(&a.classifier)?;
    let report = metrics::score_reconstruction(&images, &truth, &labels, &f_private)?;
    std::fs::write(a.result.join("metrics.json"), serde_json::to_vec_pretty(&report)?)?;
    let ctx = &meta["context"];
    let field = |k: &str| ctx[k].as_str().unwrap_or("-").to_string();
    let row = ResultsRow {
        schema_version: SCHEMA_VERSION,
        experiment: a.result.file_name().and_then(|s| s.to_str()).unwrap_or("attack").to_string(),
        dataset: field("dataset"),
        model: meta["architecture"].as_str().unwrap_or("-").to_string(),
        protocol: field("protocol"),
        defense: field("defense"),
        defense_param: ctx["defense_param"].as_f64().map(|v| format!("{v}")).unwrap_or_else(|| "-".into()),
        attack: meta["result"]["metadata"]["method"].as_str().unwrap_or("-").to_string(),
        attack_round: meta["update_meta"]["round"].as_u64().unwrap_or(0) as usize,
        attacked_samples: labels.len(),
        ssim: report.ssim,
        psnr_db: report.psnr_db,
        fmse: report.fmse,
        lpips_like: report.lpips_like,
        plc: report.plc,
        accuracy: f64::NAN,
        private_classifier_accuracy: f64::NAN,
        config_digest: "-".into(),
    };
    harness::write_csv(&a.result.join("metrics.csv"), &[row])?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn full_scale(cfg: &mut ExperimentConfig) {
    cfg.attack.iterations = FULL_SCALE_ITERATIONS;
}

fn run_cmd(a: RunArgs) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&a.config).map_err(|e| Error::io(&a.config, e))?;
    let mut cfg = ExperimentConfig::from_toml(&text)?;
    if a.full_scale {
        full_scale(&mut cfg);
    }
    if let Some(out) = a.out {
        cfg.out_dir = Some(out);
    }
    if cfg.out_dir.is_none() {
        cfg.out_dir = Some(PathBuf::from("results").join(&cfg.name));
    }
    let out = harness::run_experiment(&cfg, &mut Cache::default())?;
    for r in &out.rows {
        println!("{}", serde_json::to_string(r)?);
    }
    Ok(())
}

fn sweep_cmd(a: SweepArgs) -> anyhow::Result<()> {
    let preset: Preset = a.preset.parse()?;
    let mut base = match &a.config {
        Some(p) => ExperimentConfig::from_toml(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => preset.default_base(),
    };
    if let Some(s) = a.seed {
        base.seed = s;
    }
    if a.full_scale {
        full_scale(&mut base);
    }
    let res = harness::run_sweep(preset, &base, Some(&a.out), &mut Cache::default())?;
    eprintln!("{}: {} rows, {} curve points written to {}", preset.name(), res.rows.len(), res.curves.len(), a.out.display());
    Ok(())
}

fn report_cmd(a: ReportArgs) -> anyhow::Result<()> {
    let md = harness::render_report(&a.dir)?;
    let out = a.out.unwrap_or_else(|| a.dir.join("report.md"));
    std::fs::write(&out, &md).map_err(|e| Error::io(&out, e))?;
    print!("{md}");
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let config = e.chain().any(|c| c.downcast_ref::<Error>().is_some_and(Error::is_config));
    if config {
        2
    } else {
        3
    }
}

fn dispatch(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::TrainClassifier(a) => train_classifier_cmd(a),
        Command::TrainGenerator(a) => train_generator_cmd(a),
        Command::Federate(a) => federate_cmd(a),
        Command::Attack(a) => attack_cmd(a),
        Command::Distill(a) => distill_cmd(a),
        Command::Score(a) => score_cmd(a),
        Command::Run(a) => run_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Report(a) => report_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).init();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
