//! Gradient-inversion attacks on intercepted client updates.
//!
//! All attacks optimize a dummy batch so that some function of the model's
//! gradient on it matches the intercepted update. The dummy gradient is
//! itself differentiated, so every iteration runs a double backward pass.

use std::collections::BTreeMap;
use std::str::FromStr;
use web_time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::autodiff::{Tape, Var};
use crate::error::{ensure, Error, Result};
use crate::flsim::{ClientUpdate, Reduction, UpdateKind, UpdateMeta};
use crate::models::{cross_entropy, soft_cross_entropy, Classifier, ParameterVector};
use crate::optim::Adam;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMethod {
    Dlg,
    Ig,
    Sme,
    Gradinv,
    Dlf,
}

pub const ATTACK_METHODS: [AttackMethod; 5] =
    [AttackMethod::Dlg, AttackMethod::Ig, AttackMethod::Sme, AttackMethod::Gradinv, AttackMethod::Dlf];

impl AttackMethod {
    pub fn name(self) -> &'static str {
        match self {
            AttackMethod::Dlg => "dlg",
            AttackMethod::Ig => "ig",
            AttackMethod::Sme => "sme",
            AttackMethod::Gradinv => "gradinv",
            AttackMethod::Dlf => "dlf",
        }
    }

    /// Whether the attack consumes a FedSGD gradient (otherwise a FedAvg delta).
    pub fn needs_gradient(self) -> bool {
        matches!(self, AttackMethod::Dlg | AttackMethod::Ig | AttackMethod::Gradinv)
    }

    pub fn default_lr(self) -> f64 {
        match self {
            AttackMethod::Dlg | AttackMethod::Ig | AttackMethod::Gradinv => 0.1,
            AttackMethod::Sme | AttackMethod::Dlf => 0.01,
        }
    }
}

impl FromStr for AttackMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ATTACK_METHODS
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown attack `{s}` (expected dlg, ig, sme, gradinv or dlf)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    L2,
    Cosine,
}

pub const FULL_SCALE_ITERATIONS: usize = 30_000;
pub const DESK_ITERATIONS: usize = 2_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub method: AttackMethod,
    pub iterations: usize,
    pub opt_lr: f64,
    #[serde(default)]
    pub tv_weight: f64,
    #[serde(default = "one")]
    pub num_seeds: usize,
    #[serde(default)]
    pub consensus_weight: f64,
    /// Batch orderings averaged by `dlf`.
    #[serde(default = "two")]
    pub orderings: usize,
    /// Largest dummy set `dlf` will simulate.
    #[serde(default = "dlf_budget")]
    pub dlf_budget: usize,
    /// Stop once the matching loss is at or below this value.
    #[serde(default)]
    pub stop_loss: f64,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}
fn two() -> usize {
    2
}
fn dlf_budget() -> usize {
    64
}

impl AttackConfig {
    /// Full-length configuration for `method`.
    pub fn new(method: AttackMethod) -> Self {
        let (tv_weight, num_seeds, consensus_weight) = match method {
            AttackMethod::Ig => (1e-4, 1, 0.0),
            AttackMethod::Gradinv => (0.0, 4, 0.01),
            _ => (0.0, 1, 0.0),
        };
        Self {
            method,
            iterations: FULL_SCALE_ITERATIONS,
            opt_lr: method.default_lr(),
            tv_weight,
            num_seeds,
            consensus_weight,
            orderings: 2,
            dlf_budget: dlf_budget(),
            stop_loss: 0.0,
            seed: 0,
        }
    }

    pub fn desk(method: AttackMethod) -> Self {
        Self { iterations: DESK_ITERATIONS, ..Self::new(method) }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.iterations >= 1, Config, "attack iterations must be at least 1");
        ensure!(self.opt_lr > 0.0, Config, "attack learning rate must be positive");
        ensure!(self.tv_weight >= 0.0 && self.consensus_weight >= 0.0, Config, "attack weights must be non-negative");
        ensure!(self.num_seeds >= 1, Config, "num_seeds must be at least 1");
        ensure!(
            self.consensus_weight == 0.0 || self.num_seeds >= 2,
            Config,
            "a consensus weight needs at least 2 seeds"
        );
        ensure!(self.orderings >= 1, Config, "dlf needs at least one ordering");
        Ok(())
    }

    fn distance(&self) -> Distance {
        match self.method {
            AttackMethod::Dlg | AttackMethod::Gradinv | AttackMethod::Dlf => Distance::L2,
            AttackMethod::Ig | AttackMethod::Sme => Distance::Cosine,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReconstructionResult {
    /// Recovered batch clamped to `[0, 1]`.
    #[serde(skip)]
    pub images: Tensor,
    pub inferred_labels: Option<Vec<usize>>,
    pub final_matching_loss: f64,
    pub iterations_run: usize,
    pub wall_time_s: f64,
    pub metadata: BTreeMap<String, Value>,
}

/// Labels inferred from the final bias gradient of a FedSGD update.
///
/// For softmax cross-entropy the mean bias gradient is `mean(p) - counts / n`.
/// Taking `mean(p)` as uniform gives an estimate of the per-class counts,
/// which [`label_counts_from_bias`] rounds to a multiset of `n` labels.
pub fn infer_labels(update: &ClientUpdate) -> Result<Vec<usize>> {
    ensure!(update.kind == UpdateKind::Gradient, Precondition, "label inference needs a gradient update");
    let n = update.meta.num_samples;
    labels_from_bias(&update.payload, n, 1.0 / update.meta.reduction.factor(n))
}

/// Ascending label multiset of size `n` from a mean-reduced bias gradient,
/// by largest-remainder rounding of `n * (1/k - g)` clamped at zero.
pub fn label_counts_from_bias(bias_grad: &[f64], n: usize) -> Vec<usize> {
    let k = bias_grad.len();
    let raw: Vec<f64> = bias_grad.iter().map(|g| (n as f64 * (1.0 / k as f64 - g)).max(0.0)).collect();
    let total: f64 = raw.iter().sum();
    let want: Vec<f64> = if total > 0.0 { raw.iter().map(|r| r * n as f64 / total).collect() } else { vec![n as f64 / k as f64; k] };
    let mut counts: Vec<usize> = want.iter().map(|w| w.floor() as usize).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| (want[b] - want[b].floor()).total_cmp(&(want[a] - want[a].floor())).then(a.cmp(&b)));
    let short = n - counts.iter().sum::<usize>();
    for &c in order.iter().take(short) {
        counts[c] += 1;
    }
    counts.iter().enumerate().flat_map(|(c, &m)| std::iter::repeat_n(c, m)).collect()
}

fn labels_from_bias(v: &ParameterVector, n: usize, scale: f64) -> Result<Vec<usize>> {
    let layout = &v.layout;
    let last = layout.entries.len().checked_sub(1).ok_or_else(|| Error::Layout("empty layout".into()))?;
    let (name, shape) = &layout.entries[last];
    ensure!(
        name.ends_with("bias") && shape.len() == 1 && last >= 1 && layout.entries[last - 1].1.len() == 2,
        Precondition,
        "model has no final linear layer"
    );
    let bias: Vec<f64> = v.layer(last).iter().map(|g| g * scale).collect();
    Ok(label_counts_from_bias(&bias, n))
}

/// Distance between a dummy gradient (on the tape) and a fixed target.
///
/// `l2` is the summed squared difference; `cosine` is one minus the cosine
/// similarity of the flattened vectors, defined as 1 when either is zero.
pub fn gradient_matching_loss_vars<'t>(dummy: &[Var<'t>], target: &ParameterVector, distance: Distance) -> Result<Var<'t>> {
    ensure!(dummy.len() == target.layout.entries.len(), Layout, "gradient layout mismatch");
    let tape = dummy[0].tape();
    let targets: Vec<Var<'t>> = target.to_tensors().into_iter().map(|t| tape.input(t)).collect();
    for (d, t) in dummy.iter().zip(&targets) {
        ensure!(d.shape() == t.shape(), Layout, "gradient layer shapes differ: {:?} vs {:?}", d.shape(), t.shape());
    }
    let sum = |terms: Vec<Var<'t>>| terms.into_iter().reduce(|a, b| a + b).expect("non-empty");
    Ok(match distance {
        Distance::L2 => sum(dummy.iter().zip(&targets).map(|(&d, &t)| (d - t).square().sum()).collect()),
        Distance::Cosine => {
            let tnorm2 = target.dot(target);
            let dot = sum(dummy.iter().zip(&targets).map(|(&d, &t)| (d * t).sum()).collect());
            let dnorm2 = sum(dummy.iter().map(|&d| d.square().sum()).collect());
            if tnorm2 == 0.0 || dnorm2.item() == 0.0 {
                log::warn!("cosine matching against a zero gradient; loss defined as 1");
                return Ok(tape.scalar(1.0));
            }
            -(dot * dnorm2.powf(-0.5)).scale(1.0 / tnorm2.sqrt()) + tape.scalar(1.0)
        }
    })
}

/// Plain-value version of [`gradient_matching_loss_vars`].
pub fn gradient_matching_loss(dummy: &ParameterVector, target: &ParameterVector, distance: Distance) -> Result<f64> {
    dummy.check_layout(target)?;
    let tape = Tape::new();
    let vars = dummy.vars(&tape);
    Ok(gradient_matching_loss_vars(&vars, target, distance)?.item())
}

/// Anisotropic total variation of an image batch, normalized by element count.
pub fn total_variation(images: &Tensor) -> Result<f64> {
    let s = images.shape();
    ensure!(s.len() == 4 && s[2] >= 2 && s[3] >= 2, Shape, "total variation needs [N,C,H,W] with H,W >= 2, got {s:?}");
    let tape = Tape::new();
    Ok(tape.input(images.clone()).total_variation().item())
}

/// Dummy batch initialization: N(0.5, 0.25^2) per pixel.
pub fn dummy_init(shape: &[usize], seed: u64, index: u64) -> Tensor {
    let mut r = rng::stage_rng(seed, "dummy-init", index);
    let n = crate::tensor::numel(shape);
    Tensor::new(shape.to_vec(), rng::normal_vec(n, 0.5, 0.25, &mut r))
}

/// How the attack handles labels.
#[derive(Clone, Debug, PartialEq)]
enum Labels {
    /// Fixed from analytic inference.
    Fixed(Vec<usize>),
    /// Learned soft-label logits, hardened by argmax at the end.
    Learned,
}

/// Per-seed optimization state.
struct Dummy {
    images: Tensor,
    label_logits: Tensor,
}

impl Dummy {
    fn new(shape: &[usize], k: usize, seed: u64, index: u64) -> Self {
        Self { images: dummy_init(shape, seed, index), label_logits: Tensor::zeros(&[shape[0], k]) }
    }
}

fn model_loss<'t>(
    model: &Classifier,
    params: &[Var<'t>],
    x: Var<'t>,
    labels: &Labels,
    logits: Var<'t>,
    reduction: Reduction,
) -> Var<'t> {
    let out = model.forward(params, x).logits;
    let n = out.shape()[0];
    let loss = match labels {
        Labels::Fixed(y) => cross_entropy(out, y),
        Labels::Learned => soft_cross_entropy(out, logits.softmax()),
    };
    match reduction {
        Reduction::Mean => loss,
        Reduction::Sum => loss.scale(n as f64),
    }
}

fn batch_shape(model: &Classifier, n: usize) -> Vec<usize> {
    let [c, h, w] = model.spec.input_shape;
    vec![n, c, h, w]
}

fn hardened(labels: &Labels, logits: &Tensor) -> Vec<usize> {
    match labels {
        Labels::Fixed(y) => y.clone(),
        Labels::Learned => {
            let k = logits.shape()[1];
            (0..logits.shape()[0]).map(|i| crate::models::argmax(&logits.data()[i * k..(i + 1) * k])).collect()
        }
    }
}

fn finish(
    images: &Tensor,
    labels: Option<Vec<usize>>,
    loss: f64,
    iterations_run: usize,
    start: Instant,
    cfg: &AttackConfig,
    mut metadata: BTreeMap<String, Value>,
) -> ReconstructionResult {
    metadata.insert("method".into(), json!(cfg.method.name()));
    metadata.insert("iterations_configured".into(), json!(cfg.iterations));
    metadata.insert("opt_lr".into(), json!(cfg.opt_lr));
    metadata.insert("seed".into(), json!(cfg.seed));
    ReconstructionResult {
        images: images.map(|v| v.clamp(0.0, 1.0)),
        inferred_labels: labels,
        final_matching_loss: loss,
        iterations_run,
        wall_time_s: start.elapsed().as_secs_f64(),
        metadata,
    }
}

fn require_gradient(update: &ClientUpdate, model: &Classifier) -> Result<()> {
    ensure!(update.kind == UpdateKind::Gradient, Precondition, "this attack needs a FedSGD gradient update");
    update.validate()?;
    ensure!(
        update.pre_update_model.layout.as_ref() == &model.spec.layout(),
        Layout,
        "update does not match the attacked architecture"
    );
    Ok(())
}

/// Multi-seed gradient matching shared by `dlg`, `ig` and `gradinv`.
fn gradient_matching_attack(
    update: &ClientUpdate,
    model: &Classifier,
    cfg: &AttackConfig,
    init: Option<Tensor>,
) -> Result<ReconstructionResult> {
    cfg.validate()?;
    require_gradient(update, model)?;
    let start = Instant::now();
    let n = update.meta.batch_size;
    let shape = batch_shape(model, n);
    let k = model.spec.num_classes;
    let labels = Labels::Fixed(infer_labels(update)?);
    let seeds = if cfg.method == AttackMethod::Gradinv { cfg.num_seeds } else { 1 };
    let mut dummies: Vec<Dummy> = (0..seeds).map(|s| Dummy::new(&shape, k, cfg.seed, s as u64)).collect();
    if let Some(x) = init {
        ensure!(x.shape() == shape.as_slice(), Shape, "initial dummy {:?} does not match batch {:?}", x.shape(), shape);
        for d in &mut dummies {
            d.images = x.clone();
        }
    }
    let distance = cfg.distance();
    let learn_labels = labels == Labels::Learned;
    let mut opt = Adam::new(cfg.opt_lr);
    let mut losses = vec![f64::INFINITY; seeds];
    let mut consensus_trace = Vec::new();
    let mut iterations_run = 0;
    for it in 0..=cfg.iterations {
        let tape = Tape::new();
        let params = update.pre_update_model.vars(&tape);
        let xs: Vec<Var<'_>> = dummies.iter().map(|d| tape.input(d.images.clone())).collect();
        let ls: Vec<Var<'_>> = dummies.iter().map(|d| tape.input(d.label_logits.clone())).collect();
        let mut total = None::<Var<'_>>;
        for s in 0..seeds {
            let loss = model_loss(model, &params, xs[s], &labels, ls[s], update.meta.reduction);
            let grads = tape.grad(loss, &params);
            let m = gradient_matching_loss_vars(&grads, &update.payload, distance)?;
            losses[s] = m.item();
            let mut obj = m;
            if cfg.tv_weight > 0.0 {
                obj = obj + xs[s].total_variation().scale(cfg.tv_weight);
            }
            total = Some(match total {
                None => obj,
                Some(t) => t + obj,
            });
        }
        let mut total = total.expect("at least one seed");
        if cfg.consensus_weight > 0.0 {
            let mean = xs.iter().copied().reduce(|a, b| a + b).expect("seeds").scale(1.0 / seeds as f64);
            let c = xs.iter().map(|&x| (x - mean).square().sum()).reduce(|a, b| a + b).expect("seeds");
            if it % 100 == 0 {
                consensus_trace.push(c.item());
            }
            total = total + c.scale(cfg.consensus_weight);
        }
        let best = losses.iter().copied().fold(f64::INFINITY, f64::min);
        if !best.is_finite() {
            return Err(Error::NonFinite(format!("{} matching loss at iteration {it}", cfg.method.name())));
        }
        if it == cfg.iterations || best <= cfg.stop_loss {
            break;
        }
        let mut wrt = xs.clone();
        if learn_labels {
            wrt.extend(&ls);
        }
        let g = tape.grad(total, &wrt);
        let mut state: Vec<Tensor> = dummies.iter().map(|d| d.images.clone()).collect();
        let mut grads: Vec<Tensor> = g[..seeds].iter().map(|v| (*v.value()).clone()).collect();
        if learn_labels {
            state.extend(dummies.iter().map(|d| d.label_logits.clone()));
            grads.extend(g[seeds..].iter().map(|v| (*v.value()).clone()));
        }
        opt.step(&mut state, &grads);
        let mut state = state.into_iter();
        for d in dummies.iter_mut() {
            d.images = state.next().expect("images").map(|v| v.clamp(0.0, 1.0));
        }
        if learn_labels {
            for d in dummies.iter_mut() {
                d.label_logits = state.next().expect("labels");
            }
        }
        iterations_run = it + 1;
    }
    let best = (0..seeds).min_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b))).expect("seeds");
    let mut meta = BTreeMap::new();
    meta.insert("distance".into(), json!(distance));
    meta.insert("tv_weight".into(), json!(cfg.tv_weight));
    meta.insert("label_mode".into(), json!(if learn_labels { "learned-soft" } else { "bias-counts" }));
    if cfg.method == AttackMethod::Gradinv {
        meta.insert("num_seeds".into(), json!(seeds));
        meta.insert("consensus_weight".into(), json!(cfg.consensus_weight));
        meta.insert("seed_losses".into(), json!(losses));
        meta.insert("selected_seed".into(), json!(best));
        meta.insert("consensus_trace".into(), json!(consensus_trace));
    }
    let labels_out = hardened(&labels, &dummies[best].label_logits);
    Ok(finish(&dummies[best].images, Some(labels_out), losses[best], iterations_run, start, cfg, meta))
}

/// Gradient matching from a random dummy: `l2` for `dlg`, cosine plus total
/// variation for `ig`.
pub fn attack_dlg(update: &ClientUpdate, model: &Classifier, cfg: &AttackConfig) -> Result<ReconstructionResult> {
    gradient_matching_attack(update, model, cfg, None)
}

/// As [`attack_dlg`] but starting from a given dummy batch.
pub fn attack_dlg_from(
    update: &ClientUpdate,
    model: &Classifier,
    cfg: &AttackConfig,
    init: Tensor,
) -> Result<ReconstructionResult> {
    gradient_matching_attack(update, model, cfg, Some(init))
}

/// Several dummy batches optimized jointly with an `l2` matching loss and a
/// pull toward their mean; the seed with the lowest matching loss wins.
pub fn attack_gradinversion(update: &ClientUpdate, model: &Classifier, cfg: &AttackConfig) -> Result<ReconstructionResult> {
    ensure!(cfg.method == AttackMethod::Gradinv, Config, "attack_gradinversion needs method gradinv");
    gradient_matching_attack(update, model, cfg, None)
}

fn fedavg_target(update: &ClientUpdate, model: &Classifier) -> Result<(ParameterVector, ParameterVector, UpdateMeta)> {
    ensure!(update.kind == UpdateKind::WeightDelta, Precondition, "this attack needs a FedAvg weight-delta update");
    update.validate()?;
    ensure!(
        update.pre_update_model.layout.as_ref() == &model.spec.layout(),
        Layout,
        "update does not match the attacked architecture"
    );
    Ok((update.pre_update_model.clone(), update.post_update_model(), update.meta.clone()))
}

/// Surrogate-model matching on a FedAvg update.
///
/// The dummy gradient is taken at `alpha * pre + (1 - alpha) * post` with one
/// learnable `alpha` per layer, kept in `[0, 1]`, and cosine-matched to the
/// average step direction `(pre - post) / (local_steps * lr)`.
pub fn attack_sme(update: &ClientUpdate, model: &Classifier, cfg: &AttackConfig) -> Result<ReconstructionResult> {
    cfg.validate()?;
    let (pre, post, meta) = fedavg_target(update, model)?;
    ensure!(meta.local_steps >= 1 && meta.local_lr > 0.0, Precondition, "SME needs positive local steps and lr");
    let start = Instant::now();
    let n = meta.num_samples;
    let shape = batch_shape(model, n);
    let k = model.spec.num_classes;
    let target = pre.sub(&post).scale(1.0 / (meta.local_steps as f64 * meta.local_lr));
    let labels = Labels::Fixed(labels_from_bias(&target, n, 1.0 / meta.reduction.factor(n))?);
    let learn_labels = labels == Labels::Learned;
    let mut d = Dummy::new(&shape, k, cfg.seed, 0);
    let layers = pre.layout.entries.len();
    let mut alphas: Vec<Tensor> = vec![Tensor::scalar(0.5); layers];
    let pre_t = pre.to_tensors();
    let post_t = post.to_tensors();
    let diff_t: Vec<Tensor> = pre_t.iter().zip(&post_t).map(|(a, b)| a.zip(b, |x, y| x - y)).collect();
    let mut opt = Adam::new(cfg.opt_lr);
    let mut loss_value = f64::INFINITY;
    let mut iterations_run = 0;
    for it in 0..=cfg.iterations {
        let tape = Tape::new();
        let x = tape.input(d.images.clone());
        let l = tape.input(d.label_logits.clone());
        let a: Vec<Var<'_>> = alphas.iter().map(|t| tape.input(t.clone())).collect();
        let params: Vec<Var<'_>> = (0..layers)
            .map(|i| tape.input(post_t[i].clone()) + tape.input(diff_t[i].clone()).mul_scalar_var(a[i]))
            .collect();
        let loss = model_loss(model, &params, x, &labels, l, meta.reduction);
        let grads = tape.grad(loss, &params);
        let m = gradient_matching_loss_vars(&grads, &target, Distance::Cosine)?;
        loss_value = m.item();
        let mut obj = m;
        if cfg.tv_weight > 0.0 {
            obj = obj + x.total_variation().scale(cfg.tv_weight);
        }
        if !loss_value.is_finite() {
            return Err(Error::NonFinite(format!("sme matching loss at iteration {it}")));
        }
        if it == cfg.iterations || loss_value <= cfg.stop_loss {
            break;
        }
        let mut wrt = vec![x];
        wrt.extend(&a);
        if learn_labels {
            wrt.push(l);
        }
        let g: Vec<Tensor> = tape.grad(obj, &wrt).iter().map(|v| (*v.value()).clone()).collect();
        let mut state = vec![d.images.clone()];
        state.extend(alphas.iter().cloned());
        if learn_labels {
            state.push(d.label_logits.clone());
        }
        opt.step(&mut state, &g);
        let mut state = state.into_iter();
        d.images = state.next().expect("images").map(|v| v.clamp(0.0, 1.0));
        for a in alphas.iter_mut() {
            *a = state.next().expect("alpha").map(|v| v.clamp(0.0, 1.0));
        }
        if learn_labels {
            d.label_logits = state.next().expect("labels");
        }
        iterations_run = it + 1;
    }
    let mut md = BTreeMap::new();
    md.insert("distance".into(), json!(Distance::Cosine));
    md.insert("alphas".into(), json!(alphas.iter().map(|a| a.item()).collect::<Vec<_>>()));
    md.insert("label_mode".into(), json!(if learn_labels { "learned-soft" } else { "bias-counts" }));
    let labels_out = hardened(&labels, &d.label_logits);
    Ok(finish(&d.images, Some(labels_out), loss_value, iterations_run, start, cfg, md))
}

/// Batch orderings simulated by `dlf`: identity first, then distinct seeded
/// permutations of the step order until `count` or all orderings are used.
pub fn dlf_orderings(steps: usize, count: usize, seed: u64) -> Vec<Vec<usize>> {
    let total: usize = (1..=steps).try_fold(1usize, |acc, k| acc.checked_mul(k)).unwrap_or(usize::MAX);
    let want = count.min(total);
    let mut out = vec![(0..steps).collect::<Vec<_>>()];
    let mut r = rng::stage_rng(seed, "dlf-order", 0);
    let mut attempts = 0;
    while out.len() < want && attempts < 1000 {
        let p = rng::permutation(steps, &mut r);
        if !out.contains(&p) {
            out.push(p);
        }
        attempts += 1;
    }
    out
}

/// Dummy-index batches for each local step, in unpermuted order.
pub fn dlf_step_batches(meta: &UpdateMeta) -> Vec<Vec<usize>> {
    let n = meta.num_samples;
    if meta.batch_size >= n {
        return vec![(0..n).collect(); meta.local_steps];
    }
    (0..meta.local_steps)
        .map(|s| (0..meta.batch_size).map(|j| (s * meta.batch_size + j) % n).collect())
        .collect()
}

/// Simulated local training loss: squared distance between the endpoint of
/// SGD on the dummies and `post`, averaged over batch orderings.
pub fn dlf_loss<'t>(
    model: &Classifier,
    pre: &ParameterVector,
    post: &ParameterVector,
    meta: &UpdateMeta,
    x: Var<'t>,
    labels: &[Var<'t>],
    orderings: &[Vec<usize>],
) -> Var<'t> {
    let tape = x.tape();
    let steps = dlf_step_batches(meta);
    let goal = post.vars(tape);
    let mut total = None::<Var<'t>>;
    for order in orderings {
        let mut w = pre.vars(tape);
        for &s in order {
            let b = &steps[s];
            let xb = if b.len() == meta.num_samples { x } else { x.select_rows(b) };
            let lb = if b.len() == meta.num_samples { labels[0] } else { labels[0].select_rows(b) };
            let out = model.forward(&w, xb).logits;
            let mut loss = soft_cross_entropy(out, lb);
            if meta.reduction == Reduction::Sum {
                loss = loss.scale(b.len() as f64);
            }
            let g = tape.grad(loss, &w);
            w = w.iter().zip(&g).map(|(&p, &gi)| p - gi.scale(meta.local_lr)).collect();
        }
        let d = w.iter().zip(&goal).map(|(&a, &b)| (a - b).square().sum()).reduce(|a, b| a + b).expect("layers");
        total = Some(match total {
            None => d,
            Some(t) => t + d,
        });
    }
    total.expect("at least one ordering").scale(1.0 / orderings.len() as f64)
}

/// Simulates the client's local SGD on a dummy set and matches the endpoint
/// to the post-update model. The matching loss is averaged over several
/// orderings of the local batches.
pub fn attack_dlf(update: &ClientUpdate, model: &Classifier, cfg: &AttackConfig) -> Result<ReconstructionResult> {
    cfg.validate()?;
    let (pre, post, meta) = fedavg_target(update, model)?;
    let n = meta.num_samples;
    let simulated = meta.local_steps * meta.batch_size;
    ensure!(
        simulated <= cfg.dlf_budget,
        Precondition,
        "dlf would simulate {simulated} dummy samples, above the budget of {}",
        cfg.dlf_budget
    );
    let start = Instant::now();
    let shape = batch_shape(model, n);
    let k = model.spec.num_classes;
    let mut md = BTreeMap::new();
    if meta.local_lr == 0.0 {
        log::warn!("dlf on a zero learning rate update: the simulation ignores the dummies");
        md.insert("degenerate".into(), json!("zero local learning rate"));
    }
    let orderings = dlf_orderings(meta.local_steps, cfg.orderings, cfg.seed);
    let mut d = Dummy::new(&shape, k, cfg.seed, 0);
    let mut opt = Adam::new(cfg.opt_lr);
    let mut loss_value = f64::INFINITY;
    let mut iterations_run = 0;
    for it in 0..=cfg.iterations {
        let tape = Tape::new();
        let x = tape.input(d.images.clone());
        let l = tape.input(d.label_logits.clone());
        let m = dlf_loss(model, &pre, &post, &meta, x, &[l.softmax()], &orderings);
        loss_value = m.item();
        if !loss_value.is_finite() {
            return Err(Error::NonFinite(format!("dlf matching loss at iteration {it}")));
        }
        if it == cfg.iterations || loss_value <= cfg.stop_loss {
            break;
        }
        let mut obj = m;
        if cfg.tv_weight > 0.0 {
            obj = obj + x.total_variation().scale(cfg.tv_weight);
        }
        let g: Vec<Tensor> = tape.grad(obj, &[x, l]).iter().map(|v| (*v.value()).clone()).collect();
        let mut state = vec![d.images.clone(), d.label_logits.clone()];
        opt.step(&mut state, &g);
        d.label_logits = state.pop().expect("labels");
        d.images = state.pop().expect("images").map(|v| v.clamp(0.0, 1.0));
        iterations_run = it + 1;
    }
    md.insert("orderings".into(), json!(orderings));
    md.insert("prior".into(), json!("matching loss averaged over batch orderings"));
    md.insert("label_mode".into(), json!("learned-soft"));
    let labels_out = hardened(&Labels::Learned, &d.label_logits);
    Ok(finish(&d.images, Some(labels_out), loss_value, iterations_run, start, cfg, md))
}

/// Dispatches on `cfg.method`.
pub fn run_attack(update: &ClientUpdate, model: &Classifier, cfg: &AttackConfig) -> Result<ReconstructionResult> {
    match cfg.method {
        AttackMethod::Dlg | AttackMethod::Ig => attack_dlg(update, model, cfg),
        AttackMethod::Gradinv => attack_gradinversion(update, model, cfg),
        AttackMethod::Sme => attack_sme(update, model, cfg),
        AttackMethod::Dlf => attack_dlf(update, model, cfg),
    }
}
