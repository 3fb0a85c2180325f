//! Spoofed-dataset distillation: blacklist-constrained spoof labels, latent
//! conditioned generation, and trajectory matching over the generator's
//! latent inputs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{Blacklist, LabeledDataset};
use crate::error::{ensure, Error, Result};
use crate::models::{
    cross_entropy, generate_batch, generator_forward, one_hot, softmax_confidences, train_classifier, Classifier,
    ConditionalGenerator, ParameterVector, TrainConfig, Trajectory,
};
use crate::optim::Adam;
use crate::rng;
use crate::tensor::Tensor;

/// Highest-probability class per row outside `blacklist`; ties go to the
/// lowest class id.
pub fn masked_argmax(probs: &Tensor, excluded: &dyn Fn(usize) -> bool) -> Result<Vec<usize>> {
    let (n, c) = (probs.shape()[0], probs.shape()[1]);
    ensure!((0..c).any(|k| !excluded(k)), Precondition, "every spoof class is excluded");
    Ok((0..n)
        .map(|i| {
            let row = &probs.data()[i * c..(i + 1) * c];
            let mut best = None::<usize>;
            for k in (0..c).filter(|&k| !excluded(k)) {
                if best.is_none_or(|b| row[k] > row[b]) {
                    best = Some(k);
                }
            }
            best.expect("at least one allowed class")
        })
        .collect())
}

/// Spoof class for every image: the non-blacklisted class to which the
/// spoof-domain classifier assigns the highest confidence.
pub fn assign_spoof_labels(images: &Tensor, spoof_classifier: &Classifier, blacklist: &Blacklist) -> Result<Vec<usize>> {
    let c = spoof_classifier.spec.num_classes;
    if let Some(&bad) = blacklist.excluded_class_ids.iter().find(|&&k| k >= c) {
        return Err(Error::Precondition(format!("blacklisted class {bad} outside the {c} spoof classes")));
    }
    let probs = softmax_confidences(spoof_classifier, images)?;
    masked_argmax(&probs, &|k| blacklist.contains(k))
}

/// One spoof class per private class. Private classes claim classes in id
/// order: each takes the allowed, unclaimed spoof class with the highest
/// mean confidence over its representatives. Returns private → spoof.
pub fn claim_spoof_classes(
    images: &Tensor,
    private_labels: &[usize],
    spoof_classifier: &Classifier,
    blacklist: &Blacklist,
) -> Result<BTreeMap<usize, usize>> {
    let c = spoof_classifier.spec.num_classes;
    let probs = softmax_confidences(spoof_classifier, images)?;
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in private_labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let allowed = (0..c).filter(|&k| !blacklist.contains(k)).count();
    ensure!(
        allowed >= by_class.len(),
        Precondition,
        "{} private classes but only {allowed} non-blacklisted spoof classes",
        by_class.len()
    );
    let mut claimed: BTreeMap<usize, usize> = BTreeMap::new();
    let mut taken = std::collections::BTreeSet::new();
    for (&private, members) in &by_class {
        let mut mean = vec![0.0; c];
        for &i in members {
            for (m, p) in mean.iter_mut().zip(&probs.data()[i * c..(i + 1) * c]) {
                *m += p / members.len() as f64;
            }
        }
        let row = Tensor::new(vec![1, c], mean);
        let pick = masked_argmax(&row, &|k| blacklist.contains(k) || taken.contains(&k))?[0];
        taken.insert(pick);
        claimed.insert(private, pick);
    }
    Ok(claimed)
}

/// Learnable latents with their frozen spoof labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentBatch {
    /// `[N, latent_dim]`, row-major.
    pub latents: Vec<f64>,
    pub latent_dim: usize,
    pub spoof_labels: Vec<usize>,
    /// Spoof class id → private label used when training on the image.
    pub train_label_map: BTreeMap<usize, usize>,
}

impl LatentBatch {
    pub fn len(&self) -> usize {
        self.spoof_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spoof_labels.is_empty()
    }

    pub fn latent_tensor(&self) -> Tensor {
        Tensor::new(vec![self.len(), self.latent_dim], self.latents.clone())
    }

    pub fn training_labels(&self) -> Vec<usize> {
        self.spoof_labels.iter().map(|s| self.train_label_map[s]).collect()
    }

    pub fn validate(&self, blacklist: &Blacklist) -> Result<()> {
        ensure!(self.latents.len() == self.len() * self.latent_dim, Shape, "latent matrix size mismatch");
        if let Some(&bad) = self.spoof_labels.iter().find(|&&s| blacklist.contains(s)) {
            return Err(Error::Precondition(format!("spoof label {bad} is blacklisted")));
        }
        let mut seen = BTreeMap::new();
        for s in &self.spoof_labels {
            let t = self
                .train_label_map
                .get(s)
                .ok_or_else(|| Error::Precondition(format!("spoof label {s} has no training label")))?;
            if let Some(prev) = seen.insert(*t, *s) {
                ensure!(prev == *s, Precondition, "spoof classes {prev} and {s} share training label {t}");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub budget: usize,
    pub outer_iterations: usize,
    pub outer_lr: f64,
    /// Student SGD steps per segment (offset `n`).
    pub inner_steps: usize,
    /// Real-trajectory checkpoints between segment start and target (offset `m`).
    pub real_offset: usize,
    pub inner_lr: f64,
    /// Generated images per student step; 0 means the whole set.
    #[serde(default)]
    pub inner_batch: usize,
    pub segments_per_iteration: usize,
    #[serde(default)]
    pub normalize_loss: bool,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            budget: 100,
            outer_iterations: 200,
            outer_lr: 0.1,
            inner_steps: 10,
            real_offset: 1,
            inner_lr: 0.01,
            inner_batch: 0,
            segments_per_iteration: 1,
            normalize_loss: false,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.budget >= 1, Config, "budget must be at least 1");
        ensure!(self.inner_steps >= 1, Config, "inner_steps must be at least 1");
        ensure!(self.real_offset >= 1, Config, "real_offset must be at least 1");
        ensure!(self.segments_per_iteration >= 1, Config, "segments_per_iteration must be at least 1");
        ensure!(self.outer_lr > 0.0 && self.inner_lr >= 0.0, Config, "learning rates must be positive");
        Ok(())
    }

    pub fn digest(&self) -> String {
        rng::digest_bytes(&serde_json::to_vec(self).unwrap_or_default())
    }
}

/// Trains a fresh classifier on the private data and keeps its checkpoints.
pub fn record_real_trajectory(init: &Classifier, private: &LabeledDataset, cfg: &TrainConfig) -> Result<Trajectory> {
    Ok(train_classifier(init, private, cfg)?.trajectory)
}

/// Student batches for one segment, a pure function of the segment seed.
fn student_batches(n: usize, cfg: &DistillConfig, seed: u64) -> Vec<Vec<usize>> {
    if cfg.inner_batch == 0 || cfg.inner_batch >= n {
        return vec![(0..n).collect(); cfg.inner_steps];
    }
    crate::flsim::local_batches(n, cfg.inner_steps, cfg.inner_batch, seed)
}

/// Everything the trajectory loss needs besides the latents.
pub struct TrajectoryProblem<'a> {
    pub generator: &'a ConditionalGenerator,
    /// Architecture and normalization of the student; parameters unused.
    pub student: &'a Classifier,
    pub real: &'a Trajectory,
    pub spoof_labels: &'a [usize],
    pub training_labels: &'a [usize],
    pub cfg: &'a DistillConfig,
}

impl TrajectoryProblem<'_> {
    /// Loss of one segment starting at checkpoint `t`, recorded on `z`'s tape.
    ///
    /// The student starts at `real[t]`, takes `inner_steps` SGD steps on the
    /// generated images, and is compared with `real[t + real_offset]` by
    /// squared L2 distance (optionally divided by the real segment's
    /// squared length).
    pub fn segment_loss<'t>(&self, z: Var<'t>, t: usize, batch_seed: u64) -> Result<Var<'t>> {
        let cfg = self.cfg;
        let target = t + cfg.real_offset;
        ensure!(
            target < self.real.len(),
            Precondition,
            "segment {t}+{} outside a trajectory of {} checkpoints",
            cfg.real_offset,
            self.real.len()
        );
        let tape = z.tape();
        let n = self.spoof_labels.len();
        let labels = tape.input(one_hot(self.spoof_labels, self.generator.num_classes));
        let gp = self.generator.params.vars(tape);
        let images = generator_forward(self.generator, &gp, z, labels);
        let mut params: Vec<Var<'t>> = self.real.checkpoints[t].vars(tape);
        for batch in student_batches(n, cfg, batch_seed) {
            let x = if batch.len() == n { images } else { images.select_rows(&batch) };
            let y: Vec<usize> = batch.iter().map(|&i| self.training_labels[i]).collect();
            let loss = cross_entropy(self.student.forward(&params, x).logits, &y);
            let grads = tape.grad(loss, &params);
            params = params.iter().zip(&grads).map(|(&p, &g)| p - g.scale(cfg.inner_lr)).collect();
        }
        let goal = self.real.checkpoints[target].vars(tape);
        let mut dist = None;
        for (p, g) in params.iter().zip(&goal) {
            let d = (*p - *g).square().sum();
            dist = Some(match dist {
                None => d,
                Some(acc) => acc + d,
            });
        }
        let mut loss = dist.expect("non-empty layout");
        if cfg.normalize_loss {
            let span = self.real.checkpoints[t].sub(&self.real.checkpoints[target]);
            let denom = span.dot(&span);
            ensure!(denom > 0.0, Precondition, "normalized loss over a zero-length real segment");
            loss = loss.scale(1.0 / denom);
        }
        Ok(loss)
    }

    /// Mean segment loss over the sampled segment starts.
    pub fn loss<'t>(&self, z: Var<'t>, starts: &[usize], seed: u64) -> Result<Var<'t>> {
        let mut total = None;
        for (k, &t) in starts.iter().enumerate() {
            let l = self.segment_loss(z, t, rng::derive_seed(seed, "student-batches", k as u64))?;
            total = Some(match total {
                None => l,
                Some(acc) => acc + l,
            });
        }
        let total = total.ok_or_else(|| Error::Precondition("no segments".into()))?;
        Ok(total.scale(1.0 / starts.len() as f64))
    }

    /// Value and latent gradient at `latents`.
    pub fn value_and_grad(&self, latents: &Tensor, starts: &[usize], seed: u64) -> Result<(f64, Tensor)> {
        let tape = Tape::new();
        let z = tape.input(latents.clone());
        let loss = self.loss(z, starts, seed)?;
        let g = tape.grad(loss, &[z]).remove(0);
        Ok((loss.item(), (*g.value()).clone()))
    }

    fn sample_starts(&self, iteration: usize) -> Vec<usize> {
        let span = self.real.len() - self.cfg.real_offset;
        let mut r = rng::stage_rng(self.cfg.seed, "segment-start", iteration as u64);
        (0..self.cfg.segments_per_iteration).map(|_| rand::Rng::random_range(&mut r, 0..span)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizeOutcome {
    pub latents: LatentBatch,
    /// Loss before each outer step.
    pub loss_curve: Vec<f64>,
    /// Set when a non-finite loss stopped the run; `latents` then holds the
    /// last finite iterate.
    pub diverged_at: Option<usize>,
}

/// AdamW over the latents (spoof labels fixed).
pub fn optimize_latents(init: &LatentBatch, problem: &TrajectoryProblem<'_>) -> Result<OptimizeOutcome> {
    let cfg = problem.cfg;
    cfg.validate()?;
    ensure!(
        problem.real.len() > cfg.real_offset,
        Precondition,
        "trajectory of {} checkpoints is too short for offset {}",
        problem.real.len(),
        cfg.real_offset
    );
    let mut z = vec![init.latent_tensor()];
    let mut opt = Adam::adamw(cfg.outer_lr);
    let mut curve = Vec::with_capacity(cfg.outer_iterations);
    let mut diverged_at = None;
    for it in 0..cfg.outer_iterations {
        let starts = problem.sample_starts(it);
        let (loss, grad) = problem.value_and_grad(&z[0], &starts, rng::derive_seed(cfg.seed, "outer", it as u64))?;
        if !loss.is_finite() || grad.data().iter().any(|g| !g.is_finite()) {
            log::error!("trajectory loss became non-finite at iteration {it}; keeping the last finite latents");
            diverged_at = Some(it);
            break;
        }
        curve.push(loss);
        log::debug!("distill iteration {it}: loss {loss:.6}");
        opt.step(&mut z, &[grad]);
    }
    let latents = LatentBatch { latents: z.remove(0).into_data(), ..init.clone() };
    Ok(OptimizeOutcome { latents, loss_curve: curve, diverged_at })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator_digest: String,
    pub latents: LatentBatch,
    pub distill_config_digest: String,
    pub trajectory_digest: String,
    pub architecture: String,
    pub blacklist: Vec<usize>,
    pub loss_curve: Vec<f64>,
}

/// Generated training set that substitutes a client's private data.
#[derive(Clone, Debug, PartialEq)]
pub struct SpoofDataset {
    /// `[N, C, H, W]` in `[0, 1]`.
    pub images: Tensor,
    pub training_labels: Vec<usize>,
    pub spoof_labels: Vec<usize>,
    pub private_class_names: Vec<String>,
    pub spoof_class_names: Vec<String>,
    pub provenance: Provenance,
}

impl SpoofDataset {
    pub fn len(&self) -> usize {
        self.training_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.training_labels.is_empty()
    }

    /// The images with their private-space training labels.
    pub fn as_labeled(&self) -> Result<LabeledDataset> {
        LabeledDataset::new("spoofl", self.images.clone(), self.training_labels.clone(), self.private_class_names.clone())
    }

    /// Regenerates the images from the provenance latents.
    pub fn regenerate(&self, generator: &ConditionalGenerator) -> Result<Tensor> {
        ensure!(
            generator.digest() == self.provenance.generator_digest,
            Precondition,
            "generator does not match the spoof set's provenance"
        );
        generate_batch(generator, &self.provenance.latents.latent_tensor(), &self.provenance.latents.spoof_labels)
    }

    /// Warns when the set is reused for a different architecture than the one
    /// it was distilled against.
    pub fn check_architecture(&self, architecture: &str) {
        if self.provenance.architecture != architecture {
            log::warn!(
                "spoof set was distilled for {} but is used with {architecture}",
                self.provenance.architecture
            );
        }
    }
}

/// Spoof labels observed during a distillation run, for auditing.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelAudit {
    /// Per-representative masked-argmax assignments before class claiming.
    pub per_sample: Vec<usize>,
    /// Private class → claimed spoof class.
    pub claimed: BTreeMap<usize, usize>,
    /// Labels of the final latent batch.
    pub final_labels: Vec<usize>,
}

impl LabelAudit {
    pub fn all(&self) -> impl Iterator<Item = usize> + '_ {
        self.per_sample.iter().chain(self.claimed.values()).chain(&self.final_labels).copied()
    }
}

pub struct DistillOutcome {
    pub dataset: SpoofDataset,
    pub audit: LabelAudit,
    pub diverged_at: Option<usize>,
}

/// Full pipeline: stratified representatives of the private set, spoof
/// class claiming, latent initialization, trajectory matching, generation.
pub fn distill_dataset(
    private: &LabeledDataset,
    generator: &ConditionalGenerator,
    spoof_classifier: &Classifier,
    blacklist: &Blacklist,
    student: &Classifier,
    real: &Trajectory,
    cfg: &DistillConfig,
) -> Result<DistillOutcome> {
    cfg.validate()?;
    ensure!(cfg.budget <= private.len(), Precondition, "budget {} exceeds the private set size {}", cfg.budget, private.len());
    ensure!(
        spoof_classifier.spec.num_classes == generator.num_classes,
        Precondition,
        "spoof classifier and generator disagree on the spoof class count"
    );
    ensure!(
        student.spec.num_classes == private.num_classes,
        Precondition,
        "student head does not match the private task"
    );
    ensure!(
        generator.output_shape == private.image_shape(),
        Precondition,
        "generator output {:?} differs from private images {:?}",
        generator.output_shape,
        private.image_shape()
    );
    let reps = private.stratified_indices(cfg.budget);
    let rep_images = private.images.select_rows(&reps);
    let rep_labels: Vec<usize> = reps.iter().map(|&i| private.labels[i]).collect();
    let per_sample = assign_spoof_labels(&rep_images, spoof_classifier, blacklist)?;
    let claimed = claim_spoof_classes(&rep_images, &rep_labels, spoof_classifier, blacklist)?;
    let spoof_labels: Vec<usize> = rep_labels.iter().map(|y| claimed[y]).collect();
    let train_label_map: BTreeMap<usize, usize> = claimed.iter().map(|(&p, &s)| (s, p)).collect();
    let mut r = rng::stage_rng(cfg.seed, "latent-init", 0);
    let init = LatentBatch {
        latents: rng::normal_vec(cfg.budget * generator.latent_dim, 0.0, 1.0, &mut r),
        latent_dim: generator.latent_dim,
        spoof_labels,
        train_label_map,
    };
    init.validate(blacklist)?;
    let training_labels = init.training_labels();
    let problem = TrajectoryProblem {
        generator,
        student,
        real,
        spoof_labels: &init.spoof_labels,
        training_labels: &training_labels,
        cfg,
    };
    let out = optimize_latents(&init, &problem)?;
    out.latents.validate(blacklist)?;
    let images = generate_batch(generator, &out.latents.latent_tensor(), &out.latents.spoof_labels)?;
    let audit = LabelAudit { per_sample, claimed, final_labels: out.latents.spoof_labels.clone() };
    let dataset = SpoofDataset {
        images,
        training_labels,
        spoof_labels: out.latents.spoof_labels.clone(),
        private_class_names: private.class_names.clone(),
        spoof_class_names: generator.class_names.clone(),
        provenance: Provenance {
            generator_digest: generator.digest(),
            latents: out.latents,
            distill_config_digest: cfg.digest(),
            trajectory_digest: real.digest(),
            architecture: student.spec.architecture.name().to_string(),
            blacklist: blacklist.excluded_class_ids.iter().copied().collect(),
            loss_curve: out.loss_curve,
        },
    };
    Ok(DistillOutcome { dataset, audit, diverged_at: out.diverged_at })
}

/// Difference between two parameter vectors as a flat L2 distance.
pub fn parameter_distance(a: &ParameterVector, b: &ParameterVector) -> f64 {
    a.sub(b).norm()
}

/// Small generator/student pair used for gradient and recovery checks.
pub mod fixtures {
    use super::*;
    use crate::models::{build_classifier, Architecture, ClassifierSpec, TrainingRecord};

    /// Latent dim 2, two spoof classes, 4x4 grayscale output; mlp2 student
    /// with two classes.
    pub fn toy_problem() -> (ConditionalGenerator, Classifier) {
        let g = ConditionalGenerator::new(2, vec!["a".into(), "b".into()], [1, 4, 4], 5).unwrap();
        let s = build_classifier(&ClassifierSpec::new(Architecture::Mlp2, [1, 4, 4], 2), 6).unwrap();
        (g, s)
    }

    /// Wraps checkpoints as a trajectory with a placeholder training record.
    pub fn fake_trajectory(points: Vec<ParameterVector>) -> Trajectory {
        Trajectory {
            checkpoints: points,
            epochs_per_checkpoint: 1,
            training_config: TrainingRecord {
                dataset_id: "toy".into(),
                loss: "cross-entropy".into(),
                optimizer: "sgd".into(),
                lr: 0.1,
                batch_size: 3,
                epochs: 1,
                seed: 0,
            },
        }
    }

    pub struct Planted {
        pub generator: ConditionalGenerator,
        pub student: Classifier,
        pub real: Trajectory,
        pub z_star: Tensor,
        pub spoof_labels: Vec<usize>,
        pub training_labels: Vec<usize>,
        pub cfg: DistillConfig,
    }

    impl Planted {
        pub fn problem(&self) -> TrajectoryProblem<'_> {
            TrajectoryProblem {
                generator: &self.generator,
                student: &self.student,
                real: &self.real,
                spoof_labels: &self.spoof_labels,
                training_labels: &self.training_labels,
                cfg: &self.cfg,
            }
        }

        pub fn init_near_optimum(&self, std: f64, seed: u64) -> LatentBatch {
            let noise = rng::normal_vec(self.z_star.len(), 0.0, std, &mut rng::rng(seed));
            LatentBatch {
                latents: self.z_star.data().iter().zip(&noise).map(|(a, b)| a + b).collect(),
                latent_dim: self.generator.latent_dim,
                spoof_labels: self.spoof_labels.clone(),
                train_label_map: BTreeMap::from([(0, 1), (1, 0)]),
            }
        }
    }

    /// Real trajectory recorded by training the student on `G(z*)` with the
    /// inner protocol, so the loss is exactly zero at `z*`.
    pub fn planted_fixture() -> Planted {
        let (g, s) = toy_problem();
        let cfg = DistillConfig { inner_steps: 3, inner_lr: 0.5, outer_iterations: 200, ..DistillConfig::default() };
        let z_star = Tensor::new(vec![4, 2], rng::normal_vec(8, 0.0, 1.0, &mut rng::rng(21)));
        let spoof = vec![0, 1, 0, 1];
        let train = vec![1, 0, 1, 0];
        let images = generate_batch(&g, &z_star, &spoof).unwrap();
        let mut m = s.clone();
        let mut points = vec![m.params.clone()];
        for _ in 0..2 {
            for _ in 0..cfg.inner_steps {
                let (_, grad) = m.loss_gradient(&images, &train).unwrap();
                crate::models::sgd_step(&mut m.params, &grad, cfg.inner_lr);
            }
            points.push(m.params.clone());
        }
        Planted { generator: g, student: s, real: fake_trajectory(points), z_star, spoof_labels: spoof, training_labels: train, cfg }
    }

}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn masked_argmax_cases() {
        let probs = Tensor::new(
            vec![4, 5],
            vec![
                0.5, 0.2, 0.1, 0.1, 0.1, //
                0.1, 0.1, 0.6, 0.1, 0.1, //
                0.2, 0.2, 0.2, 0.2, 0.2, //
                0.0, 0.3, 0.0, 0.3, 0.4,
            ],
        );
        let bl = |k: usize| k == 0 || k == 2;
        // brute force over allowed classes {1,3,4}
        let want: Vec<usize> = (0..4)
            .map(|i| {
                let row = &probs.data()[i * 5..i * 5 + 5];
                let mut best = 1;
                for k in [3, 4] {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect();
        assert_eq!(masked_argmax(&probs, &bl).unwrap(), want);
        assert_eq!(masked_argmax(&probs, &|_| false).unwrap(), vec![0, 2, 0, 4]);
        assert_eq!(masked_argmax(&probs, &|k| k != 3).unwrap(), vec![3; 4]);
        assert!(masked_argmax(&probs, &|_| true).is_err());
    }

    #[test]
    fn loss_is_squared_distance_of_endpoint() {
        let (g, s) = toy_problem();
        let cfg = DistillConfig { inner_steps: 2, inner_lr: 0.3, ..DistillConfig::default() };
        let z = Tensor::new(vec![3, 2], vec![0.1, -0.4, 1.2, 0.3, -0.8, 0.5]);
        let spoof = [0, 1, 1];
        let train = [1, 0, 0];
        // Replay: the target is the student's own endpoint, so the loss is 0.
        let mut student = s.clone();
        let images = generate_batch(&g, &z, &spoof).unwrap();
        for _ in 0..2 {
            let (_, grad) = student.loss_gradient(&images, &train).unwrap();
            crate::models::sgd_step(&mut student.params, &grad, 0.3);
        }
        let traj = fake_trajectory(vec![s.params.clone(), student.params.clone()]);
        let p = TrajectoryProblem { generator: &g, student: &s, real: &traj, spoof_labels: &spoof, training_labels: &train, cfg: &cfg };
        let (l0, _) = p.value_and_grad(&z, &[0], 0).unwrap();
        assert!(l0 < 1e-20, "{l0}");
        // Shift every target coordinate by delta: loss = d * delta^2.
        let delta = 0.01;
        let shifted = fake_trajectory(vec![s.params.clone(), student.params.map(|v| v + delta)]);
        let p = TrajectoryProblem { real: &shifted, ..p };
        let (l, _) = p.value_and_grad(&z, &[0], 0).unwrap();
        let d = s.params.len() as f64;
        assert!((l - d * delta * delta).abs() < 1e-9 * d, "{l}");
        assert!(p.value_and_grad(&z, &[1], 0).is_err());
    }

    #[test]
    fn trajectory_loss_gradient_matches_finite_differences() {
        let (g, s) = toy_problem();
        let cfg = DistillConfig { inner_steps: 3, inner_lr: 0.5, ..DistillConfig::default() };
        let spoof = [0, 1, 0];
        let train = [0, 1, 1];
        let target = s.params.map(|v| v * 0.9 + 0.01);
        let traj = fake_trajectory(vec![s.params.clone(), target]);
        let p = TrajectoryProblem { generator: &g, student: &s, real: &traj, spoof_labels: &spoof, training_labels: &train, cfg: &cfg };
        let z = Tensor::new(vec![3, 2], vec![0.3, -0.2, 0.7, 1.1, -0.5, 0.05]);
        let (_, grad) = p.value_and_grad(&z, &[0], 0).unwrap();
        let mut r = rng::rng(8);
        for _ in 0..5 {
            let dir = Tensor::new(vec![3, 2], rng::normal_vec(6, 0.0, 1.0, &mut r));
            let h = 1e-5;
            let f = |sgn: f64| p.value_and_grad(&z.zip(&dir, |a, b| a + sgn * h * b), &[0], 0).unwrap().0;
            let fd = (f(1.0) - f(-1.0)) / (2.0 * h);
            let an: f64 = grad.data().iter().zip(dir.data()).map(|(a, b)| a * b).sum();
            assert!((fd - an).abs() / fd.abs().max(1e-12) < 1e-3, "fd {fd} analytic {an}");
        }
    }

    #[test]
    fn zero_iterations_keep_latents() {
        let (g, s) = toy_problem();
        let cfg = DistillConfig { outer_iterations: 0, ..DistillConfig::default() };
        let traj = fake_trajectory(vec![s.params.clone(), s.params.clone()]);
        let init = LatentBatch {
            latents: vec![0.5, -0.5],
            latent_dim: 2,
            spoof_labels: vec![1],
            train_label_map: BTreeMap::from([(1, 0)]),
        };
        let train = init.training_labels();
        let p = TrajectoryProblem { generator: &g, student: &s, real: &traj, spoof_labels: &init.spoof_labels, training_labels: &train, cfg: &cfg };
        let out = optimize_latents(&init, &p).unwrap();
        assert_eq!(out.latents, init);
        assert!(out.loss_curve.is_empty());
    }

    #[test]
    fn latent_batch_validation() {
        let mut b = LatentBatch {
            latents: vec![0.0; 4],
            latent_dim: 2,
            spoof_labels: vec![1, 2],
            train_label_map: BTreeMap::from([(1, 0), (2, 0)]),
        };
        assert!(b.validate(&Blacklist::default()).is_err());
        b.train_label_map.insert(2, 1);
        assert!(b.validate(&Blacklist::default()).is_ok());
        let bl = Blacklist { excluded_class_ids: [2].into(), ..Blacklist::default() };
        assert!(b.validate(&bl).is_err());
    }

    #[test]
    fn planted_latents_are_recovered() {
        let f = planted_fixture();
        let p = f.problem();
        assert!(p.value_and_grad(&f.z_star, &[0], 0).unwrap().0 < 1e-20);
        let out = optimize_latents(&f.init_near_optimum(0.1, 22), &p).unwrap();
        assert!(out.loss_curve.last().unwrap() < &(0.1 * out.loss_curve[0]));
    }
}
