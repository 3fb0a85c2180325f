//! Classifier zoo, SGD training with checkpointed trajectories, and the
//! class-conditional generator.

mod generator;
mod params;

use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{LabeledDataset, Normalization};
use crate::error::{ensure, Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub use generator::{
    conditioning_fidelity, generate, generate_batch, generator_forward, train_generator, ConditionalGenerator,
    GeneratorTrainConfig,
};
pub use params::{Layout, ParameterVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    Mlp2,
    ConvnetSmall,
    VggLike,
    ResnetLike,
}

pub const ARCHITECTURES: [Architecture; 4] =
    [Architecture::Mlp2, Architecture::ConvnetSmall, Architecture::VggLike, Architecture::ResnetLike];

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Self::Mlp2 => "mlp2",
            Self::ConvnetSmall => "convnet-small",
            Self::VggLike => "vgg-like",
            Self::ResnetLike => "resnet-like",
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ARCHITECTURES
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown architecture `{s}`")))
    }
}

pub const MLP_HIDDEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub architecture: Architecture,
    /// `[C, H, W]`
    pub input_shape: [usize; 3],
    pub num_classes: usize,
}

impl ClassifierSpec {
    pub fn new(architecture: Architecture, input_shape: [usize; 3], num_classes: usize) -> Self {
        Self { architecture, input_shape, num_classes }
    }

    pub fn for_dataset(architecture: Architecture, ds: &LabeledDataset) -> Self {
        Self::new(architecture, ds.image_shape(), ds.num_classes)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_classes >= 2, Config, "num_classes must be at least 2, got {}", self.num_classes);
        let [c, h, w] = self.input_shape;
        ensure!(c > 0 && h > 0 && w > 0, Config, "empty input shape {:?}", self.input_shape);
        if self.architecture != Architecture::Mlp2 {
            ensure!(h >= 4 && w >= 4, Config, "{} needs inputs of at least 4x4", self.architecture);
        }
        Ok(())
    }

    /// Parameter layout. Linear weights are stored `[in, out]`, convolution
    /// weights `[out, in, k, k]`.
    pub fn layout(&self) -> Layout {
        let [c, h, w] = self.input_shape;
        let k = self.num_classes;
        let conv = |name: &str, o: usize, i: usize| {
            vec![(format!("{name}.weight"), vec![o, i, 3, 3]), (format!("{name}.bias"), vec![o])]
        };
        let linear = |name: &str, i: usize, o: usize| {
            vec![(format!("{name}.weight"), vec![i, o]), (format!("{name}.bias"), vec![o])]
        };
        let half = |n: usize| n.div_ceil(2);
        let entries = match self.architecture {
            Architecture::Mlp2 => [linear("fc1", c * h * w, MLP_HIDDEN), linear("fc2", MLP_HIDDEN, k)].concat(),
            Architecture::ConvnetSmall => {
                [conv("conv1", 4, c), conv("conv2", 8, 4), linear("fc", 8 * half(h) * half(w), k)].concat()
            }
            Architecture::VggLike => [
                conv("conv1", 8, c),
                conv("conv2", 8, 8),
                conv("conv3", 16, 8),
                conv("conv4", 16, 16),
                linear("fc", 16 * half(half(h)) * half(half(w)), k),
            ]
            .concat(),
            Architecture::ResnetLike => [
                conv("stem", 8, c),
                conv("block1a", 8, 8),
                conv("block1b", 8, 8),
                conv("down", 16, 8),
                conv("block2a", 16, 16),
                conv("block2b", 16, 16),
                linear("fc", 16 * half(h) * half(w), k),
            ]
            .concat(),
        };
        Layout::new(entries)
    }
}

/// A classifier: architecture, input normalization, and parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub spec: ClassifierSpec,
    pub normalization: Normalization,
    pub params: ParameterVector,
}

/// Outputs of a differentiable forward pass.
pub struct Forward<'t> {
    pub logits: Var<'t>,
    /// Activation maps of the convolutional stages, shallow to deep.
    pub taps: Vec<Var<'t>>,
    /// Input of the final linear layer, `[N, D]`.
    pub embedding: Var<'t>,
}

/// Deterministic PyTorch-style initialization: weights and biases drawn
/// from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn build_classifier(spec: &ClassifierSpec, seed: u64) -> Result<Classifier> {
    spec.validate()?;
    let layout = Arc::new(spec.layout());
    let params = init_uniform(layout, seed);
    Ok(Classifier {
        spec: spec.clone(),
        normalization: Normalization::identity(spec.input_shape[0]),
        params,
    })
}

pub(crate) fn init_uniform(layout: Arc<Layout>, seed: u64) -> ParameterVector {
    let mut r = rng::stage_rng(seed, "init", 0);
    let mut values = Vec::with_capacity(layout.total());
    let mut fan_in = 1;
    for (name, shape) in &layout.entries {
        if name.ends_with(".weight") {
            fan_in = match shape.len() {
                2 => shape[0],
                4 => shape[1] * shape[2] * shape[3],
                _ => shape.iter().skip(1).product(),
            };
        }
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        values.extend((0..crate::tensor::numel(shape)).map(|_| r.random_range(-bound..bound)));
    }
    ParameterVector { values, layout }
}

impl Classifier {
    pub fn with_normalization(mut self, normalization: Normalization) -> Self {
        self.normalization = normalization;
        self
    }

    pub fn with_params(&self, params: ParameterVector) -> Result<Self> {
        self.params.check_layout(&params)?;
        Ok(Self { params, ..self.clone() })
    }

    pub fn check_images(&self, images: &Tensor) -> Result<()> {
        let s = images.shape();
        if s.len() != 4 || s[1..] != self.spec.input_shape {
            return Err(Error::Shape(format!(
                "images {:?} do not fit model input {:?}",
                s, self.spec.input_shape
            )));
        }
        Ok(())
    }

    /// Forward pass with parameters supplied as tape vars in layout order.
    pub fn forward<'t>(&self, params: &[Var<'t>], x: Var<'t>) -> Forward<'t> {
        forward(&self.spec, &self.normalization, params, x)
    }

    /// Logits for a batch, computed on a scratch tape.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        self.check_images(images)?;
        let mut rows = Vec::with_capacity(images.shape()[0] * self.spec.num_classes);
        for chunk in batches(images.shape()[0], 256) {
            let tape = Tape::new();
            let p = self.params.vars(&tape);
            let x = tape.input(images.select_rows(&chunk));
            rows.extend_from_slice(self.forward(&p, x).logits.value().data());
        }
        Ok(Tensor::new(vec![images.shape()[0], self.spec.num_classes], rows))
    }

    /// Penultimate embeddings `[N, D]`.
    pub fn embeddings(&self, images: &Tensor) -> Result<Tensor> {
        self.check_images(images)?;
        let tape = Tape::new();
        let p = self.params.vars(&tape);
        let out = self.forward(&p, tape.input(images.clone()));
        Ok((*out.embedding.value()).clone())
    }

    /// Convolutional activation maps, shallow to deep.
    pub fn feature_maps(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        self.check_images(images)?;
        let tape = Tape::new();
        let p = self.params.vars(&tape);
        let out = self.forward(&p, tape.input(images.clone()));
        Ok(out.taps.iter().map(|t| (*t.value()).clone()).collect())
    }

    /// Mean cross-entropy gradient at the current parameters.
    pub fn loss_gradient(&self, images: &Tensor, labels: &[usize]) -> Result<(f64, ParameterVector)> {
        self.check_images(images)?;
        ensure!(labels.len() == images.shape()[0], Shape, "{} labels for {} images", labels.len(), images.shape()[0]);
        let tape = Tape::new();
        let p = self.params.vars(&tape);
        let out = self.forward(&p, tape.input(images.clone()));
        let loss = cross_entropy(out.logits, labels);
        let grads = tape.grad(loss, &p);
        let tensors: Vec<Tensor> = grads.iter().map(|g| (*g.value()).clone()).collect();
        Ok((loss.item(), ParameterVector::from_tensors(self.params.layout.clone(), &tensors)?))
    }
}

fn batches(n: usize, size: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n).step_by(size.max(1)).map(move |s| (s..(s + size).min(n)).collect())
}

fn normalize_input<'t>(norm: &Normalization, x: Var<'t>) -> Var<'t> {
    let shape = x.shape();
    let c = shape[1];
    if norm.mean.iter().all(|&m| m == 0.0) && norm.std.iter().all(|&s| s == 1.0) {
        return x;
    }
    if c == 1 {
        return x.scale(1.0 / norm.std[0]).add_scalar(-norm.mean[0] / norm.std[0]);
    }
    let tape = x.tape();
    let scale = Tensor::new(vec![c], norm.std.iter().map(|s| 1.0 / s).collect());
    let shift = Tensor::new(vec![c], norm.mean.iter().zip(&norm.std).map(|(m, s)| -m / s).collect());
    let ones = Tensor::full(&shape, 1.0);
    let scale_full = tape.input(ones.clone()).add_channel_bias(tape.input(scale)) - tape.input(ones);
    (x * scale_full).add_channel_bias(tape.input(shift))
}

fn conv_layer<'t>(x: Var<'t>, w: Var<'t>, b: Var<'t>, stride: usize) -> Var<'t> {
    x.conv2d(w, stride, 1).add_channel_bias(b)
}

/// Differentiable forward pass for any registered architecture.
pub fn forward<'t>(spec: &ClassifierSpec, norm: &Normalization, p: &[Var<'t>], x: Var<'t>) -> Forward<'t> {
    let n = x.shape()[0];
    let x = normalize_input(norm, x);
    let flat = |v: Var<'t>| {
        let d = v.value().len() / n;
        v.reshape(&[n, d])
    };
    let head = |emb: Var<'t>, w: Var<'t>, b: Var<'t>| emb.matmul(w).add_bias(b);
    match spec.architecture {
        Architecture::Mlp2 => {
            let h = head(flat(x), p[0], p[1]).tanh();
            Forward { logits: head(h, p[2], p[3]), taps: vec![], embedding: h }
        }
        Architecture::ConvnetSmall => {
            let a1 = conv_layer(x, p[0], p[1], 1).tanh();
            let a2 = conv_layer(a1, p[2], p[3], 2).tanh();
            let emb = flat(a2);
            Forward { logits: head(emb, p[4], p[5]), taps: vec![a1, a2], embedding: emb }
        }
        Architecture::VggLike => {
            let a1 = conv_layer(x, p[0], p[1], 1).tanh();
            let a2 = conv_layer(a1, p[2], p[3], 2).tanh();
            let a3 = conv_layer(a2, p[4], p[5], 1).tanh();
            let a4 = conv_layer(a3, p[6], p[7], 2).tanh();
            let emb = flat(a4);
            Forward { logits: head(emb, p[8], p[9]), taps: vec![a1, a2, a3, a4], embedding: emb }
        }
        Architecture::ResnetLike => {
            let s = conv_layer(x, p[0], p[1], 1).tanh();
            let r1 = conv_layer(conv_layer(s, p[2], p[3], 1).tanh(), p[4], p[5], 1);
            let b1 = (s + r1).tanh();
            let d = conv_layer(b1, p[6], p[7], 2).tanh();
            let r2 = conv_layer(conv_layer(d, p[8], p[9], 1).tanh(), p[10], p[11], 1);
            let b2 = (d + r2).tanh();
            let emb = flat(b2);
            Forward { logits: head(emb, p[12], p[13]), taps: vec![s, b1, d, b2], embedding: emb }
        }
    }
}

pub fn one_hot(labels: &[usize], k: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), k]);
    for (i, &y) in labels.iter().enumerate() {
        t.data_mut()[i * k + y] = 1.0;
    }
    t
}

/// Mean softmax cross-entropy against hard labels.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize]) -> Var<'t> {
    let k = logits.shape()[1];
    let target = logits.tape().input(one_hot(labels, k));
    soft_cross_entropy(logits, target)
}

/// Mean cross-entropy against a `[n,k]` target distribution.
pub fn soft_cross_entropy<'t>(logits: Var<'t>, target: Var<'t>) -> Var<'t> {
    let n = logits.shape()[0] as f64;
    -(logits.log_softmax() * target).sum().scale(1.0 / n)
}

/// Training hyper-parameters. The optimizer is plain SGD without momentum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 5, lr: 0.01, batch_size: 8, seed: 0, checkpoint_every: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub dataset_id: String,
    pub loss: String,
    pub optimizer: String,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub checkpoints: Vec<ParameterVector>,
    pub epochs_per_checkpoint: usize,
    pub training_config: TrainingRecord,
}

impl Trajectory {
    pub fn digest(&self) -> String {
        let mut bytes = Vec::new();
        for c in &self.checkpoints {
            bytes.extend(c.digest().into_bytes());
        }
        bytes.extend(serde_json::to_vec(&self.training_config).unwrap_or_default());
        rng::digest_bytes(&bytes)
    }

    pub fn len(&self) -> usize {
        self.checkpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.checkpoints.is_empty()
    }
}

pub struct TrainOutcome {
    pub classifier: Classifier,
    pub trajectory: Trajectory,
    /// Training-set accuracy after every epoch.
    pub epoch_accuracy: Vec<f64>,
}

/// Minibatch SGD on mean cross-entropy. Batches follow a per-epoch seeded
/// shuffle; the last batch of an epoch may be smaller.
pub fn train_classifier(model: &Classifier, ds: &LabeledDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    ensure!(cfg.epochs >= 1, Precondition, "epochs must be at least 1");
    ensure!(cfg.lr >= 0.0 && cfg.lr.is_finite(), Precondition, "lr must be finite and non-negative");
    ensure!(cfg.batch_size >= 1, Precondition, "batch_size must be at least 1");
    ensure!(cfg.checkpoint_every >= 1, Precondition, "checkpoint_every must be at least 1");
    ensure!(!ds.is_empty(), Precondition, "cannot train on an empty dataset");
    ensure!(
        ds.num_classes == model.spec.num_classes,
        Precondition,
        "dataset has {} classes, model head has {}",
        ds.num_classes,
        model.spec.num_classes
    );
    model.check_images(&ds.images)?;
    let mut current = model.clone();
    let mut checkpoints = vec![current.params.clone()];
    let mut epoch_accuracy = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut r = rng::stage_rng(cfg.seed, "epoch-shuffle", epoch as u64);
        let order = rng::permutation(ds.len(), &mut r);
        for chunk in order.chunks(cfg.batch_size) {
            let (_, g) = current.loss_gradient(&ds.images.select_rows(chunk), &select(&ds.labels, chunk))?;
            sgd_step(&mut current.params, &g, cfg.lr);
        }
        if (epoch + 1) % cfg.checkpoint_every == 0 {
            checkpoints.push(current.params.clone());
        }
        epoch_accuracy.push(evaluate_accuracy(&current, ds)?);
    }
    let trajectory = Trajectory {
        checkpoints,
        epochs_per_checkpoint: cfg.checkpoint_every,
        training_config: TrainingRecord {
            dataset_id: ds.id.clone(),
            loss: "cross-entropy".into(),
            optimizer: "sgd".into(),
            lr: cfg.lr,
            batch_size: cfg.batch_size,
            epochs: cfg.epochs,
            seed: cfg.seed,
        },
    };
    Ok(TrainOutcome { classifier: current, trajectory, epoch_accuracy })
}

pub(crate) fn select<T: Copy>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i]).collect()
}

/// `params -= lr * grad`
pub fn sgd_step(params: &mut ParameterVector, grad: &ParameterVector, lr: f64) {
    for (w, g) in params.values.iter_mut().zip(&grad.values) {
        *w -= lr * g;
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of samples whose argmax logit equals the label.
pub fn evaluate_accuracy(model: &Classifier, ds: &LabeledDataset) -> Result<f64> {
    ensure!(
        ds.num_classes == model.spec.num_classes,
        Precondition,
        "dataset has {} classes, model head has {}",
        ds.num_classes,
        model.spec.num_classes
    );
    if ds.is_empty() {
        return Ok(0.0);
    }
    let logits = model.logits(&ds.images)?;
    let k = model.spec.num_classes;
    let correct = ds.labels.iter().enumerate().filter(|&(i, &y)| argmax(&logits.data()[i * k..(i + 1) * k]) == y).count();
    Ok(correct as f64 / ds.len() as f64)
}

/// Row-wise softmax of the model's logits.
pub fn softmax_confidences(model: &Classifier, images: &Tensor) -> Result<Tensor> {
    let logits = model.logits(images)?;
    Ok(crate::autodiff::log_softmax_rows(&logits).map(f64::exp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_dataset, Split};

    fn spec(arch: Architecture) -> ClassifierSpec {
        ClassifierSpec::new(arch, [1, 28, 28], 10)
    }

    #[test]
    fn build_is_deterministic() {
        let a = build_classifier(&spec(Architecture::Mlp2), 7).unwrap();
        let b = build_classifier(&spec(Architecture::Mlp2), 7).unwrap();
        assert_eq!(a.params, b.params);
        let c = build_classifier(&spec(Architecture::Mlp2), 8).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn convnet_small_parameter_count() {
        // conv1 4*1*9+4, conv2 8*4*9+8, fc 8*14*14*10+10
        let hand = (36 + 4) + (288 + 8) + (1568 * 10 + 10);
        assert_eq!(spec(Architecture::ConvnetSmall).layout().total(), hand);
        assert_eq!(hand, 16026);
    }

    #[test]
    fn single_class_rejected() {
        let s = ClassifierSpec::new(Architecture::Mlp2, [1, 28, 28], 1);
        assert!(build_classifier(&s, 0).is_err());
        assert!("lenet".parse::<Architecture>().is_err());
    }

    #[test]
    fn all_architectures_run_forward() {
        for arch in ARCHITECTURES {
            let m = build_classifier(&ClassifierSpec::new(arch, [3, 16, 16], 4), 1).unwrap();
            let x = Tensor::full(&[2, 3, 16, 16], 0.3);
            let l = m.logits(&x).unwrap();
            assert_eq!(l.shape(), &[2, 4]);
            assert!(l.data().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_duplicates_match() {
        let m = build_classifier(&spec(Architecture::ConvnetSmall), 3).unwrap();
        let ds = load_dataset("synth-digits", Split::Test, 28, Some(4)).unwrap();
        let images = ds.images.select_rows(&[0, 1, 2, 0]);
        let p = softmax_confidences(&m, &images).unwrap();
        for i in 0..4 {
            let row = &p.data()[i * 10..(i + 1) * 10];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
        assert_eq!(&p.data()[0..10], &p.data()[30..40]);
        assert!(softmax_confidences(&m, &Tensor::zeros(&[1, 1, 14, 14])).is_err());
    }

    #[test]
    fn logit_shift_leaves_probabilities_unchanged() {
        let l = Tensor::new(vec![1, 3], vec![0.2, -1.0, 2.5]);
        let a = crate::autodiff::log_softmax_rows(&l).map(f64::exp);
        let b = crate::autodiff::log_softmax_rows(&l.map(|v| v + 7.0)).map(f64::exp);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn const_classifier(class: usize) -> Classifier {
        let mut m = build_classifier(&ClassifierSpec::new(Architecture::Mlp2, [1, 4, 4], 3), 0).unwrap();
        m.params.values.iter_mut().for_each(|v| *v = 0.0);
        let fc2_bias = m.params.layout.ranges()[3].clone();
        m.params.values[fc2_bias.start + class] = 5.0;
        m
    }

    #[test]
    fn constant_classifier_accuracy() {
        let m = const_classifier(0);
        let ds = LabeledDataset::new("t", Tensor::full(&[5, 1, 4, 4], 0.5), vec![0; 5], vec!["a".into(), "b".into(), "c".into()])
            .unwrap();
        assert_eq!(evaluate_accuracy(&m, &ds).unwrap(), 1.0);
        let wrong = LabeledDataset::new("t", Tensor::full(&[2, 1, 4, 4], 0.5), vec![0, 1], vec!["a".into(), "b".into()])
            .unwrap();
        assert!(evaluate_accuracy(&m, &wrong).is_err());
    }

    #[test]
    fn random_classifier_is_near_chance() {
        let ds = load_dataset("synth-digits", Split::Test, 28, Some(1000)).unwrap();
        for seed in 0..3 {
            let m = build_classifier(&ClassifierSpec::for_dataset(Architecture::Mlp2, &ds), seed).unwrap();
            let acc = evaluate_accuracy(&m, &ds).unwrap();
            assert!((acc - 0.1).abs() <= 0.03, "{acc}");
        }
    }

    #[test]
    fn training_preconditions_and_counts() {
        let ds = load_dataset("synth-digits", Split::Train, 12, Some(20)).unwrap();
        let m = build_classifier(&ClassifierSpec::for_dataset(Architecture::Mlp2, &ds), 0).unwrap();
        let mut cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        assert!(train_classifier(&m, &ds, &cfg).is_err());
        cfg.epochs = 5;
        cfg.checkpoint_every = 2;
        let out = train_classifier(&m, &ds, &cfg).unwrap();
        assert_eq!(out.trajectory.len(), 1 + 5 / 2);
        assert_eq!(out.trajectory.checkpoints[0], m.params);
        assert_eq!(out.epoch_accuracy.len(), 5);
        let empty = ds.subset(&[]);
        assert!(train_classifier(&m, &empty, &cfg).is_err());
    }

    #[test]
    fn zero_lr_keeps_every_checkpoint_at_init() {
        let ds = load_dataset("synth-digits", Split::Train, 12, Some(16)).unwrap();
        let m = build_classifier(&ClassifierSpec::for_dataset(Architecture::ConvnetSmall, &ds), 0).unwrap();
        let cfg = TrainConfig { epochs: 3, lr: 0.0, ..TrainConfig::default() };
        let out = train_classifier(&m, &ds, &cfg).unwrap();
        assert!(out.trajectory.checkpoints.iter().all(|c| *c == m.params));
    }

    #[test]
    fn training_is_bit_reproducible() {
        let ds = load_dataset("synth-digits", Split::Train, 12, Some(24)).unwrap();
        let m = build_classifier(&ClassifierSpec::for_dataset(Architecture::ConvnetSmall, &ds), 2).unwrap();
        let cfg = TrainConfig { epochs: 2, ..TrainConfig::default() };
        let a = train_classifier(&m, &ds, &cfg).unwrap();
        let b = train_classifier(&m, &ds, &cfg).unwrap();
        assert_eq!(a.trajectory.digest(), b.trajectory.digest());
    }

    #[test]
    fn multichannel_normalization_matches_storage_transform() {
        let ds = load_dataset("synth-fashion", Split::Train, 8, Some(6)).unwrap();
        let rgb = Tensor::new(vec![2, 3, 8, 8], ds.images.data()[..384].to_vec());
        let norm = Normalization { mean: vec![0.1, 0.2, 0.3], std: vec![0.5, 2.0, 4.0] };
        let tape = Tape::new();
        let got = normalize_input(&norm, tape.input(rgb.clone()));
        let want = norm.normalize(&rgb);
        for (a, b) in got.value().data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
