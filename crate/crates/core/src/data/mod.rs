//! Labelled image datasets, normalization, and blacklist curation between a
//! private task and an external spoofing dataset.
//!
//! Images are stored as `[N, C, H, W]` tensors with pixels in `[0, 1]`.
//! Mean/std normalization happens inside the model, never in storage.

mod formats;
pub mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

pub use formats::{read_idx, resize_batch};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    /// Dataset identifier, e.g. `synth-digits/train@28`.
    pub id: String,
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn new(id: impl Into<String>, images: Tensor, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        let ds = Self { id: id.into(), num_classes: class_names.len(), images, labels, class_names };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.images.shape().len() == 4, Shape, "images must be [N,C,H,W], got {:?}", self.images.shape());
        ensure!(
            self.images.shape()[0] == self.labels.len(),
            Shape,
            "{} images but {} labels",
            self.images.shape()[0],
            self.labels.len()
        );
        ensure!(self.class_names.len() == self.num_classes, Config, "class_names length != num_classes");
        ensure!(
            self.labels.iter().all(|&l| l < self.num_classes),
            Config,
            "label out of range for {} classes",
            self.num_classes
        );
        ensure!(
            self.images.data().iter().all(|&p| (0.0..=1.0).contains(&p)),
            Config,
            "pixel values must lie in [0,1]"
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            id: format!("{}[subset:{}]", self.id, idx.len()),
            images: self.images.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            num_classes: self.num_classes,
        }
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }

    /// Per-class sample indices in source order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by[l].push(i);
        }
        by
    }

    /// `count` indices taken round-robin across classes, each class in
    /// source order. Used to pick class-stratified representatives.
    pub fn stratified_indices(&self, count: usize) -> Vec<usize> {
        let by = self.indices_by_class();
        let mut out = Vec::with_capacity(count);
        let mut depth = 0;
        while out.len() < count {
            let mut progressed = false;
            for class in &by {
                if let Some(&i) = class.get(depth) {
                    if out.len() < count {
                        out.push(i);
                        progressed = true;
                    }
                }
            }
            if !progressed {
                break;
            }
            depth += 1;
        }
        out
    }
}

/// Per-channel mean/std normalization applied inside the model substrate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    /// Channel statistics of a dataset.
    pub fn fit(ds: &LabeledDataset) -> Self {
        let [c, h, w] = ds.image_shape();
        let n = ds.len();
        let hw = h * w;
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for &p in &ds.images.data()[base..base + hw] {
                    mean[ci] += p;
                    sq[ci] += p * p;
                }
            }
        }
        let count = (n * hw).max(1) as f64;
        let std = mean
            .iter()
            .zip(&sq)
            .map(|(&s, &q)| {
                let m = s / count;
                (q / count - m * m).max(1e-12).sqrt()
            })
            .collect();
        Self { mean: mean.iter().map(|s| s / count).collect(), std }
    }

    pub fn normalize(&self, images: &Tensor) -> Tensor {
        self.apply(images, |x, m, s| (x - m) / s)
    }

    pub fn denormalize(&self, images: &Tensor) -> Tensor {
        self.apply(images, |x, m, s| x * s + m)
    }

    fn apply(&self, images: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
        let s = images.shape();
        let (c, hw) = (s[1], s[2] * s[3]);
        let mut out = images.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let ci = (i / hw) % c;
            *v = f(*v, self.mean[ci], self.std[ci]);
        }
        out
    }
}

/// Names accepted by [`load_dataset`].
pub const DATASETS: &[&str] = &["synth-digits", "synth-fashion", "mnist", "fashion-mnist", "cifar10"];

/// Root directory for on-disk datasets (`SPOOFL_DATA`, default `./data`).
pub fn data_root() -> PathBuf {
    std::env::var_os("SPOOFL_DATA").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data"))
}

/// Loads a dataset, resizing to `resolution` and truncating to `limit`.
///
/// `synth-*` datasets are rendered procedurally and need no files; the
/// others read IDX / CIFAR binary files under [`data_root`].
pub fn load_dataset(name: &str, split: Split, resolution: usize, limit: Option<usize>) -> Result<LabeledDataset> {
    ensure!(resolution > 0, Config, "resolution must be positive");
    match name {
        "synth-digits" | "synth-fashion" => {
            let kind = if name == "synth-digits" { synth::Kind::Digits } else { synth::Kind::Fashion };
            let available = synth::split_size(split);
            let n = match limit {
                Some(l) if l > available => {
                    return Err(Error::Precondition(format!("limit {l} exceeds {available} available samples")))
                }
                Some(l) => l,
                None => available,
            };
            synth::render_dataset(kind, split, resolution, n)
        }
        "mnist" | "fashion-mnist" | "cifar10" => {
            let root = data_root();
            let cache = root.join("cache").join(format!("{name}-{}.bin", split.as_str()));
            let ds = match crate::store::Container::read(&cache) {
                Ok(c) => crate::store::dataset_from(c)?,
                Err(_) => {
                    let ds = formats::load_files(name, split, &root)?;
                    if let Err(e) = crate::store::dataset_container(&ds).write(&cache) {
                        log::warn!("could not cache {name}: {e}");
                    }
                    ds
                }
            };
            finish(ds, resolution, limit)
        }
        other => Err(Error::UnknownDataset(other.to_string())),
    }
}

fn finish(ds: LabeledDataset, resolution: usize, limit: Option<usize>) -> Result<LabeledDataset> {
    let n = match limit {
        Some(l) if l > ds.len() => {
            return Err(Error::Precondition(format!("limit {l} exceeds {} available samples", ds.len())))
        }
        Some(l) => l,
        None => ds.len(),
    };
    let idx: Vec<usize> = (0..n).collect();
    let mut out = if n == ds.len() { ds } else { ds.subset(&idx) };
    let [_, h, w] = out.image_shape();
    if (h, w) != (resolution, resolution) {
        out.images = resize_batch(&out.images, resolution, resolution);
    }
    out.id = format!("{}@{resolution}", out.id.split('@').next().unwrap_or_default());
    out.validate()?;
    Ok(out)
}

/// Spoof-dataset classes excluded because they overlap the private task.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Blacklist {
    pub excluded_class_ids: BTreeSet<usize>,
    /// private class name -> overlapping spoof class names.
    pub provenance: BTreeMap<String, Vec<String>>,
}

impl Blacklist {
    pub fn contains(&self, class: usize) -> bool {
        self.excluded_class_ids.contains(&class)
    }

    pub fn is_empty(&self) -> bool {
        self.excluded_class_ids.is_empty()
    }

    pub fn len(&self) -> usize {
        self.excluded_class_ids.len()
    }
}

/// Builds the blacklist from an explicit `(private name, spoof name)` list.
pub fn curate_blacklist(
    private: &LabeledDataset,
    spoof: &LabeledDataset,
    overlap_map: &[(String, String)],
) -> Result<Blacklist> {
    let mut bl = Blacklist::default();
    for (p, s) in overlap_map {
        ensure!(private.class_index(p).is_some(), Config, "overlap map names unknown private class `{p}`");
        let Some(sid) = spoof.class_index(s) else {
            return Err(Error::Config(format!("overlap map names unknown spoof class `{s}`")));
        };
        bl.excluded_class_ids.insert(sid);
        let names = bl.provenance.entry(p.clone()).or_default();
        if !names.contains(s) {
            names.push(s.clone());
        }
    }
    Ok(bl)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(names: &[&str]) -> LabeledDataset {
        let n = names.len();
        LabeledDataset::new(
            "tiny",
            Tensor::zeros(&[n, 1, 2, 2]),
            (0..n).collect(),
            names.iter().map(|s| s.to_string()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn limit_truncates_and_is_deterministic() {
        let a = load_dataset("synth-digits", Split::Test, 28, Some(100)).unwrap();
        assert_eq!(a.len(), 100);
        assert_eq!(a.num_classes, 10);
        assert_eq!(a.image_shape(), [1, 28, 28]);
        let b = load_dataset("synth-digits", Split::Test, 28, Some(100)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn load_errors() {
        assert!(matches!(load_dataset("imagenet", Split::Train, 28, None), Err(Error::UnknownDataset(_))));
        assert!(matches!(
            load_dataset("synth-fashion", Split::Test, 28, Some(1_000_000)),
            Err(Error::Precondition(_))
        ));
        assert!(load_dataset("synth-fashion", Split::Test, 0, Some(1)).is_err());
    }

    #[test]
    fn missing_files_reported() {
        std::env::set_var("SPOOFL_DATA", "/nonexistent-spoofl-root");
        assert!(matches!(load_dataset("mnist", Split::Train, 28, Some(1)), Err(Error::MissingFile(_))));
    }

    #[test]
    fn normalization_round_trip() {
        let ds = load_dataset("synth-fashion", Split::Train, 16, Some(20)).unwrap();
        let norm = Normalization::fit(&ds);
        let back = norm.normalize(&norm.denormalize(&ds.images));
        for (a, b) in back.data().iter().zip(ds.images.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn blacklist_cases() {
        let digits = tiny(&["0", "1", "2"]);
        let fashion = tiny(&["bag", "coat", "dress"]);
        assert!(curate_blacklist(&digits, &fashion, &[]).unwrap().is_empty());

        let ident: Vec<_> = digits.class_names.iter().map(|c| (c.clone(), c.clone())).collect();
        let full = curate_blacklist(&digits, &digits, &ident).unwrap();
        assert_eq!(full.excluded_class_ids, (0..3).collect());

        let animals = tiny(&["airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck"]);
        let map = vec![("dog".to_string(), "dog".to_string()), ("cat".to_string(), "cat".to_string())];
        let bl = curate_blacklist(&animals, &animals, &map).unwrap();
        assert_eq!(bl.excluded_class_ids, [3, 5].into_iter().collect());

        let bad = vec![("7".to_string(), "bag".to_string())];
        assert!(curate_blacklist(&digits, &fashion, &bad).is_err());
    }

    #[test]
    fn stratified_round_robin() {
        let ds = LabeledDataset::new(
            "s",
            Tensor::zeros(&[6, 1, 1, 1]),
            vec![0, 0, 0, 1, 1, 2],
            vec!["a".into(), "b".into(), "c".into()],
        )
        .unwrap();
        assert_eq!(ds.stratified_indices(5), vec![0, 3, 5, 1, 4]);
        assert_eq!(ds.stratified_indices(10).len(), 6);
    }
}
