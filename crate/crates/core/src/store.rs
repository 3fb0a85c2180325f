//! Portable array container and the artifact files built on it.
//!
//! Layout: the 8-byte magic `SPFLARR1`, a little-endian `u64` header length,
//! a JSON header, then every array's values as little-endian `f64` in header
//! order. The header names the artifact kind, carries free-form metadata,
//! and lists each array's name and shape.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::{LabeledDataset, Normalization};
use crate::error::{ensure, Error, Result};
use crate::flsim::{ClientUpdate, UpdateKind, UpdateMeta};
use crate::models::{Classifier, ClassifierSpec, ConditionalGenerator, Layout, ParameterVector, Trajectory, TrainingRecord};
use crate::spoofl::{Provenance, SpoofDataset};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SPFLARR1";

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: Value,
    arrays: Vec<(String, Vec<usize>)>,
}

/// In-memory form of a container file.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: Value,
    pub arrays: BTreeMap<String, Tensor>,
}

impl Container {
    pub fn new(kind: &str, meta: Value) -> Self {
        Self { kind: kind.into(), meta, arrays: BTreeMap::new() }
    }

    pub fn with(mut self, name: &str, t: Tensor) -> Self {
        self.arrays.insert(name.into(), t);
        self
    }

    pub fn with_labels(self, name: &str, labels: &[usize]) -> Self {
        let t = Tensor::from_vec(labels.iter().map(|&l| l as f64).collect());
        self.with(name, t)
    }

    pub fn array(&self, name: &str) -> Result<&Tensor> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::Precondition(format!("{} container has no `{name}` array", self.kind)))
    }

    pub fn labels(&self, name: &str) -> Result<Vec<usize>> {
        self.array(name)?
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::Precondition(format!("`{name}` holds non-integer label {v}")))
                }
            })
            .collect()
    }

    pub fn meta_field<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| Error::Precondition(format!("{} container metadata lacks `{key}`", self.kind)))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    pub fn expect_kind(self, kind: &str) -> Result<Self> {
        ensure!(self.kind == kind, Precondition, "expected a {kind} file, found {}", self.kind);
        Ok(self)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            arrays: self.arrays.iter().map(|(k, t)| (k.clone(), t.shape().to_vec())).collect(),
        };
        let h = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + h.len() + 8 * self.arrays.values().map(Tensor::len).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(h.len() as u64).to_le_bytes());
        out.extend_from_slice(&h);
        for t in self.arrays.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Format { path: path.to_path_buf(), reason: reason.to_string() };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not an array container"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(&format!("bad header: {e}")))?;
        let mut at = 16 + hlen;
        let mut arrays = BTreeMap::new();
        for (name, shape) in header.arrays {
            let n = crate::tensor::numel(&shape);
            let raw = bytes.get(at..at + 8 * n).ok_or_else(|| bad(&format!("truncated array `{name}`")))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            arrays.insert(name, Tensor::new(shape, data));
            at += 8 * n;
        }
        if at != bytes.len() {
            return Err(bad("trailing bytes after the last array"));
        }
        Ok(Self { kind: header.kind, meta: header.meta, arrays })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn params_tensor(p: &ParameterVector) -> Tensor {
    Tensor::from_vec(p.values.clone())
}

fn params_from(c: &Container, array: &str, layout: Arc<Layout>) -> Result<ParameterVector> {
    ParameterVector::new(layout, c.array(array)?.data().to_vec())
}

pub fn dataset_container(ds: &LabeledDataset) -> Container {
    Container::new("dataset", json!({ "id": ds.id, "class_names": ds.class_names }))
        .with("images", ds.images.clone())
        .with_labels("labels", &ds.labels)
}

pub fn dataset_from(c: Container) -> Result<LabeledDataset> {
    let c = c.expect_kind("dataset")?;
    LabeledDataset::new(
        c.meta_field::<String>("id")?,
        c.array("images")?.clone(),
        c.labels("labels")?,
        c.meta_field("class_names")?,
    )
}

/// Classifier checkpoint: flat parameters, layout, spec, normalization and a
/// digest of the producing configuration.
pub fn save_classifier(path: &Path, model: &Classifier, config_digest: &str) -> Result<()> {
    Container::new(
        "classifier",
        json!({
            "spec": model.spec,
            "normalization": model.normalization,
            "layout": *model.params.layout,
            "config_digest": config_digest,
            "params_digest": model.params.digest(),
        }),
    )
    .with("params", params_tensor(&model.params))
    .write(path)
}

pub fn load_classifier(path: &Path) -> Result<Classifier> {
    let c = Container::read(path)?.expect_kind("classifier")?;
    let spec: ClassifierSpec = c.meta_field("spec")?;
    let layout: Layout = c.meta_field("layout")?;
    ensure!(layout == spec.layout(), Layout, "checkpoint layout does not match its {} spec", spec.architecture.name());
    let params = params_from(&c, "params", Arc::new(layout))?;
    let normalization: Normalization = c.meta_field("normalization")?;
    Ok(crate::models::build_classifier(&spec, 0)?.with_normalization(normalization).with_params(params)?)
}

pub fn save_generator(path: &Path, g: &ConditionalGenerator, config_digest: &str) -> Result<()> {
    Container::new(
        "generator",
        json!({
            "latent_dim": g.latent_dim,
            "class_names": g.class_names,
            "output_shape": g.output_shape,
            "config_digest": config_digest,
            "digest": g.digest(),
        }),
    )
    .with("params", params_tensor(&g.params))
    .write(path)
}

pub fn load_generator(path: &Path) -> Result<ConditionalGenerator> {
    let c = Container::read(path)?.expect_kind("generator")?;
    let mut g = ConditionalGenerator::new(c.meta_field("latent_dim")?, c.meta_field("class_names")?, c.meta_field("output_shape")?, 0)?;
    g.params = params_from(&c, "params", g.params.layout.clone())?;
    let digest: String = c.meta_field("digest")?;
    ensure!(digest == g.digest(), Precondition, "generator checkpoint digest mismatch");
    Ok(g)
}

/// Trajectory: checkpoints stacked as a `[T, P]` array.
pub fn save_trajectory(path: &Path, t: &Trajectory) -> Result<()> {
    ensure!(!t.is_empty(), Precondition, "empty trajectory");
    let p = t.checkpoints[0].len();
    let data: Vec<f64> = t.checkpoints.iter().flat_map(|c| c.values.iter().copied()).collect();
    Container::new(
        "trajectory",
        json!({
            "layout": *t.checkpoints[0].layout,
            "epochs_per_checkpoint": t.epochs_per_checkpoint,
            "training_config": t.training_config,
            "digest": t.digest(),
        }),
    )
    .with("checkpoints", Tensor::new(vec![t.len(), p], data))
    .write(path)
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory> {
    let c = Container::read(path)?.expect_kind("trajectory")?;
    let layout = Arc::new(c.meta_field::<Layout>("layout")?);
    let arr = c.array("checkpoints")?;
    ensure!(arr.shape().len() == 2 && arr.shape()[1] == layout.total(), Layout, "trajectory array does not match its layout");
    let checkpoints = (0..arr.shape()[0])
        .map(|i| ParameterVector::new(layout.clone(), arr.row(i).to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let training_config: TrainingRecord = c.meta_field("training_config")?;
    Ok(Trajectory { checkpoints, epochs_per_checkpoint: c.meta_field("epochs_per_checkpoint")?, training_config })
}

pub fn save_spoof_dataset(path: &Path, s: &SpoofDataset) -> Result<()> {
    Container::new(
        "spoof-dataset",
        json!({
            "private_class_names": s.private_class_names,
            "spoof_class_names": s.spoof_class_names,
            "provenance": s.provenance,
        }),
    )
    .with("images", s.images.clone())
    .with_labels("training_labels", &s.training_labels)
    .with_labels("spoof_labels", &s.spoof_labels)
    .write(path)
}

pub fn load_spoof_dataset(path: &Path) -> Result<SpoofDataset> {
    let c = Container::read(path)?.expect_kind("spoof-dataset")?;
    let provenance: Provenance = c.meta_field("provenance")?;
    Ok(SpoofDataset {
        images: c.array("images")?.clone(),
        training_labels: c.labels("training_labels")?,
        spoof_labels: c.labels("spoof_labels")?,
        private_class_names: c.meta_field("private_class_names")?,
        spoof_class_names: c.meta_field("spoof_class_names")?,
        provenance,
    })
}

/// Intercepted update with the attacked model's spec and normalization, and
/// optionally the ground truth kept for scoring.
pub fn save_update(path: &Path, u: &ClientUpdate, model: &Classifier, truth: Option<(&Tensor, &[usize])>) -> Result<()> {
    update_container(u, model, truth)?.write(path)
}

/// Container form of [`save_update`]; callers may add a `context` object to
/// its metadata before writing.
pub fn update_container(u: &ClientUpdate, model: &Classifier, truth: Option<(&Tensor, &[usize])>) -> Result<Container> {
    ensure!(*u.payload.layout == model.spec.layout(), Layout, "update does not match the model spec");
    let mut c = Container::new(
        "client-update",
        json!({
            "kind": u.kind,
            "meta": u.meta,
            "layout": *u.payload.layout,
            "spec": model.spec,
            "normalization": model.normalization,
        }),
    )
    .with("payload", params_tensor(&u.payload))
    .with("pre_update_model", params_tensor(&u.pre_update_model));
    if let Some((images, labels)) = truth {
        c = c.with("truth_images", images.clone()).with_labels("truth_labels", labels);
    }
    Ok(c)
}

pub struct StoredUpdate {
    pub update: ClientUpdate,
    /// The attacked model at its pre-update parameters.
    pub model: Classifier,
    pub truth: Option<(Tensor, Vec<usize>)>,
    pub context: Option<Value>,
}

pub fn load_update(path: &Path) -> Result<StoredUpdate> {
    let c = Container::read(path)?.expect_kind("client-update")?;
    let layout = Arc::new(c.meta_field::<Layout>("layout")?);
    let kind: UpdateKind = c.meta_field("kind")?;
    let meta: UpdateMeta = c.meta_field("meta")?;
    let update = ClientUpdate {
        kind,
        payload: params_from(&c, "payload", layout.clone())?,
        pre_update_model: params_from(&c, "pre_update_model", layout)?,
        meta,
    };
    update.validate()?;
    let spec: ClassifierSpec = c.meta_field("spec")?;
    ensure!(*update.payload.layout == spec.layout(), Layout, "stored update does not match its spec");
    let model = crate::models::build_classifier(&spec, 0)?
        .with_normalization(c.meta_field("normalization")?)
        .with_params(update.pre_update_model.clone())?;
    let truth = match c.arrays.contains_key("truth_images") {
        true => Some((c.array("truth_images")?.clone(), c.labels("truth_labels")?)),
        false => None,
    };
    let context = c.meta.get("context").cloned();
    Ok(StoredUpdate { update, model, truth, context })
}
