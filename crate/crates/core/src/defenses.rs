//! Update-space obfuscation (noise, clipping, compression) and the spoofed
//! data substitution defense.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{ensure, Error, Result};
use crate::flsim::ClientUpdate;
use crate::rng;
use crate::spoofl::SpoofDataset;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DefenseKind {
    #[default]
    None,
    Noise,
    Clip,
    Compress,
    Spoofl,
}

impl DefenseKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Noise => "noise",
            Self::Clip => "clip",
            Self::Compress => "compress",
            Self::Spoofl => "spoofl",
        }
    }

    /// Position in the fixed composition order compress → clip → noise.
    fn order(self) -> usize {
        match self {
            Self::None | Self::Spoofl => 0,
            Self::Compress => 1,
            Self::Clip => 2,
            Self::Noise => 3,
        }
    }
}

impl std::str::FromStr for DefenseKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => Self::None,
            "noise" => Self::Noise,
            "clip" => Self::Clip,
            "compress" => Self::Compress,
            "spoofl" => Self::Spoofl,
            other => return Err(Error::Config(format!("unknown defense `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseConfig {
    #[serde(default)]
    pub kind: DefenseKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_norm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spoof_dataset: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

impl DefenseConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn noise(sigma: f64) -> Self {
        Self { kind: DefenseKind::Noise, sigma: Some(sigma), ..Self::default() }
    }

    pub fn clip(max_norm: f64) -> Self {
        Self { kind: DefenseKind::Clip, max_norm: Some(max_norm), ..Self::default() }
    }

    pub fn compress(rate: f64) -> Self {
        Self { kind: DefenseKind::Compress, rate: Some(rate), ..Self::default() }
    }

    pub fn spoofl(path: Option<PathBuf>) -> Self {
        Self { kind: DefenseKind::Spoofl, spoof_dataset: path, ..Self::default() }
    }

    /// The single numeric parameter of the active kind, if any.
    pub fn parameter(&self) -> Option<f64> {
        match self.kind {
            DefenseKind::Noise => self.sigma,
            DefenseKind::Clip => self.max_norm,
            DefenseKind::Compress => self.rate,
            _ => None,
        }
    }

    /// Exactly the fields of the active kind must be set, with legal values.
    pub fn validate(&self) -> Result<()> {
        let set = [
            (DefenseKind::Noise, self.sigma.is_some()),
            (DefenseKind::Clip, self.max_norm.is_some()),
            (DefenseKind::Compress, self.rate.is_some()),
        ];
        for (kind, present) in set {
            if present && kind != self.kind {
                return Err(Error::Config(format!("defense `{}` does not take the {} parameter", self.kind.name(), kind.name())));
            }
        }
        if self.spoof_dataset.is_some() && self.kind != DefenseKind::Spoofl {
            return Err(Error::Config(format!("defense `{}` does not take spoof_dataset", self.kind.name())));
        }
        match self.kind {
            DefenseKind::Noise => {
                let s = self.sigma.ok_or_else(|| Error::Config("noise defense needs sigma".into()))?;
                ensure!(s >= 0.0 && s.is_finite(), Config, "sigma must be finite and non-negative, got {s}");
            }
            DefenseKind::Clip => {
                let m = self.max_norm.ok_or_else(|| Error::Config("clip defense needs max_norm".into()))?;
                ensure!(m > 0.0 && m.is_finite(), Config, "max_norm must be positive, got {m}");
            }
            DefenseKind::Compress => {
                let r = self.rate.ok_or_else(|| Error::Config("compress defense needs rate".into()))?;
                ensure!((0.0..1.0).contains(&r), Config, "rate must lie in [0,1), got {r}");
            }
            DefenseKind::None | DefenseKind::Spoofl => {}
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match self.parameter() {
            Some(p) => format!("{}={p}", self.kind.name()),
            None => self.kind.name().to_string(),
        }
    }
}

/// Adds seeded element-wise `N(0, sigma^2)` noise to the payload.
pub fn apply_noise(update: &ClientUpdate, sigma: f64, seed: u64) -> Result<ClientUpdate> {
    ensure!(sigma >= 0.0 && sigma.is_finite(), Precondition, "sigma must be finite and non-negative, got {sigma}");
    let mut out = update.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let mut r = rng::rng(seed);
    let noise = rng::normal_vec(out.payload.len(), 0.0, sigma, &mut r);
    for (v, e) in out.payload.values.iter_mut().zip(noise) {
        *v += e;
    }
    Ok(out)
}

/// Scales the payload down to global L2 norm `max_norm` if it exceeds it.
pub fn apply_clipping(update: &ClientUpdate, max_norm: f64) -> Result<ClientUpdate> {
    ensure!(max_norm > 0.0 && max_norm.is_finite(), Precondition, "max_norm must be positive, got {max_norm}");
    let mut out = update.clone();
    let norm = out.payload.norm();
    if norm > max_norm {
        let s = max_norm / norm;
        out.payload.values.iter_mut().for_each(|v| *v *= s);
    }
    Ok(out)
}

/// Zeroes the `floor(rate * d)` smallest-magnitude payload entries; among
/// equal magnitudes the lower flat index is zeroed first.
pub fn apply_compression(update: &ClientUpdate, rate: f64) -> Result<ClientUpdate> {
    ensure!((0.0..1.0).contains(&rate), Precondition, "rate must lie in [0,1), got {rate}");
    let mut out = update.clone();
    let d = out.payload.len();
    let drop = (rate * d as f64).floor() as usize;
    if drop == 0 {
        return Ok(out);
    }
    let mut idx: Vec<usize> = (0..d).collect();
    let vals = &out.payload.values;
    idx.sort_by(|&a, &b| vals[a].abs().total_cmp(&vals[b].abs()).then(a.cmp(&b)));
    for &i in &idx[..drop] {
        out.payload.values[i] = 0.0;
    }
    Ok(out)
}

/// Applies one update-space defense. `None` and `Spoofl` leave the update
/// untouched (the spoofing defense acts on the client's data instead).
pub fn apply(update: &ClientUpdate, cfg: &DefenseConfig, seed: u64) -> Result<ClientUpdate> {
    cfg.validate()?;
    match cfg.kind {
        DefenseKind::None | DefenseKind::Spoofl => Ok(update.clone()),
        DefenseKind::Noise => apply_noise(update, cfg.sigma.unwrap_or(0.0), seed),
        DefenseKind::Clip => apply_clipping(update, cfg.max_norm.unwrap_or(f64::INFINITY)),
        DefenseKind::Compress => apply_compression(update, cfg.rate.unwrap_or(0.0)),
    }
}

/// Applies several defenses in the fixed order compress → clip → noise.
pub fn apply_chain(update: &ClientUpdate, cfgs: &[DefenseConfig], seed: u64) -> Result<ClientUpdate> {
    let mut sorted: Vec<&DefenseConfig> = cfgs.iter().collect();
    sorted.sort_by_key(|c| c.kind.order());
    let mut out = update.clone();
    for (k, c) in sorted.into_iter().enumerate() {
        out = apply(&out, c, rng::derive_seed(seed, "defense-chain", k as u64))?;
    }
    Ok(out)
}

/// The client's training data under the spoofing defense: the generated
/// images with their private-space training labels. `shard` only fixes the
/// expected image shape and label space.
pub fn spoofl_substitute(shard: &LabeledDataset, spoof: &SpoofDataset) -> Result<LabeledDataset> {
    let ds = spoof.as_labeled()?;
    ensure!(
        ds.image_shape() == shard.image_shape(),
        Precondition,
        "spoof images {:?} do not match client images {:?}",
        ds.image_shape(),
        shard.image_shape()
    );
    ensure!(
        ds.num_classes == shard.num_classes,
        Precondition,
        "spoof set targets {} classes, client task has {}",
        ds.num_classes,
        shard.num_classes
    );
    Ok(ds)
}
