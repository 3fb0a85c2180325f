//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Each exported function has a plain Rust counterpart so the logic is
//! tested natively.

use spoofl_core::attacks::{attack_dlg, AttackConfig, AttackMethod};
use spoofl_core::data::{load_dataset, LabeledDataset, Split};
use spoofl_core::defenses::{self, DefenseConfig};
use spoofl_core::flsim::{client_local_update, FLConfig, Protocol};
use spoofl_core::metrics::{psnr, ssim};
use spoofl_core::models::{build_classifier, Architecture, ClassifierSpec};
use spoofl_core::tensor::Tensor;
use wasm_bindgen::prelude::*;

/// Samples shown in the picker.
pub const GALLERY: usize = 16;
/// Side length of demo images.
pub const RESOLUTION: usize = 12;

fn gallery() -> spoofl_core::Result<LabeledDataset> {
    load_dataset("synth-digits", Split::Test, RESOLUTION, Some(GALLERY))
}

/// Pixels of the first `GALLERY` synthetic test digits, row-major, one image
/// after another.
pub fn gallery_pixels() -> Result<Vec<f64>, String> {
    Ok(gallery().map_err(|e| e.to_string())?.images.into_data())
}

pub fn gallery_labels() -> Result<Vec<u32>, String> {
    Ok(gallery().map_err(|e| e.to_string())?.labels.iter().map(|&l| l as u32).collect())
}

pub fn defense_config(kind: &str, param: f64) -> Result<DefenseConfig, String> {
    let cfg = match kind {
        "none" => DefenseConfig::none(),
        "noise" => DefenseConfig::noise(param),
        "clip" => DefenseConfig::clip(param),
        "compress" => DefenseConfig::compress(param),
        other => return Err(format!("unknown defense `{other}`")),
    };
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

/// Outcome of attacking one defended single-image gradient.
#[wasm_bindgen]
#[derive(Clone, Debug)]
pub struct AttackOutcome {
    recon: Vec<f64>,
    truth: Vec<f64>,
    pub label: u32,
    pub inferred_label: u32,
    pub ssim: f64,
    pub psnr_db: f64,
    pub matching_loss: f64,
    pub update_norm: f64,
}

#[wasm_bindgen]
impl AttackOutcome {
    pub fn recon(&self) -> Vec<f64> {
        self.recon.clone()
    }

    pub fn truth(&self) -> Vec<f64> {
        self.truth.clone()
    }
}

/// Computes the FedSGD gradient of an untrained `mlp2` on gallery image
/// `index`, applies the defense, and runs `dlg` for `iterations` steps.
pub fn attack_image(index: usize, kind: &str, param: f64, iterations: usize, seed: u64) -> Result<AttackOutcome, String> {
    let err = |e: spoofl_core::Error| e.to_string();
    let ds = gallery().map_err(err)?;
    if index >= ds.len() {
        return Err(format!("index {index} is outside the gallery of {}", ds.len()));
    }
    let one = ds.subset(&[index]);
    let model = build_classifier(&ClassifierSpec::for_dataset(Architecture::Mlp2, &one), seed).map_err(err)?;
    let fl = FLConfig { protocol: Protocol::Fedsgd, local_steps: 1, batch_size: 1, ..FLConfig::default() };
    let run = client_local_update(&model, &one, &fl, 0, 0, seed).map_err(err)?;
    let defended = defenses::apply(&run.update, &defense_config(kind, param)?, seed).map_err(err)?;
    let cfg = AttackConfig { iterations, seed, ..AttackConfig::desk(AttackMethod::Dlg) };
    let r = attack_dlg(&defended, &model, &cfg).map_err(err)?;
    Ok(AttackOutcome {
        ssim: ssim(&r.images, &one.images).map_err(err)?,
        psnr_db: psnr(&r.images, &one.images).map_err(err)?,
        label: one.labels[0] as u32,
        inferred_label: r.inferred_labels.as_ref().and_then(|l| l.first()).map_or(u32::MAX, |&l| l as u32),
        matching_loss: r.final_matching_loss,
        update_norm: defended.payload.norm(),
        recon: r.images.into_data(),
        truth: one.images.into_data(),
    })
}

/// SSIM and PSNR (dB) between two single-channel square images.
pub fn similarity(a: &[f64], b: &[f64]) -> Result<[f64; 2], String> {
    let side = (a.len() as f64).sqrt() as usize;
    if a.is_empty() || side * side != a.len() || a.len() != b.len() {
        return Err("images must be equal-sized squares".into());
    }
    let ta = Tensor::new(vec![1, 1, side, side], a.to_vec());
    let tb = Tensor::new(vec![1, 1, side, side], b.to_vec());
    Ok([ssim(&ta, &tb).map_err(|e| e.to_string())?, psnr(&ta, &tb).map_err(|e| e.to_string())?])
}

#[wasm_bindgen(js_name = galleryPixels)]
pub fn js_gallery_pixels() -> Result<Vec<f64>, JsError> {
    gallery_pixels().map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = galleryLabels)]
pub fn js_gallery_labels() -> Result<Vec<u32>, JsError> {
    gallery_labels().map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = resolution)]
pub fn js_resolution() -> usize {
    RESOLUTION
}

#[wasm_bindgen(js_name = attackImage)]
pub fn js_attack_image(index: usize, defense: &str, param: f64, iterations: usize, seed: u64) -> Result<AttackOutcome, JsError> {
    attack_image(index, defense, param, iterations, seed).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = similarity)]
pub fn js_similarity(a: &[f64], b: &[f64]) -> Result<Vec<f64>, JsError> {
    similarity(a, b).map(|v| v.to_vec()).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gallery_shape() {
        assert_eq!(gallery_pixels().unwrap().len(), GALLERY * RESOLUTION * RESOLUTION);
        assert!(gallery_labels().unwrap().iter().all(|&l| l < 10));
    }

    #[test]
    fn identical_images_score_one() {
        let px = &gallery_pixels().unwrap()[..RESOLUTION * RESOLUTION];
        let [s, p] = similarity(px, px).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(p >= 99.0);
        assert!(similarity(px, &px[1..]).is_err());
    }

    #[test]
    fn undefended_attack_recovers_the_digit() {
        let out = attack_image(3, "none", 0.0, 300, 0).unwrap();
        assert_eq!(out.inferred_label, out.label);
        assert!(out.ssim > 0.9, "ssim {}", out.ssim);
    }

    #[test]
    fn heavy_noise_degrades_the_attack() {
        let clean = attack_image(3, "none", 0.0, 300, 0).unwrap();
        let noisy = attack_image(3, "noise", 0.1, 300, 0).unwrap();
        assert!(noisy.ssim < clean.ssim);
    }

    #[test]
    fn bad_defense_is_rejected() {
        assert!(attack_image(0, "shuffle", 0.0, 10, 0).is_err());
        assert!(defense_config("compress", 1.5).is_err());
    }
}
