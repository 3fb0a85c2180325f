//! Reconstruction and privacy metrics. All functions are pure.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::models::{softmax_confidences, Classifier};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
pub const PSNR_CAP_DB: f64 = 100.0;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PerSample {
    pub ssim: Vec<f64>,
    pub psnr_db: Vec<f64>,
    /// Softmax confidence of the private classifier on each sample's true class.
    pub true_class_confidence: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ssim: f64,
    pub psnr_db: f64,
    pub fmse: f64,
    pub lpips_like: f64,
    pub plc: f64,
    pub accuracy: Option<f64>,
    pub relative_execution_time: Option<f64>,
    pub per_sample: PerSample,
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    ensure!(a.shape() == b.shape(), Shape, "{:?} vs {:?}", a.shape(), b.shape());
    ensure!(a.shape().len() == 4, Shape, "expected [N,C,H,W] batches, got {:?}", a.shape());
    Ok(())
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable valid-region filtering of one `h × w` plane.
fn filter_valid(p: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..n).map(|t| k[t] * p[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..n).map(|t| k[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    (out, oh, ow)
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, k: &[f64]) -> f64 {
    let (c1, c2) = (K1 * K1, K2 * K2);
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let (mu_a, _, _) = filter_valid(a, h, w, k);
    let (mu_b, _, _) = filter_valid(b, h, w, k);
    let (saa, _, _) = filter_valid(&prod(a, a), h, w, k);
    let (sbb, _, _) = filter_valid(&prod(b, b), h, w, k);
    let (sab, _, _) = filter_valid(&prod(a, b), h, w, k);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = saa[i] - ma * ma;
        let vb = sbb[i] - mb * mb;
        let cov = sab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / n as f64
}

fn window_for(h: usize, w: usize) -> usize {
    let m = h.min(w);
    if m >= SSIM_WINDOW {
        SSIM_WINDOW
    } else {
        let fallback = if m % 2 == 1 { m } else { m - 1 };
        log::warn!("image {h}x{w} smaller than the SSIM window; using a {fallback}x{fallback} window");
        fallback.max(1)
    }
}

/// SSIM of every sample (channel-averaged).
pub fn ssim_per_sample(a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    same_shape(a, b)?;
    let s = a.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let k = gaussian_kernel(window_for(h, w), SSIM_SIGMA);
    let hw = h * w;
    Ok((0..n)
        .map(|i| {
            (0..c)
                .map(|ch| {
                    let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                    ssim_plane(&a.data()[r.clone()], &b.data()[r], h, w, &k)
                })
                .sum::<f64>()
                / c as f64
        })
        .collect())
}

/// Gaussian-window SSIM (window 11, sigma 1.5, data range 1), averaged over
/// channels and batch. Images smaller than the window use the largest odd
/// window that fits.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(mean(&ssim_per_sample(a, b)?))
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn psnr_per_sample(a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    same_shape(a, b)?;
    let per = a.len() / a.shape()[0].max(1);
    Ok(a.data()
        .chunks(per)
        .zip(b.data().chunks(per))
        .map(|(x, y)| {
            let mse = x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / per as f64;
            psnr_from_mse(mse)
        })
        .collect())
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

/// Mean per-sample PSNR in dB for data range 1, capped at 100 dB.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(mean(&psnr_per_sample(a, b)?))
}

/// Batch mean of the per-sample mean squared embedding difference.
pub fn fmse_embeddings(ea: &Tensor, eb: &Tensor) -> Result<f64> {
    ensure!(ea.shape() == eb.shape() && ea.shape().len() == 2, Shape, "{:?} vs {:?}", ea.shape(), eb.shape());
    let (n, d) = (ea.shape()[0], ea.shape()[1]);
    let per: Vec<f64> = (0..n)
        .map(|i| ea.row(i).iter().zip(eb.row(i)).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / d as f64)
        .collect();
    Ok(mean(&per))
}

/// Embedding-space MSE using the penultimate layer of `net`.
pub fn fmse(a: &Tensor, b: &Tensor, net: &Classifier) -> Result<f64> {
    same_shape(a, b)?;
    fmse_embeddings(&net.embeddings(a)?, &net.embeddings(b)?)
}

/// Divides every spatial feature vector of `[N,C,H,W]` by its channel norm.
fn unit_normalize(f: &Tensor) -> Tensor {
    let s = f.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let mut out = f.clone();
    for i in 0..n {
        for p in 0..hw {
            let norm = (0..c).map(|ch| f.data()[(i * c + ch) * hw + p].powi(2)).sum::<f64>().sqrt() + 1e-10;
            for ch in 0..c {
                out.data_mut()[(i * c + ch) * hw + p] /= norm;
            }
        }
    }
    out
}

/// Perceptual distance in the feature space of `net`: for every tapped
/// layer, the squared difference of channel-normalized feature vectors,
/// summed over channels and averaged over positions and batch; layers are
/// summed. Needs at least two tapped layers.
pub fn lpips_like(a: &Tensor, b: &Tensor, net: &Classifier) -> Result<f64> {
    same_shape(a, b)?;
    let fa = net.feature_maps(a)?;
    let fb = net.feature_maps(b)?;
    if fa.len() < 2 {
        return Err(Error::Precondition(format!(
            "{} exposes {} feature taps; lpips_like needs at least 2",
            net.spec.architecture,
            fa.len()
        )));
    }
    let mut total = 0.0;
    for (x, y) in fa.iter().zip(&fb) {
        let (x, y) = (unit_normalize(x), unit_normalize(y));
        let s = x.shape();
        let positions = (s[0] * s[2] * s[3]) as f64;
        total += x.data().iter().zip(y.data()).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / positions;
    }
    Ok(total)
}

/// `C/B * sum_i probs[i, y_i]` for a `[B, C]` probability matrix.
pub fn plc_from_probs(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    Ok(true_class_confidence(probs, labels)?.iter().sum::<f64>() * probs.shape()[1] as f64 / labels.len() as f64)
}

fn true_class_confidence(probs: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    ensure!(probs.shape().len() == 2, Shape, "expected a [B,C] matrix");
    let (b, c) = (probs.shape()[0], probs.shape()[1]);
    ensure!(b >= 1, Precondition, "PLC needs at least one sample");
    ensure!(labels.len() == b, Shape, "{} labels for {} samples", labels.len(), b);
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Precondition(format!("label {bad} outside {c} classes")));
    }
    Ok(labels.iter().enumerate().map(|(i, &y)| probs.data()[i * c + y]).collect())
}

/// Private Leakage Confidence of reconstructions under the private-task
/// classifier `f_private`: the class count times the mean confidence on the
/// true labels. 1.0 is chance; the class count is the maximum.
pub fn plc(recon: &Tensor, true_labels: &[usize], f_private: &Classifier, num_classes: usize) -> Result<f64> {
    ensure!(
        num_classes == f_private.spec.num_classes,
        Precondition,
        "class count {num_classes} does not match classifier head {}",
        f_private.spec.num_classes
    );
    plc_from_probs(&softmax_confidences(f_private, recon)?, true_labels)
}

pub fn relative_execution_time(defended_wall_s: f64, baseline_wall_s: f64) -> Result<f64> {
    ensure!(
        defended_wall_s > 0.0 && baseline_wall_s > 0.0,
        Precondition,
        "wall times must be positive ({defended_wall_s}, {baseline_wall_s})"
    );
    Ok(defended_wall_s / baseline_wall_s)
}

/// Median of a non-empty sample.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Pairs each reconstruction with a distinct ground-truth sample, greedily
/// taking the globally closest remaining pair by pixel MSE. Returns
/// `order` such that `recon[i]` is scored against `truth[order[i]]`.
pub fn align_to_truth(recon: &Tensor, truth: &Tensor) -> Result<Vec<usize>> {
    same_shape(recon, truth)?;
    let n = recon.shape()[0];
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let d = recon.row(i).iter().zip(truth.row(j)).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            pairs.push((d, i, j));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut order = vec![usize::MAX; n];
    let mut used = vec![false; n];
    for (_, i, j) in pairs {
        if order[i] == usize::MAX && !used[j] {
            order[i] = j;
            used[j] = true;
        }
    }
    Ok(order)
}

/// Scores reconstructions against ground truth: images are clamped to
/// `[0,1]` and aligned with [`align_to_truth`] first.
pub fn score_reconstruction(
    recon: &Tensor,
    truth: &Tensor,
    true_labels: &[usize],
    f_private: &Classifier,
) -> Result<MetricReport> {
    same_shape(recon, truth)?;
    ensure!(true_labels.len() == truth.shape()[0], Shape, "{} labels for {} images", true_labels.len(), truth.shape()[0]);
    let recon = recon.map(|v| v.clamp(0.0, 1.0));
    let order = align_to_truth(&recon, truth)?;
    let truth = truth.select_rows(&order);
    let labels: Vec<usize> = order.iter().map(|&j| true_labels[j]).collect();
    let ssim_s = ssim_per_sample(&recon, &truth)?;
    let psnr_s = psnr_per_sample(&recon, &truth)?;
    let probs = softmax_confidences(f_private, &recon)?;
    let conf = true_class_confidence(&probs, &labels)?;
    Ok(MetricReport {
        ssim: mean(&ssim_s),
        psnr_db: mean(&psnr_s),
        fmse: fmse(&recon, &truth, f_private)?,
        lpips_like: lpips_like(&recon, &truth, f_private)?,
        plc: mean(&conf) * f_private.spec.num_classes as f64,
        accuracy: None,
        relative_execution_time: None,
        per_sample: PerSample { ssim: ssim_s, psnr_db: psnr_s, true_class_confidence: conf },
    })
}

/// Separable Gaussian blur with edge clamping, per plane.
pub fn gaussian_blur(images: &Tensor, sigma: f64) -> Tensor {
    if sigma <= 0.0 {
        return images.clone();
    }
    let s = images.shape();
    let (h, w) = (s[2], s[3]);
    let radius = (3.0 * sigma).ceil() as isize;
    let k = gaussian_kernel(2 * radius as usize + 1, sigma);
    let mut out = images.clone();
    for plane in out.data_mut().chunks_mut(h * w) {
        let src = plane.to_vec();
        let mut tmp = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                tmp[i * w + j] = (-radius..=radius)
                    .map(|t| k[(t + radius) as usize] * src[i * w + (j as isize + t).clamp(0, w as isize - 1) as usize])
                    .sum();
            }
        }
        for i in 0..h {
            for j in 0..w {
                plane[i * w + j] = (-radius..=radius)
                    .map(|t| k[(t + radius) as usize] * tmp[(i as isize + t).clamp(0, h as isize - 1) as usize * w + j])
                    .sum();
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_dataset, Split};
    use crate::models::{build_classifier, Architecture, ClassifierSpec};
    use crate::rng;

    #[test]
    fn ssim_identity_and_constant_closed_form() {
        let ds = load_dataset("synth-digits", Split::Test, 28, Some(3)).unwrap();
        assert!((ssim(&ds.images, &ds.images).unwrap() - 1.0).abs() < 1e-12);
        let a = Tensor::full(&[1, 1, 16, 16], 0.2);
        let b = Tensor::full(&[1, 1, 16, 16], 0.4);
        let want = (2.0 * 0.08 + 1e-4) / (0.2 + 1e-4);
        assert!((ssim(&a, &b).unwrap() - want).abs() < 1e-12);
        assert!(ssim(&a, &Tensor::zeros(&[1, 1, 8, 8])).is_err());
    }

    #[test]
    fn ssim_small_image_falls_back() {
        let a = Tensor::full(&[1, 1, 6, 6], 0.3);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_cases() {
        let z = Tensor::zeros(&[2, 1, 4, 4]);
        assert_eq!(psnr(&z, &z).unwrap(), 100.0);
        assert!((psnr(&z, &Tensor::full(&[2, 1, 4, 4], 0.1)).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&z, &Tensor::full(&[2, 1, 4, 4], 1.0)).unwrap().abs() < 1e-12);
    }

    #[test]
    fn plc_cases() {
        for (b, c) in [(1, 2), (8, 10), (64, 10)] {
            let probs = Tensor::full(&[b, c], 1.0 / c as f64);
            let labels: Vec<usize> = (0..b).map(|i| (i * 7) % c).collect();
            assert!((plc_from_probs(&probs, &labels).unwrap() - 1.0).abs() < 1e-12);
        }
        let onehot = crate::models::one_hot(&[2, 0], 3);
        assert_eq!(plc_from_probs(&onehot, &[2, 0]).unwrap(), 3.0);
        let p = Tensor::new(vec![2, 3], vec![0.5, 0.25, 0.25, 0.05, 0.05, 0.9]);
        assert!((plc_from_probs(&p, &[0, 2]).unwrap() - 2.1).abs() < 1e-12);
        assert!(plc_from_probs(&p, &[0, 3]).is_err());
    }

    #[test]
    fn ret_cases() {
        assert_eq!(relative_execution_time(3.0, 3.0).unwrap(), 1.0);
        assert_eq!(relative_execution_time(4.0, 2.0).unwrap(), 2.0);
        assert!(relative_execution_time(0.0, 2.0).is_err());
    }

    #[test]
    fn fmse_matches_hand_formula() {
        let ea = Tensor::new(vec![2, 2], vec![1.0, 2.0, 0.0, 0.0]);
        let eb = Tensor::new(vec![2, 2], vec![1.0, 0.0, 3.0, 1.0]);
        // sample 0: (0 + 4)/2 = 2; sample 1: (9 + 1)/2 = 5; mean 3.5
        assert!((fmse_embeddings(&ea, &eb).unwrap() - 3.5).abs() < 1e-12);
    }

    fn feature_net() -> Classifier {
        build_classifier(&ClassifierSpec::new(Architecture::ConvnetSmall, [1, 28, 28], 10), 4).unwrap()
    }

    #[test]
    fn feature_metrics_are_zero_on_identity_and_symmetric() {
        let net = feature_net();
        let ds = load_dataset("synth-digits", Split::Test, 28, Some(6)).unwrap();
        let a = ds.images.select_rows(&[0, 1, 2]);
        let b = ds.images.select_rows(&[3, 4, 5]);
        assert_eq!(fmse(&a, &a, &net).unwrap(), 0.0);
        assert_eq!(lpips_like(&a, &a, &net).unwrap(), 0.0);
        assert!((fmse(&a, &b, &net).unwrap() - fmse(&b, &a, &net).unwrap()).abs() < 1e-12);
        let d = lpips_like(&a, &b, &net).unwrap();
        assert!(d > 0.0 && (d - lpips_like(&b, &a, &net).unwrap()).abs() < 1e-12);
        let mlp = build_classifier(&ClassifierSpec::new(Architecture::Mlp2, [1, 28, 28], 10), 0).unwrap();
        assert!(lpips_like(&a, &b, &mlp).is_err());
    }

    #[test]
    fn lpips_like_grows_with_blur() {
        let net = feature_net();
        let a = load_dataset("synth-digits", Split::Test, 28, Some(4)).unwrap().images;
        let d: Vec<f64> =
            [0.5, 1.0, 1.5, 2.0, 3.0].iter().map(|&s| lpips_like(&a, &gaussian_blur(&a, s), &net).unwrap()).collect();
        assert!(d.windows(2).all(|w| w[1] > w[0]), "{d:?}");
    }

    #[test]
    fn alignment_recovers_permutation() {
        let ds = load_dataset("synth-digits", Split::Test, 12, Some(5)).unwrap();
        let perm = [3, 0, 4, 1, 2];
        let shuffled = ds.images.select_rows(&perm);
        assert_eq!(align_to_truth(&shuffled, &ds.images).unwrap(), perm.to_vec());
    }

    /// Direct (non-separable) Gaussian-window SSIM used as an oracle.
    fn reference_ssim(a: &Tensor, b: &Tensor) -> f64 {
        let s = a.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let win = 11usize;
        let g: Vec<f64> = (0..win).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
        let gs: f64 = g.iter().sum();
        let mut total = 0.0;
        for plane in 0..n * c {
            let pa = &a.data()[plane * h * w..(plane + 1) * h * w];
            let pb = &b.data()[plane * h * w..(plane + 1) * h * w];
            let mut acc = 0.0;
            let mut count = 0;
            for i in 0..=h - win {
                for j in 0..=w - win {
                    let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for u in 0..win {
                        for v in 0..win {
                            let wt = g[u] * g[v] / (gs * gs);
                            let (x, y) = (pa[(i + u) * w + j + v], pb[(i + u) * w + j + v]);
                            ma += wt * x;
                            mb += wt * y;
                            saa += wt * x * x;
                            sbb += wt * y * y;
                            sab += wt * x * y;
                        }
                    }
                    let (va, vb, cv) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                    acc += (2.0 * ma * mb + 1e-4) * (2.0 * cv + 9e-4) / ((ma * ma + mb * mb + 1e-4) * (va + vb + 9e-4));
                    count += 1;
                }
            }
            total += acc / count as f64;
        }
        total / (n * c) as f64
    }

    #[test]
    fn ssim_and_psnr_match_reference() {
        let mut r = rng::rng(99);
        use rand::Rng as _;
        for k in 0..20 {
            let shape = if k % 2 == 0 { [1, 1, 16, 16] } else { [1, 3, 14, 12] };
            let n: usize = shape.iter().product();
            let a = Tensor::new(shape.to_vec(), (0..n).map(|_| r.random::<f64>()).collect());
            let b = Tensor::new(shape.to_vec(), a.data().iter().map(|&x| (x + 0.3 * r.random::<f64>()).min(1.0)).collect());
            assert!((ssim(&a, &b).unwrap() - reference_ssim(&a, &b)).abs() < 1e-6);
            assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-9);
            let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n as f64;
            assert!((psnr(&a, &b).unwrap() - 10.0 * (1.0 / mse).log10()).abs() < 1e-6);
        }
    }
}
