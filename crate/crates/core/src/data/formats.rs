//! On-disk source formats: IDX (MNIST family) and CIFAR-10 binary batches.

use std::io::Read;
use std::path::{Path, PathBuf};

use super::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const FASHION_NAMES: [&str; 10] =
    ["T-shirt/top", "Trouser", "Pullover", "Dress", "Coat", "Sandal", "Shirt", "Sneaker", "Bag", "Ankle boot"];
const CIFAR_NAMES: [&str; 10] =
    ["airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck"];

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let gz = PathBuf::from(format!("{}.gz", path.display()));
    if path.exists() {
        std::fs::read(path).map_err(|e| Error::io(path, e))
    } else if gz.exists() {
        let f = std::fs::File::open(&gz).map_err(|e| Error::io(&gz, e))?;
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(f).read_to_end(&mut out).map_err(|e| Error::io(&gz, e))?;
        Ok(out)
    } else {
        Err(Error::MissingFile(path.to_path_buf()))
    }
}

/// Parses an IDX file into `(dims, bytes)`. Only unsigned-byte payloads.
pub fn read_idx(bytes: &[u8], path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let bad = |reason: &str| Error::Format { path: path.to_path_buf(), reason: reason.to_string() };
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(bad("bad IDX magic"));
    }
    if bytes[2] != 0x08 {
        return Err(bad("only unsigned byte IDX payloads are supported"));
    }
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(bad("truncated IDX header"));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let count: usize = dims.iter().product();
    if bytes.len() != header + count {
        return Err(bad("IDX payload length does not match dimensions"));
    }
    Ok((dims, bytes[header..].to_vec()))
}

fn load_idx_pair(dir: &Path, prefix: &str, id: &str, names: Vec<String>) -> Result<LabeledDataset> {
    let ipath = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let lpath = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    let (idims, ibytes) = read_idx(&read_maybe_gz(&ipath)?, &ipath)?;
    let (ldims, lbytes) = read_idx(&read_maybe_gz(&lpath)?, &lpath)?;
    if idims.len() != 3 || ldims.len() != 1 || idims[0] != ldims[0] {
        return Err(Error::Format { path: ipath, reason: "image/label counts disagree".into() });
    }
    let images = Tensor::new(
        vec![idims[0], 1, idims[1], idims[2]],
        ibytes.iter().map(|&b| b as f64 / 255.0).collect(),
    );
    LabeledDataset::new(id, images, lbytes.iter().map(|&b| b as usize).collect(), names)
}

fn load_cifar(dir: &Path, split: Split) -> Result<LabeledDataset> {
    let files: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".to_string()],
    };
    const REC: usize = 1 + 3 * 32 * 32;
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for f in files {
        let path = dir.join(f);
        let bytes = read_maybe_gz(&path)?;
        if bytes.len() % REC != 0 {
            return Err(Error::Format { path, reason: "record size is not 3073 bytes".into() });
        }
        for rec in bytes.chunks_exact(REC) {
            labels.push(rec[0] as usize);
            pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
        }
    }
    let n = labels.len();
    LabeledDataset::new(
        format!("cifar10/{}", split.as_str()),
        Tensor::new(vec![n, 3, 32, 32], pixels),
        labels,
        CIFAR_NAMES.iter().map(|s| s.to_string()).collect(),
    )
}

pub(super) fn load_files(name: &str, split: Split, root: &Path) -> Result<LabeledDataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let id = format!("{name}/{}", split.as_str());
    match name {
        "mnist" => load_idx_pair(&root.join("mnist"), prefix, &id, (0..10).map(|d| d.to_string()).collect()),
        "fashion-mnist" => load_idx_pair(
            &root.join("fashion-mnist"),
            prefix,
            &id,
            FASHION_NAMES.iter().map(|s| s.to_string()).collect(),
        ),
        "cifar10" => load_cifar(&root.join("cifar-10-batches-bin"), split),
        other => Err(Error::UnknownDataset(other.to_string())),
    }
}

/// Resizes `[N,C,H,W]` to `out_h × out_w`: area averaging when shrinking,
/// bilinear interpolation when enlarging.
pub fn resize_batch(images: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let s = images.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in images.data().chunks_exact(h * w) {
        for i in 0..out_h {
            for j in 0..out_w {
                let v = if out_h <= h && out_w <= w {
                    area_sample(plane, h, w, i, j, out_h, out_w)
                } else {
                    bilinear_sample(plane, h, w, i, j, out_h, out_w)
                };
                out.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new(vec![n, c, out_h, out_w], out)
}

fn area_sample(p: &[f64], h: usize, w: usize, i: usize, j: usize, oh: usize, ow: usize) -> f64 {
    let (sy, sx) = (h as f64 / oh as f64, w as f64 / ow as f64);
    let (y0, y1) = (i as f64 * sy, (i + 1) as f64 * sy);
    let (x0, x1) = (j as f64 * sx, (j + 1) as f64 * sx);
    let mut acc = 0.0;
    for y in y0.floor() as usize..(y1.ceil() as usize).min(h) {
        let wy = (y1.min((y + 1) as f64) - y0.max(y as f64)).max(0.0);
        for x in x0.floor() as usize..(x1.ceil() as usize).min(w) {
            let wx = (x1.min((x + 1) as f64) - x0.max(x as f64)).max(0.0);
            acc += wy * wx * p[y * w + x];
        }
    }
    acc / (sy * sx)
}

fn bilinear_sample(p: &[f64], h: usize, w: usize, i: usize, j: usize, oh: usize, ow: usize) -> f64 {
    let fy = ((i as f64 + 0.5) * h as f64 / oh as f64 - 0.5).clamp(0.0, (h - 1) as f64);
    let fx = ((j as f64 + 0.5) * w as f64 / ow as f64 - 0.5).clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
    let top = p[y0 * w + x0] * (1.0 - tx) + p[y0 * w + x1] * tx;
    let bot = p[y1 * w + x0] * (1.0 - tx) + p[y1 * w + x1] * tx;
    top * (1.0 - ty) + bot * ty
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_bytes(dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut b = vec![0, 0, 0x08, dims.len() as u8];
        for d in dims {
            b.extend(d.to_be_bytes());
        }
        b.extend_from_slice(payload);
        b
    }

    #[test]
    fn idx_round_trip_through_files() {
        let dir = tempdir();
        let mnist = dir.join("mnist");
        std::fs::create_dir_all(&mnist).unwrap();
        let pixels: Vec<u8> = (0..2 * 3 * 3).map(|i| (i * 14) as u8).collect();
        std::fs::write(mnist.join("t10k-images-idx3-ubyte"), idx_bytes(&[2, 3, 3], &pixels)).unwrap();
        std::fs::write(mnist.join("t10k-labels-idx1-ubyte"), idx_bytes(&[2], &[7, 1])).unwrap();
        let ds = load_files("mnist", Split::Test, &dir).unwrap();
        assert_eq!(ds.labels, vec![7, 1]);
        assert_eq!(ds.image_shape(), [1, 3, 3]);
        assert!((ds.images.data()[1] - 14.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn idx_rejects_bad_lengths() {
        let p = Path::new("x");
        assert!(read_idx(&idx_bytes(&[2, 2], &[1, 2, 3]), p).is_err());
        assert!(read_idx(&[1, 2, 3], p).is_err());
    }

    #[test]
    fn resize_preserves_constant_and_mean() {
        let t = Tensor::full(&[1, 1, 28, 28], 0.25);
        let r = resize_batch(&t, 14, 14);
        assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
        let ramp = Tensor::new(vec![1, 1, 4, 4], (0..16).map(|i| i as f64 / 15.0).collect());
        let half = resize_batch(&ramp, 2, 2);
        assert!((half.sum() / 4.0 - ramp.sum() / 16.0).abs() < 1e-12);
        let up = resize_batch(&ramp, 8, 8);
        assert_eq!(up.shape(), &[1, 1, 8, 8]);
    }

    fn tempdir() -> PathBuf {
        let d = std::env::temp_dir().join(format!("spoofl-idx-{}", std::process::id()));
        std::fs::create_dir_all(&d).unwrap();
        d
    }
}
