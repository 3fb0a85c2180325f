//! Dense row-major `f64` tensors and the numeric kernels behind the
//! autodiff tape.

use std::fmt;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, "{:?}", self.data)?;
        }
        Ok(())
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            numel(&shape),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(shape.to_vec(), vec![0.0; numel(shape)])
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::new(shape.to_vec(), vec![v; numel(shape)])
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(vec![], vec![v])
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(numel(shape), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::new(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn zip(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape, "elementwise shape mismatch");
        Self::new(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Selects rows `idx` along the leading axis.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let row = self.data.len() / self.shape[0].max(1);
        let mut data = Vec::with_capacity(row * idx.len());
        for &i in idx {
            data.extend_from_slice(&self.data[i * row..(i + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Self::new(shape, data)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let row = self.data.len() / self.shape[0].max(1);
        &self.data[i * row..(i + 1) * row]
    }
}

/// Geometry of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// Spatial size of the convolution input (the "large" side).
    pub in_h: usize,
    pub in_w: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", a.shape, b.shape);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub(crate) fn transpose(a: &Tensor) -> Tensor {
    let (m, n) = (a.shape[0], a.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

/// `y[n,o,i,j] = sum_{c,a,b} w[o,c,a,b] * x[n,c,i*s+a-p,j*s+b-p]`
pub(crate) fn conv2d(x: &Tensor, w: &Tensor, g: ConvGeom) -> Tensor {
    let (n, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (o, c2, k) = (w.shape[0], w.shape[1], w.shape[2]);
    assert_eq!(c, c2, "conv channel mismatch");
    assert_eq!((h, wd), (g.in_h, g.in_w), "conv input size mismatch");
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        for oi in 0..o {
            let obase = (ni * o + oi) * oh * ow;
            for ci in 0..c {
                let xbase = (ni * c + ci) * h * wd;
                let wbase = (oi * c + ci) * k * k;
                for a in 0..k {
                    for b in 0..k {
                        let wv = w.data[wbase + a * k + b];
                        for i in 0..oh {
                            let y = (i * g.stride + a) as isize - g.pad as isize;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            let xrow = xbase + y as usize * wd;
                            let orow = obase + i * ow;
                            for j in 0..ow {
                                let xx = (j * g.stride + b) as isize - g.pad as isize;
                                if xx < 0 || xx >= wd as isize {
                                    continue;
                                }
                                out[orow + j] += wv * x.data[xrow + xx as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, o, oh, ow], out)
}

/// Adjoint of [`conv2d`] in its input: maps `gy[n,o,oh,ow]` to `gx[n,c,h,w]`.
/// Also serves as the transposed convolution.
pub(crate) fn conv2d_input(gy: &Tensor, w: &Tensor, g: ConvGeom) -> Tensor {
    let (n, o, oh, ow) = (gy.shape[0], gy.shape[1], gy.shape[2], gy.shape[3]);
    let (o2, c, k) = (w.shape[0], w.shape[1], w.shape[2]);
    assert_eq!(o, o2, "conv transpose channel mismatch");
    assert_eq!((oh, ow), (g.out_h(), g.out_w()), "conv transpose size mismatch");
    let (h, wd) = (g.in_h, g.in_w);
    let mut out = vec![0.0; n * c * h * wd];
    for ni in 0..n {
        for oi in 0..o {
            let gbase = (ni * o + oi) * oh * ow;
            for ci in 0..c {
                let xbase = (ni * c + ci) * h * wd;
                let wbase = (oi * c + ci) * k * k;
                for a in 0..k {
                    for b in 0..k {
                        let wv = w.data[wbase + a * k + b];
                        for i in 0..oh {
                            let y = (i * g.stride + a) as isize - g.pad as isize;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            let xrow = xbase + y as usize * wd;
                            let grow = gbase + i * ow;
                            for j in 0..ow {
                                let xx = (j * g.stride + b) as isize - g.pad as isize;
                                if xx < 0 || xx >= wd as isize {
                                    continue;
                                }
                                out[xrow + xx as usize] += wv * gy.data[grow + j];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, c, h, wd], out)
}

/// Adjoint of [`conv2d`] in its weight: `gw[o,c,a,b] = sum gy[n,o,i,j] x[n,c,..]`.
pub(crate) fn conv2d_weight(x: &Tensor, gy: &Tensor, g: ConvGeom) -> Tensor {
    let (n, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (n2, o, oh, ow) = (gy.shape[0], gy.shape[1], gy.shape[2], gy.shape[3]);
    assert_eq!(n, n2);
    let k = g.kernel;
    let mut out = vec![0.0; o * c * k * k];
    for ni in 0..n {
        for oi in 0..o {
            let gbase = (ni * o + oi) * oh * ow;
            for ci in 0..c {
                let xbase = (ni * c + ci) * h * wd;
                let wbase = (oi * c + ci) * k * k;
                for a in 0..k {
                    for b in 0..k {
                        let mut acc = 0.0;
                        for i in 0..oh {
                            let y = (i * g.stride + a) as isize - g.pad as isize;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            let xrow = xbase + y as usize * wd;
                            let grow = gbase + i * ow;
                            for j in 0..ow {
                                let xx = (j * g.stride + b) as isize - g.pad as isize;
                                if xx < 0 || xx >= wd as isize {
                                    continue;
                                }
                                acc += gy.data[grow + j] * x.data[xrow + xx as usize];
                            }
                        }
                        out[wbase + a * k + b] += acc;
                    }
                }
            }
        }
    }
    Tensor::new(vec![o, c, k, k], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize], scale: f64) -> Tensor {
        let n = numel(shape);
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) * scale).collect(),
        )
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let b = Tensor::new(vec![3, 2], vec![7., 8., 9., 10., 11., 12.]);
        assert_eq!(matmul(&a, &b).data(), &[58., 64., 139., 154.]);
        assert_eq!(transpose(&a).data(), &[1., 4., 2., 5., 3., 6.]);
    }

    #[test]
    fn conv_adjoint_identities() {
        // <conv(x,w), gy> == <x, conv_input(gy,w)> == <w, conv_weight(x,gy)>
        for &(stride, pad) in &[(1, 0), (1, 1), (2, 1), (2, 0)] {
            let g = ConvGeom { kernel: 3, stride, pad, in_h: 7, in_w: 6 };
            let x = ramp(&[2, 3, 7, 6], 0.1);
            let w = ramp(&[4, 3, 3, 3], 0.07);
            let gy = ramp(&[2, 4, g.out_h(), g.out_w()], 0.13);
            let y = conv2d(&x, &w, g);
            let lhs = dot(&y, &gy);
            let via_x = dot(&x, &conv2d_input(&gy, &w, g));
            let via_w = dot(&w, &conv2d_weight(&x, &gy, g));
            assert!((lhs - via_x).abs() < 1e-9, "{lhs} vs {via_x}");
            assert!((lhs - via_w).abs() < 1e-9, "{lhs} vs {via_w}");
        }
    }

    #[test]
    fn conv_identity_kernel() {
        let g = ConvGeom { kernel: 1, stride: 1, pad: 0, in_h: 3, in_w: 3 };
        let x = ramp(&[1, 1, 3, 3], 1.0);
        let w = Tensor::new(vec![1, 1, 1, 1], vec![2.0]);
        assert_eq!(conv2d(&x, &w, g).data(), x.map(|v| 2.0 * v).data());
    }
}
