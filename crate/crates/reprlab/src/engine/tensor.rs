//! Dense row-major tensors, 64-bit, with the handful of raw kernels the
//! autodiff graph needs (matmul and the convolution family).
//!
//! Convolutions come as a closed triple: the forward correlation, its
//! adjoint with respect to the input, and its adjoint with respect to the
//! kernel. Each member of the triple is bilinear in its two tensor
//! arguments, and the derivative of any member lands back inside the
//! triple. That closure is what makes second-order paths (the WGAN-GP
//! gradient penalty) work without any special casing.

use crate::error::{Error, Result};

/// Contiguous dense array. `data.len() == shape.iter().product()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len(), "shape {:?} wants {} values, got {}", shape, n, data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Sole element of a `[1]`-shaped tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Tensor {
        Tensor::new(shape, self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip(&self, other: &Tensor, mut f: impl FnMut(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip shape mismatch {:?} vs {:?}", self.shape, other.shape);
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Tensor { shape: self.shape.clone(), data }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Euclidean norm of the flattened tensor.
    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Index of the maximum along the last axis of a 1-D or row of a 2-D
    /// tensor; ties break to the lowest index. Not differentiable, hence a
    /// plain tensor utility rather than a graph operation.
    pub fn argmax_row(&self, row: usize) -> usize {
        let cols = *self.shape.last().expect("argmax on 0-d tensor");
        let start = row * cols;
        let mut best = 0usize;
        let mut best_v = self.data[start];
        for c in 1..cols {
            let v = self.data[start + c];
            if v > best_v {
                best_v = v;
                best = c;
            }
        }
        best
    }

    pub fn max_row(&self, row: usize) -> f64 {
        let cols = *self.shape.last().expect("max on 0-d tensor");
        let start = row * cols;
        self.data[start..start + cols].iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn check_finite(&self, at: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::numeric(at, "non-finite value in tensor".to_string()))
        }
    }
}

/// `[n,k] x [k,m] -> [n,m]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = (a.shape()[0], a.shape()[1]);
    let (k2, m) = (b.shape()[0], b.shape()[1]);
    assert_eq!(k, k2, "matmul inner dims {} vs {}", k, k2);
    let mut out = vec![0.0; n * m];
    let ad = a.data();
    let bd = b.data();
    for i in 0..n {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![n, m], out)
}

pub fn transpose2(a: &Tensor) -> Tensor {
    let (n, m) = (a.shape()[0], a.shape()[1]);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a.data()[i * m + j];
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Geometry of one convolution: stride and zero padding per spatial axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl ConvGeom {
    pub fn out_hw(&self, in_hw: (usize, usize), k_hw: (usize, usize)) -> (usize, usize) {
        let h = (in_hw.0 + 2 * self.pad.0 - k_hw.0) / self.stride.0 + 1;
        let w = (in_hw.1 + 2 * self.pad.1 - k_hw.1) / self.stride.1 + 1;
        (h, w)
    }
}

/// Patch matrix for im2col convolution: rows indexed by (batch, oy, ox),
/// columns by (ci, ky, kx); out-of-bounds taps are zero.
fn im2col(x: &Tensor, g: ConvGeom, k_hw: (usize, usize), out_hw: (usize, usize)) -> Vec<f64> {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kh, kw) = k_hw;
    let (ho, wo) = out_hw;
    let cols = ci * kh * kw;
    let mut patches = vec![0.0; n * ho * wo * cols];
    let xd = x.data();
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * cols;
                for icc in 0..ci {
                    for ky in 0..kh {
                        let iy = (oy * g.stride.0 + ky) as isize - g.pad.0 as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xbase = ((b * ci + icc) * h + iy as usize) * wd;
                        let pbase = row + (icc * kh + ky) * kw;
                        let ix0 = ox as isize * g.stride.1 as isize - g.pad.1 as isize;
                        for kx in 0..kw {
                            let ix = ix0 + kx as isize;
                            if ix >= 0 && ix < wd as isize {
                                patches[pbase + kx] = xd[xbase + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    patches
}

/// Scatter-add the adjoint of [`im2col`] back onto the input layout.
fn col2im(gpatches: &[f64], g: ConvGeom, k_hw: (usize, usize), out_hw: (usize, usize), x_shape: (usize, usize, usize, usize)) -> Vec<f64> {
    let (n, ci, h, wd) = x_shape;
    let (kh, kw) = k_hw;
    let (ho, wo) = out_hw;
    let cols = ci * kh * kw;
    let mut out = vec![0.0; n * ci * h * wd];
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * cols;
                for icc in 0..ci {
                    for ky in 0..kh {
                        let iy = (oy * g.stride.0 + ky) as isize - g.pad.0 as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let obase = ((b * ci + icc) * h + iy as usize) * wd;
                        let pbase = row + (icc * kh + ky) * kw;
                        let ix0 = ox as isize * g.stride.1 as isize - g.pad.1 as isize;
                        for kx in 0..kw {
                            let ix = ix0 + kx as isize;
                            if ix >= 0 && ix < wd as isize {
                                out[obase + ix as usize] += gpatches[pbase + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// `[rows,k] x [k,cols]^T-free` product on raw slices: out[r,c] += a[r,:] . b[c,:]
fn matmul_nt(a: &[f64], b: &[f64], rows: usize, k: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let arow = &a[r * k..(r + 1) * k];
        let orow = &mut out[r * cols..(r + 1) * cols];
        for (c, o) in orow.iter_mut().enumerate() {
            let brow = &b[c * k..(c + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            *o = acc;
        }
    }
    out
}

/// out[r,c] += sum_j a[j,r] * b[j,c] (a transposed), raw slices.
fn matmul_tn(a: &[f64], b: &[f64], j: usize, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for jj in 0..j {
        let arow = &a[jj * rows..(jj + 1) * rows];
        let brow = &b[jj * cols..(jj + 1) * cols];
        for (r, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[r * cols..(r + 1) * cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Correlation forward: x `[N,Ci,H,W]`, w `[Co,Ci,kh,kw]` -> `[N,Co,Ho,Wo]`.
pub fn conv_fwd(x: &Tensor, w: &Tensor, g: ConvGeom) -> Tensor {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, ci2, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(ci, ci2, "conv channel mismatch {} vs {}", ci, ci2);
    let (ho, wo) = g.out_hw((h, wd), (kh, kw));
    let cols = ci * kh * kw;
    let patches = im2col(x, g, (kh, kw), (ho, wo));
    // rows = N*Ho*Wo, product against w rows [Co, cols].
    let flat = matmul_nt(&patches, w.data(), n * ho * wo, cols, co);
    // Reorder [N*Ho*Wo, Co] -> [N, Co, Ho, Wo].
    let mut out = vec![0.0; n * co * ho * wo];
    for b in 0..n {
        for p in 0..ho * wo {
            let src = ((b * ho * wo) + p) * co;
            for oc in 0..co {
                out[(b * co + oc) * ho * wo + p] = flat[src + oc];
            }
        }
    }
    Tensor::new(vec![n, co, ho, wo], out)
}

/// Adjoint of `conv_fwd` w.r.t. its input: gy `[N,Co,Ho,Wo]`, w
/// `[Co,Ci,kh,kw]` -> `[N,Ci,H,W]` for the given target spatial size.
/// This is also the forward pass of a transposed convolution.
pub fn conv_grad_input(gy: &Tensor, w: &Tensor, g: ConvGeom, out_hw: (usize, usize)) -> Tensor {
    let (n, co, ho, wo) = (gy.shape()[0], gy.shape()[1], gy.shape()[2], gy.shape()[3]);
    let (co2, ci, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(co, co2, "conv_grad_input channel mismatch {} vs {}", co, co2);
    let (h, wd) = out_hw;
    // gy reordered to rows [N*Ho*Wo, Co].
    let mut grows = vec![0.0; n * ho * wo * co];
    let gd = gy.data();
    for b in 0..n {
        for oc in 0..co {
            for p in 0..ho * wo {
                grows[(b * ho * wo + p) * co + oc] = gd[(b * co + oc) * ho * wo + p];
            }
        }
    }
    // gpatches [N*Ho*Wo, cols] = grows [rows, Co] @ w [Co, cols].
    let cols = ci * kh * kw;
    let mut gpatches = vec![0.0; n * ho * wo * cols];
    let wdt = w.data();
    for r in 0..n * ho * wo {
        let grow = &grows[r * co..(r + 1) * co];
        let prow = &mut gpatches[r * cols..(r + 1) * cols];
        for (oc, &gv) in grow.iter().enumerate() {
            if gv == 0.0 {
                continue;
            }
            let wrow = &wdt[oc * cols..(oc + 1) * cols];
            for (o, &wv) in prow.iter_mut().zip(wrow) {
                *o += gv * wv;
            }
        }
    }
    let out = col2im(&gpatches, g, (kh, kw), (ho, wo), (n, ci, h, wd));
    Tensor::new(vec![n, ci, h, wd], out)
}

/// Adjoint of `conv_fwd` w.r.t. its kernel: x `[N,Ci,H,W]`, gy
/// `[N,Co,Ho,Wo]` -> `[Co,Ci,kh,kw]`.
pub fn conv_grad_kernel(x: &Tensor, gy: &Tensor, g: ConvGeom, k_hw: (usize, usize)) -> Tensor {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (n2, co, ho, wo) = (gy.shape()[0], gy.shape()[1], gy.shape()[2], gy.shape()[3]);
    assert_eq!(n, n2, "conv_grad_kernel batch mismatch {} vs {}", n, n2);
    let _ = (h, wd);
    let (kh, kw) = k_hw;
    let (hc, wc) = g.out_hw((h, wd), (kh, kw));
    assert_eq!((hc, wc), (ho, wo), "gy spatial size inconsistent with geometry");
    let cols = ci * kh * kw;
    let patches = im2col(x, g, (kh, kw), (ho, wo));
    // gy reordered to rows [N*Ho*Wo, Co].
    let mut grows = vec![0.0; n * ho * wo * co];
    let gd = gy.data();
    for b in 0..n {
        for oc in 0..co {
            for p in 0..ho * wo {
                grows[(b * ho * wo + p) * co + oc] = gd[(b * co + oc) * ho * wo + p];
            }
        }
    }
    // gw [Co, cols] = grows^T [Co, rows] @ patches [rows, cols].
    let out = matmul_tn(&grows, &patches, n * ho * wo, co, cols);
    Tensor::new(vec![co, ci, kh, kw], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::new(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = matmul(&a, &b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        // 1x1 kernel with weight 1 reproduces the input.
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let w = Tensor::new(vec![1, 1, 1, 1], vec![1.0]);
        let y = conv_fwd(&x, &w, ConvGeom { stride: (1, 1), pad: (0, 0) });
        assert_eq!(y.data(), x.data());
    }

    /// <gy, conv(x,w)> == <conv_grad_input(gy,w), x> == <conv_grad_kernel(x,gy), w>
    /// (the defining adjoint identities), checked on random instances.
    #[test]
    fn conv_adjoint_identities() {
        use rand::Rng as _;
        let mut rng = crate::rng::SeedStream::new(3).rng();
        for &(stride, pad) in &[(1usize, 0usize), (2, 1), (2, 0), (1, 1)] {
            let g = ConvGeom { stride: (stride, stride), pad: (pad, pad) };
            let (n, ci, co, h, w, k) = (2, 3, 4, 5, 6, 3);
            let x = Tensor::new(vec![n, ci, h, w], (0..n * ci * h * w).map(|_| rng.random_range(-1.0..1.0)).collect());
            let ker = Tensor::new(vec![co, ci, k, k], (0..co * ci * k * k).map(|_| rng.random_range(-1.0..1.0)).collect());
            let y = conv_fwd(&x, &ker, g);
            let gy = Tensor::new(y.shape().to_vec(), (0..y.numel()).map(|_| rng.random_range(-1.0..1.0)).collect());

            let dot = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(u, v)| u * v).sum::<f64>();
            let lhs = dot(&gy, &y);
            let gx = conv_grad_input(&gy, &ker, g, (h, w));
            let gw = conv_grad_kernel(&x, &gy, g, (k, k));
            assert!((lhs - dot(&gx, &x)).abs() < 1e-10, "input adjoint broken at {:?}", g);
            assert!((lhs - dot(&gw, &ker)).abs() < 1e-10, "kernel adjoint broken at {:?}", g);
        }
    }
}
