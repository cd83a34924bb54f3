//! Forward and backward kernels on raw tensors. The autodiff graph records
//! these; they are also usable directly for inference.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major `m×k · k×n` product into a fresh buffer.
pub(crate) fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner dimensions disagree: {:?} · {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Tensor::new(vec![m, n], gemm(a.data(), b.data(), m, k, n))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (r, c) = a.dims2()?;
    Tensor::new(vec![c, r], transpose_raw(a.data(), r, c))
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(m: &Tensor) -> Result<Tensor> {
    let (_, c) = m.dims2()?;
    let mut out = m.data().to_vec();
    for row in out.chunks_mut(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::new(m.shape().to_vec(), out)
}

/// Backward of row softmax: `dx = y ∘ (g − Σ g∘y)` row by row.
pub(crate) fn softmax_rows_backward(y: &[f64], g: &[f64], cols: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for ((yr, gr), dr) in y.chunks(cols).zip(g.chunks(cols)).zip(dx.chunks_mut(cols)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
            *d = yv * (gv - dot);
        }
    }
    dx
}

/// Geometry of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernels: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (c, h, w) = match input {
            &[c, h, w] => (c, h, w),
            _ => {
                return Err(Error::Shape(format!(
                    "conv2d input must be C×H×W, got {input:?}"
                )))
            }
        };
        let (o, ci, kh, kw) = match kernels {
            &[o, ci, kh, kw] => (o, ci, kh, kw),
            _ => {
                return Err(Error::Shape(format!(
                    "conv2d kernels must be O×C×k×k, got {kernels:?}"
                )))
            }
        };
        if ci != c {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input {input:?}, kernels {kernels:?}"
            )));
        }
        if kh != kw {
            return Err(Error::Shape(format!(
                "conv2d kernels must be square, got {kernels:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be positive".into()));
        }
        if kh > h + 2 * padding || kh > w + 2 * padding {
            return Err(Error::Shape(format!(
                "kernel {kh}×{kh} larger than padded input {}×{} (input {input:?}, padding {padding})",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        Ok(Self {
            in_channels: c,
            height: h,
            width: w,
            out_channels: o,
            kernel: kh,
            stride,
            padding,
        })
    }

    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Calls `f(col_row, position, input_index)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow, k) = (self.out_height(), self.out_width(), self.kernel);
        for c in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            let src = (c * self.height + iy as usize) * self.width + ix as usize;
                            f(row, oy * ow + ox, src);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let p = self.positions();
        let mut cols = vec![0.0; self.patch_len() * p];
        self.for_each_tap(|row, pos, src| cols[row * p + pos] = input[src]);
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let p = self.positions();
        let mut out = vec![0.0; self.in_channels * self.height * self.width];
        self.for_each_tap(|row, pos, src| out[src] += cols[row * p + pos]);
        out
    }
}

/// Cross-correlation (no kernel flip) with optional per-output-channel bias.
pub fn conv2d(
    input: &Tensor,
    kernels: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let geo = ConvGeometry::new(input.shape(), kernels.shape(), stride, padding)?;
    if let Some(b) = bias {
        if b.numel() != geo.out_channels {
            return Err(Error::Shape(format!(
                "conv2d bias {:?} for {} output channels",
                b.shape(),
                geo.out_channels
            )));
        }
    }
    let p = geo.positions();
    let cols = geo.im2col(input.data());
    let mut out = gemm(kernels.data(), &cols, geo.out_channels, geo.patch_len(), p);
    if let Some(b) = bias {
        for (row, &bv) in out.chunks_mut(p).zip(b.data()) {
            row.iter_mut().for_each(|v| *v += bv);
        }
    }
    Tensor::new(
        vec![geo.out_channels, geo.out_height(), geo.out_width()],
        out,
    )
}

pub(crate) struct ConvGrads {
    pub input: Vec<f64>,
    pub kernels: Vec<f64>,
    pub bias: Vec<f64>,
}

pub(crate) fn conv2d_backward(
    geo: &ConvGeometry,
    input: &[f64],
    kernels: &[f64],
    grad_out: &[f64],
) -> ConvGrads {
    let p = geo.positions();
    let kl = geo.patch_len();
    let o = geo.out_channels;
    let cols = geo.im2col(input);
    let cols_t = transpose_raw(&cols, kl, p);
    let dk = gemm(grad_out, &cols_t, o, p, kl);
    let kt = transpose_raw(kernels, o, kl);
    let dcols = gemm(&kt, grad_out, kl, o, p);
    let dx = geo.col2im(&dcols);
    let db = grad_out.chunks(p).map(|row| row.iter().sum()).collect();
    ConvGrads {
        input: dx,
        kernels: dk,
        bias: db,
    }
}

/// 2×2 max pooling, stride 2. Returns the pooled map and, per output, the
/// flat index of the winning input (first maximum on ties).
pub fn max_pool2(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (c, h, w) = input.dims3()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "2×2 pooling needs even spatial size, got {:?}",
            input.shape()
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = usize::MAX;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let idx = (ch * h + 2 * oy + dy) * w + 2 * ox + dx;
                    if best == usize::MAX || x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![c, oh, ow], out)?, arg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let b = Tensor::matrix(&[&[3.0, 4.0], &[5.0, 6.0]]).unwrap();
        assert_eq!(matmul(&Tensor::eye(2), &b).unwrap(), b);
        let a = Tensor::matrix(&[&[1.0, 2.0]]).unwrap();
        let c = Tensor::matrix(&[&[3.0], &[4.0]]).unwrap();
        assert_eq!(matmul(&a, &c).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&[5, 4], &mut rng);
        let b = random(&[4, 3], &mut rng);
        let c = matmul(&a, &b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut s = 0.0;
                for p in 0..4 {
                    s += a.data()[i * 4 + p] * b.data()[p * 3 + j];
                }
                assert!((c.data()[i * 3 + j] - s).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3] · [2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_edge_rows() {
        let s = softmax_rows(&Tensor::zeros(&[1, 3])).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(
            softmax_rows(&Tensor::full(&[2, 1], 7.0)).unwrap().data(),
            &[1.0, 1.0]
        );
        // exp(-1000) underflows to exactly 0 against the shifted max.
        let big = softmax_rows(&Tensor::matrix(&[&[1000.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(big.data()[0], 1.0 / (1.0 + (-1000f64).exp()));
        assert!(big.data()[1] >= 0.0 && big.data()[1] < 1e-300);
    }

    #[test]
    fn conv_trivial_cases() {
        let x = Tensor::from_fn(&[1, 3, 3], |i| i as f64);
        let k = Tensor::full(&[1, 1, 1, 1], 2.0);
        let y = conv2d(&x, &k, None, 1, 0).unwrap();
        assert_eq!(
            y.data(),
            x.data().iter().map(|v| 2.0 * v).collect::<Vec<_>>()
        );

        let ones = Tensor::full(&[1, 3, 3], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&ones, &k, None, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0);
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[2, 8, 8], &mut rng);
        let k = random(&[4, 2, 3, 3], &mut rng);
        let b = random(&[4], &mut rng);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
            let y = conv2d(&x, &k, Some(&b), stride, pad).unwrap();
            let oh = (8 + 2 * pad - 3) / stride + 1;
            assert_eq!(y.shape(), &[4, oh, oh]);
            for o in 0..4 {
                for oy in 0..oh {
                    for ox in 0..oh {
                        let mut s = b.data()[o];
                        for c in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= 8 || ix >= 8 {
                                        continue;
                                    }
                                    s += k.data()[((o * 2 + c) * 3 + ky) * 3 + kx]
                                        * x.data()[(c * 8 + iy as usize) * 8 + ix as usize];
                                }
                            }
                        }
                        let got = y.data()[(o * oh + oy) * oh + ox];
                        assert!((got - s).abs() < 1e-13, "{got} vs {s}");
                    }
                }
            }
        }
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let x = Tensor::zeros(&[1, 2, 2]);
        let k = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(matches!(conv2d(&x, &k, None, 1, 0), Err(Error::Shape(_))));
        assert!(conv2d(&x, &k, None, 1, 1).is_ok());
    }

    #[test]
    fn max_pool_picks_window_maximum() {
        let x = Tensor::from_fn(&[1, 2, 4], |i| [1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 8.0, 1.0][i]);
        let (y, arg) = max_pool2(&x).unwrap();
        assert_eq!(y.data(), &[5.0, 8.0]);
        assert_eq!(arg, vec![1, 6]);
        assert!(max_pool2(&Tensor::zeros(&[1, 3, 4])).is_err());
    }
}
