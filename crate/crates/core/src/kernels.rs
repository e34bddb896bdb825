//! Forward and backward kernels on plain tensors.
//!
//! The recorded graph in [`crate::autodiff`] calls into these; they are also
//! usable directly when no gradient is needed. Convolutions unfold their input
//! (im2col) and run as a single-threaded matrix product, so results are
//! bit-reproducible.

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

/// Geometry of a stride-1 convolution, validated once.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    pub fn new(input: &Tensor, kernel: &Tensor, bias: &Tensor, pad: usize) -> Result<Self> {
        let (cin, h, w) = input.dims3()?;
        let [cout, kcin, k, k2] = kernel.shape()[..] else {
            return Err(Error::dim(
                "conv2d",
                format!("kernel must be [Cout,Cin,k,k], got {:?}", kernel.shape()),
            ));
        };
        ensure!(
            k == k2 && k % 2 == 1,
            Error::dim(
                "conv2d",
                format!("kernel must be square with odd size, got {k}x{k2}")
            )
        );
        ensure!(
            kcin == cin,
            Error::dim(
                "conv2d",
                format!(
                    "input {:?} has {cin} channels but kernel {:?} expects {kcin}",
                    input.shape(),
                    kernel.shape()
                )
            )
        );
        ensure!(
            bias.shape() == [cout],
            Error::dim(
                "conv2d",
                format!("bias {:?} does not match {cout} output channels", bias.shape())
            )
        );
        ensure!(
            h + 2 * pad >= k && w + 2 * pad >= k,
            Error::dim(
                "conv2d",
                format!(
                    "input {:?} with pad {pad} is smaller than kernel {k}",
                    input.shape()
                )
            )
        );
        Ok(Self {
            cin,
            cout,
            h,
            w,
            k,
            pad,
            oh: h + 2 * pad - k + 1,
            ow: w + 2 * pad - k + 1,
        })
    }

    /// Output columns `ox` whose tap `kx` lands inside the input row.
    #[inline]
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx);
        let hi = (self.w + self.pad).saturating_sub(kx).min(self.ow);
        (lo, hi.max(lo))
    }

    #[inline]
    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy + ky).checked_sub(self.pad)?;
        (iy < self.h).then_some(iy)
    }
}

/// Cross-correlation of `input [Cin,H,W]` with `kernel [Cout,Cin,k,k]` plus bias.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor, pad: usize) -> Result<Tensor> {
    let d = ConvDims::new(input, kernel, bias, pad)?;
    Ok(conv2d_forward(&d, input, kernel, bias))
}

/// Upper bound on the im2col buffer, in values.
const COLS_BUDGET: usize = 1 << 20;

impl ConvDims {
    fn taps(&self) -> usize {
        self.cin * self.k * self.k
    }

    /// Output-row blocks whose unfolded input fits in [`COLS_BUDGET`].
    fn row_blocks(&self) -> impl Iterator<Item = (usize, usize)> {
        let per_row = (self.taps() * self.ow).max(1);
        let step = (COLS_BUDGET / per_row).clamp(1, self.oh);
        let oh = self.oh;
        (0..oh).step_by(step).map(move |y0| (y0, (y0 + step).min(oh)))
    }

    /// Unfolds input rows feeding output rows `y0..y1` into `[taps, rows*ow]`.
    fn im2col(&self, x: &[f64], y0: usize, y1: usize, cols: &mut Vec<f64>) {
        let n = (y1 - y0) * self.ow;
        cols.clear();
        cols.resize(self.taps() * n, 0.0);
        for ci in 0..self.cin {
            let src = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let r = (ci * self.k + ky) * self.k + kx;
                    let dst = &mut cols[r * n..(r + 1) * n];
                    let (lo, hi) = self.col_range(kx);
                    for oy in y0..y1 {
                        let Some(iy) = self.in_row(oy, ky) else { continue };
                        let o = (oy - y0) * self.ow;
                        let (a, b) = (iy * self.w + lo + kx - self.pad, iy * self.w + hi + kx - self.pad);
                        dst[o + lo..o + hi].copy_from_slice(&src[a..b]);
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvDims::im2col`]: scatters `[taps, rows*ow]` back onto the input.
    fn col2im(&self, cols: &[f64], y0: usize, y1: usize, gx: &mut [f64]) {
        let n = (y1 - y0) * self.ow;
        for ci in 0..self.cin {
            let dst = &mut gx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let r = (ci * self.k + ky) * self.k + kx;
                    let src = &cols[r * n..(r + 1) * n];
                    let (lo, hi) = self.col_range(kx);
                    for oy in y0..y1 {
                        let Some(iy) = self.in_row(oy, ky) else { continue };
                        let o = (oy - y0) * self.ow;
                        let a = iy * self.w + lo + kx - self.pad;
                        for (t, s) in dst[a..a + hi - lo].iter_mut().zip(&src[o + lo..o + hi]) {
                            *t += s;
                        }
                    }
                }
            }
        }
    }
}

/// `C[m,n] = beta * C + A[m,k] B[k,n]` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs + 1;
    assert!(k == 0 || a.len() >= span(m, k, rsa, csa));
    assert!(k == 0 || b.len() >= span(k, n, rsb, csb));
    assert!(c.len() >= span(m, n, rsc, csc));
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` does not alias `a` or `b` because it is a unique borrow.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

pub(crate) fn conv2d_forward(d: &ConvDims, input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Tensor {
    let plane = d.oh * d.ow;
    let taps = d.taps();
    let mut out = vec![0.0; d.cout * plane];
    for (co, dst) in out.chunks_mut(plane).enumerate() {
        dst.fill(bias.data()[co]);
    }
    let mut cols = Vec::new();
    for (y0, y1) in d.row_blocks() {
        d.im2col(input.data(), y0, y1, &mut cols);
        let n = (y1 - y0) * d.ow;
        gemm(
            d.cout,
            taps,
            n,
            kernel.data(),
            (taps, 1),
            &cols,
            (n, 1),
            1.0,
            &mut out[y0 * d.ow..],
            (plane, 1),
        );
    }
    Tensor::new([d.cout, d.oh, d.ow], out).expect("conv output shape")
}

pub(crate) fn conv2d_grad_input(d: &ConvDims, grad_out: &Tensor, kernel: &Tensor) -> Tensor {
    let plane = d.oh * d.ow;
    let taps = d.taps();
    let mut gx = vec![0.0; d.cin * d.h * d.w];
    let mut cols = Vec::new();
    for (y0, y1) in d.row_blocks() {
        let n = (y1 - y0) * d.ow;
        cols.clear();
        cols.resize(taps * n, 0.0);
        // kernel^T [taps, cout] · grad_out block [cout, n]
        gemm(
            taps,
            d.cout,
            n,
            kernel.data(),
            (1, taps),
            &grad_out.data()[y0 * d.ow..],
            (plane, 1),
            0.0,
            &mut cols,
            (n, 1),
        );
        d.col2im(&cols, y0, y1, &mut gx);
    }
    Tensor::new([d.cin, d.h, d.w], gx).expect("conv grad shape")
}

pub(crate) fn conv2d_grad_kernel(d: &ConvDims, grad_out: &Tensor, input: &Tensor) -> Tensor {
    let plane = d.oh * d.ow;
    let taps = d.taps();
    let mut gk = vec![0.0; d.cout * taps];
    let mut cols = Vec::new();
    for (y0, y1) in d.row_blocks() {
        d.im2col(input.data(), y0, y1, &mut cols);
        let n = (y1 - y0) * d.ow;
        // grad_out block [cout, n] · cols^T [n, taps]
        gemm(
            d.cout,
            n,
            taps,
            &grad_out.data()[y0 * d.ow..],
            (plane, 1),
            &cols,
            (1, n),
            1.0,
            &mut gk,
            (taps, 1),
        );
    }
    Tensor::new([d.cout, d.cin, d.k, d.k], gk).expect("kernel grad shape")
}

pub(crate) fn channel_sums(t: &Tensor) -> Tensor {
    let (c, h, w) = t.dims3().expect("rank-3");
    let plane = h * w;
    Tensor::from_fn([c], |i| t.data()[i * plane..(i + 1) * plane].iter().sum())
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Tensor {
    x.map(|v| if v >= 0.0 { v } else { slope * v })
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}

/// Nearest-neighbour 2x upsampling of `[C,H,W]`.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let src = x.data();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            let srow = &src[(ch * h + y / 2) * w..][..w];
            let orow = &mut out[(ch * oh + y) * ow..][..ow];
            for (xo, o) in orow.iter_mut().enumerate() {
                *o = srow[xo / 2];
            }
        }
    }
    Tensor::new([c, oh, ow], out)
}

/// Adjoint of [`upsample2x`]: sums each 2x2 block.
pub(crate) fn sum_pool2x(g: &Tensor) -> Tensor {
    let (c, oh, ow) = g.dims3().expect("rank-3");
    let (h, w) = (oh / 2, ow / 2);
    let src = g.data();
    Tensor::from_fn([c, h, w], |i| {
        let (ch, rem) = (i / (h * w), i % (h * w));
        let (y, x) = (rem / w, rem % w);
        let base = (ch * oh + 2 * y) * ow + 2 * x;
        src[base] + src[base + 1] + src[base + ow] + src[base + ow + 1]
    })
}

/// 2x2 average pooling; height and width must be even.
pub fn avg_pool2x(x: &Tensor) -> Result<Tensor> {
    let (_, h, w) = x.dims3()?;
    ensure!(
        h % 2 == 0 && w % 2 == 0,
        Error::dim("avg_pool2x", format!("odd spatial size {h}x{w}"))
    );
    Ok(sum_pool2x(x).map(|v| 0.25 * v))
}

/// Per-channel normalisation statistics saved by the AdaIN forward pass.
#[derive(Clone, Debug)]
pub(crate) struct AdainSaved {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
}

pub(crate) fn adain_forward(
    x: &Tensor,
    scale: &Tensor,
    shift: &Tensor,
    eps: f64,
) -> Result<(Tensor, AdainSaved)> {
    let (c, h, w) = x.dims3()?;
    ensure!(
        scale.shape() == [c] && shift.shape() == [c],
        Error::dim(
            "adain",
            format!(
                "scale {:?} / shift {:?} must be [{c}] for input {:?}",
                scale.shape(),
                shift.shape(),
                x.shape()
            )
        )
    );
    ensure!(eps > 0.0, Error::contract("adain eps must be positive"));
    let plane = h * w;
    let n = plane as f64;
    let mut normalized = vec![0.0; c * plane];
    let mut out = vec![0.0; c * plane];
    let mut inv_std = Vec::with_capacity(c);
    for ch in 0..c {
        let src = &x.data()[ch * plane..(ch + 1) * plane];
        let mean = src.iter().sum::<f64>() / n;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        let (s, b) = (scale.data()[ch], shift.data()[ch]);
        for i in 0..plane {
            let xh = (src[i] - mean) * is;
            normalized[ch * plane + i] = xh;
            out[ch * plane + i] = s * xh + b;
        }
    }
    Ok((
        Tensor::new([c, h, w], out)?,
        AdainSaved {
            normalized: Tensor::new([c, h, w], normalized)?,
            inv_std,
        },
    ))
}

/// AdaIN without gradient bookkeeping.
pub fn adain(x: &Tensor, scale: &Tensor, shift: &Tensor, eps: f64) -> Result<Tensor> {
    adain_forward(x, scale, shift, eps).map(|(y, _)| y)
}

/// Returns gradients with respect to `(x, scale, shift)`.
pub(crate) fn adain_backward(
    g: &Tensor,
    scale: &Tensor,
    saved: &AdainSaved,
) -> (Tensor, Tensor, Tensor) {
    let (c, h, w) = g.dims3().expect("rank-3");
    let plane = h * w;
    let n = plane as f64;
    let xh = saved.normalized.data();
    let gy = g.data();
    let mut gx = vec![0.0; c * plane];
    let mut gscale = vec![0.0; c];
    let mut gshift = vec![0.0; c];
    for ch in 0..c {
        let r = ch * plane..(ch + 1) * plane;
        let (gyc, xhc) = (&gy[r.clone()], &xh[r.clone()]);
        let sum_g: f64 = gyc.iter().sum();
        let sum_gx: f64 = gyc.iter().zip(xhc).map(|(a, b)| a * b).sum();
        gshift[ch] = sum_g;
        gscale[ch] = sum_gx;
        let s = scale.data()[ch];
        let k = s * saved.inv_std[ch];
        let (mg, mgx) = (sum_g / n, sum_gx / n);
        for (i, o) in gx[r].iter_mut().enumerate() {
            *o = k * (gyc[i] - mg - xhc[i] * mgx);
        }
    }
    (
        Tensor::new([c, h, w], gx).expect("shape"),
        Tensor::new([c], gscale).expect("shape"),
        Tensor::new([c], gshift).expect("shape"),
    )
}

/// `w [M,N] · x [N]`.
pub fn matvec(w: &Tensor, x: &Tensor) -> Result<Tensor> {
    let [m, n] = w.shape()[..] else {
        return Err(Error::dim(
            "matvec",
            format!("matrix must be rank 2, got {:?}", w.shape()),
        ));
    };
    ensure!(
        x.shape() == [n],
        Error::dim(
            "matvec",
            format!("matrix {:?} times vector {:?}", w.shape(), x.shape())
        )
    );
    let (wd, xd) = (w.data(), x.data());
    Ok(Tensor::from_fn([m], |i| {
        wd[i * n..(i + 1) * n].iter().zip(xd).map(|(a, b)| a * b).sum()
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_keeps_input() {
        let x = Tensor::from_fn([1, 3, 3], |i| i as f64 * 0.5 - 1.0);
        let k = Tensor::full([1, 1, 1, 1], 1.0);
        let b = Tensor::zeros([1]);
        assert_eq!(conv2d(&x, &k, &b, 0).unwrap(), x);
    }

    #[test]
    fn even_kernel_is_rejected() {
        let x = Tensor::new([1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::full([1, 1, 2, 2], 1.0);
        let err = conv2d(&x, &k, &Tensor::zeros([1]), 0).unwrap_err();
        assert!(matches!(err, Error::Dimension { op: "conv2d", .. }), "{err}");
    }

    #[test]
    fn channel_mismatch_names_shapes() {
        let x = Tensor::zeros([2, 4, 4]);
        let k = Tensor::zeros([1, 3, 3, 3]);
        let msg = conv2d(&x, &k, &Tensor::zeros([1]), 1).unwrap_err().to_string();
        assert!(msg.contains("[2, 4, 4]") && msg.contains("[1, 3, 3, 3]"), "{msg}");
    }

    #[test]
    fn output_size_follows_padding() {
        let x = Tensor::zeros([1, 7, 5]);
        let k = Tensor::zeros([2, 1, 3, 3]);
        let b = Tensor::zeros([2]);
        assert_eq!(conv2d(&x, &k, &b, 0).unwrap().shape(), [2, 5, 3]);
        assert_eq!(conv2d(&x, &k, &b, 1).unwrap().shape(), [2, 7, 5]);
        assert_eq!(conv2d(&x, &k, &b, 2).unwrap().shape(), [2, 9, 7]);
    }

    #[test]
    fn leaky_relu_definition() {
        let x = Tensor::new([2], vec![1.0, -1.0]).unwrap();
        assert_eq!(leaky_relu(&x, 0.2).data(), [1.0, -0.2]);
        let pos = Tensor::new([3], vec![0.0, 2.0, 5.5]).unwrap();
        assert_eq!(leaky_relu(&pos, 0.2), pos);
    }

    #[test]
    fn upsample_replicates() {
        let one = Tensor::full([1, 1, 1], 1.0);
        assert_eq!(upsample2x(&one).unwrap().data(), [1.0; 4]);
        let c = Tensor::full([2, 3, 2], 0.7);
        assert_eq!(upsample2x(&c).unwrap(), Tensor::full([2, 6, 4], 0.7));
    }

    #[test]
    fn adain_with_zero_scale_emits_shift() {
        let x = Tensor::from_fn([2, 3, 3], |i| (i as f64).sin());
        let scale = Tensor::zeros([2]);
        let shift = Tensor::new([2], vec![0.3, -1.0]).unwrap();
        let y = adain(&x, &scale, &shift, 1e-8).unwrap();
        assert!(y.data()[..9].iter().all(|&v| v == 0.3));
        assert!(y.data()[9..].iter().all(|&v| v == -1.0));
    }

    #[test]
    fn matvec_checks_shapes() {
        let w = Tensor::new([2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let x = Tensor::new([3], vec![1.0, 0.0, -1.0]).unwrap();
        assert_eq!(matvec(&w, &x).unwrap().data(), [-2.0, -2.0]);
        assert!(matvec(&w, &Tensor::zeros([2])).is_err());
    }
}
