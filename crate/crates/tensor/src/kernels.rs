//! Numeric kernels behind the tape ops. All image kernels use NCHW layout.

use std::borrow::Cow;

use crate::par;
use crate::tensor::Tensor;

/// Output rows handed to one gemm task. Fixed so the split does not depend on
/// the pool size.
const GEMM_ROW_BLOCK: usize = 16;

/// `c = a · b + beta * c` with `a` (m×k) and `b` (k×n) given by element
/// strides and `c` contiguous row-major (m×n).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(c.len() >= m * n, "gemm output too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    assert!(
        (m - 1) * rsa + (k - 1) * csa < a.len(),
        "gemm lhs out of bounds"
    );
    assert!(
        (k - 1) * rsb + (n - 1) * csb < b.len(),
        "gemm rhs out of bounds"
    );
    // SAFETY: the asserts above bound every index the kernel touches, and `c`
    // is an exclusive borrow of at least m*n elements.
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
            n as isize,
            1,
        );
    }
}

/// Row-blocked gemm; blocks of `c` are computed independently.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_rows(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if n == 0 || m == 0 {
        return;
    }
    let c = &mut c[..m * n];
    par::for_each_chunk_mut(c, GEMM_ROW_BLOCK * n, |i, block| {
        let r0 = i * GEMM_ROW_BLOCK;
        let rows = block.len() / n;
        gemm(
            rows,
            k,
            n,
            &a[r0 * a_strides.0..],
            a_strides,
            b,
            b_strides,
            block,
            beta,
        );
    });
}

/// Matrix product of row-major `a` (m×k) and `b` (k×n).
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm_rows(m, k, n, a, (k, 1), b, (n, 1), &mut c, 0.0);
    c
}

/// Geometry of a 2-D convolution over one sample.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(
        c_in: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        assert!(stride >= 1, "stride must be positive");
        assert!(
            h + 2 * pad >= kh && w + 2 * pad >= kw,
            "kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"
        );
        let h_out = (h + 2 * pad - kh) / stride + 1;
        let w_out = (w + 2 * pad - kw) / stride + 1;
        Self {
            c_in,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            h_out,
            w_out,
        }
    }

    fn rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.h_out * self.w_out
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<'a>(x: &'a [f64], g: &ConvGeom) -> Cow<'a, [f64]> {
    if g.is_pointwise() {
        return Cow::Borrowed(x);
    }
    let p = g.cols();
    let mut cols = vec![0.0; g.rows() * p];
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let out_row = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *o = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    Cow::Owned(cols)
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    if g.is_pointwise() {
        return cols.to_vec();
    }
    let p = g.cols();
    let mut x = vec![0.0; g.c_in * g.h * g.w];
    // Each channel owns a disjoint block of rows in `cols`.
    par::for_each_chunk_mut(&mut x, g.h * g.w, |c, plane| {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    });
    x
}

fn conv_geom(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> (usize, usize, ConvGeom) {
    let (n, c, h, wd) = x.dims4();
    let (co, ci, kh, kw) = w.dims4();
    assert_eq!(c, ci, "conv input has {c} channels, weight expects {ci}");
    (n, co, ConvGeom::new(c, h, wd, kh, kw, stride, pad))
}

/// Zero-padded 2-D convolution (cross-correlation) with optional bias.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (n, co, g) = conv_geom(x, w, stride, pad);
    let per_in = g.c_in * g.h * g.w;
    let p = g.cols();
    let k = g.rows();
    let outs = par::map_range(n, |i| {
        let cols = im2col(&x.data()[i * per_in..(i + 1) * per_in], &g);
        let mut out = vec![0.0; co * p];
        gemm_rows(co, k, p, w.data(), (k, 1), &cols, (p, 1), &mut out, 0.0);
        if let Some(b) = bias {
            for (oc, row) in out.chunks_mut(p).enumerate() {
                let bv = b.data()[oc];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
        out
    });
    Tensor::new(&[n, co, g.h_out, g.w_out], outs.concat())
}

/// Gradients of [`conv2d`]: `(d input, d weight, d bias)`.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
    want_input: bool,
    want_weight: bool,
) -> (Option<Tensor>, Option<Tensor>, Tensor) {
    let (n, co, g) = conv_geom(x, w, stride, pad);
    let per_in = g.c_in * g.h * g.w;
    let p = g.cols();
    let k = g.rows();
    let go = grad_out.data();
    let parts = par::map_range(n, |i| {
        let gout = &go[i * co * p..(i + 1) * co * p];
        let gw = want_weight.then(|| {
            let cols = im2col(&x.data()[i * per_in..(i + 1) * per_in], &g);
            let mut gw = vec![0.0; co * k];
            gemm_rows(co, p, k, gout, (p, 1), &cols, (1, p), &mut gw, 0.0);
            gw
        });
        let gx = want_input.then(|| {
            let mut gcols = vec![0.0; k * p];
            gemm_rows(k, co, p, w.data(), (1, k), gout, (p, 1), &mut gcols, 0.0);
            col2im(&gcols, &g)
        });
        (gx, gw)
    });
    let mut gb = vec![0.0; co];
    for i in 0..n {
        for (oc, b) in gb.iter_mut().enumerate() {
            *b += go[(i * co + oc) * p..(i * co + oc + 1) * p]
                .iter()
                .sum::<f64>();
        }
    }
    let mut gx_all = want_input.then(|| Vec::with_capacity(n * per_in));
    let mut gw_sum = want_weight.then(|| vec![0.0; co * k]);
    for (gx, gw) in parts {
        if let (Some(all), Some(gx)) = (gx_all.as_mut(), gx) {
            all.extend_from_slice(&gx);
        }
        if let (Some(sum), Some(gw)) = (gw_sum.as_mut(), gw) {
            sum.iter_mut().zip(&gw).for_each(|(s, v)| *s += v);
        }
    }
    (
        gx_all.map(|d| Tensor::new(x.shape(), d)),
        gw_sum.map(|d| Tensor::new(w.shape(), d)),
        Tensor::new(&[co], gb),
    )
}

/// Per-(sample, channel) normalisation to zero mean and unit variance.
/// Returns the output and the inverse standard deviation of every plane.
pub fn instance_norm(x: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let mut out = vec![0.0; x.len()];
    let mut inv = vec![0.0; n * c];
    for (plane_idx, (src, dst)) in x.data().chunks(hw).zip(out.chunks_mut(hw)).enumerate() {
        let mean = src.iter().sum::<f64>() / hw as f64;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv[plane_idx] = is;
        for (d, s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * is;
        }
    }
    (Tensor::new(&[n, c, h, w], out), inv)
}

pub fn instance_norm_backward(y: &Tensor, inv_std: &[f64], grad: &Tensor) -> Tensor {
    let (_, _, h, w) = y.dims4();
    let hw = h * w;
    let m = hw as f64;
    let mut gx = vec![0.0; y.len()];
    for (i, ((yp, gp), dst)) in y
        .data()
        .chunks(hw)
        .zip(grad.data().chunks(hw))
        .zip(gx.chunks_mut(hw))
        .enumerate()
    {
        let mean_g = gp.iter().sum::<f64>() / m;
        let mean_gy = gp.iter().zip(yp).map(|(g, y)| g * y).sum::<f64>() / m;
        for ((d, g), yv) in dst.iter_mut().zip(gp).zip(yp) {
            *d = inv_std[i] * (g - mean_g - yv * mean_gy);
        }
    }
    Tensor::new(y.shape(), gx)
}

/// 2×2 average pooling with stride 2 (odd trailing rows/columns dropped).
pub fn avg_pool2(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let (ho, wo) = (h / 2, w / 2);
    assert!(ho > 0 && wo > 0, "avg_pool2 on {h}x{w}");
    let mut out = vec![0.0; n * c * ho * wo];
    for (src, dst) in x.data().chunks(h * w).zip(out.chunks_mut(ho * wo)) {
        for oy in 0..ho {
            for ox in 0..wo {
                let i = 2 * oy * w + 2 * ox;
                dst[oy * wo + ox] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
            }
        }
    }
    Tensor::new(&[n, c, ho, wo], out)
}

pub fn avg_pool2_backward(input_shape: &[usize], grad: &Tensor) -> Tensor {
    let (_, _, h, w) = (
        input_shape[0],
        input_shape[1],
        input_shape[2],
        input_shape[3],
    );
    let (ho, wo) = (h / 2, w / 2);
    let mut gx = vec![0.0; input_shape.iter().product()];
    for (g, dst) in grad.data().chunks(ho * wo).zip(gx.chunks_mut(h * w)) {
        for oy in 0..ho {
            for ox in 0..wo {
                let v = 0.25 * g[oy * wo + ox];
                let i = 2 * oy * w + 2 * ox;
                dst[i] += v;
                dst[i + 1] += v;
                dst[i + w] += v;
                dst[i + w + 1] += v;
            }
        }
    }
    Tensor::new(input_shape, gx)
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![0.0; n * c * ho * wo];
    for (src, dst) in x.data().chunks(h * w).zip(out.chunks_mut(ho * wo)) {
        for oy in 0..ho {
            for ox in 0..wo {
                dst[oy * wo + ox] = src[(oy / 2) * w + ox / 2];
            }
        }
    }
    Tensor::new(&[n, c, ho, wo], out)
}

pub fn upsample2_backward(input_shape: &[usize], grad: &Tensor) -> Tensor {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (ho, wo) = (2 * h, 2 * w);
    let mut gx = vec![0.0; input_shape.iter().product()];
    for (g, dst) in grad.data().chunks(ho * wo).zip(gx.chunks_mut(h * w)) {
        for oy in 0..ho {
            for ox in 0..wo {
                dst[(oy / 2) * w + ox / 2] += g[oy * wo + ox];
            }
        }
    }
    Tensor::new(input_shape, gx)
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

/// Reflection padding by `p` on every spatial side.
pub fn reflect_pad(x: &Tensor, p: usize) -> Tensor {
    let (n, c, h, w) = x.dims4();
    assert!(p < h && p < w, "reflection pad {p} too large for {h}x{w}");
    let (ho, wo) = (h + 2 * p, w + 2 * p);
    let mut out = vec![0.0; n * c * ho * wo];
    for (src, dst) in x.data().chunks(h * w).zip(out.chunks_mut(ho * wo)) {
        for oy in 0..ho {
            let iy = reflect(oy as isize - p as isize, h);
            for ox in 0..wo {
                let ix = reflect(ox as isize - p as isize, w);
                dst[oy * wo + ox] = src[iy * w + ix];
            }
        }
    }
    Tensor::new(&[n, c, ho, wo], out)
}

pub fn reflect_pad_backward(input_shape: &[usize], p: usize, grad: &Tensor) -> Tensor {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (ho, wo) = (h + 2 * p, w + 2 * p);
    let mut gx = vec![0.0; input_shape.iter().product()];
    for (g, dst) in grad.data().chunks(ho * wo).zip(gx.chunks_mut(h * w)) {
        for oy in 0..ho {
            let iy = reflect(oy as isize - p as isize, h);
            for ox in 0..wo {
                let ix = reflect(ox as isize - p as isize, w);
                dst[iy * w + ix] += g[oy * wo + ox];
            }
        }
    }
    Tensor::new(input_shape, gx)
}

/// Softmax across the channel axis of an NCHW tensor.
pub fn softmax_channels(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let mut out = vec![0.0; x.len()];
    let d = x.data();
    for s in 0..n {
        let base = s * c * hw;
        for p in 0..hw {
            let max = (0..c)
                .map(|k| d[base + k * hw + p])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..c {
                let e = (d[base + k * hw + p] - max).exp();
                out[base + k * hw + p] = e;
                z += e;
            }
            for k in 0..c {
                out[base + k * hw + p] /= z;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

pub fn softmax_channels_backward(y: &Tensor, grad: &Tensor) -> Tensor {
    let (n, c, h, w) = y.dims4();
    let hw = h * w;
    let (yd, gd) = (y.data(), grad.data());
    let mut gx = vec![0.0; y.len()];
    for s in 0..n {
        let base = s * c * hw;
        for p in 0..hw {
            let dot: f64 = (0..c)
                .map(|k| yd[base + k * hw + p] * gd[base + k * hw + p])
                .sum();
            for k in 0..c {
                let i = base + k * hw + p;
                gx[i] = yd[i] * (gd[i] - dot);
            }
        }
    }
    Tensor::new(y.shape(), gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (n, c, h, wd) = x.dims4();
        let (co, _, kh, kw) = w.dims4();
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        Tensor::from_fn(&[n, co, ho, wo], |idx| {
            let ox = idx % wo;
            let oy = (idx / wo) % ho;
            let oc = (idx / (wo * ho)) % co;
            let s = idx / (wo * ho * co);
            let mut acc = 0.0;
            for ic in 0..c {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            acc += x.data()[((s * c + ic) * h + iy as usize) * wd + ix as usize]
                                * w.data()[((oc * c + ic) * kh + ky) * kw + kx];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_direct_loops() {
        let x = Tensor::from_fn(&[2, 3, 7, 6], |i| ((i * 37) % 11) as f64 - 5.0);
        let w = Tensor::from_fn(&[20, 3, 3, 3], |i| ((i * 13) % 7) as f64 * 0.1 - 0.3);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 2)] {
            let fast = conv2d(&x, &w, None, stride, pad);
            let slow = naive_conv(&x, &w, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn pointwise_conv_skips_im2col() {
        let x = Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64);
        let w = Tensor::new(&[1, 2, 1, 1], vec![1.0, -1.0]);
        let y = conv2d(&x, &w, Some(&Tensor::new(&[1], vec![0.5])), 1, 0);
        assert_eq!(y.data(), &[-3.5, -3.5, -3.5, -3.5]);
    }

    #[test]
    fn reflect_pad_mirrors_without_edge_repeat() {
        let tall = Tensor::new(&[1, 1, 3, 3], vec![1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let y = reflect_pad(&tall, 1);
        assert_eq!(&y.data()[..5], &[5., 4., 5., 6., 5.]);
    }

    #[test]
    fn softmax_sums_to_one() {
        let x = Tensor::from_fn(&[2, 4, 3, 3], |i| (i as f64 * 0.7).sin() * 5.0);
        let y = softmax_channels(&x);
        for s in 0..2 {
            for p in 0..9 {
                let z: f64 = (0..4).map(|k| y.data()[s * 36 + k * 9 + p]).sum();
                assert!((z - 1.0).abs() < 1e-12);
            }
        }
    }
}
