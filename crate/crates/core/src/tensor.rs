//! Dense row-major f64 arrays and the numeric kernels built on them.

use crate::error::{Error, Result};

/// Dense numeric array with shape. The unit of all model math.
///
/// Data is a flat row-major vector; `product(shape) == data.len()` always
/// holds, and public operations keep every entry finite.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{numel} elements for shape {shape:?}"),
                got: format!("{}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
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

    /// First-dimension size, i.e. the batch/row count.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[1..].iter().product::<usize>();
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, context: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context))
        }
    }
}

// ── Kernels ──────────────────────────────────────────────────────────
//
// Free functions over flat slices, shared by the plain forward path and
// the gradient tape. Inner loops run over contiguous rows so they
// vectorize.

/// C[m,n] = A[m,k] @ B[k,n]
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let out = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in out.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    c
}

/// C[m,k] = A[m,n] @ B[k,n]^T
pub fn matmul_bt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut s = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            c[i * k + j] = s;
        }
    }
    c
}

/// C[k,n] = A[m,k]^T @ B[m,n]
pub fn matmul_at(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let out = &mut c[p * n..(p + 1) * n];
            for (o, bv) in out.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    c
}

/// 2-D convolution, stride 1, zero padding. Input (N,C,H,W), kernels
/// (OC,IC,KH,KW), output (N,OC,H',W') with H' = H + 2p - KH + 1.
///
/// Written as shifted-row accumulations so the inner x loop stays
/// contiguous.
#[derive(Clone, Debug)]
pub struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.kh
    }
    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.kw
    }
}

pub fn conv2d(input: &[f64], weight: &[f64], bias: &[f64], d: &ConvDims) -> Vec<f64> {
    let (oh, ow) = (d.out_h(), d.out_w());
    let mut out = vec![0.0; d.batch * d.out_ch * oh * ow];
    let in_plane = d.h * d.w;
    let out_plane = oh * ow;
    for n in 0..d.batch {
        for oc in 0..d.out_ch {
            let o0 = (n * d.out_ch + oc) * out_plane;
            out[o0..o0 + out_plane].fill(bias[oc]);
            for ic in 0..d.in_ch {
                let i0 = (n * d.in_ch + ic) * in_plane;
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let wv = weight[((oc * d.in_ch + ic) * d.kh + ky) * d.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        accumulate_shifted(
                            &mut out[o0..o0 + out_plane],
                            &input[i0..i0 + in_plane],
                            wv,
                            oh,
                            ow,
                            d.w,
                            ky as isize - d.pad as isize,
                            kx as isize - d.pad as isize,
                        );
                    }
                }
            }
        }
    }
    out
}

/// out[y,x] += w * src[y+dy, x+dx] over the valid region.
#[inline]
fn accumulate_shifted(
    out: &mut [f64],
    src: &[f64],
    w: f64,
    oh: usize,
    ow: usize,
    src_w: usize,
    dy: isize,
    dx: isize,
) {
    let src_h = src.len() / src_w;
    for y in 0..oh {
        let sy = y as isize + dy;
        if sy < 0 || sy >= src_h as isize {
            continue;
        }
        let x_lo = (-dx).max(0) as usize;
        let x_hi = ow.min((src_w as isize - dx).max(0) as usize);
        if x_lo >= x_hi {
            continue;
        }
        let orow = &mut out[y * ow + x_lo..y * ow + x_hi];
        let s0 = sy as usize * src_w + (x_lo as isize + dx) as usize;
        let srow = &src[s0..s0 + (x_hi - x_lo)];
        for (o, s) in orow.iter_mut().zip(srow) {
            *o += w * s;
        }
    }
}

/// Gradients of `conv2d` with respect to input, weight, and bias.
pub fn conv2d_backward(
    input: &[f64],
    weight: &[f64],
    d_out: &[f64],
    d: &ConvDims,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (oh, ow) = (d.out_h(), d.out_w());
    let in_plane = d.h * d.w;
    let out_plane = oh * ow;
    let mut d_input = vec![0.0; d.batch * d.in_ch * in_plane];
    let mut d_weight = vec![0.0; d.out_ch * d.in_ch * d.kh * d.kw];
    let mut d_bias = vec![0.0; d.out_ch];
    for n in 0..d.batch {
        for oc in 0..d.out_ch {
            let o0 = (n * d.out_ch + oc) * out_plane;
            let dout_plane = &d_out[o0..o0 + out_plane];
            d_bias[oc] += dout_plane.iter().sum::<f64>();
            for ic in 0..d.in_ch {
                let i0 = (n * d.in_ch + ic) * in_plane;
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let widx = ((oc * d.in_ch + ic) * d.kh + ky) * d.kw + kx;
                        let dy = ky as isize - d.pad as isize;
                        let dx = kx as isize - d.pad as isize;
                        // dW accumulates the correlation of d_out with the
                        // shifted input plane.
                        d_weight[widx] += dot_shifted(
                            dout_plane,
                            &input[i0..i0 + in_plane],
                            oh,
                            ow,
                            d.w,
                            dy,
                            dx,
                        );
                        let wv = weight[widx];
                        if wv != 0.0 {
                            // dX scatters d_out back through the same shift.
                            accumulate_shifted_rev(
                                &mut d_input[i0..i0 + in_plane],
                                dout_plane,
                                wv,
                                oh,
                                ow,
                                d.w,
                                dy,
                                dx,
                            );
                        }
                    }
                }
            }
        }
    }
    (d_input, d_weight, d_bias)
}

/// sum over (y,x) of a[y,x] * src[y+dy, x+dx] over the valid region.
#[inline]
fn dot_shifted(
    a: &[f64],
    src: &[f64],
    oh: usize,
    ow: usize,
    src_w: usize,
    dy: isize,
    dx: isize,
) -> f64 {
    let src_h = src.len() / src_w;
    let mut acc = 0.0;
    for y in 0..oh {
        let sy = y as isize + dy;
        if sy < 0 || sy >= src_h as isize {
            continue;
        }
        let x_lo = (-dx).max(0) as usize;
        let x_hi = ow.min((src_w as isize - dx).max(0) as usize);
        if x_lo >= x_hi {
            continue;
        }
        let arow = &a[y * ow + x_lo..y * ow + x_hi];
        let s0 = sy as usize * src_w + (x_lo as isize + dx) as usize;
        let srow = &src[s0..s0 + (x_hi - x_lo)];
        for (av, sv) in arow.iter().zip(srow) {
            acc += av * sv;
        }
    }
    acc
}

/// dst[y+dy, x+dx] += w * a[y,x] over the valid region.
#[inline]
fn accumulate_shifted_rev(
    dst: &mut [f64],
    a: &[f64],
    w: f64,
    oh: usize,
    ow: usize,
    dst_w: usize,
    dy: isize,
    dx: isize,
) {
    let dst_h = dst.len() / dst_w;
    for y in 0..oh {
        let sy = y as isize + dy;
        if sy < 0 || sy >= dst_h as isize {
            continue;
        }
        let x_lo = (-dx).max(0) as usize;
        let x_hi = ow.min((dst_w as isize - dx).max(0) as usize);
        if x_lo >= x_hi {
            continue;
        }
        let arow = &a[y * ow + x_lo..y * ow + x_hi];
        let d0 = sy as usize * dst_w + (x_lo as isize + dx) as usize;
        let drow = &mut dst[d0..d0 + (x_hi - x_lo)];
        for (dv, av) in drow.iter_mut().zip(arow) {
            *dv += w * av;
        }
    }
}

/// 2x2 max pooling with stride 2 over (N,C,H,W). Returns the pooled
/// values and the flat input index of each selected maximum; ties take
/// the first element in scan order.
pub fn maxpool2(input: &[f64], batch_ch: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (ph, pw) = (h / 2, w / 2);
    let mut out = vec![0.0; batch_ch * ph * pw];
    let mut arg = vec![0usize; batch_ch * ph * pw];
    for p in 0..batch_ch {
        let i0 = p * h * w;
        let o0 = p * ph * pw;
        for y in 0..ph {
            for x in 0..pw {
                let base = i0 + 2 * y * w + 2 * x;
                let candidates = [base, base + 1, base + w, base + w + 1];
                let mut best = candidates[0];
                for &c in &candidates[1..] {
                    if input[c] > input[best] {
                        best = c;
                    }
                }
                out[o0 + y * pw + x] = input[best];
                arg[o0 + y * pw + x] = best;
            }
        }
    }
    (out, arg)
}

/// Row-wise softmax of an (n, k) matrix, log-sum-exp stabilized.
pub fn softmax_rows(logits: &[f64], n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let row = &logits[i * k..(i + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        let orow = &mut out[i * k..(i + 1) * k];
        for (o, &l) in orow.iter_mut().zip(row) {
            *o = (l - m).exp();
            z += *o;
        }
        for o in orow.iter_mut() {
            *o /= z;
        }
    }
    out
}

/// Row-wise log-sum-exp of an (n, k) matrix.
pub fn logsumexp_rows(logits: &[f64], n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for i in 0..n {
        let row = &logits[i * k..(i + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&l| (l - m).exp()).sum();
        out[i] = m + z.ln();
    }
    out
}
