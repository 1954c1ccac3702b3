//! Raw forward/backward kernels over flat buffers.
//!
//! Shapes are validated by the callers in `ops.rs`; everything here assumes
//! consistent extents. Reductions accumulate in `f64`.

use serde::{Deserialize, Serialize};

/// Stride, padding and dilation of a 3-D convolution, ordered (T, H, W).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv3dSpec {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub dilation: [usize; 3],
}

impl Default for Conv3dSpec {
    fn default() -> Self {
        Self {
            stride: [1; 3],
            padding: [0; 3],
            dilation: [1; 3],
        }
    }
}

impl Conv3dSpec {
    pub fn new(stride: [usize; 3], padding: [usize; 3]) -> Self {
        Self {
            stride,
            padding,
            dilation: [1; 3],
        }
    }

    pub fn with_dilation(mut self, dilation: [usize; 3]) -> Self {
        self.dilation = dilation;
        self
    }
}

/// Output extent of one convolved axis, `None` when the dilated kernel does
/// not fit into the padded input.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize, dilation: usize) -> Option<usize> {
    let span = dilation * (kernel - 1) + 1;
    if input + 2 * pad < span {
        return None;
    }
    Some((input + 2 * pad - span) / stride + 1)
}

/// Output positions `lo..hi` whose tap at offset `k*dilation - pad` lands
/// inside `0..input`.
#[inline]
fn valid_range(out: usize, input: usize, tap: isize, stride: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if tap < 0 { (-tap + s - 1) / s } else { 0 };
    let last = input as isize - 1 - tap;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last / s + 1).min(out as isize);
    if lo >= hi {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub output: [usize; 3],
    pub spec: Conv3dSpec,
}

impl ConvGeom {
    fn in_plane(&self) -> usize {
        self.input.iter().product()
    }
    fn out_plane(&self) -> usize {
        self.output.iter().product()
    }
    fn k_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Visits every (kernel tap, valid output row) pair and hands the caller
    /// the input row offset, output row offset, row length and W stride.
    #[inline]
    fn for_each_row(&self, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let [kt, kh, kw] = self.kernel;
        let [_, ih, iw] = self.input;
        let [ot, oh, ow] = self.output;
        let Conv3dSpec {
            stride,
            padding,
            dilation,
        } = self.spec;
        for a in 0..kt {
            let tap_t = (a * dilation[0]) as isize - padding[0] as isize;
            let (t_lo, t_hi) = valid_range(ot, self.input[0], tap_t, stride[0]);
            for b in 0..kh {
                let tap_h = (b * dilation[1]) as isize - padding[1] as isize;
                let (h_lo, h_hi) = valid_range(oh, ih, tap_h, stride[1]);
                for c in 0..kw {
                    let tap_w = (c * dilation[2]) as isize - padding[2] as isize;
                    let (w_lo, w_hi) = valid_range(ow, iw, tap_w, stride[2]);
                    if w_lo >= w_hi {
                        continue;
                    }
                    let k_idx = (a * kh + b) * kw + c;
                    let len = w_hi - w_lo;
                    let iw0 = (w_lo as isize * stride[2] as isize + tap_w) as usize;
                    for t in t_lo..t_hi {
                        let it = (t as isize * stride[0] as isize + tap_t) as usize;
                        for h in h_lo..h_hi {
                            let ihh = (h as isize * stride[1] as isize + tap_h) as usize;
                            let in_off = (it * ih + ihh) * iw + iw0;
                            let out_off = (t * oh + h) * ow + w_lo;
                            f(k_idx, in_off, out_off, len, stride[2]);
                        }
                    }
                }
            }
        }
    }
}

/// Dot product with eight independent partial sums (a fixed order, so the
/// result is deterministic).
#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (d, &s) in y.iter_mut().zip(x) {
        *d += alpha * s;
    }
}

/// `C[m,n] += A[m,k] B[k,n]`, all row-major.
fn gemm_nn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    for i in 0..m {
        let row = &mut c[i * n..][..n];
        for (kk, &av) in a[i * k..][..k].iter().enumerate() {
            if av != 0.0 {
                axpy(av, &b[kk * n..][..n], row);
            }
        }
    }
}

/// `C[m,n] += A[m,k] B[n,k]ᵀ`.
fn gemm_nt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    for i in 0..m {
        let ar = &a[i * k..][..k];
        for j in 0..n {
            c[i * n + j] += dot(ar, &b[j * k..][..k]);
        }
    }
}

/// `C[m,n] += A[k,m]ᵀ B[k,n]`.
fn gemm_tn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    for kk in 0..k {
        let br = &b[kk * n..][..n];
        for i in 0..m {
            let av = a[kk * m + i];
            if av != 0.0 {
                axpy(av, br, &mut c[i * n..][..n]);
            }
        }
    }
}

impl ConvGeom {
    /// Unfolds one sample into `[c_in * k_volume, out_plane]` columns.
    fn im2col(&self, x: &[f32], cols: &mut [f32]) {
        let (in_plane, out_plane, kv) = (self.in_plane(), self.out_plane(), self.k_volume());
        cols.fill(0.0);
        for ci in 0..self.c_in {
            let x = &x[ci * in_plane..][..in_plane];
            let rows = &mut cols[ci * kv * out_plane..][..kv * out_plane];
            self.for_each_row(|k, in_off, out_off, len, sw| {
                let dst = &mut rows[k * out_plane + out_off..][..len];
                if sw == 1 {
                    dst.copy_from_slice(&x[in_off..in_off + len]);
                } else {
                    for (j, d) in dst.iter_mut().enumerate() {
                        *d = x[in_off + j * sw];
                    }
                }
            });
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatter-adds columns into `gx`.
    fn col2im(&self, cols: &[f32], gx: &mut [f32]) {
        let (in_plane, out_plane, kv) = (self.in_plane(), self.out_plane(), self.k_volume());
        for ci in 0..self.c_in {
            let gx = &mut gx[ci * in_plane..][..in_plane];
            let rows = &cols[ci * kv * out_plane..][..kv * out_plane];
            self.for_each_row(|k, in_off, out_off, len, sw| {
                let src = &rows[k * out_plane + out_off..][..len];
                for (j, &v) in src.iter().enumerate() {
                    gx[in_off + j * sw] += v;
                }
            });
        }
    }

    fn is_pointwise(&self) -> bool {
        self.k_volume() == 1 && self.spec.stride == [1, 1, 1] && self.spec.padding == [0, 0, 0]
    }
}

/// Returns the output and the unfolded input columns (empty for pointwise
/// convolutions), which the backward pass reuses.
pub(crate) fn conv3d_forward(
    g: &ConvGeom,
    input: &[f32],
    weight: &[f32],
    bias: Option<&[f32]>,
) -> (Vec<f32>, Vec<f32>) {
    let (in_plane, out_plane, kv) = (g.in_plane(), g.out_plane(), g.k_volume());
    let rows = g.c_in * kv;
    let pointwise = g.is_pointwise();
    let mut out = vec![0f32; g.n * g.c_out * out_plane];
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![0f32; g.n * rows * out_plane]
    };
    for n in 0..g.n {
        let x = &input[n * g.c_in * in_plane..][..g.c_in * in_plane];
        let y = &mut out[n * g.c_out * out_plane..][..g.c_out * out_plane];
        if let Some(b) = bias {
            for (co, chunk) in y.chunks_mut(out_plane).enumerate() {
                chunk.fill(b[co]);
            }
        }
        if pointwise {
            gemm_nn(g.c_out, rows, out_plane, weight, x, y);
        } else {
            let c = &mut cols[n * rows * out_plane..][..rows * out_plane];
            g.im2col(x, c);
            gemm_nn(g.c_out, rows, out_plane, weight, c, y);
        }
    }
    (out, cols)
}

/// Gradients of a convolution with respect to input, weight and bias;
/// `cols` is the forward pass's unfolded input.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3d_backward(
    g: &ConvGeom,
    input: &[f32],
    cols: &[f32],
    weight: &[f32],
    grad_out: &[f32],
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>, Vec<f32>) {
    let (in_plane, out_plane, kv) = (g.in_plane(), g.out_plane(), g.k_volume());
    let rows = g.c_in * kv;
    let pointwise = g.is_pointwise();
    let mut g_in = need_input.then(|| vec![0f32; g.n * g.c_in * in_plane]);
    let mut g_w = need_weight.then(|| vec![0f32; g.c_out * rows]);
    let mut g_b = vec![0f64; g.c_out];
    let mut dcols = if pointwise || !need_input {
        Vec::new()
    } else {
        vec![0f32; rows * out_plane]
    };
    for n in 0..g.n {
        let dy = &grad_out[n * g.c_out * out_plane..][..g.c_out * out_plane];
        for (co, chunk) in dy.chunks(out_plane).enumerate() {
            g_b[co] += chunk.iter().map(|&v| v as f64).sum::<f64>();
        }
        if let Some(gw) = g_w.as_mut() {
            let src = if pointwise {
                &input[n * g.c_in * in_plane..][..g.c_in * in_plane]
            } else {
                &cols[n * rows * out_plane..][..rows * out_plane]
            };
            // dW += dY colsᵀ
            gemm_nt(g.c_out, out_plane, rows, dy, src, gw);
        }
        if let Some(gi) = g_in.as_mut() {
            let gi = &mut gi[n * g.c_in * in_plane..][..g.c_in * in_plane];
            if pointwise {
                gemm_tn(rows, g.c_out, out_plane, weight, dy, gi);
            } else {
                // dcols = Wᵀ dY, then fold back onto the input
                dcols.fill(0.0);
                gemm_tn(rows, g.c_out, out_plane, weight, dy, &mut dcols);
                g.col2im(&dcols, gi);
            }
        }
    }
    (g_in, g_w, g_b.into_iter().map(|v| v as f32).collect())
}

/// Max pooling without padding; returns outputs and the flat input index of
/// each window's maximum (first index wins ties).
pub(crate) fn maxpool3d_forward(
    input: &[f32],
    nc: usize,
    dims: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    out: [usize; 3],
) -> (Vec<f32>, Vec<usize>) {
    let in_plane: usize = dims.iter().product();
    let out_plane: usize = out.iter().product();
    let mut vals = Vec::with_capacity(nc * out_plane);
    let mut arg = Vec::with_capacity(nc * out_plane);
    for p in 0..nc {
        let base = p * in_plane;
        for ot in 0..out[0] {
            for oh in 0..out[1] {
                for ow in 0..out[2] {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for a in 0..kernel[0] {
                        let t = ot * stride[0] + a;
                        for b in 0..kernel[1] {
                            let h = oh * stride[1] + b;
                            for c in 0..kernel[2] {
                                let w = ow * stride[2] + c;
                                let i = base + (t * dims[1] + h) * dims[2] + w;
                                if best_i == usize::MAX || input[i] > best || (input[i] == best && i < best_i) {
                                    best = input[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    vals.push(best);
                    arg.push(best_i);
                }
            }
        }
    }
    (vals, arg)
}

/// Batched `[batch, m, k] x [batch, k, n]`.
pub(crate) fn matmul_forward(a: &[f32], b: &[f32], batch: usize, m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0f32; batch * m * n];
    for bi in 0..batch {
        gemm_nn(
            m,
            k,
            n,
            &a[bi * m * k..][..m * k],
            &b[bi * k * n..][..k * n],
            &mut out[bi * m * n..][..m * n],
        );
    }
    out
}

/// `dA = dC Bᵀ`.
pub(crate) fn matmul_grad_a(dc: &[f32], b: &[f32], batch: usize, m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0f32; batch * m * k];
    for bi in 0..batch {
        gemm_nt(
            m,
            n,
            k,
            &dc[bi * m * n..][..m * n],
            &b[bi * k * n..][..k * n],
            &mut out[bi * m * k..][..m * k],
        );
    }
    out
}

/// `dB = Aᵀ dC`.
pub(crate) fn matmul_grad_b(a: &[f32], dc: &[f32], batch: usize, m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0f32; batch * k * n];
    for bi in 0..batch {
        gemm_tn(
            k,
            m,
            n,
            &a[bi * m * k..][..m * k],
            &dc[bi * m * n..][..m * n],
            &mut out[bi * k * n..][..k * n],
        );
    }
    out
}

pub(crate) fn softmax_forward(x: &[f32], outer: usize, len: usize, inner: usize) -> Vec<f32> {
    let mut out = vec![0f32; x.len()];
    let mut buf = vec![0f64; len];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| x[at(j)]).fold(f32::NEG_INFINITY, f32::max) as f64;
            let mut z = 0f64;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = (x[at(j)] as f64 - max).exp();
                z += *b;
            }
            for (j, &b) in buf.iter().enumerate() {
                out[at(j)] = (b / z) as f32;
            }
        }
    }
    out
}

pub(crate) fn softmax_backward(y: &[f32], dy: &[f32], outer: usize, len: usize, inner: usize) -> Vec<f32> {
    let mut dx = vec![0f32; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let dot: f64 = (0..len).map(|j| y[at(j)] as f64 * dy[at(j)] as f64).sum();
            for j in 0..len {
                dx[at(j)] = (y[at(j)] as f64 * (dy[at(j)] as f64 - dot)) as f32;
            }
        }
    }
    dx
}

/// Statistics of one normalized slice: returns (xhat, rstd) per element and
/// per slice. `slice(s)` yields the flat indices belonging to slice `s`.
pub(crate) fn normalize_slices(
    x: &[f32],
    n_slices: usize,
    eps: f64,
    slice: impl Fn(usize) -> Vec<usize>,
) -> (Vec<f32>, Vec<f64>) {
    let mut xhat = vec![0f32; x.len()];
    let mut rstd = Vec::with_capacity(n_slices);
    for s in 0..n_slices {
        let idx = slice(s);
        let cnt = idx.len() as f64;
        let mean = idx.iter().map(|&i| x[i] as f64).sum::<f64>() / cnt;
        let var = idx.iter().map(|&i| (x[i] as f64 - mean).powi(2)).sum::<f64>() / cnt;
        let r = 1.0 / (var + eps).sqrt();
        for &i in &idx {
            xhat[i] = ((x[i] as f64 - mean) * r) as f32;
        }
        rstd.push(r);
    }
    (xhat, rstd)
}

/// Backward of `xhat = (x - mean) * rstd` given `d xhat`, per slice.
pub(crate) fn normalize_slices_backward(
    xhat: &[f32],
    dxhat: &[f64],
    rstd: &[f64],
    slice: impl Fn(usize) -> Vec<usize>,
) -> Vec<f32> {
    let mut dx = vec![0f32; xhat.len()];
    for (s, &r) in rstd.iter().enumerate() {
        let idx = slice(s);
        let cnt = idx.len() as f64;
        let m1 = idx.iter().map(|&i| dxhat[i]).sum::<f64>() / cnt;
        let m2 = idx.iter().map(|&i| dxhat[i] * xhat[i] as f64).sum::<f64>() / cnt;
        for &i in &idx {
            dx[i] = (r * (dxhat[i] - m1 - xhat[i] as f64 * m2)) as f32;
        }
    }
    dx
}

/// Bilinear taps (flat plane index, weight) for one sample point, with the
/// point clamped to the plane.
pub(crate) fn bilinear_taps(y: f64, x: f64, h: usize, w: usize) -> [(usize, f32); 4] {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let ly = y - y0 as f64;
    let lx = x - x0 as f64;
    [
        (y0 * w + x0, ((1.0 - ly) * (1.0 - lx)) as f32),
        (y0 * w + x1, ((1.0 - ly) * lx) as f32),
        (y1 * w + x0, (ly * (1.0 - lx)) as f32),
        (y1 * w + x1, (ly * lx) as f32),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_brute_force() {
        for out in 1..6 {
            for input in 1..8 {
                for tap in -3isize..4 {
                    for stride in 1..4 {
                        let (lo, hi) = valid_range(out, input, tap, stride);
                        let brute: Vec<usize> = (0..out)
                            .filter(|&o| {
                                let i = o as isize * stride as isize + tap;
                                i >= 0 && i < input as isize
                            })
                            .collect();
                        let got: Vec<usize> = (lo..hi).collect();
                        assert_eq!(got, brute, "out={out} input={input} tap={tap} stride={stride}");
                    }
                }
            }
        }
    }

    #[test]
    fn out_extent_formula() {
        assert_eq!(conv_out_extent(5, 3, 2, 1, 1), Some(3));
        assert_eq!(conv_out_extent(4, 3, 1, 1, 1), Some(4));
        assert_eq!(conv_out_extent(4, 3, 1, 2, 2), Some(4));
        assert_eq!(conv_out_extent(2, 5, 1, 1, 1), None);
    }

    #[test]
    fn bilinear_weights_sum_to_one() {
        for &(y, x) in &[(0.0, 0.0), (1.3, 2.7), (-1.0, 9.0), (3.0, 3.0)] {
            let s: f32 = bilinear_taps(y, x, 4, 4).iter().map(|t| t.1).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
}
