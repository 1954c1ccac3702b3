//! Naive 64-bit reference implementations. They share no code with the
//! tensor kernels and favour obviousness over speed; the gradient checker
//! differentiates them numerically and the test suites compare the fast
//! paths against them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::detector::{BBox, BoxAnnotation, Detection};
use crate::error::{Error, Result};
use crate::heads::{lstm_cell, scaled_dot_attention, AttentionParams, Linear, LstmLayer, LstmParams};
use crate::tensor::{Conv3dSpec, Graph, ParamStore, Tensor};

/// Dense row-major `f64` array.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Array {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Self {
        let shape = shape.into();
        assert_eq!(shape.iter().product::<usize>(), data.len(), "array shape {shape:?}");
        Self { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Self::new(t.shape(), t.data().iter().map(|&v| v as f64).collect())
    }

    /// Rounds to `f32`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| v as f32).collect()).expect("consistent shape")
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    fn offset(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.shape.len());
        idx.iter().zip(&self.shape).fold(0, |acc, (&i, &n)| {
            assert!(i < n);
            acc * n + i
        })
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Array {
        Array::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip(&self, other: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
        assert_eq!(self.shape, other.shape);
        Array::new(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Array {
        Array::new(shape, self.data.clone())
    }
}

/// Every multi-index of `shape` in row-major order.
pub fn indices(shape: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for &n in shape {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..n).map(move |i| {
                    let mut q = p.clone();
                    q.push(i);
                    q
                })
            })
            .collect();
    }
    out
}

fn removed(idx: &[usize], axis: usize) -> Vec<usize> {
    let mut v = idx.to_vec();
    v.remove(axis);
    v
}

fn with_axis(idx: &[usize], axis: usize, j: usize) -> Vec<usize> {
    let mut v = idx.to_vec();
    v[axis] = j;
    v
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Direct six-fold loop over output positions and kernel taps.
pub fn conv3d(
    x: &Array,
    w: &Array,
    bias: Option<&Array>,
    stride: [usize; 3],
    padding: [usize; 3],
    dilation: [usize; 3],
) -> Array {
    let (n, ci) = (x.shape[0], x.shape[1]);
    let co = w.shape[0];
    let k = [w.shape[2], w.shape[3], w.shape[4]];
    let inp = [x.shape[2], x.shape[3], x.shape[4]];
    let outd: Vec<usize> = (0..3)
        .map(|a| (inp[a] + 2 * padding[a] - dilation[a] * (k[a] - 1) - 1) / stride[a] + 1)
        .collect();
    let mut out = Array::zeros([n, co, outd[0], outd[1], outd[2]]);
    for o in indices(&out.shape.clone()) {
        let mut s = bias.map_or(0.0, |b| b.data[o[1]]);
        for c in 0..ci {
            for kk in indices(&k) {
                let mut pos = [0usize; 3];
                let mut inside = true;
                for a in 0..3 {
                    let p = (o[2 + a] * stride[a] + kk[a] * dilation[a]) as isize - padding[a] as isize;
                    if p < 0 || p >= inp[a] as isize {
                        inside = false;
                    } else {
                        pos[a] = p as usize;
                    }
                }
                if inside {
                    s += x.at(&[o[0], c, pos[0], pos[1], pos[2]]) * w.at(&[o[1], c, kk[0], kk[1], kk[2]]);
                }
            }
        }
        out.set(&o, s);
    }
    out
}

/// Exhaustive window maximum; the first maximal entry in window order wins.
pub fn max_pool3d(x: &Array, kernel: [usize; 3], stride: [usize; 3]) -> Array {
    let inp = [x.shape[2], x.shape[3], x.shape[4]];
    let outd: Vec<usize> = (0..3).map(|a| (inp[a] - kernel[a]) / stride[a] + 1).collect();
    let mut out = Array::zeros([x.shape[0], x.shape[1], outd[0], outd[1], outd[2]]);
    for o in indices(&out.shape.clone()) {
        let mut best = f64::NEG_INFINITY;
        for kk in indices(&kernel) {
            let v = x.at(&[
                o[0],
                o[1],
                o[2] * stride[0] + kk[0],
                o[3] * stride[1] + kk[1],
                o[4] * stride[2] + kk[2],
            ]);
            if v > best {
                best = v;
            }
        }
        out.set(&o, best);
    }
    out
}

/// Triple loop, batched over identical leading axes.
pub fn matmul(a: &Array, b: &Array) -> Array {
    let r = a.shape.len();
    let (m, k, n) = (a.shape[r - 2], a.shape[r - 1], b.shape[r - 1]);
    let lead = &a.shape[..r - 2];
    let mut shape = lead.to_vec();
    shape.extend([m, n]);
    let mut out = Array::zeros(shape);
    for l in indices(lead) {
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    let ai: Vec<usize> = l.iter().copied().chain([i, p]).collect();
                    let bi: Vec<usize> = l.iter().copied().chain([p, j]).collect();
                    s += a.at(&ai) * b.at(&bi);
                }
                let oi: Vec<usize> = l.iter().copied().chain([i, j]).collect();
                out.set(&oi, s);
            }
        }
    }
    out
}

pub fn transpose(x: &Array) -> Array {
    let r = x.shape.len();
    let mut shape = x.shape.clone();
    shape.swap(r - 1, r - 2);
    let mut out = Array::zeros(shape.clone());
    for idx in indices(&shape) {
        let mut src = idx.clone();
        src.swap(r - 1, r - 2);
        out.set(&idx, x.at(&src));
    }
    out
}

pub fn softmax(x: &Array, axis: usize) -> Array {
    let mut out = x.clone();
    for idx in indices(&x.shape) {
        let denom: f64 = (0..x.shape[axis]).map(|j| x.at(&with_axis(&idx, axis, j)).exp()).sum();
        out.set(&idx, x.at(&idx).exp() / denom);
    }
    out
}

/// Normalizes the set of positions produced by `group` for every index.
fn normalize_groups(x: &Array, eps: f64, group: impl Fn(&[usize]) -> Vec<Vec<usize>>) -> Array {
    let mut out = x.clone();
    for idx in indices(&x.shape) {
        let members = group(&idx);
        let cnt = members.len() as f64;
        let mean = members.iter().map(|m| x.at(m)).sum::<f64>() / cnt;
        let var = members.iter().map(|m| (x.at(m) - mean).powi(2)).sum::<f64>() / cnt;
        out.set(&idx, (x.at(&idx) - mean) / (var + eps).sqrt());
    }
    out
}

pub fn layer_norm(x: &Array, gain: &Array, shift: &Array, axis: usize, eps: f64) -> Array {
    let n = x.shape[axis];
    let xhat = normalize_groups(x, eps, |idx| (0..n).map(|j| with_axis(idx, axis, j)).collect());
    let mut out = xhat.clone();
    for idx in indices(&x.shape) {
        out.set(&idx, xhat.at(&idx) * gain.data[idx[axis]] + shift.data[idx[axis]]);
    }
    out
}

/// Statistics over everything but the leading axis; affine per axis-1 entry.
pub fn channel_norm(x: &Array, gain: &Array, shift: &Array, eps: f64) -> Array {
    let rest = x.shape[1..].to_vec();
    let xhat = normalize_groups(x, eps, |idx| {
        indices(&rest)
            .into_iter()
            .map(|r| std::iter::once(idx[0]).chain(r).collect())
            .collect()
    });
    let mut out = xhat.clone();
    for idx in indices(&x.shape) {
        out.set(&idx, xhat.at(&idx) * gain.data[idx[1]] + shift.data[idx[1]]);
    }
    out
}

pub fn add_bias(x: &Array, bias: &Array, axis: usize) -> Array {
    let mut out = x.clone();
    for idx in indices(&x.shape) {
        out.set(&idx, x.at(&idx) + bias.data[idx[axis]]);
    }
    out
}

pub fn narrow(x: &Array, axis: usize, start: usize, len: usize) -> Array {
    index_select(x, axis, &(start..start + len).collect::<Vec<_>>())
}

pub fn index_select(x: &Array, axis: usize, picks: &[usize]) -> Array {
    let mut shape = x.shape.clone();
    shape[axis] = picks.len();
    let mut out = Array::zeros(shape.clone());
    for idx in indices(&shape) {
        out.set(&idx, x.at(&with_axis(&idx, axis, picks[idx[axis]])));
    }
    out
}

pub fn concat(parts: &[Array], axis: usize) -> Array {
    let mut shape = parts[0].shape.clone();
    shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
    let mut out = Array::zeros(shape.clone());
    for idx in indices(&shape) {
        let mut j = idx[axis];
        let mut k = 0;
        while j >= parts[k].shape[axis] {
            j -= parts[k].shape[axis];
            k += 1;
        }
        out.set(&idx, parts[k].at(&with_axis(&idx, axis, j)));
    }
    out
}

pub fn mean_axis(x: &Array, axis: usize) -> Array {
    let shape = removed(&x.shape, axis);
    let mut out = Array::zeros(shape.clone());
    for idx in indices(&shape) {
        let s: f64 = (0..x.shape[axis])
            .map(|j| {
                let mut full = idx.clone();
                full.insert(axis, j);
                x.at(&full)
            })
            .sum();
        out.set(&idx, s / x.shape[axis] as f64);
    }
    out
}

pub fn max_axis(x: &Array, axis: usize) -> Array {
    let shape = removed(&x.shape, axis);
    let mut out = Array::zeros(shape.clone());
    for idx in indices(&shape) {
        let m = (0..x.shape[axis])
            .map(|j| {
                let mut full = idx.clone();
                full.insert(axis, j);
                x.at(&full)
            })
            .fold(f64::NEG_INFINITY, f64::max);
        out.set(&idx, m);
    }
    out
}

pub fn sum(x: &Array) -> f64 {
    x.data.iter().sum()
}

/// Mean over rows of `-log softmax(z)[target]`; a rank-1 input is one row.
pub fn cross_entropy(z: &Array, targets: &[usize]) -> f64 {
    let c = *z.shape.last().expect("rank >= 1");
    let rows = z.numel() / c;
    (0..rows)
        .map(|r| {
            let row = &z.data[r * c..(r + 1) * c];
            row.iter().map(|v| v.exp()).sum::<f64>().ln() - row[targets[r]]
        })
        .sum::<f64>()
        / rows as f64
}

/// `-[t log s(z) + (1-t) log(1-s(z))]`, summed and divided by the row count.
pub fn bce_with_logits(z: &Array, targets: &Array) -> f64 {
    let rows = if z.shape.len() >= 2 { z.shape[0] } else { 1 };
    z.data
        .iter()
        .zip(&targets.data)
        .map(|(&z, &t)| -(t * sigmoid(z).ln() + (1.0 - t) * (1.0 - sigmoid(z)).ln()))
        .sum::<f64>()
        / rows as f64
}

/// Bilinear sample as a sum over every pixel with tent weights, after
/// clamping the point into the plane.
pub fn bilinear_sample(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let mut s = 0.0;
    for i in 0..h {
        for j in 0..w {
            let wy = (1.0 - (y - i as f64).abs()).max(0.0);
            let wx = (1.0 - (x - j as f64).abs()).max(0.0);
            s += wy * wx * plane[i * w + j];
        }
    }
    s
}

/// `[C, T, out.0, out.1]` samples of batch element `batch`.
pub fn roi_align(x: &Array, batch: usize, points: &[(f64, f64)], out: (usize, usize)) -> Array {
    let (c, t, h, w) = (x.shape[1], x.shape[2], x.shape[3], x.shape[4]);
    let mut res = Array::zeros([c, t, out.0, out.1]);
    for ci in 0..c {
        for ti in 0..t {
            let plane: Vec<f64> = indices(&[h, w])
                .iter()
                .map(|p| x.at(&[batch, ci, ti, p[0], p[1]]))
                .collect();
            for (k, &(py, px)) in points.iter().enumerate() {
                res.set(&[ci, ti, k / out.1, k % out.1], bilinear_sample(&plane, h, w, py, px));
            }
        }
    }
    res
}

/// ROI extraction from first principles: the box's `[y1*H, y2*H)` extent
/// (widened to one cell if thinner) is split into `out` equal cells sampled
/// at their centres, with pixel `i` centred at `i + 0.5`.
pub fn roi_extract(x: &Array, batch: usize, b: &BBox, out: (usize, usize)) -> Array {
    let (h, w) = (x.shape[3], x.shape[4]);
    let extent = |lo: f64, hi: f64, n: usize| {
        let (a, z) = (lo * n as f64, hi * n as f64);
        if z - a < 1.0 {
            let c = (a + z) / 2.0;
            (c - 0.5, 1.0)
        } else {
            (a, z - a)
        }
    };
    let (top, bh) = extent(b.y1, b.y2, h);
    let (left, bw) = extent(b.x1, b.x2, w);
    let mut points = vec![];
    for i in 0..out.0 {
        for j in 0..out.1 {
            let cy = top + bh * (2 * i + 1) as f64 / (2 * out.0) as f64;
            let cx = left + bw * (2 * j + 1) as f64 / (2 * out.1) as f64;
            points.push((cy - 0.5, cx - 0.5));
        }
    }
    roi_align(x, batch, &points, out)
}

/// Per-query loop: `out_i = sum_j softmax_j(q_i . k_j / sqrt(d)) v_j`.
pub fn attention(q: &Array, k: &Array, v: &Array) -> Array {
    let (tq, d) = (q.shape[0], q.shape[1]);
    let (tk, dv) = (k.shape[0], v.shape[1]);
    let mut out = Array::zeros([tq, dv]);
    for i in 0..tq {
        let scores: Vec<f64> = (0..tk)
            .map(|j| (0..d).map(|p| q.at(&[i, p]) * k.at(&[j, p])).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        for c in 0..dv {
            let s: f64 = (0..tk).map(|j| scores[j].exp() / z * v.at(&[j, c])).sum();
            out.set(&[i, c], s);
        }
    }
    out
}

/// One LSTM step with packed `[i | f | g | o]` gate columns.
pub fn lstm_cell_ref(
    x: &[f64],
    h: &[f64],
    c: &[f64],
    w_in: &Array,
    w_hid: &Array,
    bias: &Array,
) -> (Vec<f64>, Vec<f64>) {
    let hd = h.len();
    let gate = |col: usize| {
        bias.data[col]
            + x.iter()
                .enumerate()
                .map(|(r, &xv)| xv * w_in.at(&[r, col]))
                .sum::<f64>()
            + h.iter()
                .enumerate()
                .map(|(r, &hv)| hv * w_hid.at(&[r, col]))
                .sum::<f64>()
    };
    let mut h_next = vec![0.0; hd];
    let mut c_next = vec![0.0; hd];
    for u in 0..hd {
        let i = sigmoid(gate(u));
        let f = sigmoid(gate(hd + u));
        let g = gate(2 * hd + u).tanh();
        let o = sigmoid(gate(3 * hd + u));
        c_next[u] = f * c[u] + i * g;
        h_next[u] = o * c_next[u].tanh();
    }
    (h_next, c_next)
}

/// Parameter values as `f64` arrays indexed by `ParamId`.
pub fn param_arrays(store: &ParamStore) -> Vec<Array> {
    store.ids().map(|id| Array::from_tensor(store.get(id))).collect()
}

fn linear(x: &Array, params: &[Array], l: &Linear) -> Array {
    add_bias(&matmul(x, &params[l.weight.0]), &params[l.bias.0], 1)
}

/// Conditioning of one attention-layer evaluation, for input screening.
#[derive(Clone, Copy, Debug)]
pub struct AttentionScreen {
    /// Smallest `|pre-activation|` of the feed-forward relu.
    pub min_relu_input: f64,
    /// Smallest per-row standard deviation entering either layer norm.
    pub min_norm_std: f64,
}

pub fn attention_layer_screen(x: &Array, params: &[Array], p: &AttentionParams) -> AttentionScreen {
    let (n1, a) = attention_first_half(x, params, p);
    let pre = linear(&n1, params, &p.ffn1);
    let f = linear(&pre.map(|v| v.max(0.0)), params, &p.ffn2);
    let std1 = min_slice_std(&x.zip(&a, |u, v| u + v), 1);
    let std2 = min_slice_std(&n1.zip(&f, |u, v| u + v), 1);
    AttentionScreen {
        min_relu_input: pre.data.iter().fold(f64::INFINITY, |m, v| m.min(v.abs())),
        min_norm_std: std1.min(std2),
    }
}

/// Smallest population standard deviation over the slices along `axis`.
pub fn min_slice_std(x: &Array, axis: usize) -> f64 {
    let n = x.shape[axis];
    let mut best = f64::INFINITY;
    for idx in indices(&x.shape) {
        if idx[axis] != 0 {
            continue;
        }
        let vals: Vec<f64> = (0..n).map(|j| x.at(&with_axis(&idx, axis, j))).collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        best = best.min(var.sqrt());
    }
    best
}

fn attention_first_half(x: &Array, params: &[Array], p: &AttentionParams) -> (Array, Array) {
    let heads: Vec<Array> = (0..p.heads)
        .map(|i| {
            attention(
                &linear(x, params, &p.query[i]),
                &linear(x, params, &p.key[i]),
                &linear(x, params, &p.value[i]),
            )
        })
        .collect();
    let a = linear(&concat(&heads, 1), params, &p.output);
    let eps = 1e-5f32 as f64;
    let n1 = layer_norm(
        &x.zip(&a, |u, v| u + v),
        &params[p.norm1.gain.0],
        &params[p.norm1.shift.0],
        1,
        eps,
    );
    (n1, a)
}

/// The attention encoder layer on `[T, D]`.
pub fn attention_layer(x: &Array, params: &[Array], p: &AttentionParams) -> Array {
    let (n1, _) = attention_first_half(x, params, p);
    let f = linear(&n1, params, &p.ffn1).map(|v| v.max(0.0));
    let f = linear(&f, params, &p.ffn2);
    layer_norm(
        &n1.zip(&f, |u, v| u + v),
        &params[p.norm2.gain.0],
        &params[p.norm2.shift.0],
        1,
        1e-5f32 as f64,
    )
}

fn lstm_layer(rows: &[Vec<f64>], params: &[Array], l: &LstmLayer, reverse: bool) -> Vec<Vec<f64>> {
    let mut h = vec![0.0; l.hidden];
    let mut c = vec![0.0; l.hidden];
    let mut out = vec![vec![]; rows.len()];
    let order: Vec<usize> = if reverse {
        (0..rows.len()).rev().collect()
    } else {
        (0..rows.len()).collect()
    };
    for t in order {
        (h, c) = lstm_cell_ref(
            &rows[t],
            &h,
            &c,
            &params[l.w_input.0],
            &params[l.w_hidden.0],
            &params[l.bias.0],
        );
        out[t] = h.clone();
    }
    out
}

/// The two-layer bidirectional LSTM on `[T, D]`, giving `[T, 2H]`.
pub fn bilstm(x: &Array, params: &[Array], p: &LstmParams) -> Array {
    let (t, d) = (x.shape[0], x.shape[1]);
    let rows: Vec<Vec<f64>> = (0..t).map(|i| x.data[i * d..(i + 1) * d].to_vec()).collect();
    let mut fwd = rows.clone();
    let mut bwd = rows;
    for l in 0..2 {
        fwd = lstm_layer(&fwd, params, &p.forward[l], false);
        bwd = lstm_layer(&bwd, params, &p.backward[l], true);
    }
    let data = fwd
        .into_iter()
        .zip(bwd)
        .flat_map(|(f, b)| f.into_iter().chain(b))
        .collect();
    Array::new([t, 2 * p.hidden], data)
}

fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    inter / ((a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter)
}

/// True positives among the `k` best-scored detections, matched from scratch.
fn true_positives(ranked: &[&Detection], gts: &[&BoxAnnotation], iou_thresh: f64) -> usize {
    let mut used = vec![false; gts.len()];
    let mut tp = 0;
    for d in ranked {
        let mut best = None;
        let mut best_iou = f64::NEG_INFINITY;
        for (j, g) in gts.iter().enumerate() {
            let same = g.video_id == d.video_id && g.keyframe_time == d.keyframe_time;
            if !used[j] && same {
                let v = box_iou(&d.bbox, &g.bbox);
                if v > best_iou {
                    best_iou = v;
                    best = Some(j);
                }
            }
        }
        if let Some(j) = best.filter(|_| best_iou >= iou_thresh) {
            used[j] = true;
            tp += 1;
        }
    }
    tp
}

/// Enumerates every score cutoff, matches each prefix independently, and
/// integrates the interpolated precision (the best precision at any cutoff
/// with at least that recall) over recall.
pub fn average_precision(dets: &[Detection], gts: &[BoxAnnotation], class_id: usize, iou_thresh: f64) -> Option<f64> {
    let gts: Vec<&BoxAnnotation> = gts.iter().filter(|g| g.class_ids.contains(&class_id)).collect();
    if gts.is_empty() {
        return None;
    }
    // selection sort on score, earlier input first among equals
    let mut left: Vec<&Detection> = dets.iter().collect();
    let mut ranked = vec![];
    while !left.is_empty() {
        let mut b = 0;
        for (i, d) in left.iter().enumerate() {
            if d.scores[class_id] > left[b].scores[class_id] {
                b = i;
            }
        }
        ranked.push(left.remove(b));
    }
    let tp: Vec<usize> = (0..=ranked.len())
        .map(|k| true_positives(&ranked[..k], &gts, iou_thresh))
        .collect();
    let n = gts.len() as f64;
    let mut ap = 0.0;
    for k in 1..=ranked.len() {
        let gained = (tp[k] - tp[k - 1]) as f64 / n;
        if gained > 0.0 {
            let best = (k..=ranked.len()).map(|j| tp[j] as f64 / j as f64).fold(0.0, f64::max);
            ap += gained * best;
        }
    }
    Some(ap)
}

/// Largest deviation of one fast implementation from its reference over a
/// batch of random instances.
#[derive(Clone, Debug, Serialize)]
pub struct EquivalenceRow {
    pub name: String,
    pub instances: usize,
    pub max_abs_error: f64,
}

pub const EQUIVALENCE_NAMES: [&str; 6] = [
    "conv3d",
    "maxpool3d",
    "scaled_dot_attention",
    "lstm_cell",
    "roi_extract",
    "average_precision",
];

fn rand_array<R: Rng>(rng: &mut R, shape: &[usize]) -> Array {
    let n = shape.iter().product();
    Array::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0f32) as f64).collect())
}

fn max_diff(fast: &Tensor, slow: &Array) -> f64 {
    assert_eq!(fast.shape(), slow.shape.as_slice(), "shape mismatch");
    fast.data()
        .iter()
        .zip(&slow.data)
        .map(|(&a, &b)| (a as f64 - b).abs())
        .fold(0.0, f64::max)
}

fn random_box<R: Rng>(rng: &mut R) -> BBox {
    // occasionally thinner than a feature cell
    let span = |rng: &mut R| {
        let w = if rng.gen_bool(0.2) {
            rng.gen_range(0.005..0.05)
        } else {
            rng.gen_range(0.05..1.0)
        };
        let lo = rng.gen_range(0.0..=1.0 - w);
        (lo, lo + w)
    };
    let (x1, x2) = span(rng);
    let (y1, y2) = span(rng);
    BBox { x1, y1, x2, y2 }
}

fn equivalence_instance(name: &str, rng: &mut ChaCha8Rng) -> Result<f64> {
    let g = Graph::new();
    let d = |rng: &mut ChaCha8Rng, hi: usize| rng.gen_range(1..=hi);
    Ok(match name {
        "conv3d" => {
            let (n, ci, co) = (d(rng, 2), d(rng, 3), d(rng, 3));
            let input = [d(rng, 6), d(rng, 6), d(rng, 6)];
            let (mut k, mut st, mut pad, mut dil) = ([1; 3], [1; 3], [0; 3], [1; 3]);
            for a in 0..3 {
                k[a] = d(rng, 3);
                st[a] = d(rng, 2);
                pad[a] = rng.gen_range(0..=1);
                dil[a] = d(rng, 2);
                while dil[a] * (k[a] - 1) + 1 > input[a] + 2 * pad[a] {
                    if dil[a] > 1 {
                        dil[a] = 1;
                    } else {
                        k[a] -= 1;
                    }
                }
            }
            let x = rand_array(rng, &[n, ci, input[0], input[1], input[2]]);
            let w = rand_array(rng, &[co, ci, k[0], k[1], k[2]]);
            let b = rand_array(rng, &[co]);
            let fast = g.constant(x.to_tensor()).conv3d(
                g.constant(w.to_tensor()),
                Some(g.constant(b.to_tensor())),
                Conv3dSpec::new(st, pad).with_dilation(dil),
            )?;
            max_diff(&fast.value(), &conv3d(&x, &w, Some(&b), st, pad, dil))
        }
        "maxpool3d" => {
            let s = [d(rng, 2), d(rng, 3), d(rng, 6), d(rng, 6), d(rng, 6)];
            let k = [d(rng, s[2].min(3)), d(rng, s[3].min(3)), d(rng, s[4].min(3))];
            let st = [d(rng, 3), d(rng, 3), d(rng, 3)];
            let x = rand_array(rng, &s);
            let fast = g.constant(x.to_tensor()).max_pool3d(k, st)?;
            max_diff(&fast.value(), &max_pool3d(&x, k, st))
        }
        "scaled_dot_attention" => {
            let (tq, tk, dk, dv) = (d(rng, 6), d(rng, 6), d(rng, 4), d(rng, 4));
            let (q, k, v) = (
                rand_array(rng, &[tq, dk]),
                rand_array(rng, &[tk, dk]),
                rand_array(rng, &[tk, dv]),
            );
            let fast = scaled_dot_attention(
                g.constant(q.to_tensor()),
                g.constant(k.to_tensor()),
                g.constant(v.to_tensor()),
            )?;
            max_diff(&fast.value(), &attention(&q, &k, &v))
        }
        "lstm_cell" => {
            let (din, hd) = (d(rng, 5), d(rng, 4));
            let mut store = ParamStore::new();
            let layer = LstmLayer::new(&mut store, "cell", din, hd, rng);
            for id in store.ids().collect::<Vec<_>>() {
                let s = store.get(id).shape().to_vec();
                store.set(id, rand_array(rng, &s).to_tensor())?;
            }
            let (x, h, c) = (
                rand_array(rng, &[1, din]),
                rand_array(rng, &[1, hd]),
                rand_array(rng, &[1, hd]),
            );
            let (hf, cf) = lstm_cell(
                &g,
                &store,
                g.constant(x.to_tensor()),
                g.constant(h.to_tensor()),
                g.constant(c.to_tensor()),
                &layer,
            )?;
            let p = param_arrays(&store);
            let (hs, cs) = lstm_cell_ref(&x.data, &h.data, &c.data, &p[0], &p[1], &p[2]);
            max_diff(&hf.value(), &Array::new([1, hd], hs)).max(max_diff(&cf.value(), &Array::new([1, hd], cs)))
        }
        "roi_extract" => {
            let s = [d(rng, 2), d(rng, 3), d(rng, 3), d(rng, 8), d(rng, 8)];
            let x = rand_array(rng, &s);
            let b = random_box(rng);
            let batch = rng.gen_range(0..s[0]);
            let out = (d(rng, 7), d(rng, 7));
            let fast = crate::detector::roi_extract(g.constant(x.to_tensor()), batch, &b, out)?;
            max_diff(&fast.value(), &roi_extract(&x, batch, &b, out))
        }
        "average_precision" => {
            let classes = d(rng, 3);
            let frame = |rng: &mut ChaCha8Rng| (format!("v{}", rng.gen_range(0..2)), rng.gen_range(0..2) as f64);
            let gts: Vec<BoxAnnotation> = (0..rng.gen_range(0..=6))
                .map(|_| {
                    let (video_id, keyframe_time) = frame(rng);
                    BoxAnnotation {
                        video_id,
                        bbox: random_box(rng),
                        class_ids: (0..classes).filter(|_| rng.gen_bool(0.6)).collect(),
                        keyframe_time,
                    }
                })
                .collect();
            let dets: Vec<Detection> = (0..rng.gen_range(0..=8))
                .map(|_| {
                    let (video_id, keyframe_time) = frame(rng);
                    // near copies of a truth box make hits likely
                    let bbox = match gts.get(rng.gen_range(0..gts.len() + 1)) {
                        Some(g) if rng.gen_bool(0.7) => g.bbox,
                        _ => random_box(rng),
                    };
                    Detection {
                        video_id,
                        bbox,
                        // coarse scores produce ties
                        scores: (0..classes).map(|_| rng.gen_range(0..5) as f32 / 4.0).collect(),
                        keyframe_time,
                    }
                })
                .collect();
            let mut worst = 0f64;
            for c in 0..classes {
                let fast = crate::metrics::average_precision(&dets, &gts, c, 0.5);
                let slow = average_precision(&dets, &gts, c, 0.5);
                worst = worst.max(match (fast, slow) {
                    (Some(a), Some(b)) => (a - b).abs(),
                    (None, None) => 0.0,
                    _ => f64::INFINITY,
                });
            }
            worst
        }
        other => return Err(Error::Input(format!("no equivalence check named {other:?}"))),
    })
}

/// `instances` random cases of the named implementation against its
/// reference.
pub fn equivalence(name: &str, instances: usize, seed: u64) -> Result<EquivalenceRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0f64;
    for _ in 0..instances {
        worst = worst.max(equivalence_instance(name, &mut rng)?);
    }
    Ok(EquivalenceRow {
        name: name.to_string(),
        instances,
        max_abs_error: worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indices_are_row_major() {
        assert_eq!(indices(&[2, 2]), vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]]);
        assert_eq!(indices(&[]), vec![Vec::<usize>::new()]);
    }

    #[test]
    fn small_hand_cases() {
        let a = Array::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(matmul(&a, &a).data, vec![7.0, 10.0, 15.0, 22.0]);
        assert_eq!(transpose(&a).data, vec![1.0, 3.0, 2.0, 4.0]);
        assert_eq!(
            concat(&[a.clone(), a.clone()], 1).data,
            vec![1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0]
        );
        assert_eq!(mean_axis(&a, 0).data, vec![2.0, 3.0]);
        assert_eq!(max_axis(&a, 1).data, vec![2.0, 4.0]);
        let plane = [0.0, 1.0, 2.0, 3.0];
        assert!((bilinear_sample(&plane, 2, 2, 0.5, 0.5) - 1.5).abs() < 1e-12);
        assert!((bilinear_sample(&plane, 2, 2, 9.0, -3.0) - 2.0).abs() < 1e-12);
    }
}
