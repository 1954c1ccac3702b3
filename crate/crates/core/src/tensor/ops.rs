use rand::Rng;

use super::graph::{sigmoid, Op, Var};
use super::kernels::{self, Conv3dSpec, ConvGeom};
use super::{split_at_axis, Tensor};
use crate::error::{Error, Result};

fn dim_err(op: &'static str, axis: usize, expected: usize, got: usize) -> Error {
    Error::Dimension {
        op,
        axis,
        expected,
        got,
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{op}: rank {} vs {}", a.len(), b.len())));
    }
    for (axis, (&x, &y)) in a.iter().zip(b).enumerate() {
        if x != y {
            return Err(dim_err(op, axis, x, y));
        }
    }
    Ok(())
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Shape(format!(
            "{op}: axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok(())
}

/// Inverted-dropout mask: zeros with probability `p`, survivors `1/(1-p)`.
pub fn dropout_mask<R: Rng + ?Sized>(n: usize, p: f32, rng: &mut R) -> Vec<f32> {
    let keep = 1.0 / (1.0 - p);
    (0..n).map(|_| if rng.gen::<f32>() < p { 0.0 } else { keep }).collect()
}

impl<'g> Var<'g> {
    fn unary(self, f: impl Fn(f32) -> f32, op: Op) -> Var<'g> {
        let x = self.value();
        let out = x.data().iter().map(|&v| f(v)).collect();
        self.graph.push(Tensor::from_parts(x.shape().to_vec(), out), op)
    }

    fn binary(self, other: Var<'g>, name: &'static str, f: impl Fn(f32, f32) -> f32, op: Op) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        same_shape(name, a.shape(), b.shape())?;
        let out = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(self.graph.push(Tensor::from_parts(a.shape().to_vec(), out), op))
    }

    /// 3-D cross-correlation of `[N, C, T, H, W]` with `[Co, C, kt, kh, kw]`.
    pub fn conv3d(self, weight: Var<'g>, bias: Option<Var<'g>>, spec: Conv3dSpec) -> Result<Var<'g>> {
        let (x, w) = (self.value(), weight.value());
        if x.rank() != 5 {
            return Err(Error::Shape(format!(
                "conv3d: input must be rank 5, got {:?}",
                x.shape()
            )));
        }
        if w.rank() != 5 {
            return Err(Error::Shape(format!(
                "conv3d: weight must be rank 5, got {:?}",
                w.shape()
            )));
        }
        if w.shape()[1] != x.shape()[1] {
            return Err(dim_err("conv3d", 1, w.shape()[1], x.shape()[1]));
        }
        if spec.stride.contains(&0) || spec.dilation.contains(&0) {
            return Err(Error::Shape("conv3d: stride and dilation must be >= 1".into()));
        }
        if let Some(b) = bias {
            let b = b.value();
            if b.shape() != [w.shape()[0]] {
                return Err(dim_err(
                    "conv3d",
                    0,
                    w.shape()[0],
                    b.shape().first().copied().unwrap_or(0),
                ));
            }
        }
        let mut output = [0; 3];
        for a in 0..3 {
            let (i, k) = (x.shape()[2 + a], w.shape()[2 + a]);
            output[a] = kernels::conv_out_extent(i, k, spec.stride[a], spec.padding[a], spec.dilation[a])
                .ok_or_else(|| dim_err("conv3d", 2 + a, spec.dilation[a] * (k - 1) + 1, i + 2 * spec.padding[a]))?;
        }
        let geom = ConvGeom {
            n: x.shape()[0],
            c_in: x.shape()[1],
            c_out: w.shape()[0],
            input: [x.shape()[2], x.shape()[3], x.shape()[4]],
            kernel: [w.shape()[2], w.shape()[3], w.shape()[4]],
            output,
            spec,
        };
        let bias_val = bias.map(|b| b.value());
        let (out, cols) = kernels::conv3d_forward(&geom, x.data(), w.data(), bias_val.as_deref().map(|b| b.data()));
        let shape = vec![geom.n, geom.c_out, output[0], output[1], output[2]];
        Ok(self.graph.push(
            Tensor::from_parts(shape, out),
            Op::Conv3d {
                input: self.id,
                weight: weight.id,
                bias: bias.map(|b| b.id),
                geom,
                cols,
            },
        ))
    }

    /// Unpadded max pooling over the last three axes of `[N, C, T, H, W]`.
    pub fn max_pool3d(self, kernel: [usize; 3], stride: [usize; 3]) -> Result<Var<'g>> {
        let x = self.value();
        if x.rank() != 5 {
            return Err(Error::Shape(format!(
                "maxpool3d: input must be rank 5, got {:?}",
                x.shape()
            )));
        }
        if kernel.contains(&0) || stride.contains(&0) {
            return Err(Error::Shape("maxpool3d: kernel and stride must be >= 1".into()));
        }
        let dims = [x.shape()[2], x.shape()[3], x.shape()[4]];
        let mut out = [0; 3];
        for a in 0..3 {
            if kernel[a] > dims[a] {
                return Err(dim_err("maxpool3d", 2 + a, kernel[a], dims[a]));
            }
            out[a] = (dims[a] - kernel[a]) / stride[a] + 1;
        }
        let nc = x.shape()[0] * x.shape()[1];
        let (vals, argmax) = kernels::maxpool3d_forward(x.data(), nc, dims, kernel, stride, out);
        let shape = vec![x.shape()[0], x.shape()[1], out[0], out[1], out[2]];
        Ok(self.graph.push(
            Tensor::from_parts(shape, vals),
            Op::MaxPool3d { input: self.id, argmax },
        ))
    }

    /// `[.., m, k] x [.., k, n]` with identical leading axes.
    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        let (ra, rb) = (a.rank(), b.rank());
        if ra < 2 || ra != rb {
            return Err(Error::Shape(format!(
                "matmul: shapes {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
        for axis in 0..ra - 2 {
            if a.shape()[axis] != b.shape()[axis] {
                return Err(dim_err("matmul", axis, a.shape()[axis], b.shape()[axis]));
            }
        }
        let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
        let (k2, n) = (b.shape()[rb - 2], b.shape()[rb - 1]);
        if k != k2 {
            return Err(dim_err("matmul", rb - 2, k, k2));
        }
        let batch: usize = a.shape()[..ra - 2].iter().product();
        let out = kernels::matmul_forward(a.data(), b.data(), batch, m, k, n);
        let mut shape = a.shape()[..ra - 2].to_vec();
        shape.extend([m, n]);
        Ok(self.graph.push(
            Tensor::from_parts(shape, out),
            Op::MatMul {
                a: self.id,
                b: other.id,
                dims: [batch, m, k, n],
            },
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'g>> {
        let x = self.value();
        let r = x.rank();
        if r < 2 {
            return Err(Error::Shape(format!("transpose: rank {r}")));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        let out = x.permute(&perm)?;
        Ok(self.graph.push(out, Op::Transpose { input: self.id }))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'g>> {
        let x = self.value();
        check_axis("softmax", x.shape(), axis)?;
        let (o, l, i) = split_at_axis(x.shape(), axis);
        let out = kernels::softmax_forward(x.data(), o, l, i);
        Ok(self.graph.push(
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::Softmax { input: self.id, axis },
        ))
    }

    /// Normalizes each slice along `axis` to zero mean and unit variance
    /// (variance floored by `eps`), then applies `gain` and `shift`.
    pub fn layer_norm(self, gain: Var<'g>, shift: Var<'g>, axis: usize, eps: f32) -> Result<Var<'g>> {
        let x = self.value();
        check_axis("layernorm", x.shape(), axis)?;
        let (outer, len, inner) = split_at_axis(x.shape(), axis);
        let (gv, sv) = (gain.value(), shift.value());
        same_shape("layernorm", &[len], gv.shape())?;
        same_shape("layernorm", &[len], sv.shape())?;
        let slice = |s: usize| {
            let (o, i) = (s / inner, s % inner);
            (0..len).map(|j| (o * len + j) * inner + i).collect::<Vec<_>>()
        };
        let (xhat, rstd) = kernels::normalize_slices(x.data(), outer * inner, eps as f64, slice);
        let out = xhat
            .iter()
            .enumerate()
            .map(|(f, &v)| {
                let j = (f / inner) % len;
                v * gv.data()[j] + sv.data()[j]
            })
            .collect();
        Ok(self.graph.push(
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::LayerNorm {
                input: self.id,
                gain: gain.id,
                shift: shift.id,
                axis,
                xhat,
                rstd,
            },
        ))
    }

    /// Per-sample normalization over all of `[C, ...]` for an `[N, C, ...]`
    /// input, followed by a per-channel affine map.
    pub fn channel_norm(self, gain: Var<'g>, shift: Var<'g>, eps: f32) -> Result<Var<'g>> {
        let x = self.value();
        if x.rank() < 2 {
            return Err(Error::Shape(format!("channel_norm: rank {}", x.rank())));
        }
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let per_c: usize = x.shape()[2..].iter().product();
        let (gv, sv) = (gain.value(), shift.value());
        same_shape("channel_norm", &[c], gv.shape())?;
        same_shape("channel_norm", &[c], sv.shape())?;
        let slice = |s: usize| (s * c * per_c..(s + 1) * c * per_c).collect::<Vec<_>>();
        let (xhat, rstd) = kernels::normalize_slices(x.data(), n, eps as f64, slice);
        let out = xhat
            .iter()
            .enumerate()
            .map(|(f, &v)| {
                let ch = (f / per_c) % c;
                v * gv.data()[ch] + sv.data()[ch]
            })
            .collect();
        Ok(self.graph.push(
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::ChannelNorm {
                input: self.id,
                gain: gain.id,
                shift: shift.id,
                xhat,
                rstd,
            },
        ))
    }

    pub fn relu(self) -> Var<'g> {
        self.unary(|v| v.max(0.0), Op::Relu { input: self.id })
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(sigmoid, Op::Sigmoid { input: self.id })
    }

    pub fn tanh(self) -> Var<'g> {
        self.unary(f32::tanh, Op::Tanh { input: self.id })
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(
            other,
            "add",
            |a, b| a + b,
            Op::Add {
                a: self.id,
                b: other.id,
            },
        )
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(
            other,
            "sub",
            |a, b| a - b,
            Op::Sub {
                a: self.id,
                b: other.id,
            },
        )
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(
            other,
            "mul",
            |a, b| a * b,
            Op::Mul {
                a: self.id,
                b: other.id,
            },
        )
    }

    pub fn scale(self, factor: f32) -> Var<'g> {
        self.unary(move |v| v * factor, Op::Scale { input: self.id, factor })
    }

    /// Multiplies every element by a one-element tensor.
    pub fn scale_by(self, scalar: Var<'g>) -> Result<Var<'g>> {
        let s = scalar.value();
        if s.numel() != 1 {
            return Err(Error::Shape(format!("scale_by: scalar has shape {:?}", s.shape())));
        }
        let s = s.data()[0];
        Ok(self.unary(
            move |v| v * s,
            Op::ScaleBy {
                input: self.id,
                scalar: scalar.id,
            },
        ))
    }

    /// Adds `bias[j]` to every element whose index along `axis` is `j`.
    pub fn add_bias(self, bias: Var<'g>, axis: usize) -> Result<Var<'g>> {
        let (x, b) = (self.value(), bias.value());
        check_axis("add_bias", x.shape(), axis)?;
        let (_, len, inner) = split_at_axis(x.shape(), axis);
        if b.shape() != [len] {
            return Err(dim_err("add_bias", axis, len, b.numel()));
        }
        let out = x
            .data()
            .iter()
            .enumerate()
            .map(|(f, &v)| v + b.data()[(f / inner) % len])
            .collect();
        Ok(self.graph.push(
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::AddBias {
                input: self.id,
                bias: bias.id,
                axis,
            },
        ))
    }

    /// Inverted dropout; identity when not training or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(self, p: f32, training: bool, rng: &mut R) -> Result<Var<'g>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(self);
        }
        let mask = dropout_mask(self.value().numel(), p, rng);
        Ok(self.with_mask(mask))
    }

    /// Dropout with an explicit mask (used by the gradient checker).
    pub fn with_mask(self, mask: Vec<f32>) -> Var<'g> {
        let x = self.value();
        assert_eq!(mask.len(), x.numel());
        let out = x.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        self.graph.push(
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::Dropout { input: self.id, mask },
        )
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'g>> {
        let out = (*self.value()).clone().reshape(shape)?;
        Ok(self.graph.push(out, Op::Reshape { input: self.id }))
    }

    /// `len` consecutive entries along `axis` starting at `start`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let x = self.value();
        check_axis("narrow", x.shape(), axis)?;
        let (outer, in_len, inner) = split_at_axis(x.shape(), axis);
        if len == 0 || start + len > in_len {
            return Err(dim_err("narrow", axis, start + len.max(1), in_len));
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&x.data()[(o * in_len + start) * inner..][..len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        Ok(self.graph.push(
            Tensor::from_parts(shape, out),
            Op::Narrow {
                input: self.id,
                axis,
                start,
            },
        ))
    }

    /// The `index`-th entry along `axis`, keeping the axis with extent 1.
    pub fn select(self, axis: usize, index: usize) -> Result<Var<'g>> {
        self.narrow(axis, index, 1)
    }

    /// Gathers entries along `axis`; indices may repeat or reorder.
    pub fn index_select(self, axis: usize, indices: &[usize]) -> Result<Var<'g>> {
        let x = self.value();
        check_axis("index_select", x.shape(), axis)?;
        let (outer, in_len, inner) = split_at_axis(x.shape(), axis);
        if indices.is_empty() {
            return Err(Error::Shape("index_select: empty index list".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= in_len) {
            return Err(dim_err("index_select", axis, in_len, bad));
        }
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                out.extend_from_slice(&x.data()[(o * in_len + i) * inner..][..inner]);
            }
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = indices.len();
        Ok(self.graph.push(
            Tensor::from_parts(shape, out),
            Op::IndexSelect {
                input: self.id,
                axis,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'g>> {
        let x = self.value();
        check_axis("mean_axis", x.shape(), axis)?;
        let (outer, len, inner) = split_at_axis(x.shape(), axis);
        let mut out = vec![0f32; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..len).map(|j| x.data()[(o * len + j) * inner + i] as f64).sum();
                out[o * inner + i] = (s / len as f64) as f32;
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        Ok(self
            .graph
            .push(Tensor::from_parts(shape, out), Op::MeanAxis { input: self.id, axis }))
    }

    /// Maximum over `axis` (removed); gradient goes to the first maximal entry.
    pub fn max_axis(self, axis: usize) -> Result<Var<'g>> {
        let x = self.value();
        check_axis("max_axis", x.shape(), axis)?;
        let (outer, len, inner) = split_at_axis(x.shape(), axis);
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best_i = o * len * inner + i;
                for j in 1..len {
                    let f = (o * len + j) * inner + i;
                    if x.data()[f] > x.data()[best_i] {
                        best_i = f;
                    }
                }
                out.push(x.data()[best_i]);
                argmax.push(best_i);
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        Ok(self
            .graph
            .push(Tensor::from_parts(shape, out), Op::MaxAxis { input: self.id, argmax }))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(self) -> Var<'g> {
        let x = self.value();
        let s: f64 = x.data().iter().map(|&v| v as f64).sum();
        self.graph.push(Tensor::scalar(s as f32), Op::Sum { input: self.id })
    }

    /// Mean softmax cross-entropy of `[rows, classes]` (or `[classes]`) logits.
    pub fn cross_entropy(self, targets: &[usize]) -> Result<Var<'g>> {
        let z = self.value();
        let (rows, c) = match z.shape() {
            [c] => (1, *c),
            [r, c] => (*r, *c),
            s => return Err(Error::Shape(format!("cross_entropy: logits shape {s:?}"))),
        };
        if targets.len() != rows {
            return Err(dim_err("cross_entropy", 0, rows, targets.len()));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Input(format!("cross_entropy: target {t} with {c} classes")));
        }
        let probs = kernels::softmax_forward(z.data(), rows, c, 1);
        let mut loss = 0f64;
        for (r, &t) in targets.iter().enumerate() {
            let row = &z.data()[r * c..(r + 1) * c];
            let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
            let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
            loss += lse - row[t] as f64;
        }
        Ok(self.graph.push(
            Tensor::scalar((loss / rows as f64) as f32),
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Per-class binary cross-entropy on logits, summed over classes and
    /// averaged over rows.
    pub fn bce_with_logits(self, targets: &Tensor) -> Result<Var<'g>> {
        let z = self.value();
        same_shape("bce_with_logits", z.shape(), targets.shape())?;
        let rows = if z.rank() >= 2 { z.shape()[0] } else { 1 };
        let loss: f64 = z
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| {
                let (z, t) = (z as f64, t as f64);
                z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
            })
            .sum();
        Ok(self.graph.push(
            Tensor::scalar((loss / rows as f64) as f32),
            Op::BceWithLogits {
                logits: self.id,
                targets: targets.data().to_vec(),
            },
        ))
    }

    /// Bilinear ROI-align of batch element `batch` of an `[N, C, T, H, W]`
    /// map. `points` are sample positions in feature-index coordinates, row
    /// major over the output grid `out`; the same points are used at every
    /// temporal index. Output `[C, T, out.0, out.1]`.
    pub fn roi_align(self, batch: usize, points: &[(f64, f64)], out: (usize, usize)) -> Result<Var<'g>> {
        let x = self.value();
        if x.rank() != 5 {
            return Err(Error::Shape(format!(
                "roi_align: input must be rank 5, got {:?}",
                x.shape()
            )));
        }
        if batch >= x.shape()[0] {
            return Err(dim_err("roi_align", 0, x.shape()[0], batch));
        }
        if points.len() != out.0 * out.1 || points.is_empty() {
            return Err(Error::Shape(format!(
                "roi_align: {} points for a {}x{} grid",
                points.len(),
                out.0,
                out.1
            )));
        }
        let (c, t, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3], x.shape()[4]);
        let taps: Vec<[(usize, f32); 4]> = points
            .iter()
            .map(|&(py, px)| kernels::bilinear_taps(py, px, h, w))
            .collect();
        let plane = h * w;
        let mut data = Vec::with_capacity(c * t * taps.len());
        for ci in 0..c {
            for ti in 0..t {
                let p = &x.data()[((batch * c + ci) * t + ti) * plane..][..plane];
                for cell in &taps {
                    let v: f64 = cell.iter().map(|&(i, wt)| p[i] as f64 * wt as f64).sum();
                    data.push(v as f32);
                }
            }
        }
        Ok(self.graph.push(
            Tensor::from_parts(vec![c, t, out.0, out.1], data),
            Op::RoiAlign {
                input: self.id,
                batch,
                taps,
            },
        ))
    }
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<'g>(vars: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
    let first = vars.first().ok_or_else(|| Error::Shape("concat: no inputs".into()))?;
    let values: Vec<_> = vars.iter().map(|v| v.value()).collect();
    let base = values[0].shape().to_vec();
    check_axis("concat", &base, axis)?;
    let mut total = 0;
    for v in &values {
        if v.rank() != base.len() {
            return Err(Error::Shape(format!("concat: rank {} vs {}", v.rank(), base.len())));
        }
        for (a, (&x, &y)) in v.shape().iter().zip(&base).enumerate() {
            if a != axis && x != y {
                return Err(dim_err("concat", a, y, x));
            }
        }
        total += v.shape()[axis];
    }
    let (outer, _, inner) = split_at_axis(&base, axis);
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for v in &values {
            let len = v.shape()[axis];
            out.extend_from_slice(&v.data()[o * len * inner..][..len * inner]);
        }
    }
    let mut shape = base;
    shape[axis] = total;
    Ok(first.graph.push(
        Tensor::from_parts(shape, out),
        Op::Concat {
            inputs: vars.iter().map(|v| v.id).collect(),
            axis,
        },
    ))
}
