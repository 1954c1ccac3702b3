//! Finite-difference gradient checks. Analytic gradients from the tensor
//! engine are compared elementwise with central differences of the 64-bit
//! reference implementations in [`crate::oracle`].

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::heads::{bilstm_head, multi_head_attention, AttentionParams, LstmParams};
use crate::oracle::{self, Array};
use crate::tensor::{concat, Conv3dSpec, Graph, OpKind, ParamId, ParamStore, Tensor, Var};

pub const FD_STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-3;
/// For checks whose inputs pass through a relu.
pub const KINK_TOLERANCE: f64 = 3e-3;
/// Inputs closer than this to a relu kink or a max tie are redrawn.
pub const KINK_MARGIN: f64 = 1e-2;
/// Normalized slices with a smaller standard deviation are redrawn: the
/// central difference's truncation error grows like `(step / std)^2`.
pub const MIN_NORM_STD: f64 = 0.25;

/// `|a - n| / max(|a|, |n|, 1e-3)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Largest relative error over the loss value and every input element.
pub fn compare(inputs: &[Array], loss: f64, grads: &[Vec<f64>], oracle_loss: &dyn Fn(&[Array]) -> f64) -> f64 {
    let mut worst = relative_error(loss, oracle_loss(inputs));
    let mut work = inputs.to_vec();
    for (i, g) in grads.iter().enumerate() {
        for j in 0..work[i].numel() {
            let orig = work[i].data[j];
            work[i].data[j] = orig + FD_STEP;
            let up = oracle_loss(&work);
            work[i].data[j] = orig - FD_STEP;
            let down = oracle_loss(&work);
            work[i].data[j] = orig;
            worst = worst.max(relative_error(g[j], (up - down) / (2.0 * FD_STEP)));
        }
    }
    worst
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckRow {
    pub name: String,
    pub shapes: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

type Forward = Box<dyn for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>>;
type Reference = Box<dyn Fn(&[Array]) -> Array>;

/// One op applied to leaf inputs, reduced to a scalar by a fixed random
/// projection of its output.
struct OpCase {
    inputs: Vec<Array>,
    forward: Forward,
    reference: Reference,
}

/// Uniform values already rounded to `f32`, so both sides see the same input.
fn uniform<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Array {
    let n = shape.iter().product();
    Array::new(shape, (0..n).map(|_| rng.gen_range(lo..hi) as f32 as f64).collect())
}

/// Pairwise-distinct values, at least `0.05` apart, in random order.
fn distinct<R: Rng>(rng: &mut R, shape: &[usize]) -> Array {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n)
        .map(|i| ((i as f64 - n as f64 / 2.0) * 0.05) as f32 as f64)
        .collect();
    v.shuffle(rng);
    Array::new(shape, v)
}

/// Values at least `KINK_MARGIN` away from zero.
fn off_kink<R: Rng>(rng: &mut R, shape: &[usize]) -> Array {
    let mut a = uniform(rng, shape, -1.0, 1.0);
    for v in &mut a.data {
        while v.abs() < KINK_MARGIN {
            *v = rng.gen_range(-1.0..1.0f64) as f32 as f64;
        }
    }
    a
}

fn dims<R: Rng>(rng: &mut R, ranks: std::ops::RangeInclusive<usize>, lo: usize, hi: usize) -> Vec<usize> {
    let rank = rng.gen_range(ranks);
    (0..rank).map(|_| rng.gen_range(lo..=hi)).collect()
}

fn run_op_case(case: &OpCase, rng: &mut ChaCha8Rng) -> Result<f64> {
    let out0 = (case.reference)(&case.inputs);
    let proj = uniform(rng, &out0.shape, -1.0, 1.0);
    let g = Graph::new();
    let leaves: Vec<Var> = case.inputs.iter().map(|a| g.leaf(a.to_tensor())).collect();
    let out = (case.forward)(&g, &leaves)?;
    let loss = out.mul(g.constant(proj.to_tensor()))?.sum();
    let grads = g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .zip(&case.inputs)
        .map(|(v, a)| match grads.get(*v) {
            Some(t) => t.data().iter().map(|&x| x as f64).collect(),
            None => vec![0.0; a.numel()],
        })
        .collect();
    let reference = &case.reference;
    let oracle_loss = |inp: &[Array]| {
        let o = reference(inp);
        o.data.iter().zip(&proj.data).map(|(a, b)| a * b).sum()
    };
    Ok(compare(
        &case.inputs,
        loss.value().item() as f64,
        &analytic,
        &oracle_loss,
    ))
}

fn conv_case(rng: &mut ChaCha8Rng) -> OpCase {
    let n = rng.gen_range(1..=2);
    let ci = rng.gen_range(1..=3);
    let co = rng.gen_range(1..=3);
    let input = dims(rng, 3..=3, 1, 5);
    let mut kernel = [1; 3];
    let mut stride = [1; 3];
    let mut padding = [0; 3];
    let mut dilation = [1; 3];
    for a in 0..3 {
        kernel[a] = rng.gen_range(1..=3);
        stride[a] = rng.gen_range(1..=2);
        padding[a] = rng.gen_range(0..=1);
        dilation[a] = rng.gen_range(1..=2);
        // shrink until the dilated kernel fits
        while dilation[a] * (kernel[a] - 1) + 1 > input[a] + 2 * padding[a] {
            if dilation[a] > 1 {
                dilation[a] = 1;
            } else {
                kernel[a] -= 1;
            }
        }
    }
    let inputs = vec![
        uniform(rng, &[n, ci, input[0], input[1], input[2]], -1.0, 1.0),
        uniform(rng, &[co, ci, kernel[0], kernel[1], kernel[2]], -1.0, 1.0),
        uniform(rng, &[co], -1.0, 1.0),
    ];
    let spec = Conv3dSpec::new(stride, padding).with_dilation(dilation);
    OpCase {
        inputs,
        forward: Box::new(move |_, v| v[0].conv3d(v[1], Some(v[2]), spec)),
        reference: Box::new(move |a| oracle::conv3d(&a[0], &a[1], Some(&a[2]), stride, padding, dilation)),
    }
}

fn op_case(kind: OpKind, rng: &mut ChaCha8Rng) -> OpCase {
    macro_rules! case {
        ($inputs:expr, |$g:ident, $v:ident| $fwd:expr, |$a:ident| $reference:expr) => {
            OpCase {
                inputs: $inputs,
                forward: Box::new(move |$g, $v| $fwd),
                reference: Box::new(move |$a| $reference),
            }
        };
    }
    let rank = rng.gen_range(1..=3);
    let shape = dims(rng, rank..=rank, 1, 4);
    let axis = rng.gen_range(0..rank);
    match kind {
        OpKind::Conv3d => conv_case(rng),
        OpKind::MaxPool3d => {
            let s = [rng.gen_range(1..=2), rng.gen_range(1..=2)]
                .into_iter()
                .chain(dims(rng, 3..=3, 1, 5))
                .collect::<Vec<_>>();
            let kernel = [0, 1, 2].map(|a| rng.gen_range(1..=s[2 + a].min(3)));
            let stride = [0, 1, 2].map(|_| rng.gen_range(1..=2));
            case!(vec![distinct(rng, &s)], |_g, v| v[0].max_pool3d(kernel, stride), |a| {
                oracle::max_pool3d(&a[0], kernel, stride)
            })
        }
        OpKind::MatMul => {
            let lead = dims(rng, 0..=1, 1, 3);
            let (m, k, n) = (rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(1..=4));
            let sa: Vec<usize> = lead.iter().copied().chain([m, k]).collect();
            let sb: Vec<usize> = lead.iter().copied().chain([k, n]).collect();
            let inputs = vec![uniform(rng, &sa, -1.0, 1.0), uniform(rng, &sb, -1.0, 1.0)];
            case!(inputs, |_g, v| v[0].matmul(v[1]), |a| oracle::matmul(&a[0], &a[1]))
        }
        OpKind::Transpose => {
            let s = dims(rng, 2..=4, 1, 4);
            case!(vec![uniform(rng, &s, -1.0, 1.0)], |_g, v| v[0].transpose(), |a| {
                oracle::transpose(&a[0])
            })
        }
        OpKind::Softmax => case!(vec![uniform(rng, &shape, -2.0, 2.0)], |_g, v| v[0].softmax(axis), |a| {
            oracle::softmax(&a[0], axis)
        }),
        OpKind::LayerNorm => {
            let mut s = shape.clone();
            s[axis] = s[axis].max(2);
            let n = s[axis];
            let x = loop {
                let x = uniform(rng, &s, -1.0, 1.0);
                if oracle::min_slice_std(&x, axis) >= MIN_NORM_STD {
                    break x;
                }
            };
            let inputs = vec![x, uniform(rng, &[n], 0.5, 1.5), uniform(rng, &[n], -0.5, 0.5)];
            case!(inputs, |_g, v| v[0].layer_norm(v[1], v[2], axis, 1e-5), |a| {
                oracle::layer_norm(&a[0], &a[1], &a[2], axis, 1e-5f32 as f64)
            })
        }
        OpKind::ChannelNorm => {
            let s = dims(rng, 2..=5, 1, 3);
            let s: Vec<usize> = [s[0], s[1].max(2)].into_iter().chain(s[2..].iter().copied()).collect();
            let c = s[1];
            let per_sample = s[1..].iter().product::<usize>();
            let x = loop {
                let x = uniform(rng, &s, -1.0, 1.0);
                if oracle::min_slice_std(&x.reshape([s[0], per_sample]), 1) >= MIN_NORM_STD {
                    break x;
                }
            };
            let inputs = vec![x, uniform(rng, &[c], 0.5, 1.5), uniform(rng, &[c], -0.5, 0.5)];
            case!(inputs, |_g, v| v[0].channel_norm(v[1], v[2], 1e-5), |a| {
                oracle::channel_norm(&a[0], &a[1], &a[2], 1e-5f32 as f64)
            })
        }
        OpKind::Relu => case!(vec![off_kink(rng, &shape)], |_g, v| Ok(v[0].relu()), |a| a[0]
            .map(|x| x.max(0.0))),
        OpKind::Sigmoid => case!(vec![uniform(rng, &shape, -3.0, 3.0)], |_g, v| Ok(v[0].sigmoid()), |a| a
            [0]
        .map(oracle::sigmoid)),
        OpKind::Tanh => case!(vec![uniform(rng, &shape, -2.0, 2.0)], |_g, v| Ok(v[0].tanh()), |a| a[0]
            .map(f64::tanh)),
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let inputs = vec![uniform(rng, &shape, -1.0, 1.0), uniform(rng, &shape, -1.0, 1.0)];
            match kind {
                OpKind::Add => case!(inputs, |_g, v| v[0].add(v[1]), |a| a[0].zip(&a[1], |x, y| x + y)),
                OpKind::Sub => case!(inputs, |_g, v| v[0].sub(v[1]), |a| a[0].zip(&a[1], |x, y| x - y)),
                _ => case!(inputs, |_g, v| v[0].mul(v[1]), |a| a[0].zip(&a[1], |x, y| x * y)),
            }
        }
        OpKind::Scale => {
            let f = rng.gen_range(-2.0..2.0f32);
            case!(vec![uniform(rng, &shape, -1.0, 1.0)], |_g, v| Ok(v[0].scale(f)), |a| a
                [0]
            .map(|x| x * f as f64))
        }
        OpKind::ScaleBy => {
            let inputs = vec![uniform(rng, &shape, -1.0, 1.0), uniform(rng, &[1], -2.0, 2.0)];
            case!(inputs, |_g, v| v[0].scale_by(v[1]), |a| {
                let s = a[1].data[0];
                a[0].map(|x| x * s)
            })
        }
        OpKind::AddBias => {
            let inputs = vec![uniform(rng, &shape, -1.0, 1.0), uniform(rng, &[shape[axis]], -1.0, 1.0)];
            case!(inputs, |_g, v| v[0].add_bias(v[1], axis), |a| oracle::add_bias(
                &a[0], &a[1], axis
            ))
        }
        OpKind::Dropout => {
            let n: usize = shape.iter().product();
            let mask = crate::tensor::dropout_mask(n, 0.5, rng);
            let m64: Vec<f64> = mask.iter().map(|&m| m as f64).collect();
            case!(
                vec![uniform(rng, &shape, -1.0, 1.0)],
                |_g, v| Ok(v[0].with_mask(mask.clone())),
                |a| {
                    Array::new(
                        a[0].shape.clone(),
                        a[0].data.iter().zip(&m64).map(|(x, m)| x * m).collect(),
                    )
                }
            )
        }
        OpKind::Reshape => {
            let n: usize = shape.iter().product();
            let target = [n];
            case!(
                vec![uniform(rng, &shape, -1.0, 1.0)],
                |_g, v| v[0].reshape(target),
                |a| a[0].reshape(target)
            )
        }
        OpKind::Narrow => {
            let start = rng.gen_range(0..shape[axis]);
            let len = rng.gen_range(1..=shape[axis] - start);
            case!(
                vec![uniform(rng, &shape, -1.0, 1.0)],
                |_g, v| v[0].narrow(axis, start, len),
                |a| { oracle::narrow(&a[0], axis, start, len) }
            )
        }
        OpKind::Concat => {
            let parts = rng.gen_range(1..=3);
            let inputs: Vec<Array> = (0..parts)
                .map(|_| {
                    let mut s = shape.clone();
                    s[axis] = rng.gen_range(1..=3);
                    uniform(rng, &s, -1.0, 1.0)
                })
                .collect();
            case!(inputs, |_g, v| concat(v, axis), |a| oracle::concat(a, axis))
        }
        OpKind::IndexSelect => {
            let picks: Vec<usize> = (0..rng.gen_range(1..=5))
                .map(|_| rng.gen_range(0..shape[axis]))
                .collect();
            let p2 = picks.clone();
            case!(
                vec![uniform(rng, &shape, -1.0, 1.0)],
                |_g, v| v[0].index_select(axis, &picks),
                |a| { oracle::index_select(&a[0], axis, &p2) }
            )
        }
        OpKind::MeanAxis => case!(
            vec![uniform(rng, &shape, -1.0, 1.0)],
            |_g, v| v[0].mean_axis(axis),
            |a| oracle::mean_axis(&a[0], axis)
        ),
        OpKind::Sum => case!(vec![uniform(rng, &shape, -1.0, 1.0)], |_g, v| Ok(v[0].sum()), |a| {
            Array::new(Vec::<usize>::new(), vec![oracle::sum(&a[0])])
        }),
        OpKind::MaxAxis => case!(vec![distinct(rng, &shape)], |_g, v| v[0].max_axis(axis), |a| {
            oracle::max_axis(&a[0], axis)
        }),
        OpKind::CrossEntropy => {
            let (rows, c) = (rng.gen_range(1..=4), rng.gen_range(2..=5));
            let targets: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..c)).collect();
            let t2 = targets.clone();
            case!(
                vec![uniform(rng, &[rows, c], -2.0, 2.0)],
                |_g, v| v[0].cross_entropy(&targets),
                |a| { Array::new(Vec::<usize>::new(), vec![oracle::cross_entropy(&a[0], &t2)]) }
            )
        }
        OpKind::BceWithLogits => {
            let s = dims(rng, 1..=2, 1, 4);
            let targets = uniform(rng, &s, 0.0, 1.0);
            let tt = targets.to_tensor();
            case!(
                vec![uniform(rng, &s, -3.0, 3.0)],
                |_g, v| v[0].bce_with_logits(&tt),
                |a| { Array::new(Vec::<usize>::new(), vec![oracle::bce_with_logits(&a[0], &targets)]) }
            )
        }
        OpKind::RoiAlign => {
            let s = [rng.gen_range(1..=2), rng.gen_range(1..=2), rng.gen_range(1..=2)]
                .into_iter()
                .chain(dims(rng, 2..=2, 2, 5))
                .collect::<Vec<_>>();
            let batch = rng.gen_range(0..s[0]);
            let out = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            let (h, w) = (s[3] as f64, s[4] as f64);
            let points: Vec<(f64, f64)> = (0..out.0 * out.1)
                .map(|_| (rng.gen_range(-0.5..h - 0.5), rng.gen_range(-0.5..w - 0.5)))
                .collect();
            let p2 = points.clone();
            case!(
                vec![uniform(rng, &s, -1.0, 1.0)],
                |_g, v| v[0].roi_align(batch, &points, out),
                |a| { oracle::roi_align(&a[0], batch, &p2, out) }
            )
        }
        OpKind::Leaf => unreachable!("leaves have no gradient rule"),
    }
}

/// Randomizes every parameter so that biases, gains and shifts are generic.
fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) -> Result<()> {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let s = store.get(id).shape().to_vec();
        store.set(id, uniform(rng, &s, -scale, scale).to_tensor())?;
    }
    Ok(())
}

/// Checks a head whose inputs are `x` followed by every stored parameter.
fn check_head<F, O>(store: &ParamStore, x: &Array, forward: F, reference: O, rng: &mut ChaCha8Rng) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
    O: Fn(&Array, &[Array]) -> Array,
{
    let params = oracle::param_arrays(store);
    let out0 = reference(x, &params);
    let proj = uniform(rng, &out0.shape, -1.0, 1.0);
    let g = Graph::new();
    let xv = g.leaf(x.to_tensor());
    let loss = forward(&g, xv)?.mul(g.constant(proj.to_tensor()))?.sum();
    let grads = g.backward(loss)?;
    let as64 = |t: Option<&Tensor>, n: usize| match t {
        Some(t) => t.data().iter().map(|&v| v as f64).collect(),
        None => vec![0.0; n],
    };
    let by_id = grads.params();
    let mut analytic = vec![as64(grads.get(xv), x.numel())];
    for (i, p) in params.iter().enumerate() {
        analytic.push(as64(by_id.iter().find(|(id, _)| id.0 == i).map(|(_, t)| *t), p.numel()));
    }
    let mut inputs = vec![x.clone()];
    inputs.extend(params);
    let oracle_loss = |a: &[Array]| {
        let o = reference(&a[0], &a[1..]);
        o.data.iter().zip(&proj.data).map(|(u, v)| u * v).sum()
    };
    Ok(compare(&inputs, loss.value().item() as f64, &analytic, &oracle_loss))
}

fn attention_check(rng: &mut ChaCha8Rng) -> Result<f64> {
    loop {
        let heads = rng.gen_range(1..=3);
        let d = heads * rng.gen_range(1..=3);
        let d = if d < 2 { 2 * heads } else { d };
        let t = rng.gen_range(1..=5);
        let mut store = ParamStore::new();
        let p = AttentionParams::new(&mut store, "attn", d, heads, rng)?;
        randomize(&mut store, rng, 0.8)?;
        let x = uniform(rng, &[t, d], -1.0, 1.0);
        let params = oracle::param_arrays(&store);
        let screen = oracle::attention_layer_screen(&x, &params, &p);
        if screen.min_relu_input < KINK_MARGIN || screen.min_norm_std < MIN_NORM_STD {
            continue;
        }
        return check_head(
            &store,
            &x,
            |g, xv| multi_head_attention(g, &store, xv, &p),
            |x, prm| oracle::attention_layer(x, prm, &p),
            rng,
        );
    }
}

fn bilstm_check(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (t, d, hidden) = (rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(1..=3));
    let mut store = ParamStore::new();
    let p = LstmParams::new(&mut store, "lstm", d, hidden, rng);
    randomize(&mut store, rng, 0.8)?;
    let x = uniform(rng, &[t, d], -1.0, 1.0);
    check_head(
        &store,
        &x,
        |g, xv| bilstm_head(g, &store, xv, &p),
        |x, prm| oracle::bilstm(x, prm, &p),
        rng,
    )
}

/// conv3d -> relu -> maxpool -> matmul -> softmax cross-entropy, redrawn
/// until no pre-activation sits near zero and no pooling window is nearly
/// tied at its top.
fn composite_check(rng: &mut ChaCha8Rng) -> Result<f64> {
    loop {
        let (ci, co) = (rng.gen_range(1..=2), rng.gen_range(1..=3));
        let s = dims(rng, 3..=3, 2, 4);
        let x = uniform(rng, &[1, ci, s[0], s[1], s[2]], -1.0, 1.0);
        let w = uniform(rng, &[co, ci, 2, 2, 2], -1.0, 1.0);
        let b = uniform(rng, &[co], -0.5, 0.5);
        let pre = oracle::conv3d(&x, &w, Some(&b), [1; 3], [1; 3], [1; 3]);
        if pre.data.iter().any(|v| v.abs() < KINK_MARGIN) {
            continue;
        }
        let act = pre.map(|v| v.max(0.0));
        let kernel = [2, 2, 2];
        if !pool_windows_separated(&act, kernel) {
            continue;
        }
        let pooled = oracle::max_pool3d(&act, kernel, kernel);
        let rows = pooled.shape[1];
        let feat = pooled.numel() / rows;
        let classes = rng.gen_range(2..=4);
        let m = uniform(rng, &[feat, classes], -1.0, 1.0);
        let targets: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..classes)).collect();
        let inputs = vec![x, w, b, m];

        let g = Graph::new();
        let v: Vec<Var> = inputs.iter().map(|a| g.leaf(a.to_tensor())).collect();
        let loss = v[0]
            .conv3d(v[1], Some(v[2]), Conv3dSpec::new([1; 3], [1; 3]))?
            .relu()
            .max_pool3d(kernel, kernel)?
            .reshape([rows, feat])?
            .matmul(v[3])?
            .cross_entropy(&targets)?;
        let grads = g.backward(loss)?;
        let analytic: Vec<Vec<f64>> = v
            .iter()
            .map(|l| {
                grads
                    .get(*l)
                    .expect("leaf on path")
                    .data()
                    .iter()
                    .map(|&x| x as f64)
                    .collect()
            })
            .collect();
        let oracle_loss = |a: &[Array]| {
            let y = oracle::conv3d(&a[0], &a[1], Some(&a[2]), [1; 3], [1; 3], [1; 3]).map(|v| v.max(0.0));
            let p = oracle::max_pool3d(&y, kernel, kernel);
            oracle::cross_entropy(&oracle::matmul(&p.reshape([rows, feat]), &a[3]), &targets)
        };
        return Ok(compare(&inputs, loss.value().item() as f64, &analytic, &oracle_loss));
    }
}

/// Whether every window's maximum beats its runner-up by the kink margin,
/// unless the window is all zeros (then every entry has zero gradient).
fn pool_windows_separated(x: &Array, k: [usize; 3]) -> bool {
    let out: Vec<usize> = (0..3).map(|a| (x.shape[2 + a] - k[a]) / k[a] + 1).collect();
    for o in oracle::indices(&[x.shape[0], x.shape[1], out[0], out[1], out[2]]) {
        let mut vals: Vec<f64> = oracle::indices(&k)
            .iter()
            .map(|kk| {
                x.at(&[
                    o[0],
                    o[1],
                    o[2] * k[0] + kk[0],
                    o[3] * k[1] + kk[1],
                    o[4] * k[2] + kk[2],
                ])
            })
            .collect();
        vals.sort_by(|a, b| b.total_cmp(a));
        if vals[0] > 0.0 && vals.len() > 1 && vals[0] - vals[1] < KINK_MARGIN {
            return false;
        }
    }
    true
}

/// A tensor consumed three times; gradients must accumulate.
fn fan_out_check(rng: &mut ChaCha8Rng) -> Result<f64> {
    let s = dims(rng, 1..=3, 1, 4);
    let case = OpCase {
        inputs: vec![uniform(rng, &s, -1.0, 1.0)],
        forward: Box::new(|_, v| v[0].mul(v[0].tanh())?.add(v[0])),
        reference: Box::new(|a| a[0].map(|x| x * x.tanh() + x)),
    };
    run_op_case(&case, rng)
}

fn tolerance_for(name: &str) -> f64 {
    match name {
        "relu" | "attention_head" | "composite" => KINK_TOLERANCE,
        _ => TOLERANCE,
    }
}

pub fn op_name(kind: OpKind) -> String {
    let dbg = format!("{kind:?}");
    let mut out = String::new();
    for (i, ch) in dbg.chars().enumerate() {
        if ch.is_uppercase() && i > 0 {
            out.push('_');
        }
        out.push(ch.to_ascii_lowercase());
    }
    out
}

/// Names of every check [`run_all`] performs, in order.
pub fn check_names() -> Vec<String> {
    let mut names: Vec<String> = OpKind::DIFFERENTIABLE.iter().map(|&k| op_name(k)).collect();
    names.extend(["attention_head", "bilstm_head", "composite", "fan_out"].map(String::from));
    names
}

/// Runs `shapes` random instances of one named check.
pub fn run_check(name: &str, shapes: usize, seed: u64) -> Result<CheckRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = OpKind::DIFFERENTIABLE.iter().copied().find(|&k| op_name(k) == name);
    let mut worst = 0f64;
    for _ in 0..shapes {
        let err = match (kind, name) {
            (Some(k), _) => run_op_case(&op_case(k, &mut rng), &mut rng)?,
            (None, "attention_head") => attention_check(&mut rng)?,
            (None, "bilstm_head") => bilstm_check(&mut rng)?,
            (None, "composite") => composite_check(&mut rng)?,
            (None, "fan_out") => fan_out_check(&mut rng)?,
            _ => return Err(crate::Error::Input(format!("unknown gradient check {name:?}"))),
        };
        worst = worst.max(err);
    }
    let tolerance = tolerance_for(name);
    Ok(CheckRow {
        name: name.to_string(),
        shapes,
        max_rel_error: worst,
        tolerance,
        passed: worst <= tolerance,
    })
}

/// Every op kind, both heads, a composite graph and a fan-out graph.
pub fn run_all(shapes: usize, seed: u64) -> Result<Vec<CheckRow>> {
    check_names()
        .iter()
        .enumerate()
        .map(|(i, n)| run_check(n, shapes, seed.wrapping_add(i as u64)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2e-7, 1e-7) - 1e-4).abs() < 1e-12);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let x = Array::new([2], vec![0.5, -0.25]);
        let sq = |a: &[Array]| a[0].data.iter().map(|v| v * v / 2.0).sum::<f64>();
        assert!(compare(&[x.clone()], 0.15625, &[x.data.clone()], &sq) < 1e-8);
        assert!(compare(&[x.clone()], 0.15625, &[vec![0.5, 0.25]], &sq) > 0.5);
    }

    #[test]
    fn every_name_runs() {
        for name in check_names() {
            let row = run_check(&name, 2, 11).unwrap();
            assert!(row.passed, "{name}: {}", row.max_rel_error);
        }
    }
}
