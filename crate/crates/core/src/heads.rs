//! Temporal heads over a `[T, D]` feature sequence and the classifier.
//!
//! Two interchangeable heads: a stacked bidirectional LSTM (two layers per
//! direction) and one multi-head self-attention encoder layer (attention,
//! residual + layer norm, feed-forward, residual + layer norm). No positional
//! encoding is added, so the attention head is permutation-equivariant.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{HeadKind, NetworkConfig};
use crate::error::{Error, Result};
use crate::tensor::{concat, Graph, ParamId, ParamStore, Tensor, Var};

/// Affine map `x W + b` on `[rows, in]` inputs.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Uniform(-1/sqrt(in), 1/sqrt(in)) weights, zero bias.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d_in as f32).sqrt();
        Self {
            weight: store.add(
                format!("{name}.weight"),
                Tensor::uniform([d_in, d_out], -bound, bound, rng),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([d_out])),
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        x.matmul(g.param(store, self.weight))?
            .add_bias(g.param(store, self.bias), 1)
    }

    pub fn dims(&self, store: &ParamStore) -> (usize, usize) {
        let s = store.get(self.weight).shape();
        (s[0], s[1])
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full([d], 1.0)),
            shift: store.add(format!("{name}.shift"), Tensor::zeros([d])),
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        x.layer_norm(g.param(store, self.gain), g.param(store, self.shift), 1, 1e-5)
    }
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub query: Vec<Linear>,
    pub key: Vec<Linear>,
    pub value: Vec<Linear>,
    /// `h * d_v -> D`.
    pub output: Linear,
    pub norm1: LayerNormParams,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub norm2: LayerNormParams,
}

impl AttentionParams {
    /// `d_k = d_v = d / heads`; feed-forward width `4 d`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("dimension {d} not divisible by {heads} heads")));
        }
        let dk = d / heads;
        let per_head = |store: &mut ParamStore, rng: &mut R, what: &str| -> Vec<Linear> {
            (0..heads)
                .map(|i| Linear::new(store, &format!("{name}.{what}{i}"), d, dk, rng))
                .collect()
        };
        let query = per_head(store, rng, "query");
        let key = per_head(store, rng, "key");
        let value = per_head(store, rng, "value");
        Ok(Self {
            heads,
            d_k: dk,
            d_v: dk,
            query,
            key,
            value,
            output: Linear::new(store, &format!("{name}.output"), heads * dk, d, rng),
            norm1: LayerNormParams::new(store, &format!("{name}.norm1"), d),
            ffn1: Linear::new(store, &format!("{name}.ffn1"), d, 4 * d, rng),
            ffn2: Linear::new(store, &format!("{name}.ffn2"), 4 * d, d, rng),
            norm2: LayerNormParams::new(store, &format!("{name}.norm2"), d),
        })
    }
}

/// Attention weights `softmax(Q K^T / sqrt(d_k))`, one simplex row per query.
pub fn attention_weights<'g>(q: Var<'g>, k: Var<'g>) -> Result<Var<'g>> {
    let (qs, ks) = (q.shape(), k.shape());
    if qs.len() != 2 || ks.len() != 2 {
        return Err(Error::Shape(format!("attention: Q {qs:?} and K {ks:?} must be rank 2")));
    }
    if qs[1] != ks[1] {
        return Err(Error::Dimension {
            op: "attention",
            axis: 1,
            expected: qs[1],
            got: ks[1],
        });
    }
    let scores = q.matmul(k.transpose()?)?.scale(1.0 / (qs[1] as f32).sqrt());
    scores.softmax(1)
}

/// `softmax(Q K^T / sqrt(d_k)) V`: each output row is a weighted sum of the
/// value rows.
pub fn scaled_dot_attention<'g>(q: Var<'g>, k: Var<'g>, v: Var<'g>) -> Result<Var<'g>> {
    let (ks, vs) = (k.shape(), v.shape());
    if vs.len() != 2 || ks[0] != vs[0] {
        return Err(Error::Dimension {
            op: "attention",
            axis: 0,
            expected: ks[0],
            got: vs.first().copied().unwrap_or(0),
        });
    }
    attention_weights(q, k)?.matmul(v)
}

/// Heads run in parallel on projected inputs; their concatenation is
/// projected back to `D`. Returns `[T, D]` before the residual.
pub fn attention_core<'g>(g: &'g Graph, store: &ParamStore, x: Var<'g>, p: &AttentionParams) -> Result<Var<'g>> {
    let heads = (0..p.heads)
        .map(|i| {
            let q = p.query[i].forward(g, store, x)?;
            let k = p.key[i].forward(g, store, x)?;
            let v = p.value[i].forward(g, store, x)?;
            scaled_dot_attention(q, k, v)
        })
        .collect::<Result<Vec<_>>>()?;
    let joined = if heads.len() == 1 { heads[0] } else { concat(&heads, 1)? };
    p.output.forward(g, store, joined)
}

/// One encoder layer: `n1 = norm(x + attn(x))`, `out = norm(n1 + ffn(n1))`.
pub fn multi_head_attention<'g>(g: &'g Graph, store: &ParamStore, x: Var<'g>, p: &AttentionParams) -> Result<Var<'g>> {
    let s = x.shape();
    let d = p.heads * p.d_k;
    if s.len() != 2 || s[1] != d {
        return Err(Error::Dimension {
            op: "multi_head_attention",
            axis: 1,
            expected: d,
            got: s.get(1).copied().unwrap_or(0),
        });
    }
    let a = attention_core(g, store, x, p)?;
    let n1 = p.norm1.forward(g, store, x.add(a)?)?;
    let f = p.ffn1.forward(g, store, n1)?.relu();
    let f = p.ffn2.forward(g, store, f)?;
    p.norm2.forward(g, store, n1.add(f)?)
}

/// One LSTM layer; gates are packed as `[i | f | g | o]` columns.
#[derive(Clone, Debug)]
pub struct LstmLayer {
    /// `[in, 4H]`
    pub w_input: ParamId,
    /// `[H, 4H]`
    pub w_hidden: ParamId,
    /// `[4H]`
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmLayer {
    /// Uniform input weights, orthogonal recurrent blocks, forget bias 1.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f32).sqrt();
        let w_input = Tensor::uniform([d_in, 4 * hidden], -bound, bound, rng);
        let mut w_hidden = Tensor::zeros([hidden, 4 * hidden]);
        for gate in 0..4 {
            let q = orthogonal(hidden, rng);
            for r in 0..hidden {
                for c in 0..hidden {
                    w_hidden.data_mut()[r * 4 * hidden + gate * hidden + c] = q[(r, c)] as f32;
                }
            }
        }
        let bias = Tensor::from_fn(
            [4 * hidden],
            |j| if (hidden..2 * hidden).contains(&j) { 1.0 } else { 0.0 },
        );
        Self {
            w_input: store.add(format!("{name}.w_input"), w_input),
            w_hidden: store.add(format!("{name}.w_hidden"), w_hidden),
            bias: store.add(format!("{name}.bias"), bias),
            hidden,
        }
    }
}

/// Random orthogonal `n x n` matrix: Q of a Gaussian matrix's QR, with
/// column signs fixed by R's diagonal.
fn orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    let qr = a.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for c in 0..n {
        if r[(c, c)] < 0.0 {
            q.column_mut(c).neg_mut();
        }
    }
    q
}

/// `i, f, o = sigmoid`, `g = tanh`; `c' = f c + i g`, `h' = o tanh(c')`.
/// All operands are `[1, width]` rows.
pub fn lstm_cell<'g>(
    g: &'g Graph,
    store: &ParamStore,
    x: Var<'g>,
    h: Var<'g>,
    c: Var<'g>,
    layer: &LstmLayer,
) -> Result<(Var<'g>, Var<'g>)> {
    let hd = layer.hidden;
    let z = x
        .matmul(g.param(store, layer.w_input))?
        .add(h.matmul(g.param(store, layer.w_hidden))?)?
        .add_bias(g.param(store, layer.bias), 1)?;
    let i = z.narrow(1, 0, hd)?.sigmoid();
    let f = z.narrow(1, hd, hd)?.sigmoid();
    let gg = z.narrow(1, 2 * hd, hd)?.tanh();
    let o = z.narrow(1, 3 * hd, hd)?.sigmoid();
    let c_next = f.mul(c)?.add(i.mul(gg)?)?;
    let h_next = o.mul(c_next.tanh())?;
    Ok((h_next, c_next))
}

#[derive(Clone, Debug)]
pub struct LstmParams {
    pub forward: [LstmLayer; 2],
    pub backward: [LstmLayer; 2],
    pub hidden: usize,
}

impl LstmParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, rng: &mut R) -> Self {
        let mut stack = |dir: &str, rng: &mut R| {
            [
                LstmLayer::new(store, &format!("{name}.{dir}0"), d_in, hidden, rng),
                LstmLayer::new(store, &format!("{name}.{dir}1"), hidden, hidden, rng),
            ]
        };
        let forward = stack("forward", rng);
        let backward = stack("backward", rng);
        Self {
            forward,
            backward,
            hidden,
        }
    }

    /// The same parameters with the two directions exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            forward: self.backward.clone(),
            backward: self.forward.clone(),
            hidden: self.hidden,
        }
    }
}

/// Runs one layer over `rows` (each `[1, in]`) in the given direction and
/// returns the hidden states in original time order.
fn run_layer<'g>(
    g: &'g Graph,
    store: &ParamStore,
    rows: &[Var<'g>],
    layer: &LstmLayer,
    reverse: bool,
) -> Result<Vec<Var<'g>>> {
    let mut h = g.constant(Tensor::zeros([1, layer.hidden]));
    let mut c = g.constant(Tensor::zeros([1, layer.hidden]));
    let mut out = vec![h; rows.len()];
    let order: Vec<usize> = if reverse {
        (0..rows.len()).rev().collect()
    } else {
        (0..rows.len()).collect()
    };
    for t in order {
        (h, c) = lstm_cell(g, store, rows[t], h, c, layer)?;
        out[t] = h;
    }
    Ok(out)
}

/// `[T, D] -> [T, 2H]`: forward stack states then backward stack states.
pub fn bilstm_head<'g>(g: &'g Graph, store: &ParamStore, x: Var<'g>, p: &LstmParams) -> Result<Var<'g>> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(Error::Shape(format!("bilstm: expected [T, D], got {s:?}")));
    }
    let rows = (0..s[0]).map(|t| x.narrow(0, t, 1)).collect::<Result<Vec<_>>>()?;
    let mut fwd = rows.clone();
    let mut bwd = rows;
    for l in 0..2 {
        fwd = run_layer(g, store, &fwd, &p.forward[l], false)?;
        bwd = run_layer(g, store, &bwd, &p.backward[l], true)?;
    }
    let per_t = fwd
        .into_iter()
        .zip(bwd)
        .map(|(f, b)| concat(&[f, b], 1))
        .collect::<Result<Vec<_>>>()?;
    if per_t.len() == 1 {
        Ok(per_t[0])
    } else {
        concat(&per_t, 0)
    }
}

/// Mean over time, then an affine map to class logits `[num_classes]`.
pub fn classify<'g>(g: &'g Graph, store: &ParamStore, head_out: Var<'g>, linear: &Linear) -> Result<Var<'g>> {
    let pooled = head_out.mean_axis(0)?;
    let d = pooled.shape()[0];
    let logits = linear.forward(g, store, pooled.reshape([1, d])?)?;
    let c = logits.shape()[1];
    logits.reshape([c])
}

#[derive(Clone, Debug)]
pub enum TemporalHead {
    Attention(AttentionParams),
    /// Layer norm on the input sequence, then the LSTM stacks. Backbone
    /// features are unnormalized and large enough to saturate the gates.
    BiLstm(LayerNormParams, LstmParams),
    /// Identity; the classifier's temporal mean-pool is the whole head.
    None,
}

impl TemporalHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: &NetworkConfig, rng: &mut R) -> Result<Self> {
        let d = config.feature_dim();
        Ok(match config.head {
            HeadKind::Attention => TemporalHead::Attention(AttentionParams::new(
                store,
                "head.attention",
                d,
                config.attention_heads,
                rng,
            )?),
            HeadKind::BiLstm => TemporalHead::BiLstm(
                LayerNormParams::new(store, "head.lstm.input_norm", d),
                LstmParams::new(store, "head.lstm", d, config.lstm_hidden, rng),
            ),
            HeadKind::None => TemporalHead::None,
        })
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            TemporalHead::Attention(_) => HeadKind::Attention,
            TemporalHead::BiLstm(..) => HeadKind::BiLstm,
            TemporalHead::None => HeadKind::None,
        }
    }

    /// Width of each output timestep given input width `d`.
    pub fn out_dim(&self, d: usize) -> usize {
        match self {
            TemporalHead::BiLstm(_, p) => 2 * p.hidden,
            _ => d,
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        match self {
            TemporalHead::Attention(p) => multi_head_attention(g, store, x, p),
            TemporalHead::BiLstm(norm, p) => bilstm_head(g, store, norm.forward(g, store, x)?, p),
            TemporalHead::None => Ok(x),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        Tensor::uniform(shape.to_vec(), -1.0, 1.0, &mut rng(seed))
    }

    #[test]
    fn single_key_returns_value() {
        let g = Graph::new();
        let q = g.constant(rand_t(&[1, 3], 1));
        let k = g.constant(rand_t(&[1, 3], 2));
        let v = g.constant(rand_t(&[1, 2], 3));
        let out = scaled_dot_attention(q, k, v).unwrap();
        assert_eq!(out.value().data(), v.value().data());
    }

    #[test]
    fn identical_keys_average_values() {
        let g = Graph::new();
        let row = rand_t(&[1, 3], 4);
        let krows: Vec<f32> = (0..4).flat_map(|_| row.data().to_vec()).collect();
        let k = g.constant(Tensor::new([4, 3], krows).unwrap());
        let q = g.constant(rand_t(&[4, 3], 5));
        let v = g.constant(rand_t(&[4, 2], 6));
        let out = scaled_dot_attention(q, k, v).unwrap().value();
        let vv = v.value();
        for j in 0..2 {
            let mean = (0..4).map(|t| vv.at(&[t, j])).sum::<f32>() / 4.0;
            for t in 0..4 {
                assert!((out.at(&[t, j]) - mean).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn key_dim_mismatch_is_dimension_error() {
        let g = Graph::new();
        let q = g.constant(rand_t(&[2, 3], 1));
        let k = g.constant(rand_t(&[2, 4], 2));
        let v = g.constant(rand_t(&[2, 2], 3));
        assert!(matches!(
            scaled_dot_attention(q, k, v),
            Err(Error::Dimension {
                axis: 1,
                expected: 3,
                got: 4,
                ..
            })
        ));
    }

    #[test]
    fn weight_rows_on_simplex() {
        let g = Graph::new();
        let q = g.constant(Tensor::uniform([6, 5], -20.0, 20.0, &mut rng(1)));
        let k = g.constant(Tensor::uniform([6, 5], -20.0, 20.0, &mut rng(2)));
        let w = attention_weights(q, k).unwrap().value();
        for t in 0..6 {
            let row: Vec<f32> = (0..6).map(|j| w.at(&[t, j])).collect();
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn one_head_identity_projections_reduce_to_attention() {
        let mut store = ParamStore::new();
        let p = AttentionParams::new(&mut store, "a", 3, 1, &mut rng(1)).unwrap();
        let eye = Tensor::from_fn([3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        for lin in [&p.query[0], &p.key[0], &p.value[0], &p.output] {
            store.set(lin.weight, eye.clone()).unwrap();
        }
        let g = Graph::new();
        let x = g.constant(rand_t(&[5, 3], 9));
        let core = attention_core(&g, &store, x, &p).unwrap();
        let direct = scaled_dot_attention(x, x, x).unwrap();
        assert!(core.value().max_abs_diff(&direct.value()) < 1e-6);
        assert_eq!(multi_head_attention(&g, &store, x, &p).unwrap().shape(), vec![5, 3]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn attention_is_permutation_equivariant(t in 1usize..7, heads in 1usize..4, seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            let d = heads * 2;
            let mut store = ParamStore::new();
            let p = AttentionParams::new(&mut store, "a", d, heads, &mut rng(seed)).unwrap();
            let g = Graph::new();
            let x = g.constant(rand_t(&[t, d], seed + 1));
            let mut perm: Vec<usize> = (0..t).collect();
            perm.shuffle(&mut rng(seed + 2));
            let y = multi_head_attention(&g, &store, x, &p).unwrap();
            prop_assert_eq!(y.shape(), vec![t, d]);
            let y_perm = multi_head_attention(&g, &store, x.index_select(0, &perm).unwrap(), &p).unwrap();
            let expected = y.index_select(0, &perm).unwrap();
            prop_assert!(y_perm.value().max_abs_diff(&expected.value()) < 1e-5);
        }

        #[test]
        fn bilstm_reversal_symmetry(t in 1usize..=8, seed in 0u64..1000) {
            let (d, h) = (3, 4);
            let mut store = ParamStore::new();
            let p = LstmParams::new(&mut store, "l", d, h, &mut rng(seed));
            let g = Graph::new();
            let x = g.constant(rand_t(&[t, d], seed + 7));
            let rev: Vec<usize> = (0..t).rev().collect();
            let lhs = bilstm_head(&g, &store, x.index_select(0, &rev).unwrap(), &p.swapped()).unwrap();
            let y = bilstm_head(&g, &store, x, &p).unwrap();
            let swapped_halves = concat(&[y.narrow(1, h, h).unwrap(), y.narrow(1, 0, h).unwrap()], 1).unwrap();
            let rhs = swapped_halves.index_select(0, &rev).unwrap();
            prop_assert!(lhs.value().max_abs_diff(&rhs.value()) < 1e-6);
        }
    }

    #[test]
    fn zero_params_cell_is_analytic() {
        let mut store = ParamStore::new();
        let layer = LstmLayer::new(&mut store, "c", 3, 2, &mut rng(1));
        for id in [layer.w_input, layer.w_hidden, layer.bias] {
            let s = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(s)).unwrap();
        }
        let g = Graph::new();
        let x = g.constant(rand_t(&[1, 3], 2));
        let h = g.constant(rand_t(&[1, 2], 3));
        let c_prev = Tensor::new([1, 2], vec![0.8, -1.4]).unwrap();
        let c = g.constant(c_prev.clone());
        let (h1, c1) = lstm_cell(&g, &store, x, h, c, &layer).unwrap();
        for j in 0..2 {
            let cp = c_prev.data()[j];
            assert!((c1.value().data()[j] - 0.5 * cp).abs() < 1e-7);
            assert!((h1.value().data()[j] - 0.5 * (0.5 * cp).tanh()).abs() < 1e-7);
        }
    }

    #[test]
    fn zero_input_and_state_give_zero_hidden() {
        let mut store = ParamStore::new();
        let layer = LstmLayer::new(&mut store, "c", 3, 4, &mut rng(1));
        let g = Graph::new();
        let z = |n| g.constant(Tensor::zeros([1, n]));
        let (h, c) = lstm_cell(&g, &store, z(3), z(4), z(4), &layer).unwrap();
        assert!(h.value().data().iter().all(|&v| v == 0.0));
        assert!(c.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn recurrent_blocks_are_orthogonal() {
        let mut store = ParamStore::new();
        let layer = LstmLayer::new(&mut store, "c", 2, 5, &mut rng(3));
        let w = store.get(layer.w_hidden);
        for gate in 0..4 {
            for a in 0..5 {
                for b in 0..5 {
                    let dot: f32 = (0..5)
                        .map(|r| w.at(&[r, gate * 5 + a]) * w.at(&[r, gate * 5 + b]))
                        .sum();
                    assert!((dot - if a == b { 1.0 } else { 0.0 }).abs() < 1e-5);
                }
            }
        }
        assert_eq!(store.get(layer.bias).data()[5..10], [1.0; 5]);
    }

    #[test]
    fn last_input_reaches_first_output() {
        let mut store = ParamStore::new();
        let p = LstmParams::new(&mut store, "l", 3, 4, &mut rng(5));
        let g = Graph::new();
        let base = rand_t(&[5, 3], 6);
        let mut bumped = base.clone();
        let i = bumped.flat_index(&[4, 1]);
        bumped.data_mut()[i] += 0.5;
        let y0 = bilstm_head(&g, &store, g.constant(base), &p).unwrap().value();
        let y1 = bilstm_head(&g, &store, g.constant(bumped), &p).unwrap().value();
        let diff: f32 = (0..8).map(|j| (y0.at(&[0, j]) - y1.at(&[0, j])).abs()).sum();
        assert!(diff > 1e-4);
        assert_eq!(y0.shape(), &[5, 8]);
    }

    #[test]
    fn one_step_directions_see_same_input() {
        let mut store = ParamStore::new();
        let p = LstmParams::new(&mut store, "l", 3, 4, &mut rng(5));
        let shared = LstmParams {
            backward: p.forward.clone(),
            ..p.clone()
        };
        let g = Graph::new();
        let y = bilstm_head(&g, &store, g.constant(rand_t(&[1, 3], 8)), &shared).unwrap();
        let v = y.value();
        assert_eq!(v.data()[..4], v.data()[4..]);
    }

    #[test]
    fn classify_pools_over_time() {
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "cls", 3, 4, &mut rng(1));
        store
            .set(lin.bias, Tensor::new([4], vec![0.1, 0.2, 0.3, 0.4]).unwrap())
            .unwrap();
        let g = Graph::new();
        let row = rand_t(&[1, 3], 2);
        let tiled = Tensor::new([5, 3], (0..5).flat_map(|_| row.data().to_vec()).collect()).unwrap();
        let a = classify(&g, &store, g.constant(row), &lin).unwrap().value();
        let b = classify(&g, &store, g.constant(tiled), &lin).unwrap().value();
        assert!(a.max_abs_diff(&b) < 1e-6);

        // loop oracle
        let x = rand_t(&[4, 3], 3);
        let w = store.get(lin.weight).clone();
        let out = classify(&g, &store, g.constant(x.clone()), &lin).unwrap().value();
        for c in 0..4 {
            let mut acc = 0.1 * (c + 1) as f64;
            for j in 0..3 {
                let mean = (0..4).map(|t| x.at(&[t, j]) as f64).sum::<f64>() / 4.0;
                acc += mean * w.at(&[j, c]) as f64;
            }
            assert!((out.data()[c] as f64 - acc).abs() < 1e-6);
        }

        store.set(lin.weight, Tensor::zeros([3, 4])).unwrap();
        let g = Graph::new();
        let z = classify(&g, &store, g.constant(x), &lin).unwrap().value();
        assert_eq!(z.data(), &[0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn every_head_parameter_gets_gradient() {
        for kind in [HeadKind::Attention, HeadKind::BiLstm] {
            let cfg = NetworkConfig {
                head: kind,
                ..NetworkConfig::default()
            };
            let d = cfg.feature_dim();
            let mut store = ParamStore::new();
            let head = TemporalHead::new(&mut store, &cfg, &mut rng(1)).unwrap();
            let cls = Linear::new(&mut store, "cls", head.out_dim(d), 4, &mut rng(2));
            let g = Graph::new();
            let x = g.constant(rand_t(&[4, d], 3));
            let y = head.forward(&g, &store, x).unwrap();
            let loss = classify(&g, &store, y, &cls).unwrap().cross_entropy(&[2]).unwrap();
            let grads = g.backward(loss).unwrap();
            let got = grads.params();
            assert_eq!(got.len(), store.len(), "{kind}");
            for (id, gt) in got {
                assert!(gt.norm() > 0.0, "{kind}: {} has zero gradient", store.name(id));
            }
        }
    }
}
