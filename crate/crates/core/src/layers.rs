//! Differentiable building blocks: bidirectional LSTM, simple and scaled
//! dot-product attention, global max pooling, residual layer norm and the
//! dense classification stack.
//!
//! Each block comes in two forms: a graph-building function over [`Var`]s
//! used by the models, and a plain tensor function for direct use.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numeric::{Graph, ParameterStore, Tensor, Var};
use crate::rng::Rng;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Simple,
    DotProduct,
}

impl std::str::FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simple" => Ok(Self::Simple),
            "dot" | "dot_product" | "dot-product" => Ok(Self::DotProduct),
            other => Err(Error::Config(format!("unknown attention kind `{other}`"))),
        }
    }
}

/// Attention weights produced for one clip: a `1 x N` row for simple
/// attention or a `queries x keys` matrix for dot-product attention.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub kind: AttentionKind,
    pub scores: Tensor,
    pub clip_id: String,
}

impl AttentionTrace {
    /// Largest deviation of any score row from summing to one.
    pub fn normalization_error(&self) -> f64 {
        (0..self.scores.rows())
            .map(|r| (self.scores.row(r).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

pub fn glorot_uniform(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.uniform_range(-limit, limit))
        .collect();
    Tensor::from_parts(vec![fan_in, fan_out], data)
}

// ---------------------------------------------------------------------------
// LSTM

/// One LSTM direction. Gate columns are stacked as `[input | forget |
/// candidate | output]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub w_in: Tensor,
    pub w_rec: Tensor,
    pub bias: Tensor,
}

impl LstmParams {
    pub fn init(rng: &mut Rng, input: usize, hidden: usize) -> Self {
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].fill(1.0);
        Self {
            w_in: glorot_uniform(rng, input, 4 * hidden),
            w_rec: glorot_uniform(rng, hidden, 4 * hidden),
            bias: Tensor::from_parts(vec![1, 4 * hidden], bias),
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_in: Tensor::zeros(&[input, 4 * hidden]),
            w_rec: Tensor::zeros(&[hidden, 4 * hidden]),
            bias: Tensor::zeros(&[1, 4 * hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_rec.rows()
    }

    fn register(&self, store: &mut ParameterStore, prefix: &str) -> Result<()> {
        store.insert(format!("{prefix}.w_in"), self.w_in.clone())?;
        store.insert(format!("{prefix}.w_rec"), self.w_rec.clone())?;
        store.insert(format!("{prefix}.bias"), self.bias.clone())
    }

    fn validate(&self) -> Result<()> {
        let h = self.hidden();
        if self.w_rec.shape() != [h, 4 * h]
            || self.w_in.cols() != 4 * h
            || self.bias.shape() != [1, 4 * h]
        {
            return Err(shape_err!(
                "LSTM weights {:?} / {:?} / {:?} are not gate-stacked for hidden width {h}",
                self.w_in.shape(),
                self.w_rec.shape(),
                self.bias.shape()
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiLstmParams {
    pub forward: LstmParams,
    pub backward: LstmParams,
}

impl BiLstmParams {
    pub fn init(rng: &mut Rng, input: usize, hidden: usize) -> Self {
        Self {
            forward: LstmParams::init(rng, input, hidden),
            backward: LstmParams::init(rng, input, hidden),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.forward.w_in.rows()
    }

    pub fn hidden(&self) -> usize {
        self.forward.hidden()
    }

    pub fn register(&self, store: &mut ParameterStore, prefix: &str) -> Result<()> {
        self.forward.register(store, &format!("{prefix}.fwd"))?;
        self.backward.register(store, &format!("{prefix}.bwd"))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    w_in: Var,
    w_rec: Var,
    bias: Var,
    hidden: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct BiLstmVars {
    pub forward: LstmVars,
    pub backward: LstmVars,
}

impl LstmVars {
    pub fn bind(g: &mut Graph, store: &ParameterStore, prefix: &str) -> Result<Self> {
        let w_in = g.param(store, &format!("{prefix}.w_in"))?;
        let w_rec = g.param(store, &format!("{prefix}.w_rec"))?;
        let bias = g.param(store, &format!("{prefix}.bias"))?;
        let hidden = g.value(w_rec).rows();
        Ok(Self {
            w_in,
            w_rec,
            bias,
            hidden,
        })
    }
}

impl BiLstmVars {
    pub fn bind(g: &mut Graph, store: &ParameterStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            forward: LstmVars::bind(g, store, &format!("{prefix}.fwd"))?,
            backward: LstmVars::bind(g, store, &format!("{prefix}.bwd"))?,
        })
    }

    pub fn output_width(&self) -> usize {
        self.forward.hidden + self.backward.hidden
    }
}

/// Runs one LSTM direction over the rows of `x` (`T x D`). With `reverse`
/// the sequence is consumed from the last row to the first. The returned
/// `T x h` states are in the original time order either way.
pub fn lstm_sequence(g: &mut Graph, x: Var, p: &LstmVars, reverse: bool) -> Result<Var> {
    let d_in = g.value(p.w_in).rows();
    if g.value(x).cols() != d_in {
        return Err(shape_err!(
            "LSTM expects input width {d_in}, got {}",
            g.value(x).cols()
        ));
    }
    let steps = g.value(x).rows();
    let h = p.hidden;
    let projected = g.matmul(x, p.w_in)?;
    let projected = g.add_row(projected, p.bias)?;

    let mut states = vec![None; steps];
    let mut prev: Option<(Var, Var)> = None;
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..steps).rev())
    } else {
        Box::new(0..steps)
    };
    for t in order {
        let mut pre = g.row(projected, t)?;
        if let Some((h_prev, _)) = prev {
            let rec = g.matmul(h_prev, p.w_rec)?;
            pre = g.add(pre, rec)?;
        }
        let i_pre = g.slice_cols(pre, 0, h)?;
        let f_pre = g.slice_cols(pre, h, h)?;
        let c_pre = g.slice_cols(pre, 2 * h, h)?;
        let o_pre = g.slice_cols(pre, 3 * h, h)?;
        let input_gate = g.sigmoid(i_pre);
        let candidate = g.tanh(c_pre);
        let output_gate = g.sigmoid(o_pre);
        let mut cell = g.mul(input_gate, candidate)?;
        if let Some((_, c_prev)) = prev {
            let forget_gate = g.sigmoid(f_pre);
            let kept = g.mul(forget_gate, c_prev)?;
            cell = g.add(cell, kept)?;
        }
        let squashed = g.tanh(cell);
        let hidden = g.mul(output_gate, squashed)?;
        states[t] = Some(hidden);
        prev = Some((hidden, cell));
    }
    let states: Vec<Var> = states
        .into_iter()
        .map(|s| s.expect("every step visited"))
        .collect();
    g.stack_rows(&states)
}

/// `T x D` to `T x 2h`: forward states concatenated with backward states.
pub fn bilstm(g: &mut Graph, x: Var, p: &BiLstmVars) -> Result<Var> {
    let fwd = lstm_sequence(g, x, &p.forward, false)?;
    let bwd = lstm_sequence(g, x, &p.backward, true)?;
    g.concat_cols(&[fwd, bwd])
}

fn bind_lstm_tensors(g: &mut Graph, p: &LstmParams) -> Result<LstmVars> {
    p.validate()?;
    Ok(LstmVars {
        w_in: g.constant(p.w_in.clone())?,
        w_rec: g.constant(p.w_rec.clone())?,
        bias: g.constant(p.bias.clone())?,
        hidden: p.hidden(),
    })
}

pub fn bilstm_forward(x: &Tensor, params: &BiLstmParams) -> Result<Tensor> {
    if x.rows() == 0 {
        return Err(shape_err!("empty sequence"));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone())?;
    let vars = BiLstmVars {
        forward: bind_lstm_tensors(&mut g, &params.forward)?,
        backward: bind_lstm_tensors(&mut g, &params.backward)?,
    };
    let out = bilstm(&mut g, xv, &vars)?;
    Ok(g.value(out).clone())
}

/// Single-direction pass, exposed for symmetry checks.
pub fn lstm_forward(x: &Tensor, params: &LstmParams, reverse: bool) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone())?;
    let vars = bind_lstm_tensors(&mut g, params)?;
    let out = lstm_sequence(&mut g, xv, &vars, reverse)?;
    Ok(g.value(out).clone())
}

// ---------------------------------------------------------------------------
// Attention

#[derive(Debug, Clone, PartialEq)]
pub struct SimpleAttentionParams {
    /// `d_model x 1`
    pub weight: Tensor,
    /// `N x 1`, one bias per sequence position
    pub bias: Tensor,
}

impl SimpleAttentionParams {
    pub fn init(rng: &mut Rng, d_model: usize, positions: usize) -> Self {
        Self {
            weight: glorot_uniform(rng, d_model, 1),
            bias: Tensor::zeros(&[positions, 1]),
        }
    }

    pub fn register(&self, store: &mut ParameterStore, prefix: &str) -> Result<()> {
        store.insert(format!("{prefix}.w"), self.weight.clone())?;
        store.insert(format!("{prefix}.b"), self.bias.clone())
    }
}

/// `h = tanh(v W) + b`, `alpha = softmax(h)`, `c = sum_i alpha_i v_i`.
/// Returns the `1 x d` context vector and the `1 x N` scores.
pub fn simple_attention_graph(
    g: &mut Graph,
    v: Var,
    weight: Var,
    bias: Var,
    keep: Option<&[bool]>,
) -> Result<(Var, Var)> {
    let (n, d) = (g.value(v).rows(), g.value(v).cols());
    if g.value(weight).shape() != [d, 1] {
        return Err(shape_err!(
            "attention weight {:?} for d_model {d}",
            g.value(weight).shape()
        ));
    }
    if g.value(bias).shape() != [n, 1] {
        return Err(shape_err!(
            "attention bias {:?} for sequence length {n}",
            g.value(bias).shape()
        ));
    }
    let projected = g.matmul(v, weight)?;
    let squashed = g.tanh(projected);
    let hidden = g.add(squashed, bias)?;
    let logits = g.transpose(hidden)?;
    let alpha = g.softmax(logits, keep)?;
    let context = g.matmul(alpha, v)?;
    Ok((context, alpha))
}

pub fn simple_attention(
    v: &Tensor,
    params: &SimpleAttentionParams,
    clip_id: &str,
) -> Result<(Tensor, AttentionTrace)> {
    let mut g = Graph::new();
    let vv = g.constant(v.clone())?;
    let w = g.constant(params.weight.clone())?;
    let b = g.constant(params.bias.clone())?;
    let (c, alpha) = simple_attention_graph(&mut g, vv, w, b, None)?;
    let trace = AttentionTrace {
        kind: AttentionKind::Simple,
        scores: g.value(alpha).clone(),
        clip_id: clip_id.to_owned(),
    };
    Ok((g.value(c).clone(), trace))
}

/// `softmax(Q K^T / sqrt(d_k)) V`. Returns the output and the score matrix.
/// `keep` masks key positions.
pub fn dot_attention_graph(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    keep: Option<&[bool]>,
) -> Result<(Var, Var)> {
    let d_k = g.value(k).cols();
    if g.value(q).cols() != d_k {
        return Err(shape_err!(
            "query width {} differs from key width {d_k}",
            g.value(q).cols()
        ));
    }
    if g.value(k).rows() != g.value(v).rows() {
        return Err(shape_err!(
            "{} keys for {} values",
            g.value(k).rows(),
            g.value(v).rows()
        ));
    }
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, 1.0 / (d_k as f64).sqrt());
    let scores = g.softmax(logits, keep)?;
    let out = g.matmul(scores, v)?;
    Ok((out, scores))
}

pub fn scaled_dot_product_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    clip_id: &str,
) -> Result<(Tensor, AttentionTrace)> {
    let mut g = Graph::new();
    let (qv, kv, vv) = (
        g.constant(q.clone())?,
        g.constant(k.clone())?,
        g.constant(v.clone())?,
    );
    let (out, scores) = dot_attention_graph(&mut g, qv, kv, vv, None)?;
    let trace = AttentionTrace {
        kind: AttentionKind::DotProduct,
        scores: g.value(scores).clone(),
        clip_id: clip_id.to_owned(),
    };
    Ok((g.value(out).clone(), trace))
}

// ---------------------------------------------------------------------------
// Pooling and normalization

pub fn global_max_pool(x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone())?;
    let out = g.max_rows(xv, None)?;
    Ok(g.value(out).clone())
}

/// `layer_norm(x + sub) * gain + shift`, normalizing each row.
pub fn residual_layer_norm_graph(
    g: &mut Graph,
    x: Var,
    sub: Var,
    gain: Var,
    shift: Var,
) -> Result<Var> {
    let sum = g.add(x, sub)?;
    let normed = g.layer_norm(sum, LAYER_NORM_EPS);
    let scaled = g.mul_row(normed, gain)?;
    g.add_row(scaled, shift)
}

pub fn residual_layer_norm(
    x: &Tensor,
    sub: &Tensor,
    gain: &Tensor,
    shift: &Tensor,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let (xv, sv) = (g.constant(x.clone())?, g.constant(sub.clone())?);
    let gain = g.constant(gain.clone())?;
    let shift = g.constant(shift.clone())?;
    let out = residual_layer_norm_graph(&mut g, xv, sv, gain, shift)?;
    Ok(g.value(out).clone())
}

// ---------------------------------------------------------------------------
// Dense stack

/// Hidden widths followed by a 2-unit output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    pub layers: Vec<(Tensor, Tensor)>,
}

impl DenseParams {
    pub fn init(rng: &mut Rng, input: usize, widths: &[usize]) -> Result<Self> {
        validate_widths(widths)?;
        let mut layers = Vec::with_capacity(widths.len() + 1);
        let mut fan_in = input;
        for &w in widths.iter().chain(std::iter::once(&2)) {
            layers.push((glorot_uniform(rng, fan_in, w), Tensor::zeros(&[1, w])));
            fan_in = w;
        }
        Ok(Self { layers })
    }

    pub fn zeros(input: usize, widths: &[usize]) -> Result<Self> {
        validate_widths(widths)?;
        let mut layers = Vec::new();
        let mut fan_in = input;
        for &w in widths.iter().chain(std::iter::once(&2)) {
            layers.push((Tensor::zeros(&[fan_in, w]), Tensor::zeros(&[1, w])));
            fan_in = w;
        }
        Ok(Self { layers })
    }

    pub fn register(&self, store: &mut ParameterStore, prefix: &str) -> Result<()> {
        for (i, (w, b)) in self.layers.iter().enumerate() {
            store.insert(format!("{prefix}{i}.w"), w.clone())?;
            store.insert(format!("{prefix}{i}.b"), b.clone())?;
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|(w, b)| w.len() + b.len()).sum()
    }
}

pub fn validate_widths(widths: &[usize]) -> Result<()> {
    if widths.is_empty() {
        return Err(Error::Config(
            "dense stack needs at least one hidden width".into(),
        ));
    }
    if widths.contains(&0) {
        return Err(Error::Config(format!(
            "dense widths must be positive, got {widths:?}"
        )));
    }
    Ok(())
}

/// Closed-form parameter count of a dense stack including its 2-unit head.
pub fn dense_param_count(input: usize, widths: &[usize]) -> usize {
    let mut fan_in = input;
    let mut total = 0;
    for &w in widths.iter().chain(std::iter::once(&2)) {
        total += fan_in * w + w;
        fan_in = w;
    }
    total
}

/// Affine + ReLU for every hidden layer; with `final_softmax` the last
/// `(w, b)` pair is the 2-unit head followed by softmax, otherwise the
/// head is skipped and the last hidden activation is returned.
pub fn dense_stack_graph(
    g: &mut Graph,
    x: Var,
    layers: &[(Var, Var)],
    final_softmax: bool,
) -> Result<Var> {
    let (head, hidden) = layers
        .split_last()
        .ok_or_else(|| Error::Config("empty dense stack".into()))?;
    let mut h = x;
    for &(w, b) in hidden {
        let z = g.matmul(h, w)?;
        let z = g.add_row(z, b)?;
        h = g.relu(z);
    }
    if !final_softmax {
        return Ok(h);
    }
    let z = g.matmul(h, head.0)?;
    let z = g.add_row(z, head.1)?;
    g.softmax(z, None)
}

pub fn bind_dense(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    count: usize,
) -> Result<Vec<(Var, Var)>> {
    (0..count)
        .map(|i| {
            Ok((
                g.param(store, &format!("{prefix}{i}.w"))?,
                g.param(store, &format!("{prefix}{i}.b"))?,
            ))
        })
        .collect()
}

pub fn dense_stack(x: &Tensor, params: &DenseParams, final_softmax: bool) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone())?;
    let layers = params
        .layers
        .iter()
        .map(|(w, b)| Ok((g.constant(w.clone())?, g.constant(b.clone())?)))
        .collect::<Result<Vec<_>>>()?;
    let out = dense_stack_graph(&mut g, xv, &layers, final_softmax)?;
    Ok(g.value(out).clone())
}
