use std::collections::HashMap;

use rand::Rng;

use super::{ParamId, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Softplus(Var),
    Clamp(Var, T, T),
    RowSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Dropout(Var, Vec<T>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    BlockScores(Var, Var, usize),
    BlockApply(Var, Var, usize),
    SumAll(Var),
    MeanAll(Var),
    SumCols(Var),
    Reshape(Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Softplus(_) => "softplus",
            Op::Clamp(..) => "clamp",
            Op::RowSoftmax(_) => "row_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Dropout(..) => "dropout",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::BlockScores(..) => "block_scores",
            Op::BlockApply(..) => "block_apply",
            Op::SumAll(_) => "sum",
            Op::MeanAll(_) => "mean",
            Op::SumCols(_) => "sum_cols",
            Op::Reshape(_) => "reshape",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::BlockScores(a, b, _)
            | Op::BlockApply(a, b, _) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Softplus(a)
            | Op::Clamp(a, ..)
            | Op::RowSoftmax(a)
            | Op::Dropout(a, _)
            | Op::SliceCols(a, _)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::SumCols(a)
            | Op::Reshape(a) => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::ConcatCols(vs) => vs.clone(),
        }
    }
}

struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    op: Op<T>,
    tracked: bool,
}

/// Record of the primitive ops of one forward pass.
///
/// Backward replays the record in exact reverse order and may run once.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    track_params: bool,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    by_param: HashMap<ParamId, Vec<T>>,
    by_var: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient routed to the parameter tensor with this identity.
    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.by_param.get(&id).map(Vec::as_slice)
    }

    /// Gradient of the loss with respect to any tracked value on the tape.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.by_var.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn num_params(&self) -> usize {
        self.by_param.len()
    }
}

/// `x · 0` is NaN exactly for NaN and ±∞, so a branch-free sum of those
/// products decides finiteness of the whole buffer.
fn all_finite<T: Real>(data: &[T]) -> bool {
    let mut acc = [T::zero(); 8];
    let chunks = data.chunks_exact(8);
    let tail = chunks.remainder();
    for c in chunks {
        for (a, &x) in acc.iter_mut().zip(c) {
            *a += x * T::zero();
        }
    }
    let mut total = tail.iter().fold(T::zero(), |a, &x| a + x * T::zero());
    for a in acc {
        total += a;
    }
    total.is_finite()
}

fn mat_dims(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

fn acc<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

#[inline]
fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            track_params: true,
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// When disabled, parameter tensors enter the tape as constants.
    pub fn set_track_params(&mut self, on: bool) {
        self.track_params = on;
    }

    pub fn tracks_params(&self) -> bool {
        self.track_params
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>) -> Result<Var> {
        if !all_finite(&data) {
            let bad = data.iter().position(|x| !x.is_finite()).unwrap_or(0);
            return Err(Error::Numeric(format!(
                "{} produced {} at flat index {bad}",
                op.name(),
                data[bad]
            )));
        }
        let tracked = match &op {
            Op::Param => true,
            Op::Leaf => false,
            other => other.inputs().iter().any(|v| self.nodes[v.0].tracked),
        };
        self.nodes.push(Node {
            shape,
            data,
            op,
            tracked,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn check_live(&self) -> Result<()> {
        if self.consumed {
            Err(Error::state("tape already consumed by backward"))
        } else {
            Ok(())
        }
    }

    /// Records a tensor. Tensors with a gradient buffer become tracked
    /// parameters (one node per tensor identity); others are constants.
    pub fn input(&mut self, t: &Tensor<T>) -> Result<Var> {
        self.check_live()?;
        if t.requires_grad() && self.track_params {
            if let Some(&v) = self.params.get(&t.id()) {
                return Ok(v);
            }
            let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Param)?;
            self.params.insert(t.id(), v);
            Ok(v)
        } else {
            self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf)
        }
    }

    /// Records an owned constant (never receives gradients).
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.check_live()?;
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Copies a recorded value out as an untracked tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.data.clone()).expect("node shape is consistent")
    }

    fn dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        mat_dims(self.shape(v)).ok_or_else(|| Error::dim(op, self.shape(v), &[0, 0]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let (m, k) = self.dims(a, "matmul")?;
        let (k2, n) = self.dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        self.push(vec![m, n], out, Op::MatMul(a, b))
    }

    fn zip_same(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.check_live()?;
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op.name(), self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(self.shape(a).to_vec(), out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `a [m×n] + b [n]`, with `b` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let (_, n) = self.dims(a, "add_row")?;
        if self.value(b).len() != n {
            return Err(Error::dim("add_row", self.shape(a), self.shape(b)));
        }
        let bias = self.value(b);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_exact_mut(n) {
            for (x, &y) in row.iter_mut().zip(bias) {
                *x += y;
            }
        }
        self.push(self.shape(a).to_vec(), out, Op::AddRow(a, b))
    }

    fn map(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        self.check_live()?;
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        self.push(self.shape(a).to_vec(), out, op)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.map(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        self.map(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Relu(a), |x| x.max(T::zero()))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Tanh(a), T::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Exp(a), T::exp)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Softplus(a), softplus)
    }

    /// Clamps into `[lo, hi]`; gradient is zero outside the open interval.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        self.map(a, Op::Clamp(a, lo, hi), |x| x.max(lo).min(hi))
    }

    /// Softmax over each row, computed after subtracting the row maximum.
    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        self.check_live()?;
        let (_, n) = self.dims(a, "row_softmax")?;
        let x = self.value(a);
        if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("row_softmax input contains {bad}")));
        }
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            let mut total = T::zero();
            for &v in row {
                let e = (v - max).exp();
                total += e;
                out.push(e);
            }
            out[start..].iter_mut().for_each(|e| *e /= total);
        }
        self.push(self.shape(a).to_vec(), out, Op::RowSoftmax(a))
    }

    /// Per-row normalization to zero mean / unit variance, then `gain ⊙ · + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        self.check_live()?;
        let (m, n) = self.dims(x, "layer_norm")?;
        if n < 2 {
            return Err(Error::param(format!(
                "layer_norm needs at least 2 features per row, got {n}"
            )));
        }
        if eps <= T::zero() {
            return Err(Error::param("layer_norm eps must be positive"));
        }
        if self.value(gain).len() != n {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gain)));
        }
        if self.value(bias).len() != n {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(bias)));
        }
        let nf = T::lit(n as f64);
        let mut xhat = Vec::with_capacity(m * n);
        let mut rstd = Vec::with_capacity(m);
        for row in self.value(x).chunks(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            xhat.extend(row.iter().map(|&v| (v - mean) * r));
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let mut out = xhat.clone();
        for row in out.chunks_exact_mut(n) {
            for ((h, &gj), &bj) in row.iter_mut().zip(g).zip(b) {
                *h = *h * gj + bj;
            }
        }
        self.push(
            vec![m, n],
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-rate)` during
    /// training; evaluation mode returns the input unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        self.check_live()?;
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::param(format!("dropout rate {rate} not in [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(&v, &k)| v * k).collect();
        self.push(self.shape(x).to_vec(), out, Op::Dropout(x, mask))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.check_live()?;
        let (m, n) = self.dims(x, "slice_cols")?;
        if start + len > n {
            return Err(Error::dim("slice_cols", self.shape(x), &[start, len]));
        }
        let mut out = Vec::with_capacity(m * len);
        for row in self.value(x).chunks_exact(n) {
            out.extend_from_slice(&row[start..start + len]);
        }
        self.push(vec![m, len], out, Op::SliceCols(x, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.check_live()?;
        let first = *parts.first().ok_or_else(|| Error::param("concat_cols of nothing"))?;
        let (m, _) = self.dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims(p, "concat_cols")?;
            if r != m {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        self.push(vec![m, total], out, Op::ConcatCols(parts.to_vec()))
    }

    /// Within consecutive row blocks of length `block`, `q_g · k_gᵀ`.
    /// Output is `[R × block]`, row-block `g` holding group `g`'s scores.
    pub fn block_scores(&mut self, q: Var, k: Var, block: usize) -> Result<Var> {
        self.check_live()?;
        let (r, d) = self.dims(q, "block_scores")?;
        if self.shape(k) != self.shape(q) {
            return Err(Error::dim("block_scores", self.shape(q), self.shape(k)));
        }
        if block == 0 || r % block != 0 {
            return Err(Error::dim("block_scores", self.shape(q), &[block]));
        }
        let mut out = vec![T::zero(); r * block];
        let (qv, kv) = (self.value(q), self.value(k));
        for g in 0..r / block {
            let rows = g * block * d..(g + 1) * block * d;
            T::gemm(
                block,
                d,
                block,
                &qv[rows.clone()],
                false,
                &kv[rows],
                true,
                &mut out[g * block * block..(g + 1) * block * block],
                false,
            );
        }
        self.push(vec![r, block], out, Op::BlockScores(q, k, block))
    }

    /// Within consecutive row blocks, `p_g [block×block] · v_g [block×d]`.
    pub fn block_apply(&mut self, p: Var, v: Var, block: usize) -> Result<Var> {
        self.check_live()?;
        let (r, l) = self.dims(p, "block_apply")?;
        let (rv, d) = self.dims(v, "block_apply")?;
        if l != block || r != rv || block == 0 || r % block != 0 {
            return Err(Error::dim("block_apply", self.shape(p), self.shape(v)));
        }
        let mut out = vec![T::zero(); r * d];
        let (pv, vv) = (self.value(p), self.value(v));
        for g in 0..r / block {
            T::gemm(
                block,
                block,
                d,
                &pv[g * block * block..(g + 1) * block * block],
                false,
                &vv[g * block * d..(g + 1) * block * d],
                false,
                &mut out[g * block * d..(g + 1) * block * d],
                false,
            );
        }
        self.push(vec![r, d], out, Op::BlockApply(p, v, block))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check_live()?;
        let s = self.value(a).iter().copied().sum();
        self.push(vec![1], vec![s], Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check_live()?;
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::param("mean of empty tensor"));
        }
        let s = self.value(a).iter().copied().sum::<T>() / T::lit(n as f64);
        self.push(vec![1], vec![s], Op::MeanAll(a))
    }

    /// Row sums of `[m×n]`, as `[m×1]`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        self.check_live()?;
        let (m, n) = self.dims(a, "sum_cols")?;
        let out = self
            .value(a)
            .chunks(n.max(1))
            .map(|row| row.iter().copied().sum())
            .collect();
        self.push(vec![m, 1], out, Op::SumCols(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check_live()?;
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::dim("reshape", self.shape(a), shape));
        }
        let data = self.value(a).to_vec();
        self.push(shape.to_vec(), data, Op::Reshape(a))
    }

    /// Propagates `d loss / d ·` to every tracked value, in exact reverse
    /// order of recording. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::state("backward called on a consumed tape"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].tracked {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut by_param = HashMap::new();
        for (&id, &v) in &self.params {
            if let Some(g) = grads[v.0].as_ref() {
                by_param.insert(id, g.clone());
            }
        }
        Ok(Gradients {
            by_param,
            by_var: grads,
        })
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let tracked = |v: &Var| self.nodes[v.0].tracked;
        let len = |v: &Var| self.nodes[v.0].data.len();
        let val = |v: &Var| self.nodes[v.0].data.as_slice();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = mat_dims(&self.nodes[a.0].shape).unwrap();
                let n = node.shape[1];
                if tracked(a) {
                    let ga = acc(grads, *a, m * k);
                    T::gemm(m, n, k, g, false, val(b), true, ga, true);
                }
                if tracked(b) {
                    let gb = acc(grads, *b, k * n);
                    T::gemm(k, m, n, val(a), true, g, false, gb, true);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                if tracked(a) {
                    let ga = acc(grads, *a, g.len());
                    ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d);
                }
                if tracked(b) {
                    let gb = acc(grads, *b, g.len());
                    gb.iter_mut().zip(g).for_each(|(x, &d)| *x += sign * d);
                }
            }
            Op::Mul(a, b) => {
                if tracked(a) {
                    let bv = val(b);
                    let ga = acc(grads, *a, g.len());
                    for ((x, &d), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *x += d * y;
                    }
                }
                if tracked(b) {
                    let av = val(a);
                    let gb = acc(grads, *b, g.len());
                    for ((x, &d), &y) in gb.iter_mut().zip(g).zip(av) {
                        *x += d * y;
                    }
                }
            }
            Op::AddRow(a, b) => {
                if tracked(a) {
                    let ga = acc(grads, *a, g.len());
                    ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d);
                }
                if tracked(b) {
                    let n = len(b);
                    let gb = acc(grads, *b, n);
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(x, &d)| *x += d);
                    }
                }
            }
            Op::Scale(a, c) => {
                let ga = acc(grads, *a, g.len());
                ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d * *c);
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                let ga = acc(grads, *a, g.len());
                ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d);
            }
            Op::Relu(a) => {
                let av = val(a);
                let ga = acc(grads, *a, g.len());
                for ((x, &d), &v) in ga.iter_mut().zip(g).zip(av) {
                    if v > T::zero() {
                        *x += d;
                    }
                }
            }
            Op::Tanh(a) => {
                let y = &node.data;
                let ga = acc(grads, *a, g.len());
                for ((x, &d), &t) in ga.iter_mut().zip(g).zip(y) {
                    *x += d * (T::one() - t * t);
                }
            }
            Op::Exp(a) => {
                let y = &node.data;
                let ga = acc(grads, *a, g.len());
                for ((x, &d), &e) in ga.iter_mut().zip(g).zip(y) {
                    *x += d * e;
                }
            }
            Op::Softplus(a) => {
                let av = val(a);
                let ga = acc(grads, *a, g.len());
                for ((x, &d), &v) in ga.iter_mut().zip(g).zip(av) {
                    *x += d * sigmoid(v);
                }
            }
            Op::Clamp(a, lo, hi) => {
                let av = val(a);
                let ga = acc(grads, *a, g.len());
                for ((x, &d), &v) in ga.iter_mut().zip(g).zip(av) {
                    if v > *lo && v < *hi {
                        *x += d;
                    }
                }
            }
            Op::RowSoftmax(a) => {
                let n = node.shape[1];
                let y = &node.data;
                let ga = acc(grads, *a, g.len());
                for ((gr, yr), xr) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                    let dot: T = gr.iter().zip(yr).map(|(&d, &p)| d * p).sum();
                    for ((x, &d), &p) in xr.iter_mut().zip(gr).zip(yr) {
                        *x += p * (d - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = node.shape[1];
                let nf = T::lit(n as f64);
                let gv = val(gain);
                if tracked(x) {
                    let gx = acc(grads, *x, g.len());
                    for (r, ((gr, hr), xr)) in g.chunks(n).zip(xhat.chunks(n)).zip(gx.chunks_mut(n)).enumerate() {
                        let dh: Vec<T> = gr.iter().zip(gv).map(|(&d, &w)| d * w).collect();
                        let sum_dh: T = dh.iter().copied().sum();
                        let sum_dh_h: T = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum();
                        let scale = rstd[r] / nf;
                        for ((o, &d), &h) in xr.iter_mut().zip(&dh).zip(hr) {
                            *o += scale * (nf * d - sum_dh - h * sum_dh_h);
                        }
                    }
                }
                if tracked(gain) {
                    let gg = acc(grads, *gain, n);
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for ((o, &d), &h) in gg.iter_mut().zip(gr).zip(hr) {
                            *o += d * h;
                        }
                    }
                }
                if tracked(bias) {
                    let gb = acc(grads, *bias, n);
                    for gr in g.chunks(n) {
                        gb.iter_mut().zip(gr).for_each(|(o, &d)| *o += d);
                    }
                }
            }
            Op::Dropout(a, mask) => {
                let ga = acc(grads, *a, g.len());
                for ((x, &d), &k) in ga.iter_mut().zip(g).zip(mask) {
                    *x += d * k;
                }
            }
            Op::SliceCols(a, start) => {
                let w = node.shape[1];
                let n = self.nodes[a.0].shape[1];
                let ga = acc(grads, *a, len(a));
                for (gr, xr) in g.chunks(w).zip(ga.chunks_mut(n)) {
                    xr[*start..start + w].iter_mut().zip(gr).for_each(|(x, &d)| *x += d);
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.shape[1];
                let mut offset = 0;
                for p in parts {
                    let w = self.nodes[p.0].shape[1];
                    if tracked(p) {
                        let gp = acc(grads, *p, len(p));
                        for (gr, xr) in g.chunks(total).zip(gp.chunks_mut(w)) {
                            xr.iter_mut().zip(&gr[offset..offset + w]).for_each(|(x, &d)| *x += d);
                        }
                    }
                    offset += w;
                }
            }
            Op::BlockScores(q, k, block) => {
                let block = *block;
                let d = self.nodes[q.0].shape[1];
                let groups = node.shape[0] / block;
                for gi in 0..groups {
                    let rows = gi * block * d..(gi + 1) * block * d;
                    let gs = &g[gi * block * block..(gi + 1) * block * block];
                    if tracked(q) {
                        let kv = &val(k)[rows.clone()];
                        let gq = acc(grads, *q, len(q));
                        T::gemm(block, block, d, gs, false, kv, false, &mut gq[rows.clone()], true);
                    }
                    if tracked(k) {
                        let qv = &val(q)[rows.clone()];
                        let gk = acc(grads, *k, len(k));
                        T::gemm(block, block, d, gs, true, qv, false, &mut gk[rows], true);
                    }
                }
            }
            Op::BlockApply(p, v, block) => {
                let block = *block;
                let d = node.shape[1];
                let groups = node.shape[0] / block;
                for gi in 0..groups {
                    let prow = gi * block * block..(gi + 1) * block * block;
                    let vrow = gi * block * d..(gi + 1) * block * d;
                    let go = &g[vrow.clone()];
                    if tracked(p) {
                        let vv = &val(v)[vrow.clone()];
                        let gp = acc(grads, *p, len(p));
                        T::gemm(block, d, block, go, false, vv, true, &mut gp[prow.clone()], true);
                    }
                    if tracked(v) {
                        let pv = &val(p)[prow];
                        let gv = acc(grads, *v, len(v));
                        T::gemm(block, block, d, pv, true, go, false, &mut gv[vrow], true);
                    }
                }
            }
            Op::SumAll(a) => {
                let ga = acc(grads, *a, len(a));
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
            Op::MeanAll(a) => {
                let n = len(a);
                let d = g[0] / T::lit(n as f64);
                let ga = acc(grads, *a, n);
                ga.iter_mut().for_each(|x| *x += d);
            }
            Op::SumCols(a) => {
                let n = self.nodes[a.0].shape[1];
                let ga = acc(grads, *a, len(a));
                for (xr, &d) in ga.chunks_mut(n.max(1)).zip(g) {
                    xr.iter_mut().for_each(|x| *x += d);
                }
            }
        }
    }
}
