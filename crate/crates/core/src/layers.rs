//! Neural building blocks: linear maps, multi-head self-attention over
//! bootstrap token groups, and identity (residual) connections.
//!
//! Sequence layers take a `[R × d]` token matrix holding `R / group_len`
//! independent sequences stacked row-wise. Attention never crosses group
//! boundaries and uses no positional information, so permuting the tokens of
//! a group permutes the output rows the same way.

use crate::error::{Error, Result};
use crate::numcore::{prefixed, Module, Real, Tape, Tensor, Var};
use rand::Rng;

/// Affine map `x · weight + bias` with `weight: [in × out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T: Real> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Linear<T> {
    /// Uniform initialization in `±1/√in` for weight and bias.
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        Linear {
            weight: Tensor::uniform(&[input, output], bound, rng).into_param(),
            bias: Tensor::uniform(&[output], bound, rng).into_param(),
        }
    }

    pub fn from_parts(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if weight.shape().len() != 2 || bias.len() != weight.shape()[1] {
            return Err(Error::dim("linear", weight.shape(), bias.shape()));
        }
        let bias = bias.reshape(&[weight.shape()[1]])?;
        Ok(Linear {
            weight: weight.into_param(),
            bias: bias.into_param(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        if tape.shape(x).len() != 2 || tape.shape(x)[1] != self.input_dim() {
            return Err(Error::dim("linear", tape.shape(x), self.weight.shape()));
        }
        let w = tape.input(&self.weight)?;
        let b = tape.input(&self.bias)?;
        let h = tape.matmul(x, w)?;
        tape.add_row(h, b)
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// A layer over stacked token groups that preserves the token count.
pub trait SeqLayer<T: Real>: Module<T> + Send + Sync {
    fn kind(&self) -> &'static str;

    fn forward(&self, tape: &mut Tape<T>, x: Var, group_len: usize) -> Result<Var>;

    fn box_clone(&self) -> Box<dyn SeqLayer<T>>;
}

impl<T: Real> Clone for Box<dyn SeqLayer<T>> {
    fn clone(&self) -> Self {
        self.box_clone()
    }
}

fn check_groups(rows: usize, group_len: usize) -> Result<()> {
    if rows == 0 || group_len == 0 {
        return Err(Error::param("empty token sequence"));
    }
    if !rows.is_multiple_of(group_len) {
        return Err(Error::param(format!(
            "{rows} tokens do not split into groups of {group_len}"
        )));
    }
    Ok(())
}

/// The empty front end: tokens pass through unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct Passthrough;

impl<T: Real> Module<T> for Passthrough {
    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        Vec::new()
    }
}

impl<T: Real> SeqLayer<T> for Passthrough {
    fn kind(&self) -> &'static str {
        "passthrough"
    }

    fn forward(&self, _tape: &mut Tape<T>, x: Var, _group_len: usize) -> Result<Var> {
        Ok(x)
    }

    fn box_clone(&self) -> Box<dyn SeqLayer<T>> {
        Box::new(*self)
    }
}

/// Token-wise linear map, optionally followed by a rectifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T: Real> {
    pub linear: Linear<T>,
    pub relu: bool,
}

impl<T: Real> Module<T> for Dense<T> {
    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        prefixed("linear", self.linear.named_params())
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.linear.params_mut()
    }
}

impl<T: Real> SeqLayer<T> for Dense<T> {
    fn kind(&self) -> &'static str {
        "dense"
    }

    fn forward(&self, tape: &mut Tape<T>, x: Var, _group_len: usize) -> Result<Var> {
        let h = self.linear.forward(tape, x)?;
        if self.relu {
            tape.relu(h)
        } else {
            Ok(h)
        }
    }

    fn box_clone(&self) -> Box<dyn SeqLayer<T>> {
        Box::new(self.clone())
    }
}

/// Identity connection: `x + inner(x)`.
#[derive(Clone)]
pub struct ResidualBlock<T: Real> {
    pub inner: Box<dyn SeqLayer<T>>,
}

impl<T: Real> ResidualBlock<T> {
    pub fn new(inner: Box<dyn SeqLayer<T>>) -> Self {
        ResidualBlock { inner }
    }
}

impl<T: Real> Module<T> for ResidualBlock<T> {
    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        prefixed("inner", self.inner.named_params())
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.inner.params_mut()
    }
}

impl<T: Real> SeqLayer<T> for ResidualBlock<T> {
    fn kind(&self) -> &'static str {
        "residual"
    }

    fn forward(&self, tape: &mut Tape<T>, x: Var, group_len: usize) -> Result<Var> {
        let y = self.inner.forward(tape, x, group_len)?;
        if tape.shape(y) != tape.shape(x) {
            return Err(Error::dim("residual", tape.shape(x), tape.shape(y)));
        }
        tape.add(x, y)
    }

    fn box_clone(&self) -> Box<dyn SeqLayer<T>> {
        Box::new(self.clone())
    }
}

/// Denominator of the attention logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionScale {
    /// `√(d_model / heads)`
    #[default]
    PerHead,
    /// `√d_model`
    FullModel,
}

impl AttentionScale {
    pub fn name(self) -> &'static str {
        match self {
            AttentionScale::PerHead => "per_head",
            AttentionScale::FullModel => "full_model",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "per_head" => Some(AttentionScale::PerHead),
            "full_model" => Some(AttentionScale::FullModel),
            _ => None,
        }
    }
}

/// Multi-head self-attention.
///
/// Column block `h` of `wq`, `wk` and `wv` is head `h`'s own projection; the
/// concatenated heads are mapped back to `d_model` by `w_out`. No biases.
#[derive(Debug, Clone, PartialEq)]
pub struct MhaLayer<T: Real> {
    heads: usize,
    d_model: usize,
    scale: AttentionScale,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub w_out: Tensor<T>,
}

impl<T: Real> MhaLayer<T> {
    pub fn new<R: Rng + ?Sized>(d_model: usize, heads: usize, scale: AttentionScale, rng: &mut R) -> Result<Self> {
        if heads == 0 || d_model == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::param(format!(
                "d_model {d_model} must be a positive multiple of heads {heads}"
            )));
        }
        let bound = 1.0 / (d_model as f64).sqrt();
        let mut mat = || Tensor::uniform(&[d_model, d_model], bound, rng).into_param();
        Ok(MhaLayer {
            heads,
            d_model,
            scale,
            wq: mat(),
            wk: mat(),
            wv: mat(),
            w_out: mat(),
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn scale_mode(&self) -> AttentionScale {
        self.scale
    }

    pub fn logit_scale(&self) -> f64 {
        let denom = match self.scale {
            AttentionScale::PerHead => self.head_dim(),
            AttentionScale::FullModel => self.d_model,
        };
        1.0 / (denom as f64).sqrt()
    }

    /// Output tokens and, per head, the `[R × group_len]` attention weights.
    pub fn forward_with_weights(&self, tape: &mut Tape<T>, tokens: Var, group_len: usize) -> Result<(Var, Vec<Var>)> {
        let shape = tape.shape(tokens).to_vec();
        if shape.len() != 2 || shape[1] != self.d_model {
            return Err(Error::dim("mha", &shape, &[group_len, self.d_model]));
        }
        check_groups(shape[0], group_len)?;
        let wq = tape.input(&self.wq)?;
        let wk = tape.input(&self.wk)?;
        let wv = tape.input(&self.wv)?;
        let q = tape.matmul(tokens, wq)?;
        let k = tape.matmul(tokens, wk)?;
        let v = tape.matmul(tokens, wv)?;
        let dh = self.head_dim();
        let scale = T::lit(self.logit_scale());
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * dh, dh)?,
                    tape.slice_cols(k, h * dh, dh)?,
                    tape.slice_cols(v, h * dh, dh)?,
                )
            };
            let logits = tape.block_scores(qh, kh, group_len)?;
            let logits = tape.scale(logits, scale)?;
            let attn = tape.row_softmax(logits)?;
            outs.push(tape.block_apply(attn, vh, group_len)?);
            weights.push(attn);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)?
        };
        let wo = tape.input(&self.w_out)?;
        Ok((tape.matmul(cat, wo)?, weights))
    }
}

impl<T: Real> Module<T> for MhaLayer<T> {
    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            ("wq".into(), &self.wq),
            ("wk".into(), &self.wk),
            ("wv".into(), &self.wv),
            ("w_out".into(), &self.w_out),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.wq, &mut self.wk, &mut self.wv, &mut self.w_out]
    }
}

impl<T: Real> SeqLayer<T> for MhaLayer<T> {
    fn kind(&self) -> &'static str {
        "mha"
    }

    fn forward(&self, tape: &mut Tape<T>, x: Var, group_len: usize) -> Result<Var> {
        self.forward_with_weights(tape, x, group_len).map(|(y, _)| y)
    }

    fn box_clone(&self) -> Box<dyn SeqLayer<T>> {
        Box::new(self.clone())
    }
}
