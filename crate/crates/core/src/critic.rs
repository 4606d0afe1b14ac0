//! Q-network variants and the critic ensemble.
//!
//! Every Q-network is `embed → front end → trunk → head`. The front end is a
//! [`SeqLayer`] picked by variant name from a [`VariantRegistry`]: nothing for
//! the REDQ/DroQ baselines, multi-head self-attention for the MHA variants, and
//! an identity connection for `identity_droq`. DroQ-derived variants use a
//! regularized trunk (linear → dropout → layer norm → ReLU per hidden layer).

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{AttentionScale, Dense, Linear, MhaLayer, Passthrough, ResidualBlock, SeqLayer};
use crate::numcore::{prefixed, Module, Real, Tape, Tensor, Var};
use crate::rng::{self, StreamRng};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Built-in Q-network variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QVariant {
    RedqBase,
    DroqBase,
    MhaRedq,
    MhaDroq,
    IdentityDroq,
}

impl QVariant {
    pub const ALL: [QVariant; 5] = [
        QVariant::RedqBase,
        QVariant::DroqBase,
        QVariant::MhaRedq,
        QVariant::MhaDroq,
        QVariant::IdentityDroq,
    ];

    pub fn name(self) -> &'static str {
        match self {
            QVariant::RedqBase => "redq_base",
            QVariant::DroqBase => "droq_base",
            QVariant::MhaRedq => "mha_redq",
            QVariant::MhaDroq => "mha_droq",
            QVariant::IdentityDroq => "identity_droq",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    /// Whether the trunk carries dropout and layer normalization.
    pub fn regularized(self) -> bool {
        matches!(self, QVariant::DroqBase | QVariant::MhaDroq | QVariant::IdentityDroq)
    }
}

impl fmt::Display for QVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Shape of a Q-network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArchSpec {
    pub state_dim: usize,
    pub action_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub attention_scale: AttentionScale,
    /// Dropout rate of regularized trunks.
    pub dropout: f64,
}

impl ArchSpec {
    pub fn pair_dim(&self) -> usize {
        self.state_dim + self.action_dim
    }
}

pub type FrontEndBuilder<T> = fn(&ArchSpec, &mut StreamRng) -> Result<Box<dyn SeqLayer<T>>>;

/// How a named variant is assembled.
pub struct VariantDef<T: Real> {
    pub front_end: FrontEndBuilder<T>,
    pub regularized: bool,
}

impl<T: Real> Clone for VariantDef<T> {
    fn clone(&self) -> Self {
        VariantDef {
            front_end: self.front_end,
            regularized: self.regularized,
        }
    }
}

fn passthrough<T: Real>(_: &ArchSpec, _: &mut StreamRng) -> Result<Box<dyn SeqLayer<T>>> {
    Ok(Box::new(Passthrough))
}

fn attention<T: Real>(arch: &ArchSpec, rng: &mut StreamRng) -> Result<Box<dyn SeqLayer<T>>> {
    Ok(Box::new(MhaLayer::new(
        arch.d_model,
        arch.heads,
        arch.attention_scale,
        rng,
    )?))
}

fn identity_connection<T: Real>(arch: &ArchSpec, rng: &mut StreamRng) -> Result<Box<dyn SeqLayer<T>>> {
    Ok(Box::new(ResidualBlock::new(Box::new(Dense {
        linear: Linear::new(arch.d_model, arch.d_model, rng),
        relu: true,
    }))))
}

/// Q-network variants by name.
pub struct VariantRegistry<T: Real> {
    entries: BTreeMap<String, VariantDef<T>>,
}

impl<T: Real> Default for VariantRegistry<T> {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl<T: Real> VariantRegistry<T> {
    pub fn empty() -> Self {
        VariantRegistry {
            entries: BTreeMap::new(),
        }
    }

    pub fn with_builtins() -> Self {
        let mut reg = Self::empty();
        for v in QVariant::ALL {
            let front_end: FrontEndBuilder<T> = match v {
                QVariant::RedqBase | QVariant::DroqBase => passthrough,
                QVariant::MhaRedq | QVariant::MhaDroq => attention,
                QVariant::IdentityDroq => identity_connection,
            };
            reg.register(
                v.name(),
                VariantDef {
                    front_end,
                    regularized: v.regularized(),
                },
            )
            .expect("built-in names are unique");
        }
        reg
    }

    pub fn register(&mut self, name: &str, def: VariantDef<T>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::param(format!("variant {name:?} already registered")));
        }
        self.entries.insert(name.to_string(), def);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&VariantDef<T>> {
        self.entries.get(name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }

    pub fn build(&self, name: &str, arch: &ArchSpec, rng: &mut StreamRng) -> Result<QNetwork<T>> {
        let def = self
            .get(name)
            .ok_or_else(|| Error::param(format!("unknown variant {name:?}; known: {}", self.names().join(", "))))?;
        QNetwork::assemble(name, def, arch, rng)
    }
}

/// Dropout source for a forward pass. Evaluation mode disables dropout.
pub enum ForwardMode<'a> {
    Eval,
    Train(&'a mut StreamRng),
}

/// Two hidden layers of width `d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trunk<T: Real> {
    pub layers: Vec<Linear<T>>,
    /// `(gain, bias)` per hidden layer; empty for plain trunks.
    pub norms: Vec<(Tensor<T>, Tensor<T>)>,
    pub dropout: f64,
}

impl<T: Real> Trunk<T> {
    fn new<R: Rng + ?Sized>(width: usize, regularized: bool, dropout: f64, rng: &mut R) -> Self {
        let layers = vec![Linear::new(width, width, rng), Linear::new(width, width, rng)];
        let norms = if regularized {
            (0..layers.len())
                .map(|_| {
                    (
                        Tensor::full(&[width], T::one()).into_param(),
                        Tensor::zeros(&[width]).into_param(),
                    )
                })
                .collect()
        } else {
            Vec::new()
        };
        Trunk {
            layers,
            norms,
            dropout: if regularized { dropout } else { 0.0 },
        }
    }

    pub fn regularized(&self) -> bool {
        !self.norms.is_empty()
    }

    fn forward(&self, tape: &mut Tape<T>, mut h: Var, mode: &mut ForwardMode<'_>) -> Result<Var> {
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if let Some((gain, bias)) = self.norms.get(i) {
                if let ForwardMode::Train(rng) = mode {
                    h = tape.dropout(h, self.dropout, true, &mut **rng)?;
                }
                let g = tape.input(gain)?;
                let b = tape.input(bias)?;
                h = tape.layer_norm(h, g, b, T::lit(LAYER_NORM_EPS))?;
            }
            h = tape.relu(h)?;
        }
        Ok(h)
    }
}

impl<T: Real> Module<T> for Trunk<T> {
    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(prefixed(&i.to_string(), l.named_params()));
            if let Some((g, b)) = self.norms.get(i) {
                out.push((format!("{i}.ln_gain"), g));
                out.push((format!("{i}.ln_bias"), b));
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        let mut norms = self.norms.iter_mut();
        for l in self.layers.iter_mut() {
            out.extend(l.params_mut());
            if let Some((g, b)) = norms.next() {
                out.push(g);
                out.push(b);
            }
        }
        out
    }
}

/// One ensemble member, `Q_φ(s, a)`.
#[derive(Clone)]
pub struct QNetwork<T: Real> {
    variant: String,
    pub embed: Linear<T>,
    pub front: Box<dyn SeqLayer<T>>,
    pub trunk: Trunk<T>,
    pub head: Linear<T>,
}

impl<T: Real> QNetwork<T> {
    fn assemble(name: &str, def: &VariantDef<T>, arch: &ArchSpec, rng: &mut StreamRng) -> Result<Self> {
        if arch.pair_dim() == 0 || arch.d_model == 0 {
            return Err(Error::param("network dimensions must be positive"));
        }
        if !(0.0..1.0).contains(&arch.dropout) {
            return Err(Error::param(format!("dropout {} not in [0, 1)", arch.dropout)));
        }
        let embed = Linear::new(arch.pair_dim(), arch.d_model, rng);
        let front = (def.front_end)(arch, rng)?;
        let trunk = Trunk::new(arch.d_model, def.regularized, arch.dropout, rng);
        let head = Linear::new(arch.d_model, 1, rng);
        Ok(QNetwork {
            variant: name.to_string(),
            embed,
            front,
            trunk,
            head,
        })
    }

    pub fn variant(&self) -> &str {
        &self.variant
    }

    pub fn pair_dim(&self) -> usize {
        self.embed.input_dim()
    }

    /// Q-values `[R × 1]` for `R` concatenated state-action tokens stacked in
    /// groups of `group_len`.
    pub fn forward(&self, tape: &mut Tape<T>, pairs: Var, group_len: usize, mode: &mut ForwardMode<'_>) -> Result<Var> {
        let shape = tape.shape(pairs).to_vec();
        if shape.len() != 2 || shape[1] != self.pair_dim() {
            return Err(Error::dim("q_network", &shape, &[group_len, self.pair_dim()]));
        }
        let h = self.embed.forward(tape, pairs)?;
        let h = self.front.forward(tape, h, group_len)?;
        let h = self.trunk.forward(tape, h, mode)?;
        self.head.forward(tape, h)
    }

    /// Evaluation-mode Q-values outside any training tape.
    pub fn q_values(&self, pairs: &Tensor<T>, group_len: usize) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        tape.set_track_params(false);
        let x = tape.input(pairs)?;
        let q = self.forward(&mut tape, x, group_len, &mut ForwardMode::Eval)?;
        Ok(tape.value(q).to_vec())
    }

    /// A copy whose parameters never receive gradients.
    pub fn detached(&self) -> Self {
        let mut copy = self.clone();
        copy.set_requires_grad(false);
        copy
    }
}

impl<T: Real> Module<T> for QNetwork<T> {
    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = prefixed("embed", self.embed.named_params());
        out.extend(prefixed("front", self.front.named_params()));
        out.extend(prefixed("trunk", self.trunk.named_params()));
        out.extend(prefixed("head", self.head.named_params()));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = self.embed.params_mut();
        out.extend(self.front.params_mut());
        out.extend(self.trunk.params_mut());
        out.extend(self.head.params_mut());
        out
    }
}

/// How target values of a subset are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TargetReduction {
    /// In-target minimization.
    #[default]
    Min,
    /// Plain average (no-minimization ablation).
    Mean,
}

impl TargetReduction {
    pub fn name(self) -> &'static str {
        match self {
            TargetReduction::Min => "min",
            TargetReduction::Mean => "mean",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "min" => Some(TargetReduction::Min),
            "mean" => Some(TargetReduction::Mean),
            _ => None,
        }
    }

    /// Combines per-member value vectors elementwise.
    pub fn reduce<T: Real>(self, values: &[Vec<T>]) -> Vec<T> {
        let len = values.first().map_or(0, Vec::len);
        (0..len)
            .map(|j| match self {
                TargetReduction::Min => values.iter().map(|v| v[j]).fold(T::infinity(), T::min),
                TargetReduction::Mean => values.iter().map(|v| v[j]).sum::<T>() / T::lit(values.len() as f64),
            })
            .collect()
    }
}

/// Draws `m` distinct member indices out of `n`, uniformly, in ascending order.
pub fn sample_subset<R: Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> Result<Vec<usize>> {
    if m == 0 || m > n {
        return Err(Error::param(format!("subset size {m} not in 1..={n}")));
    }
    let mut s = index::sample(rng, n, m).into_vec();
    s.sort_unstable();
    Ok(s)
}

/// `N` online Q-networks with mirrored target networks.
#[derive(Clone)]
pub struct CriticEnsemble<T: Real> {
    members: Vec<QNetwork<T>>,
    targets: Vec<QNetwork<T>>,
}

impl<T: Real> CriticEnsemble<T> {
    /// Builds `n` independently initialized members, each from its own
    /// substream of `seed`, and sets every target to an exact copy.
    pub fn new(registry: &VariantRegistry<T>, variant: &str, arch: &ArchSpec, n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::param("ensemble needs at least one member"));
        }
        let members = (0..n)
            .map(|i| {
                let mut rng = rng::substream(seed, &[rng::label::INIT, i as u64]);
                registry.build(variant, arch, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_members(members))
    }

    pub fn from_members(members: Vec<QNetwork<T>>) -> Self {
        let targets = members.iter().map(QNetwork::detached).collect();
        CriticEnsemble { members, targets }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[QNetwork<T>] {
        &self.members
    }

    pub fn members_mut(&mut self) -> &mut [QNetwork<T>] {
        &mut self.members
    }

    pub fn targets(&self) -> &[QNetwork<T>] {
        &self.targets
    }

    pub fn targets_mut(&mut self) -> &mut [QNetwork<T>] {
        &mut self.targets
    }

    pub fn validate_subset(&self, subset: &[usize]) -> Result<()> {
        let n = self.len();
        if subset.is_empty() || subset.len() > n {
            return Err(Error::param(format!(
                "subset of {} members from an ensemble of {n}",
                subset.len()
            )));
        }
        let mut seen = vec![false; n];
        for &i in subset {
            if i >= n {
                return Err(Error::param(format!("member index {i} out of range 0..{n}")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::param(format!("duplicate member index {i}")));
            }
        }
        Ok(())
    }

    /// Evaluation-mode target Q-values of one member.
    pub fn target_q(&self, member: usize, pairs: &Tensor<T>, group_len: usize) -> Result<Vec<T>> {
        self.targets
            .get(member)
            .ok_or_else(|| Error::param(format!("member index {member} out of range")))?
            .q_values(pairs, group_len)
    }

    /// Target Q-values over `subset`, combined elementwise by `reduction`.
    pub fn reduce_over_subset(
        &self,
        subset: &[usize],
        pairs: &Tensor<T>,
        group_len: usize,
        reduction: TargetReduction,
    ) -> Result<Vec<T>> {
        self.validate_subset(subset)?;
        let values = subset
            .iter()
            .map(|&i| self.target_q(i, pairs, group_len))
            .collect::<Result<Vec<_>>>()?;
        Ok(reduction.reduce(&values))
    }

    /// Elementwise minimum of target Q-values over `subset`.
    pub fn min_over_subset(&self, subset: &[usize], pairs: &Tensor<T>, group_len: usize) -> Result<Vec<T>> {
        self.reduce_over_subset(subset, pairs, group_len, TargetReduction::Min)
    }

    /// Evaluation-mode Q-values of every online member, one vector per member.
    pub fn online_q(&self, pairs: &Tensor<T>, group_len: usize) -> Result<Vec<Vec<T>>> {
        self.members.iter().map(|m| m.q_values(pairs, group_len)).collect()
    }

    /// Mean over all online members, recorded on `tape` with the critic
    /// parameters entering as constants and dropout off.
    pub fn mean_q_on_tape(&self, tape: &mut Tape<T>, pairs: Var, group_len: usize) -> Result<Var> {
        let was = tape.tracks_params();
        tape.set_track_params(false);
        let result = (|| {
            let mut total: Option<Var> = None;
            for m in &self.members {
                let q = m.forward(tape, pairs, group_len, &mut ForwardMode::Eval)?;
                total = Some(match total {
                    None => q,
                    Some(t) => tape.add(t, q)?,
                });
            }
            let total = total.ok_or_else(|| Error::state("empty ensemble"))?;
            tape.scale(total, T::lit(1.0 / self.len() as f64))
        })();
        tape.set_track_params(was);
        result
    }

    /// `φ_tar ← ρ φ_tar + (1 − ρ) φ` for every member.
    pub fn polyak_update(&mut self, rho: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::param(format!("polyak factor {rho} not in [0, 1]")));
        }
        if rho == 1.0 {
            return Ok(());
        }
        let keep = T::lit(rho);
        let mix = T::lit(1.0 - rho);
        for (target, member) in self.targets.iter_mut().zip(&self.members) {
            for (tp, p) in target.params_mut().into_iter().zip(member.params()) {
                if rho == 0.0 {
                    tp.copy_from(p)?;
                } else {
                    for (t, &o) in tp.data_mut().iter_mut().zip(p.data()) {
                        *t = keep * *t + mix * o;
                    }
                }
            }
        }
        Ok(())
    }
}

impl<T: Real> Module<T> for CriticEnsemble<T> {
    /// Members then targets, as `member.{i}.*` / `target.{i}.*`.
    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, m) in self.members.iter().enumerate() {
            out.extend(prefixed(&format!("member.{i}"), m.named_params()));
        }
        for (i, t) in self.targets.iter().enumerate() {
            out.extend(prefixed(&format!("target.{i}"), t.named_params()));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for m in self.members.iter_mut() {
            out.extend(m.params_mut());
        }
        for t in self.targets.iter_mut() {
            out.extend(t.params_mut());
        }
        out
    }
}
