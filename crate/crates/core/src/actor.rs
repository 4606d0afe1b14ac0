//! Tanh-squashed diagonal Gaussian policy and the entropy temperature.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::critic::CriticEnsemble;
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::numcore::{prefixed, Adam, AdamConfig, Module, Real, Tape, Tensor, Var};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Emitted actions are clipped to `±ACTION_LIMIT`, since `tanh` rounds to
/// exactly ±1 for large pre-activations.
pub const ACTION_LIMIT: f64 = 1.0 - 1e-6;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// `π_θ(a|s)`: `a = tanh(μ(s) + σ(s) ⊙ ε)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy<T: Real> {
    pub hidden: [Linear<T>; 2],
    pub mean: Linear<T>,
    pub log_std: Linear<T>,
}

/// Log-density of `tanh(u)` given the Gaussian log-density of `u`, one action
/// component at a time: `log(1 − tanh²u) = 2(ln 2 − u − softplus(−2u))`.
fn tanh_log_jacobian(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

fn limit<T: Real>(a: T) -> T {
    let l = T::lit(ACTION_LIMIT);
    a.max(-l).min(l)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl<T: Real> GaussianPolicy<T> {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, action_dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        if state_dim == 0 || action_dim == 0 || hidden == 0 {
            return Err(Error::param("policy dimensions must be positive"));
        }
        Ok(GaussianPolicy {
            hidden: [Linear::new(state_dim, hidden, rng), Linear::new(hidden, hidden, rng)],
            mean: Linear::new(hidden, action_dim, rng),
            log_std: Linear::new(hidden, action_dim, rng),
        })
    }

    pub fn state_dim(&self) -> usize {
        self.hidden[0].input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.mean.output_dim()
    }

    /// `μ` and clamped `log σ`, each `[B × action_dim]`.
    pub fn heads(&self, tape: &mut Tape<T>, states: Var) -> Result<(Var, Var)> {
        let mut h = states;
        for l in &self.hidden {
            h = l.forward(tape, h)?;
            h = tape.relu(h)?;
        }
        let mu = self.mean.forward(tape, h)?;
        let ls = self.log_std.forward(tape, h)?;
        let ls = tape.clamp(ls, T::lit(LOG_STD_MIN), T::lit(LOG_STD_MAX))?;
        Ok((mu, ls))
    }

    /// Reparameterized sample with explicit noise `eps` `[B × action_dim]`:
    /// actions `[B × action_dim]` and log-probabilities `[B × 1]`.
    pub fn rsample(&self, tape: &mut Tape<T>, states: Var, eps: &Tensor<T>) -> Result<(Var, Var)> {
        let (mu, ls) = self.heads(tape, states)?;
        if tape.shape(mu) != eps.shape() {
            return Err(Error::dim("rsample", tape.shape(mu), eps.shape()));
        }
        let e = tape.constant(eps.clone())?;
        let sigma = tape.exp(ls)?;
        let noise = tape.mul(sigma, e)?;
        let u = tape.add(mu, noise)?;
        let a = tape.tanh(u)?;

        // log π = Σ_j [−ε²/2 − ln√(2π) − log σ − log(1 − tanh²u)]
        let a_dim = eps.cols();
        let base: Vec<T> = (0..eps.rows())
            .map(|r| {
                let s: f64 = eps.row(r).iter().map(|x| 0.5 * x.to_f64_lossy().powi(2)).sum();
                T::lit(-s - HALF_LN_2PI * a_dim as f64)
            })
            .collect();
        let base = tape.constant(Tensor::new(&[eps.rows(), 1], base)?)?;
        let neg2u = tape.scale(u, T::lit(-2.0))?;
        let sp = tape.softplus(neg2u)?;
        let u_sp = tape.add(u, sp)?;
        // log σ + 2 ln 2 − 2(u + softplus(−2u))
        let jac = tape.scale(u_sp, T::lit(-2.0))?;
        let jac = tape.add_scalar(jac, T::lit(2.0 * std::f64::consts::LN_2))?;
        let per_dim = tape.add(ls, jac)?;
        let total = tape.sum_cols(per_dim)?;
        let total = tape.scale(total, T::lit(-1.0))?;
        let logp = tape.add(base, total)?;
        Ok((a, logp))
    }

    fn eval_heads(&self, states: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        tape.set_track_params(false);
        let s = tape.input(states)?;
        let (mu, ls) = self.heads(&mut tape, s)?;
        Ok((tape.to_tensor(mu), tape.to_tensor(ls)))
    }

    fn as_batch(&self, state: &[T]) -> Result<Tensor<T>> {
        if state.len() != self.state_dim() {
            return Err(Error::dim("policy", &[state.len()], &[self.state_dim()]));
        }
        if state.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite state".into()));
        }
        Tensor::new(&[1, state.len()], state.to_vec())
    }

    /// Draws actions for a batch of states: `([B × action_dim], logp per row)`.
    pub fn sample_batch<R: Rng + ?Sized>(&self, states: &Tensor<T>, rng: &mut R) -> Result<(Tensor<T>, Vec<T>)> {
        let eps = standard_normal(&[states.rows(), self.action_dim()], rng);
        let mut tape = Tape::new();
        tape.set_track_params(false);
        let s = tape.input(states)?;
        let (a, logp) = self.rsample(&mut tape, s, &eps)?;
        let mut a = tape.to_tensor(a);
        a.data_mut().iter_mut().for_each(|x| *x = limit(*x));
        Ok((a, tape.value(logp).to_vec()))
    }

    /// One stochastic action and its log-probability.
    pub fn sample_action<R: Rng + ?Sized>(&self, state: &[T], rng: &mut R) -> Result<(Vec<T>, T)> {
        let (a, logp) = self.sample_batch(&self.as_batch(state)?, rng)?;
        Ok((a.into_data(), logp[0]))
    }

    /// `tanh(μ(s))`.
    pub fn act_deterministic(&self, state: &[T]) -> Result<Vec<T>> {
        let (mu, _) = self.eval_heads(&self.as_batch(state)?)?;
        Ok(mu.data().iter().map(|m| limit(m.tanh())).collect())
    }

    /// `log π(a|s)` for an action strictly inside the box.
    pub fn log_prob(&self, state: &[T], action: &[T]) -> Result<f64> {
        if action.len() != self.action_dim() {
            return Err(Error::dim("log_prob", &[action.len()], &[self.action_dim()]));
        }
        let (mu, ls) = self.eval_heads(&self.as_batch(state)?)?;
        let mut total = 0.0;
        for ((a, m), l) in action.iter().zip(mu.data()).zip(ls.data()) {
            let a = a.to_f64_lossy();
            if a.abs() >= 1.0 {
                return Ok(f64::NEG_INFINITY);
            }
            let u = a.atanh();
            let l = l.to_f64_lossy();
            let z = (u - m.to_f64_lossy()) / l.exp();
            total += -0.5 * z * z - HALF_LN_2PI - l - tanh_log_jacobian(u);
        }
        Ok(total)
    }
}

impl<T: Real> Module<T> for GaussianPolicy<T> {
    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = prefixed("hidden.0", self.hidden[0].named_params());
        out.extend(prefixed("hidden.1", self.hidden[1].named_params()));
        out.extend(prefixed("mean", self.mean.named_params()));
        out.extend(prefixed("log_std", self.log_std.named_params()));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let [h0, h1] = &mut self.hidden;
        let mut out = h0.params_mut();
        out.extend(h1.params_mut());
        out.extend(self.mean.params_mut());
        out.extend(self.log_std.params_mut());
        out
    }
}

pub fn standard_normal<T: Real, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect();
    Tensor::new(shape, data).expect("length matches shape")
}

/// What the policy objective queries: a differentiable action value for
/// `[B × (state_dim + action_dim)]` single-token pairs.
pub trait ActionValue<T: Real> {
    fn action_value(&self, tape: &mut Tape<T>, pairs: Var) -> Result<Var>;
}

impl<T: Real> ActionValue<T> for CriticEnsemble<T> {
    /// Mean over all members, one token per pair.
    fn action_value(&self, tape: &mut Tape<T>, pairs: Var) -> Result<Var> {
        self.mean_q_on_tape(tape, pairs, 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActorStats<T> {
    pub loss: T,
    /// Log-probabilities of the freshly sampled actions.
    pub logp: Vec<T>,
}

/// Records the negated policy objective
/// `−mean_s [Q(s, ã) − α log π(ã|s)]` with noise `eps`.
pub fn actor_loss<T: Real, C: ActionValue<T> + ?Sized>(
    policy: &GaussianPolicy<T>,
    critic: &C,
    tape: &mut Tape<T>,
    states: &Tensor<T>,
    eps: &Tensor<T>,
    alpha: T,
) -> Result<(Var, Var)> {
    if states.rows() == 0 {
        return Err(Error::param("empty state batch"));
    }
    let s = tape.constant(states.clone())?;
    let (a, logp) = policy.rsample(tape, s, eps)?;
    let pairs = tape.concat_cols(&[s, a])?;
    let q = critic.action_value(tape, pairs)?;
    let ent = tape.scale(logp, alpha)?;
    let obj = tape.sub(q, ent)?;
    let mean = tape.mean(obj)?;
    Ok((tape.scale(mean, -T::one())?, logp))
}

/// One gradient step on the policy parameters; critics are left untouched.
pub fn actor_update<T: Real, C: ActionValue<T> + ?Sized, R: Rng + ?Sized>(
    policy: &mut GaussianPolicy<T>,
    critic: &C,
    states: &Tensor<T>,
    alpha: T,
    optimizer: &mut Adam<T>,
    rng: &mut R,
) -> Result<ActorStats<T>> {
    let eps = standard_normal(&[states.rows(), policy.action_dim()], rng);
    let mut tape = Tape::new();
    let (loss, logp) = actor_loss(policy, critic, &mut tape, states, &eps, alpha)?;
    let stats = ActorStats {
        loss: tape.value(loss)[0],
        logp: tape.value(logp).to_vec(),
    };
    let grads = tape.backward(loss)?;
    policy.zero_grad();
    policy.accumulate(&grads)?;
    optimizer.step(policy.params_mut())?;
    Ok(stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlphaMode {
    Fixed,
    Auto,
}

impl AlphaMode {
    pub fn name(self) -> &'static str {
        match self {
            AlphaMode::Fixed => "fixed",
            AlphaMode::Auto => "auto",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "fixed" => Some(AlphaMode::Fixed),
            "auto" => Some(AlphaMode::Auto),
            _ => None,
        }
    }
}

/// Entropy temperature `α = exp(log α)`.
#[derive(Debug, Clone)]
pub struct Temperature<T: Real> {
    pub log_alpha: Tensor<T>,
    pub mode: AlphaMode,
    pub target_entropy: f64,
    optimizer: Adam<T>,
}

impl<T: Real> Temperature<T> {
    pub fn new(initial_alpha: f64, mode: AlphaMode, target_entropy: f64, optim: AdamConfig) -> Result<Self> {
        if !(initial_alpha > 0.0 && initial_alpha.is_finite()) {
            return Err(Error::param(format!("initial alpha {initial_alpha} must be positive")));
        }
        Ok(Temperature {
            log_alpha: Tensor::new(&[1], vec![T::lit(initial_alpha.ln())])?.into_param(),
            mode,
            target_entropy,
            optimizer: Adam::new(optim),
        })
    }

    pub fn alpha(&self) -> T {
        self.log_alpha.data()[0].exp()
    }

    pub fn optimizer(&self) -> &Adam<T> {
        &self.optimizer
    }

    /// `−log α · mean(logp + target_entropy)` with `logp` held constant.
    pub fn loss(&self, tape: &mut Tape<T>, logp: &[T]) -> Result<Var> {
        if logp.is_empty() {
            return Err(Error::param("empty log-probability batch"));
        }
        let mean = logp.iter().map(|x| x.to_f64_lossy()).sum::<f64>() / logp.len() as f64;
        let la = tape.input(&self.log_alpha)?;
        let c = tape.constant(Tensor::new(&[1], vec![T::lit(-(mean + self.target_entropy))])?)?;
        let prod = tape.mul(la, c)?;
        tape.sum(prod)
    }

    /// One step on `log α` minimizing `−log α · mean(logp + target_entropy)`.
    /// No-op in fixed mode.
    pub fn update(&mut self, logp: &[T]) -> Result<()> {
        if self.mode == AlphaMode::Fixed {
            return Ok(());
        }
        let mut tape = Tape::new();
        let loss = self.loss(&mut tape, logp)?;
        let grads = tape.backward(loss)?;
        self.log_alpha.zero_grad();
        if let Some(g) = grads.get(self.log_alpha.id()) {
            self.log_alpha.accumulate_grad(g)?;
        }
        self.optimizer.step(vec![&mut self.log_alpha])
    }
}

impl<T: Real> Module<T> for Temperature<T> {
    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![("log_alpha".into(), &self.log_alpha)]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.log_alpha]
    }
}

#[cfg(test)]
mod tests;
