//! Monte-Carlo returns, estimation bias and Q-value distribution statistics.

use crate::actor::GaussianPolicy;
use crate::critic::{sample_subset, CriticEnsemble};
use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::numcore::{Real, Tensor};
use crate::rng::StreamRng;

/// Normalizers smaller than this in magnitude are rejected.
pub const MIN_DENOMINATOR: f64 = 1e-6;

/// Compensated (Kahan) sum.
pub fn kahan_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for x in xs {
        let y = x - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}

fn mean(xs: &[f64]) -> f64 {
    kahan_sum(xs.iter().copied()) / xs.len() as f64
}

/// Population standard deviation.
fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (kahan_sum(xs.iter().map(|x| (x - m).powi(2))) / xs.len() as f64).sqrt()
}

/// A policy used to continue Monte-Carlo rollouts.
pub trait RolloutPolicy {
    fn act(&self, obs: &[f64], rng: &mut StreamRng) -> Result<Vec<f64>>;
}

impl<F> RolloutPolicy for F
where
    F: Fn(&[f64], &mut StreamRng) -> Result<Vec<f64>>,
{
    fn act(&self, obs: &[f64], rng: &mut StreamRng) -> Result<Vec<f64>> {
        self(obs, rng)
    }
}

/// Samples from the policy.
pub struct Stochastic<'a, T: Real>(pub &'a GaussianPolicy<T>);

/// Acts with `tanh(μ(s))`.
pub struct Deterministic<'a, T: Real>(pub &'a GaussianPolicy<T>);

fn to_real<T: Real>(xs: &[f64]) -> Vec<T> {
    xs.iter().map(|&x| T::lit(x)).collect()
}

fn to_f64<T: Real>(xs: &[T]) -> Vec<f64> {
    xs.iter().map(|x| x.to_f64_lossy()).collect()
}

impl<T: Real> RolloutPolicy for Stochastic<'_, T> {
    fn act(&self, obs: &[f64], rng: &mut StreamRng) -> Result<Vec<f64>> {
        Ok(to_f64(&self.0.sample_action(&to_real::<T>(obs), rng)?.0))
    }
}

impl<T: Real> RolloutPolicy for Deterministic<'_, T> {
    fn act(&self, obs: &[f64], _rng: &mut StreamRng) -> Result<Vec<f64>> {
        Ok(to_f64(&self.0.act_deterministic(&to_real::<T>(obs))?))
    }
}

/// Discounted returns of `n_rollouts` episodes that start from the current
/// state of `env` with the forced action `a0` and then follow `policy`, each
/// at most `horizon` steps long.
pub fn monte_carlo_returns(
    env: &dyn Environment,
    policy: &dyn RolloutPolicy,
    a0: &[f64],
    gamma: f64,
    horizon: usize,
    n_rollouts: usize,
    rng: &mut StreamRng,
) -> Result<Vec<f64>> {
    if n_rollouts == 0 || horizon == 0 {
        return Err(Error::param("need at least one rollout of at least one step"));
    }
    (0..n_rollouts)
        .map(|_| {
            let mut sim = env.clone_box();
            sim.reseed(rng);
            let mut terms = Vec::with_capacity(horizon);
            let mut out = sim.step(a0)?;
            let mut discount = 1.0;
            terms.push(out.reward);
            for _ in 1..horizon {
                if out.episode_over() {
                    break;
                }
                discount *= gamma;
                if discount == 0.0 {
                    break;
                }
                let a = policy.act(&out.next_state, rng)?;
                out = sim.step(&a)?;
                terms.push(discount * out.reward);
            }
            Ok(kahan_sum(terms))
        })
        .collect()
}

/// `R^π(s0, a0)`: mean of [`monte_carlo_returns`].
pub fn monte_carlo_return(
    env: &dyn Environment,
    policy: &dyn RolloutPolicy,
    a0: &[f64],
    gamma: f64,
    horizon: usize,
    n_rollouts: usize,
    rng: &mut StreamRng,
) -> Result<f64> {
    Ok(mean(&monte_carlo_returns(
        env, policy, a0, gamma, horizon, n_rollouts, rng,
    )?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasStats {
    /// `Q(s, a) − R^π(s, a)` per point.
    pub bias: Vec<f64>,
    /// Bias divided by the denominator, per point.
    pub normalized: Vec<f64>,
    pub mean_bias: f64,
    pub mean_normalized_bias: f64,
    pub std_normalized_bias: f64,
    /// Mean Monte-Carlo return over the points.
    pub denominator: f64,
}

/// Bias statistics from per-point Q estimates and Monte-Carlo returns.
pub fn bias_stats(q: &[f64], mc_returns: &[f64]) -> Result<BiasStats> {
    if q.is_empty() || q.len() != mc_returns.len() {
        return Err(Error::param(format!(
            "{} Q estimates for {} returns",
            q.len(),
            mc_returns.len()
        )));
    }
    if q.iter().chain(mc_returns).any(|x| !x.is_finite()) {
        return Err(Error::Numeric("bias inputs".into()));
    }
    let bias: Vec<f64> = q.iter().zip(mc_returns).map(|(a, b)| a - b).collect();
    let mean_bias = mean(&bias);
    let denominator = mean(mc_returns);
    if denominator.abs() < MIN_DENOMINATOR {
        return Err(Error::DegenerateNormalization { mean_bias, denominator });
    }
    let normalized: Vec<f64> = bias.iter().map(|b| b / denominator).collect();
    Ok(BiasStats {
        mean_normalized_bias: mean_bias / denominator,
        std_normalized_bias: std_dev(&normalized),
        bias,
        normalized,
        mean_bias,
        denominator,
    })
}

/// Produces the `Q_φ(s, a)` side of the bias for a batch of points.
pub trait QEstimator {
    fn q_estimates(&self, points: &[(Vec<f64>, Vec<f64>)], rng: &mut StreamRng) -> Result<Vec<f64>>;
}

/// Mean of the online Q-values over a freshly drawn `M`-subset.
pub struct SubsetMeanQ<'a, T: Real> {
    pub ensemble: &'a CriticEnsemble<T>,
    pub m: usize,
}

/// Stacks `(s, a)` points as single-token pairs.
pub fn points_tensor<T: Real>(points: &[(Vec<f64>, Vec<f64>)]) -> Result<Tensor<T>> {
    let width = points.first().map_or(0, |(s, a)| s.len() + a.len());
    let mut data = Vec::with_capacity(points.len() * width);
    for (s, a) in points {
        if s.len() + a.len() != width {
            return Err(Error::param("points of unequal width"));
        }
        data.extend(s.iter().chain(a).map(|&x| T::lit(x)));
    }
    Tensor::new(&[points.len(), width], data)
}

impl<T: Real> QEstimator for SubsetMeanQ<'_, T> {
    fn q_estimates(&self, points: &[(Vec<f64>, Vec<f64>)], rng: &mut StreamRng) -> Result<Vec<f64>> {
        let subset = sample_subset(self.ensemble.len(), self.m, rng)?;
        let pairs = points_tensor::<T>(points)?;
        let per: Vec<Vec<T>> = subset
            .iter()
            .map(|&i| self.ensemble.members()[i].q_values(&pairs, 1))
            .collect::<Result<_>>()?;
        Ok((0..points.len())
            .map(|p| kahan_sum(per.iter().map(|v| v[p].to_f64_lossy())) / subset.len() as f64)
            .collect())
    }
}

/// Normalized estimation bias of `estimator` against `mc_returns`.
pub fn estimation_bias(
    estimator: &dyn QEstimator,
    points: &[(Vec<f64>, Vec<f64>)],
    mc_returns: &[f64],
    rng: &mut StreamRng,
) -> Result<BiasStats> {
    if points.is_empty() {
        return Err(Error::param("no evaluation points"));
    }
    bias_stats(&estimator.q_estimates(points, rng)?, mc_returns)
}

/// Five-number summary with Tukey outlier counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    /// Values below `q1 − 1.5·IQR` or above `q3 + 1.5·IQR`.
    pub outliers: usize,
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::param("summary of no values"));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("summary input".into()));
        }
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        let (q1, q3) = (quantile(&s, 0.25), quantile(&s, 0.75));
        let iqr = q3 - q1;
        let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
        Ok(Summary {
            min: s[0],
            q1,
            median: quantile(&s, 0.5),
            q3,
            max: s[s.len() - 1],
            outliers: s.iter().filter(|&&x| x < lo || x > hi).count(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QDistStats {
    /// Largest member Q per point.
    pub max_q: Vec<f64>,
    /// Smallest member Q per point.
    pub min_q: Vec<f64>,
    pub max_summary: Summary,
    pub min_summary: Summary,
}

/// Spread of member predictions from a `[member][point]` table.
pub fn q_distribution_from_table(table: &[Vec<f64>]) -> Result<QDistStats> {
    let points = table.first().map_or(0, Vec::len);
    if points == 0 || table.iter().any(|r| r.len() != points) {
        return Err(Error::param("empty or ragged Q table"));
    }
    let col = |p: usize| table.iter().map(move |r| r[p]);
    let max_q: Vec<f64> = (0..points).map(|p| col(p).fold(f64::NEG_INFINITY, f64::max)).collect();
    let min_q: Vec<f64> = (0..points).map(|p| col(p).fold(f64::INFINITY, f64::min)).collect();
    Ok(QDistStats {
        max_summary: Summary::of(&max_q)?,
        min_summary: Summary::of(&min_q)?,
        max_q,
        min_q,
    })
}

/// Evaluation-mode member predictions at `points`.
pub fn q_distribution_stats<T: Real>(
    ensemble: &CriticEnsemble<T>,
    points: &[(Vec<f64>, Vec<f64>)],
) -> Result<QDistStats> {
    if points.is_empty() {
        return Err(Error::param("no evaluation points"));
    }
    let pairs = points_tensor::<T>(points)?;
    let table: Vec<Vec<f64>> = ensemble.online_q(&pairs, 1)?.into_iter().map(|v| to_f64(&v)).collect();
    q_distribution_from_table(&table)
}
