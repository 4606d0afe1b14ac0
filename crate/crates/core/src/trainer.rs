//! The training loop: environment interaction, `G` critic update rounds per
//! environment step, then one policy and temperature update.
//!
//! Every random draw comes from a substream of the run seed keyed by the
//! environment step and update round, so a run is a pure function of its
//! configuration.

use rand::Rng;

use crate::actor::{actor_update, AlphaMode, GaussianPolicy, Temperature};
use crate::critic::{
    sample_subset, ArchSpec, CriticEnsemble, ForwardMode, QNetwork, QVariant, TargetReduction, VariantRegistry,
};
use crate::diagnostics::{self, BiasStats, Deterministic, QDistStats, Stochastic, SubsetMeanQ};
use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::layers::AttentionScale;
use crate::numcore::{Adam, AdamConfig, Module, Real, Tape, Tensor, Var};
use crate::replay::{bootstrap_groups, GroupsPerUpdate, ReplayBuffer, Tokens, Transition};
use crate::rng::{self, label, StreamRng};

/// Where the `M`-subset for in-target minimization is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SubsetScope {
    /// One subset per update round, shared by all groups and members.
    #[default]
    PerUpdate,
    /// A fresh subset for every bootstrap group.
    PerGroup,
}

impl SubsetScope {
    pub fn name(self) -> &'static str {
        match self {
            SubsetScope::PerUpdate => "per_update",
            SubsetScope::PerGroup => "per_group",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "per_update" => Some(SubsetScope::PerUpdate),
            "per_group" => Some(SubsetScope::PerGroup),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    /// Ensemble size `N`.
    pub n: usize,
    /// Subset size `M` of the target minimization.
    pub m: usize,
    /// Update rounds per environment step.
    pub g: usize,
    pub gamma: f64,
    pub rho: f64,
    pub batch_size: usize,
    pub group_size: usize,
    pub groups_per_update: GroupsPerUpdate,
    pub subset_scope: SubsetScope,
    pub target_reduction: TargetReduction,
    pub variant: String,
    pub d_model: usize,
    pub heads: usize,
    pub attention_scale: AttentionScale,
    pub dropout: f64,
    pub policy_hidden: usize,
    pub lr: f64,
    pub clip_norm: Option<f64>,
    pub alpha_mode: AlphaMode,
    pub initial_alpha: f64,
    /// `None` means `−action_dim`.
    pub target_entropy: Option<f64>,
    pub buffer_capacity: usize,
    pub seed: u64,
    pub total_env_steps: usize,
    pub init_random_steps: usize,
    pub eval_interval: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            n: 10,
            m: 2,
            g: 20,
            gamma: 0.99,
            rho: 0.995,
            batch_size: 512,
            group_size: 4,
            groups_per_update: GroupsPerUpdate::Cover,
            subset_scope: SubsetScope::PerUpdate,
            target_reduction: TargetReduction::Min,
            variant: QVariant::MhaRedq.name().to_string(),
            d_model: 256,
            heads: 8,
            attention_scale: AttentionScale::PerHead,
            dropout: 0.01,
            policy_hidden: 256,
            lr: 3e-4,
            clip_norm: None,
            alpha_mode: AlphaMode::Auto,
            initial_alpha: 1.0,
            target_entropy: None,
            buffer_capacity: 1_000_000,
            seed: 0,
            total_env_steps: 100_000,
            init_random_steps: 5000,
            eval_interval: 1000,
        }
    }
}

impl TrainerConfig {
    /// Checks every range constraint, naming the first one violated.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Parameter(msg));
        if self.n == 0 {
            return fail("N must be at least 1".into());
        }
        if self.m == 0 || self.m > self.n {
            return fail(format!("M must satisfy 1 <= M <= N (M = {}, N = {})", self.m, self.n));
        }
        if self.g == 0 {
            return fail("G must be at least 1".into());
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return fail(format!("gamma {} not in (0, 1]", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return fail(format!("rho {} not in [0, 1]", self.rho));
        }
        if self.batch_size == 0 || self.group_size == 0 {
            return fail("batch_size and group_size must be positive".into());
        }
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} not in [0, 1)", self.dropout));
        }
        if self.policy_hidden == 0 {
            return fail("policy_hidden must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr {} must be positive", self.lr));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return fail(format!("clip_norm {c} must be positive"));
            }
        }
        if !(self.initial_alpha > 0.0 && self.initial_alpha.is_finite()) {
            return fail(format!("initial_alpha {} must be positive", self.initial_alpha));
        }
        if self.buffer_capacity < self.batch_size {
            return fail("buffer_capacity must hold at least one batch".into());
        }
        if self.eval_interval == 0 {
            return fail("eval_interval must be positive".into());
        }
        Ok(())
    }

    pub fn arch(&self, state_dim: usize, action_dim: usize) -> ArchSpec {
        ArchSpec {
            state_dim,
            action_dim,
            d_model: self.d_model,
            heads: self.heads,
            attention_scale: self.attention_scale,
            dropout: self.dropout,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            clip_norm: self.clip_norm,
            ..AdamConfig::default()
        }
    }
}

/// Bellman targets, one per token, never on a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetBatch<T> {
    pub y: Vec<T>,
}

/// Target-network values for next-state tokens.
pub trait TargetCritic<T: Real> {
    fn ensemble_size(&self) -> usize;
    /// Evaluation-mode values of target member `member`, one per token.
    fn target_values(&self, member: usize, pairs: &Tensor<T>, group_len: usize) -> Result<Vec<T>>;
}

impl<T: Real> TargetCritic<T> for CriticEnsemble<T> {
    fn ensemble_size(&self) -> usize {
        self.len()
    }

    fn target_values(&self, member: usize, pairs: &Tensor<T>, group_len: usize) -> Result<Vec<T>> {
        self.target_q(member, pairs, group_len)
    }
}

/// Draws next actions `ã' ∼ π(·|s')` with their log-probabilities.
pub trait ActionSampler<T: Real> {
    fn sample_next(&self, states: &Tensor<T>, rng: &mut StreamRng) -> Result<(Tensor<T>, Vec<T>)>;
}

impl<T: Real> ActionSampler<T> for GaussianPolicy<T> {
    fn sample_next(&self, states: &Tensor<T>, rng: &mut StreamRng) -> Result<(Tensor<T>, Vec<T>)> {
        self.sample_batch(states, rng)
    }
}

/// Subsets used for one target computation: a single shared subset, or one
/// per group.
#[derive(Debug, Clone, PartialEq)]
pub enum Subsets {
    Shared(Vec<usize>),
    PerGroup(Vec<Vec<usize>>),
}

/// `y = r + γ (1 − done) (reduce_{i∈subset} Q_tar,i(s', ã') − α log π(ã'|s'))`
/// with next-state tokens grouped exactly as the current tokens.
#[allow(clippy::too_many_arguments)]
pub fn compute_target<T: Real>(
    tokens: &Tokens<T>,
    targets: &dyn TargetCritic<T>,
    policy: &dyn ActionSampler<T>,
    subsets: &Subsets,
    reduction: TargetReduction,
    gamma: f64,
    alpha: T,
    rng: &mut StreamRng,
) -> Result<TargetBatch<T>> {
    let rows = tokens.rewards.len();
    let gl = tokens.group_len;
    if rows == 0
        || gl == 0
        || !rows.is_multiple_of(gl)
        || tokens.dones.len() != rows
        || tokens.next_states.rows() != rows
    {
        return Err(Error::contract(format!("{rows} target tokens in groups of {gl}")));
    }
    let n = targets.ensemble_size();
    let check = |s: &[usize]| -> Result<()> {
        let mut seen = vec![false; n];
        if s.is_empty() {
            return Err(Error::param("empty member subset"));
        }
        for &i in s {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::param(format!("bad member subset {s:?} for ensemble of {n}")));
            }
        }
        Ok(())
    };
    let mut used = vec![false; n];
    match subsets {
        Subsets::Shared(s) => {
            check(s)?;
            s.iter().for_each(|&i| used[i] = true);
        }
        Subsets::PerGroup(all) => {
            if all.len() != rows / gl {
                return Err(Error::contract(format!(
                    "{} subsets for {} groups",
                    all.len(),
                    rows / gl
                )));
            }
            for s in all {
                check(s)?;
                s.iter().for_each(|&i| used[i] = true);
            }
        }
    }

    let (next_a, logp) = policy.sample_next(&tokens.next_states, rng)?;
    if logp.len() != rows || next_a.rows() != rows {
        return Err(Error::contract("sampled next actions do not match tokens"));
    }
    let sd = tokens.next_states.cols();
    let ad = next_a.cols();
    let mut data = Vec::with_capacity(rows * (sd + ad));
    for r in 0..rows {
        data.extend_from_slice(tokens.next_states.row(r));
        data.extend_from_slice(next_a.row(r));
    }
    let next_pairs = Tensor::new(&[rows, sd + ad], data)?;

    let mut values: Vec<Option<Vec<T>>> = vec![None; n];
    for (i, slot) in values.iter_mut().enumerate() {
        if used[i] {
            let v = targets.target_values(i, &next_pairs, gl)?;
            if v.len() != rows {
                return Err(Error::contract(format!(
                    "target member {i} returned {} values",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("target Q of member {i}")));
            }
            *slot = Some(v);
        }
    }
    if logp.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("next-action log-probability".into()));
    }

    let gamma = T::lit(gamma);
    let y = (0..rows)
        .map(|r| {
            let subset = match subsets {
                Subsets::Shared(s) => s,
                Subsets::PerGroup(all) => &all[r / gl],
            };
            let vals: Vec<Vec<T>> = subset
                .iter()
                .map(|&i| vec![values[i].as_ref().expect("member evaluated")[r]])
                .collect();
            let q = reduction.reduce(&vals)[0];
            let boot = if tokens.dones[r] {
                T::zero()
            } else {
                gamma * (q - alpha * logp[r])
            };
            tokens.rewards[r] + boot
        })
        .collect::<Vec<T>>();
    if y.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("bellman target".into()));
    }
    Ok(TargetBatch { y })
}

/// Records `mean_tokens (Q(s, a) − y)²` for one member on `tape`.
pub fn critic_loss<T: Real>(
    tape: &mut Tape<T>,
    member: &QNetwork<T>,
    pairs: &Tensor<T>,
    group_len: usize,
    y: &[T],
    mode: &mut ForwardMode<'_>,
) -> Result<Var> {
    if y.len() != pairs.rows() {
        return Err(Error::contract(format!(
            "{} targets for {} tokens",
            y.len(),
            pairs.rows()
        )));
    }
    let x = tape.constant(pairs.clone())?;
    let q = member.forward(tape, x, group_len, mode)?;
    let target = tape.constant(Tensor::new(&[y.len(), 1], y.to_vec())?)?;
    let diff = tape.sub(q, target)?;
    let sq = tape.mul(diff, diff)?;
    tape.mean(sq)
}

/// One optimizer step of `member` on the token MSE; returns the loss.
pub fn critic_update<T: Real>(
    member: &mut QNetwork<T>,
    pairs: &Tensor<T>,
    group_len: usize,
    y: &[T],
    optimizer: &mut Adam<T>,
    rng: &mut StreamRng,
) -> Result<T> {
    let mut tape = Tape::new();
    let loss = critic_loss(&mut tape, member, pairs, group_len, y, &mut ForwardMode::Train(rng))?;
    let value = tape.value(loss)[0];
    let grads = tape.backward(loss)?;
    member.zero_grad();
    member.accumulate(&grads)?;
    optimizer.step(member.params_mut())?;
    Ok(value)
}

/// How many of each kind of update have been applied.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    pub env_steps: u64,
    pub episodes: u64,
    pub critic_rounds: u64,
    pub member_updates: u64,
    pub polyak_calls: u64,
    pub actor_rounds: u64,
}

/// Outcome of one call to [`Trainer::train_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub env_step: u64,
    pub reward: f64,
    /// Undiscounted return of the episode that ended on this step.
    pub episode_return: Option<f64>,
    /// Mean member loss of the last update round.
    pub critic_loss: Option<f64>,
    pub actor_loss: Option<f64>,
    pub alpha: f64,
}

/// Learnable state and its optimizers.
#[derive(Clone)]
pub struct Agent<T: Real> {
    pub critic: CriticEnsemble<T>,
    pub critic_opts: Vec<Adam<T>>,
    pub policy: GaussianPolicy<T>,
    pub actor_opt: Adam<T>,
    pub temperature: Temperature<T>,
}

impl<T: Real> Agent<T> {
    pub fn new(
        config: &TrainerConfig,
        registry: &VariantRegistry<T>,
        state_dim: usize,
        action_dim: usize,
    ) -> Result<Self> {
        config.validate()?;
        let arch = config.arch(state_dim, action_dim);
        let critic = CriticEnsemble::new(registry, &config.variant, &arch, config.n, config.seed)?;
        let mut prng = rng::substream(config.seed, &[label::INIT, u64::MAX]);
        let policy = GaussianPolicy::new(state_dim, action_dim, config.policy_hidden, &mut prng)?;
        let target_entropy = config.target_entropy.unwrap_or(-(action_dim as f64));
        Ok(Agent {
            critic_opts: (0..config.n).map(|_| Adam::new(config.adam())).collect(),
            critic,
            policy,
            actor_opt: Adam::new(config.adam()),
            temperature: Temperature::new(config.initial_alpha, config.alpha_mode, target_entropy, config.adam())?,
        })
    }
}

/// The shared `M`-subset of update round `round` after environment step `t`.
pub fn round_subset(config: &TrainerConfig, t: u64, round: u64) -> Result<Vec<usize>> {
    let mut srng = rng::substream(config.seed, &[label::UPDATE, t, round, u64::MAX]);
    sample_subset(config.n, config.m, &mut srng)
}

/// Single-threaded trainer over one environment instance.
pub struct Trainer<T: Real> {
    pub config: TrainerConfig,
    pub agent: Agent<T>,
    pub buffer: ReplayBuffer<T>,
    env: Box<dyn Environment>,
    obs: Vec<f64>,
    episode_return: f64,
    counters: Counters,
}

fn to_real<T: Real>(xs: &[f64]) -> Vec<T> {
    xs.iter().map(|&x| T::lit(x)).collect()
}

impl<T: Real> Trainer<T> {
    pub fn new(config: TrainerConfig, registry: &VariantRegistry<T>, mut env: Box<dyn Environment>) -> Result<Self> {
        let spec = env.spec();
        let agent = Agent::new(&config, registry, spec.state_dim, spec.action_dim)?;
        let buffer = ReplayBuffer::new(config.buffer_capacity, spec.state_dim, spec.action_dim)?;
        let obs = env.reset(&mut rng::substream(config.seed, &[label::ENV, 0]));
        Ok(Trainer {
            config,
            agent,
            buffer,
            env,
            obs,
            episode_return: 0.0,
            counters: Counters::default(),
        })
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    pub fn env(&self) -> &dyn Environment {
        self.env.as_ref()
    }

    /// Whether the next step still acts uniformly at random.
    pub fn in_warmup(&self) -> bool {
        (self.counters.env_steps as usize) < self.config.init_random_steps
    }

    /// One environment step, then, past warmup and with a full batch
    /// available, `G` critic rounds and one actor/temperature update.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let t = self.counters.env_steps;
        let ctx = |e: Error| e.context(format!("env step {t}"));
        let warmup = self.in_warmup();
        let mut arng = rng::substream(self.config.seed, &[label::ACTION, t]);
        let action: Vec<f64> = if warmup {
            (0..self.env.spec().action_dim)
                .map(|_| arng.gen_range(-1.0..1.0))
                .collect()
        } else {
            let (a, _) = self
                .agent
                .policy
                .sample_action(&to_real::<T>(&self.obs), &mut arng)
                .map_err(ctx)?;
            a.iter().map(|x| x.to_f64_lossy()).collect()
        };
        let out = self.env.step(&action).map_err(ctx)?;
        self.buffer
            .push(Transition {
                s: to_real(&self.obs),
                a: to_real(&action),
                r: T::lit(out.reward),
                s_next: to_real(&out.next_state),
                done: out.done,
            })
            .map_err(ctx)?;
        self.counters.env_steps += 1;
        self.episode_return += out.reward;
        let mut episode_return = None;
        if out.episode_over() {
            episode_return = Some(self.episode_return);
            self.episode_return = 0.0;
            self.counters.episodes += 1;
            let mut erng = rng::substream(self.config.seed, &[label::ENV, self.counters.episodes]);
            self.obs = self.env.reset(&mut erng);
        } else {
            self.obs = out.next_state;
        }

        let mut metrics = StepMetrics {
            env_step: self.counters.env_steps,
            reward: out.reward,
            episode_return,
            critic_loss: None,
            actor_loss: None,
            alpha: self.agent.temperature.alpha().to_f64_lossy(),
        };
        if warmup || self.buffer.len() < self.config.batch_size {
            return Ok(metrics);
        }
        for round in 0..self.config.g {
            metrics.critic_loss = Some(self.update_round(t, round as u64).map_err(ctx)?);
        }
        let stats = self.policy_update(t).map_err(ctx)?;
        metrics.actor_loss = Some(stats);
        metrics.alpha = self.agent.temperature.alpha().to_f64_lossy();
        Ok(metrics)
    }

    fn draw_subsets(&self, groups: usize, rng: &mut StreamRng) -> Result<Subsets> {
        let (n, m) = (self.config.n, self.config.m);
        Ok(Subsets::PerGroup(
            (0..groups).map(|_| sample_subset(n, m, rng)).collect::<Result<_>>()?,
        ))
    }

    /// Sample B, bootstrap groups, draw the subset, compute targets, update
    /// every member, then Polyak-average. Returns the mean member loss.
    fn update_round(&mut self, t: u64, round: u64) -> Result<f64> {
        let cfg = &self.config;
        let seed = cfg.seed;
        let mut urng = rng::substream(seed, &[label::UPDATE, t, round]);
        let mb = self.buffer.sample_minibatch(cfg.batch_size, &mut urng)?;
        let count = cfg.groups_per_update.count(mb.len(), cfg.group_size);
        let mut member_rngs: Vec<StreamRng> = (0..cfg.n)
            .map(|i| rng::substream(seed, &[label::MEMBER, t, round, i as u64]))
            .collect();

        // per_element: one group schedule shared by all members; cover: each
        // member draws its own groups. Targets for all members are computed
        // in one batched pass either way.
        let tokens: Vec<Tokens<T>> = match cfg.groups_per_update {
            GroupsPerUpdate::PerElement => {
                vec![mb.gather(&bootstrap_groups(mb.len(), cfg.group_size, count, &mut urng)?)?]
            }
            GroupsPerUpdate::Cover => member_rngs
                .iter_mut()
                .map(|r| mb.gather(&bootstrap_groups(mb.len(), cfg.group_size, count, r)?))
                .collect::<Result<_>>()?,
        };
        let subsets = match cfg.subset_scope {
            SubsetScope::PerUpdate => Subsets::Shared(round_subset(cfg, t, round)?),
            SubsetScope::PerGroup => self.draw_subsets(count * tokens.len(), &mut urng)?,
        };
        let all = concat_tokens(&tokens)?;
        let y = compute_target(
            &all,
            &self.agent.critic,
            &self.agent.policy,
            &subsets,
            cfg.target_reduction,
            cfg.gamma,
            self.agent.temperature.alpha(),
            &mut urng,
        )?
        .y;

        let mut total = 0.0;
        for (i, mrng) in member_rngs.iter_mut().enumerate() {
            let k = if tokens.len() == 1 { 0 } else { i };
            let rows = tokens[k].rewards.len();
            let yi = &y[k * rows..(k + 1) * rows];
            let member = &mut self.agent.critic.members_mut()[i];
            let loss = critic_update(
                member,
                &tokens[k].pairs,
                tokens[k].group_len,
                yi,
                &mut self.agent.critic_opts[i],
                mrng,
            )
            .map_err(|e| e.context(format!("member {i}")))?;
            total += loss.to_f64_lossy();
            self.counters.member_updates += 1;
        }
        self.agent.critic.polyak_update(self.config.rho)?;
        self.counters.polyak_calls += 1;
        self.counters.critic_rounds += 1;
        Ok(total / self.config.n as f64)
    }

    fn policy_update(&mut self, t: u64) -> Result<f64> {
        let mut prng = rng::substream(self.config.seed, &[label::ACTOR, t]);
        let states = self
            .buffer
            .sample_minibatch(self.config.batch_size, &mut prng)?
            .states()?;
        let alpha = self.agent.temperature.alpha();
        let agent = &mut self.agent;
        let stats = actor_update(
            &mut agent.policy,
            &agent.critic,
            &states,
            alpha,
            &mut agent.actor_opt,
            &mut prng,
        )?;
        agent.temperature.update(&stats.logp)?;
        self.counters.actor_rounds += 1;
        Ok(stats.loss.to_f64_lossy())
    }
}

/// Stacks token sets with a common group length.
fn concat_tokens<T: Real>(parts: &[Tokens<T>]) -> Result<Tokens<T>> {
    let first = parts.first().ok_or_else(|| Error::param("no tokens"))?;
    if parts.len() == 1 {
        return Ok(first.clone());
    }
    let stack = |f: fn(&Tokens<T>) -> &Tensor<T>| -> Result<Tensor<T>> {
        let cols = f(first).cols();
        let data: Vec<T> = parts.iter().flat_map(|p| f(p).data().iter().copied()).collect();
        Tensor::new(&[data.len() / cols.max(1), cols], data)
    };
    Ok(Tokens {
        group_len: first.group_len,
        pairs: stack(|t| &t.pairs)?,
        next_states: stack(|t| &t.next_states)?,
        rewards: parts.iter().flat_map(|p| p.rewards.iter().copied()).collect(),
        dones: parts.iter().flat_map(|p| p.dones.iter().copied()).collect(),
    })
}

/// Mean undiscounted return of `episodes` deterministic-action episodes, each
/// reset from its own substream.
pub fn evaluate_return<T: Real>(
    policy: &GaussianPolicy<T>,
    env: &dyn Environment,
    episodes: usize,
    seed: u64,
    eval_index: u64,
) -> Result<f64> {
    if episodes == 0 {
        return Err(Error::param("need at least one evaluation episode"));
    }
    let det = Deterministic(policy);
    let mut total = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let mut erng = rng::substream(seed, &[label::EVAL, eval_index, ep as u64]);
        let mut sim = env.clone_box();
        let mut obs = sim.reset(&mut erng);
        let mut ret = 0.0;
        loop {
            let a = diagnostics::RolloutPolicy::act(&det, &obs, &mut erng)?;
            let out = sim.step(&a)?;
            ret += out.reward;
            if out.episode_over() {
                break;
            }
            obs = out.next_state;
        }
        total.push(ret);
    }
    Ok(diagnostics::kahan_sum(total) / episodes as f64)
}

/// Sizes of the bias evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasProtocol {
    pub points: usize,
    pub rollouts: usize,
    pub horizon: usize,
}

impl Default for BiasProtocol {
    fn default() -> Self {
        BiasProtocol {
            points: 20,
            rollouts: 5,
            horizon: 200,
        }
    }
}

/// Bias and Q-spread statistics at first-step `(s, a)` points of fresh
/// episodes, with actions drawn from the stochastic policy.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_bias<T: Real>(
    agent: &Agent<T>,
    env: &dyn Environment,
    m: usize,
    gamma: f64,
    protocol: BiasProtocol,
    seed: u64,
    eval_index: u64,
) -> Result<(std::result::Result<BiasStats, Error>, QDistStats, f64)> {
    let mut brng = rng::substream(seed, &[label::BIAS, eval_index]);
    let stoch = Stochastic(&agent.policy);
    let mut points = Vec::with_capacity(protocol.points);
    let mut mc = Vec::with_capacity(protocol.points);
    for _ in 0..protocol.points {
        let mut sim = env.clone_box();
        let s0 = sim.reset(&mut brng);
        let a0 = diagnostics::RolloutPolicy::act(&stoch, &s0, &mut brng)?;
        mc.push(diagnostics::monte_carlo_return(
            sim.as_ref(),
            &stoch,
            &a0,
            gamma,
            protocol.horizon,
            protocol.rollouts,
            &mut brng,
        )?);
        points.push((s0, a0));
    }
    let est = SubsetMeanQ {
        ensemble: &agent.critic,
        m,
    };
    let bias = diagnostics::estimation_bias(&est, &points, &mc, &mut brng);
    let bias = match bias {
        Err(e @ Error::DegenerateNormalization { .. }) => Err(e),
        other => Ok(other?),
    };
    let dist = diagnostics::q_distribution_stats(&agent.critic, &points)?;
    let avg_q = diagnostics::kahan_sum(
        agent
            .critic
            .online_q(&diagnostics::points_tensor::<T>(&points)?, 1)?
            .iter()
            .flatten()
            .map(|x| x.to_f64_lossy()),
    ) / (points.len() * agent.critic.len()) as f64;
    Ok((bias, dist, avg_q))
}

#[cfg(test)]
mod tests;
