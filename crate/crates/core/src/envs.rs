//! Desk-scale continuous-control environments.
//!
//! | name            | state                    | action | dt   | reward                          |
//! |-----------------|--------------------------|--------|------|---------------------------------|
//! | `point_mass_1d` | `[x, v]`                 | 1      | 0.05 | `−x² − 0.1 a²`                  |
//! | `point_mass_2d` | `[x, y, vx, vy]`         | 2      | 0.05 | `−‖p‖² − 0.1 ‖a‖²`              |
//! | `pendulum`      | `[cos θ, sin θ, ω]`      | 1      | 0.05 | `−(θ² + 0.1 ω² + 0.001 u²)`     |
//!
//! Every environment is integrated with explicit Euler steps, truncates at
//! 200 steps and never terminates on its own. Actions outside `[−1, 1]` are
//! clipped and counted. The reward is evaluated on the pre-step state.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::rng::StreamRng;

pub const DEFAULT_TIME_LIMIT: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub state_dim: usize,
    pub action_dim: usize,
    pub max_episode_steps: usize,
    /// Per-step reward bounds over the reachable states.
    pub reward_range: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: Vec<f64>,
    pub reward: f64,
    /// True termination.
    pub done: bool,
    /// Time limit reached.
    pub truncated: bool,
}

impl StepOutcome {
    pub fn episode_over(&self) -> bool {
        self.done || self.truncated
    }
}

pub trait Environment: Send {
    fn name(&self) -> &str;

    fn spec(&self) -> EnvSpec;

    fn reset(&mut self, rng: &mut StreamRng) -> Vec<f64>;

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome>;

    /// Current observation.
    fn observation(&self) -> Vec<f64>;

    /// Number of action components clipped into `[−1, 1]` so far.
    fn clipped_actions(&self) -> u64;

    fn clone_box(&self) -> Box<dyn Environment>;

    /// Re-draws any internal randomness of the dynamics from `rng`.
    fn reseed(&mut self, _rng: &mut StreamRng) {}
}

impl Clone for Box<dyn Environment> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

/// Step counting, episode end and action clipping shared by all environments.
#[derive(Debug, Clone, PartialEq)]
struct Episode {
    t: usize,
    limit: usize,
    over: bool,
    started: bool,
    clipped: u64,
}

impl Episode {
    fn new(limit: usize) -> Self {
        Episode {
            t: 0,
            limit,
            over: false,
            started: false,
            clipped: 0,
        }
    }

    fn restart(&mut self) {
        self.t = 0;
        self.over = false;
        self.started = true;
    }

    fn clip(&mut self, name: &str, action: &[f64], dim: usize) -> Result<Vec<f64>> {
        if !self.started {
            return Err(Error::state(format!("{name}: step before reset")));
        }
        if self.over {
            return Err(Error::state(format!("{name}: step after episode end")));
        }
        if action.len() != dim {
            return Err(Error::dim("env_step", &[action.len()], &[dim]));
        }
        action
            .iter()
            .map(|&a| {
                if !a.is_finite() {
                    return Err(Error::Numeric(format!("{name}: action {a}")));
                }
                if a.abs() > 1.0 {
                    self.clipped += 1;
                }
                Ok(a.clamp(-1.0, 1.0))
            })
            .collect()
    }

    /// Advances the clock; returns whether the time limit is hit.
    fn tick(&mut self, done: bool) -> bool {
        self.t += 1;
        let truncated = !done && self.t >= self.limit;
        self.over = done || truncated;
        truncated
    }
}

/// Point mass on a line (`dims = 1`) or in a plane (`dims = 2`) driven by a
/// bounded acceleration.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMass {
    dims: usize,
    pos: Vec<f64>,
    vel: Vec<f64>,
    episode: Episode,
}

impl PointMass {
    pub const DT: f64 = 0.05;
    pub const CONTROL_COST: f64 = 0.1;
    pub const INIT_POS: f64 = 1.0;
    pub const INIT_VEL: f64 = 0.1;

    pub fn new(dims: usize) -> Result<Self> {
        if !(1..=2).contains(&dims) {
            return Err(Error::param(format!("point mass supports 1 or 2 dims, got {dims}")));
        }
        Ok(PointMass {
            dims,
            pos: vec![0.0; dims],
            vel: vec![0.0; dims],
            episode: Episode::new(DEFAULT_TIME_LIMIT),
        })
    }

    pub fn one_d() -> Self {
        Self::new(1).expect("valid dims")
    }

    pub fn two_d() -> Self {
        Self::new(2).expect("valid dims")
    }

    /// Starts an episode from `[positions…, velocities…]`.
    pub fn reset_to(&mut self, state: &[f64]) -> Result<()> {
        if state.len() != 2 * self.dims {
            return Err(Error::dim("reset_to", &[state.len()], &[2 * self.dims]));
        }
        self.pos = state[..self.dims].to_vec();
        self.vel = state[self.dims..].to_vec();
        self.episode.restart();
        Ok(())
    }

    fn bound(&self) -> f64 {
        let t = self.episode.limit as f64 * Self::DT;
        Self::INIT_POS + Self::INIT_VEL * t + 0.5 * t * t
    }
}

impl Environment for PointMass {
    fn name(&self) -> &str {
        if self.dims == 1 {
            "point_mass_1d"
        } else {
            "point_mass_2d"
        }
    }

    fn spec(&self) -> EnvSpec {
        let b = self.bound();
        EnvSpec {
            state_dim: 2 * self.dims,
            action_dim: self.dims,
            max_episode_steps: self.episode.limit,
            reward_range: (-(self.dims as f64) * (b * b + Self::CONTROL_COST), 0.0),
        }
    }

    fn reset(&mut self, rng: &mut StreamRng) -> Vec<f64> {
        self.pos = (0..self.dims)
            .map(|_| rng.gen_range(-Self::INIT_POS..Self::INIT_POS))
            .collect();
        self.vel = (0..self.dims)
            .map(|_| rng.gen_range(-Self::INIT_VEL..Self::INIT_VEL))
            .collect();
        self.episode.restart();
        self.observation()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        let name = if self.dims == 1 {
            "point_mass_1d"
        } else {
            "point_mass_2d"
        };
        let a = self.episode.clip(name, action, self.dims)?;
        let reward =
            -self.pos.iter().map(|p| p * p).sum::<f64>() - Self::CONTROL_COST * a.iter().map(|u| u * u).sum::<f64>();
        for i in 0..self.dims {
            self.pos[i] += self.vel[i] * Self::DT;
            self.vel[i] += a[i] * Self::DT;
        }
        let truncated = self.episode.tick(false);
        Ok(StepOutcome {
            next_state: self.observation(),
            reward,
            done: false,
            truncated,
        })
    }

    fn observation(&self) -> Vec<f64> {
        self.pos.iter().chain(&self.vel).copied().collect()
    }

    fn clipped_actions(&self) -> u64 {
        self.episode.clipped
    }

    fn clone_box(&self) -> Box<dyn Environment> {
        Box::new(self.clone())
    }
}

/// Torque-limited pendulum; `θ = 0` is upright.
#[derive(Debug, Clone, PartialEq)]
pub struct Pendulum {
    theta: f64,
    omega: f64,
    episode: Episode,
}

impl Pendulum {
    pub const DT: f64 = 0.05;
    pub const GRAVITY: f64 = 10.0;
    pub const MASS: f64 = 1.0;
    pub const LENGTH: f64 = 1.0;
    pub const MAX_TORQUE: f64 = 2.0;
    pub const MAX_SPEED: f64 = 8.0;

    pub fn new() -> Self {
        Pendulum {
            theta: PI,
            omega: 0.0,
            episode: Episode::new(DEFAULT_TIME_LIMIT),
        }
    }

    pub fn reset_to(&mut self, theta: f64, omega: f64) {
        self.theta = theta;
        self.omega = omega;
        self.episode.restart();
    }

    pub fn angle(&self) -> f64 {
        self.theta
    }

    pub fn speed(&self) -> f64 {
        self.omega
    }
}

impl Default for Pendulum {
    fn default() -> Self {
        Self::new()
    }
}

/// Wraps an angle into `[−π, π)`.
pub fn normalize_angle(x: f64) -> f64 {
    (x + PI).rem_euclid(2.0 * PI) - PI
}

impl Environment for Pendulum {
    fn name(&self) -> &str {
        "pendulum"
    }

    fn spec(&self) -> EnvSpec {
        let worst = PI * PI + 0.1 * Self::MAX_SPEED.powi(2) + 0.001 * Self::MAX_TORQUE.powi(2);
        EnvSpec {
            state_dim: 3,
            action_dim: 1,
            max_episode_steps: self.episode.limit,
            reward_range: (-worst, 0.0),
        }
    }

    fn reset(&mut self, rng: &mut StreamRng) -> Vec<f64> {
        self.theta = rng.gen_range(-PI..PI);
        self.omega = rng.gen_range(-1.0..1.0);
        self.episode.restart();
        self.observation()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        let u = self.episode.clip("pendulum", action, 1)?[0] * Self::MAX_TORQUE;
        let th = normalize_angle(self.theta);
        let reward = -(th * th + 0.1 * self.omega * self.omega + 0.001 * u * u);
        let l = Self::LENGTH;
        let accel = 3.0 * Self::GRAVITY / (2.0 * l) * self.theta.sin() + 3.0 / (Self::MASS * l * l) * u;
        self.theta += self.omega * Self::DT;
        self.omega = (self.omega + accel * Self::DT).clamp(-Self::MAX_SPEED, Self::MAX_SPEED);
        let truncated = self.episode.tick(false);
        Ok(StepOutcome {
            next_state: self.observation(),
            reward,
            done: false,
            truncated,
        })
    }

    fn observation(&self) -> Vec<f64> {
        vec![self.theta.cos(), self.theta.sin(), self.omega]
    }

    fn clipped_actions(&self) -> u64 {
        self.episode.clipped
    }

    fn clone_box(&self) -> Box<dyn Environment> {
        Box::new(self.clone())
    }
}

/// Finite MDP behind the continuous interface: the observation is the one-hot
/// state, and the action interval `[−1, 1]` is split into `n_actions` equal
/// bins.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    /// `transition[s][a][s']`
    pub transition: Vec<Vec<Vec<f64>>>,
    /// `reward[s][a]`
    pub reward: Vec<Vec<f64>>,
    pub initial: Vec<f64>,
    pub terminal: Vec<bool>,
    state: usize,
    rng: StreamRng,
    episode: Episode,
}

impl TabularMdp {
    pub fn new(
        transition: Vec<Vec<Vec<f64>>>,
        reward: Vec<Vec<f64>>,
        initial: Vec<f64>,
        terminal: Vec<bool>,
        time_limit: usize,
    ) -> Result<Self> {
        let n = transition.len();
        let k = transition.first().map_or(0, Vec::len);
        let stochastic =
            |p: &[f64]| p.len() == n && p.iter().all(|&x| x >= 0.0) && (p.iter().sum::<f64>() - 1.0).abs() < 1e-9;
        if n == 0 || k == 0 {
            return Err(Error::param("empty MDP"));
        }
        if transition
            .iter()
            .any(|row| row.len() != k || !row.iter().all(|p| stochastic(p)))
            || reward.len() != n
            || reward.iter().any(|r| r.len() != k)
            || !stochastic(&initial)
            || terminal.len() != n
        {
            return Err(Error::param("inconsistent MDP tables"));
        }
        Ok(TabularMdp {
            transition,
            reward,
            initial,
            terminal,
            state: 0,
            rng: StreamRng::seed_from_u64(0),
            episode: Episode::new(time_limit),
        })
    }

    pub fn n_states(&self) -> usize {
        self.transition.len()
    }

    pub fn n_actions(&self) -> usize {
        self.transition[0].len()
    }

    pub fn state(&self) -> usize {
        self.state
    }

    /// Discrete action for a continuous one.
    pub fn discretize(&self, a: f64) -> usize {
        let k = self.n_actions();
        (((a.clamp(-1.0, 1.0) + 1.0) / 2.0 * k as f64) as usize).min(k - 1)
    }

    /// Continuous action at the centre of bin `i`.
    pub fn action_for(&self, i: usize) -> f64 {
        -1.0 + (2 * i + 1) as f64 / self.n_actions() as f64
    }

    pub fn reset_to(&mut self, state: usize, rng: &mut StreamRng) -> Vec<f64> {
        self.rng = StreamRng::seed_from_u64(rng.gen());
        self.state = state;
        self.episode.restart();
        self.observation()
    }

    fn draw(p: &[f64], rng: &mut StreamRng) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, &x) in p.iter().enumerate() {
            acc += x;
            if u < acc {
                return i;
            }
        }
        p.iter().rposition(|&x| x > 0.0).unwrap_or(0)
    }
}

impl Environment for TabularMdp {
    fn name(&self) -> &str {
        "tabular"
    }

    fn spec(&self) -> EnvSpec {
        let flat = self.reward.iter().flatten();
        EnvSpec {
            state_dim: self.n_states(),
            action_dim: 1,
            max_episode_steps: self.episode.limit,
            reward_range: (
                flat.clone().cloned().fold(f64::INFINITY, f64::min),
                flat.cloned().fold(f64::NEG_INFINITY, f64::max),
            ),
        }
    }

    fn reset(&mut self, rng: &mut StreamRng) -> Vec<f64> {
        let s = Self::draw(&self.initial, rng);
        self.reset_to(s, rng)
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        let raw = self.episode.clip("tabular", action, 1)?[0];
        let a = self.discretize(raw);
        let reward = self.reward[self.state][a];
        self.state = Self::draw(&self.transition[self.state][a], &mut self.rng);
        let done = self.terminal[self.state];
        let truncated = self.episode.tick(done);
        Ok(StepOutcome {
            next_state: self.observation(),
            reward,
            done,
            truncated,
        })
    }

    fn observation(&self) -> Vec<f64> {
        let mut o = vec![0.0; self.n_states()];
        o[self.state] = 1.0;
        o
    }

    fn clipped_actions(&self) -> u64 {
        self.episode.clipped
    }

    fn clone_box(&self) -> Box<dyn Environment> {
        Box::new(self.clone())
    }

    fn reseed(&mut self, rng: &mut StreamRng) {
        self.rng = StreamRng::seed_from_u64(rng.gen());
    }
}

pub type EnvFactory = fn() -> Box<dyn Environment>;

/// Environments by name.
pub struct EnvRegistry {
    entries: BTreeMap<String, EnvFactory>,
}

impl Default for EnvRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl EnvRegistry {
    pub fn empty() -> Self {
        EnvRegistry {
            entries: BTreeMap::new(),
        }
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register("point_mass_1d", || Box::new(PointMass::one_d()))
            .expect("unique");
        r.register("point_mass_2d", || Box::new(PointMass::two_d()))
            .expect("unique");
        r.register("pendulum", || Box::new(Pendulum::new())).expect("unique");
        r
    }

    pub fn register(&mut self, name: &str, factory: EnvFactory) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::param(format!("environment {name:?} already registered")));
        }
        self.entries.insert(name.to_string(), factory);
        Ok(())
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }

    pub fn make(&self, name: &str) -> Result<Box<dyn Environment>> {
        self.entries.get(name).map(|f| f()).ok_or_else(|| {
            Error::param(format!(
                "unknown environment {name:?}; known: {}",
                self.names().join(", ")
            ))
        })
    }
}

/// `a = clip(−kp·x − kd·v)` per axis of a point mass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PdController {
    pub kp: f64,
    pub kd: f64,
}

impl PdController {
    /// Gains placing both closed-loop poles at `−omega` (critical damping).
    pub fn critically_damped(omega: f64) -> Self {
        PdController {
            kp: omega * omega,
            kd: 2.0 * omega,
        }
    }

    /// Action for a point-mass state `[positions…, velocities…]`.
    pub fn act(&self, state: &[f64]) -> Vec<f64> {
        let d = state.len() / 2;
        (0..d)
            .map(|i| (-self.kp * state[i] - self.kd * state[d + i]).clamp(-1.0, 1.0))
            .collect()
    }
}
