//! Run configuration files, metric files, checkpoints, sweeps and run
//! comparison.
//!
//! # Config format (version 1)
//!
//! Plain text, one `key = value` per line, `#` starts a comment. Keys are
//! flat; unknown or repeated keys are rejected with their line number.
//! Missing keys take their defaults. [`RunConfig::to_text`] writes every key
//! in a fixed order, and parsing that text gives back the same config.
//!
//! # Metrics format (version 1)
//!
//! `metrics.csv`: a `# enseq-metrics v1 run=<id>` line, a header line with
//! [`METRIC_COLUMNS`], then one comma-separated row per evaluation. Floats
//! are written as `{:.16e}` (17 significant digits), missing values as
//! `NaN`. Every row is flushed as it is written, so any prefix of the file
//! ending in a newline parses. Wall-clock times go to a separate
//! `timing.csv` so that `metrics.csv` depends only on the config.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::actor::AlphaMode;
use crate::archive::Archive;
use crate::critic::{QVariant, TargetReduction, VariantRegistry};
use crate::diagnostics::Summary;
use crate::envs::EnvRegistry;
use crate::error::{Error, Result};
use crate::layers::AttentionScale;
use crate::numcore::{Adam, Module, Precision, Real};
use crate::replay::GroupsPerUpdate;
use crate::trainer::{evaluate_bias, evaluate_return, BiasProtocol, SubsetScope, Trainer, TrainerConfig};

pub const CONFIG_VERSION: u32 = 1;
pub const METRICS_VERSION: u32 = 1;

/// Everything needed to reproduce one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub trainer: TrainerConfig,
    pub env: String,
    pub precision: Precision,
    pub eval_episodes: usize,
    pub bias: BiasProtocol,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            trainer: TrainerConfig::default(),
            env: "point_mass_1d".into(),
            precision: Precision::Fast,
            eval_episodes: 10,
            bias: BiasProtocol::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Config keys in file order.
pub const CONFIG_KEYS: &[&str] = &[
    "config_version",
    "env",
    "variant",
    "precision",
    "seed",
    "total_env_steps",
    "init_random_steps",
    "eval_interval",
    "eval_episodes",
    "bias_points",
    "bias_rollouts",
    "bias_horizon",
    "ensemble_size",
    "subset_size",
    "updates_per_step",
    "gamma",
    "rho",
    "batch_size",
    "group_size",
    "groups_per_update",
    "subset_scope",
    "target_reduction",
    "d_model",
    "heads",
    "attention_scale",
    "dropout",
    "policy_hidden",
    "lr",
    "clip_norm",
    "alpha_mode",
    "initial_alpha",
    "target_entropy",
    "buffer_capacity",
    "output_dir",
];

fn parse_num<N: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<N, String> {
    v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
}

fn parse_float(key: &str, v: &str) -> std::result::Result<f64, String> {
    let x: f64 = parse_num(key, v)?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(format!("{key}: {v:?} is not finite"))
    }
}

fn parse_named<E>(key: &str, v: &str, f: fn(&str) -> Option<E>, allowed: &str) -> std::result::Result<E, String> {
    f(v).ok_or_else(|| format!("{key}: {v:?} is not one of {allowed}"))
}

impl RunConfig {
    /// Value of `key` in its file form.
    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.trainer;
        Some(match key {
            "config_version" => CONFIG_VERSION.to_string(),
            "env" => self.env.clone(),
            "variant" => t.variant.clone(),
            "precision" => self.precision.name().into(),
            "seed" => t.seed.to_string(),
            "total_env_steps" => t.total_env_steps.to_string(),
            "init_random_steps" => t.init_random_steps.to_string(),
            "eval_interval" => t.eval_interval.to_string(),
            "eval_episodes" => self.eval_episodes.to_string(),
            "bias_points" => self.bias.points.to_string(),
            "bias_rollouts" => self.bias.rollouts.to_string(),
            "bias_horizon" => self.bias.horizon.to_string(),
            "ensemble_size" => t.n.to_string(),
            "subset_size" => t.m.to_string(),
            "updates_per_step" => t.g.to_string(),
            "gamma" => t.gamma.to_string(),
            "rho" => t.rho.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "group_size" => t.group_size.to_string(),
            "groups_per_update" => t.groups_per_update.name().into(),
            "subset_scope" => t.subset_scope.name().into(),
            "target_reduction" => t.target_reduction.name().into(),
            "d_model" => t.d_model.to_string(),
            "heads" => t.heads.to_string(),
            "attention_scale" => t.attention_scale.name().into(),
            "dropout" => t.dropout.to_string(),
            "policy_hidden" => t.policy_hidden.to_string(),
            "lr" => t.lr.to_string(),
            "clip_norm" => t.clip_norm.map_or("none".into(), |c| c.to_string()),
            "alpha_mode" => t.alpha_mode.name().into(),
            "initial_alpha" => t.initial_alpha.to_string(),
            "target_entropy" => t.target_entropy.map_or("auto".into(), |c| c.to_string()),
            "buffer_capacity" => t.buffer_capacity.to_string(),
            "output_dir" => self.output_dir.display().to_string(),
            _ => return None,
        })
    }

    /// Sets `key` from its file form.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let t = &mut self.trainer;
        match key {
            "config_version" => {
                let ver: u32 = parse_num(key, v)?;
                if ver != CONFIG_VERSION {
                    return Err(format!(
                        "config_version {ver} is not supported (expected {CONFIG_VERSION})"
                    ));
                }
            }
            "env" => self.env = v.to_string(),
            "variant" => t.variant = v.to_string(),
            "precision" => self.precision = parse_named(key, v, Precision::from_name, "fast, check")?,
            "seed" => t.seed = parse_num(key, v)?,
            "total_env_steps" => t.total_env_steps = parse_num(key, v)?,
            "init_random_steps" => t.init_random_steps = parse_num(key, v)?,
            "eval_interval" => t.eval_interval = parse_num(key, v)?,
            "eval_episodes" => self.eval_episodes = parse_num(key, v)?,
            "bias_points" => self.bias.points = parse_num(key, v)?,
            "bias_rollouts" => self.bias.rollouts = parse_num(key, v)?,
            "bias_horizon" => self.bias.horizon = parse_num(key, v)?,
            "ensemble_size" => t.n = parse_num(key, v)?,
            "subset_size" => t.m = parse_num(key, v)?,
            "updates_per_step" => t.g = parse_num(key, v)?,
            "gamma" => t.gamma = parse_float(key, v)?,
            "rho" => t.rho = parse_float(key, v)?,
            "batch_size" => t.batch_size = parse_num(key, v)?,
            "group_size" => t.group_size = parse_num(key, v)?,
            "groups_per_update" => {
                t.groups_per_update = parse_named(key, v, GroupsPerUpdate::from_name, "cover, per_element")?
            }
            "subset_scope" => t.subset_scope = parse_named(key, v, SubsetScope::from_name, "per_update, per_group")?,
            "target_reduction" => t.target_reduction = parse_named(key, v, TargetReduction::from_name, "min, mean")?,
            "d_model" => t.d_model = parse_num(key, v)?,
            "heads" => t.heads = parse_num(key, v)?,
            "attention_scale" => {
                t.attention_scale = parse_named(key, v, AttentionScale::from_name, "per_head, full_model")?
            }
            "dropout" => t.dropout = parse_float(key, v)?,
            "policy_hidden" => t.policy_hidden = parse_num(key, v)?,
            "lr" => t.lr = parse_float(key, v)?,
            "clip_norm" => t.clip_norm = if v == "none" { None } else { Some(parse_float(key, v)?) },
            "alpha_mode" => t.alpha_mode = parse_named(key, v, AlphaMode::from_name, "auto, fixed")?,
            "initial_alpha" => t.initial_alpha = parse_float(key, v)?,
            "target_entropy" => t.target_entropy = if v == "auto" { None } else { Some(parse_float(key, v)?) },
            "buffer_capacity" => t.buffer_capacity = parse_num(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Parses config text; errors carry the 1-based line number.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<(&str, usize)> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parameter(format!("line {line_no}: {msg}"));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if let Some((_, first)) = seen.iter().find(|(k, _)| *k == key) {
                return Err(err(format!("duplicate key {key:?} (first set on line {first})")));
            }
            seen.push((key, line_no));
            cfg.set(key, value).map_err(err)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Canonical text form: every key, fixed order.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# enseq run configuration\n");
        for key in CONFIG_KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("known key"));
        }
        out
    }

    /// Range checks plus name lookups in the built-in registries.
    pub fn validate(&self) -> Result<()> {
        self.trainer.validate()?;
        if EnvRegistry::with_builtins().make(&self.env).is_err() {
            return Err(Error::param(format!(
                "unknown env {:?} (known: {})",
                self.env,
                EnvRegistry::with_builtins().names().join(", ")
            )));
        }
        if QVariant::from_name(&self.trainer.variant).is_none() {
            let known: Vec<&str> = QVariant::ALL.iter().map(|v| v.name()).collect();
            return Err(Error::param(format!(
                "unknown variant {:?} (known: {})",
                self.trainer.variant,
                known.join(", ")
            )));
        }
        if self.eval_episodes == 0 || self.bias.points == 0 || self.bias.rollouts == 0 || self.bias.horizon == 0 {
            return Err(Error::param("eval_episodes and bias_* counts must be positive"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical text without `output_dir`. The seed is
    /// part of the text.
    pub fn run_id(&self) -> String {
        let mut h = Sha256::new();
        for key in CONFIG_KEYS.iter().filter(|k| **k != "output_dir") {
            h.update(format!("{key} = {}\n", self.get(key).expect("known key")));
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub env_step: u64,
    /// Mean deterministic-action evaluation return.
    pub episode_return: f64,
    /// Mean online Q over members and bias points.
    pub avg_q_prediction: f64,
    pub mean_bias: f64,
    pub mean_normalized_bias: f64,
    pub std_normalized_bias: f64,
    /// Mean Monte-Carlo return of the bias points.
    pub bias_denominator: f64,
    /// Mean over the interval's update rounds; NaN before the first update.
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha: f64,
    /// min, q1, median, q3, max of the per-point max-Q.
    pub max_q: [f64; 5],
    pub max_q_outliers: u64,
    pub min_q: [f64; 5],
    pub min_q_outliers: u64,
}

pub const METRIC_COLUMNS: &[&str] = &[
    "env_step",
    "episode_return",
    "avg_q_prediction",
    "mean_bias",
    "mean_normalized_bias",
    "std_normalized_bias",
    "bias_denominator",
    "critic_loss",
    "actor_loss",
    "alpha",
    "max_q_min",
    "max_q_q1",
    "max_q_median",
    "max_q_q3",
    "max_q_max",
    "max_q_outliers",
    "min_q_min",
    "min_q_q1",
    "min_q_median",
    "min_q_q3",
    "min_q_max",
    "min_q_outliers",
];

pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

fn quartiles(s: &Summary) -> [f64; 5] {
    [s.min, s.q1, s.median, s.q3, s.max]
}

impl MetricRecord {
    pub fn to_row(&self) -> String {
        let mut cells = vec![self.env_step.to_string()];
        cells.extend(
            [
                self.episode_return,
                self.avg_q_prediction,
                self.mean_bias,
                self.mean_normalized_bias,
                self.std_normalized_bias,
                self.bias_denominator,
                self.critic_loss,
                self.actor_loss,
                self.alpha,
            ]
            .iter()
            .map(|&x| fmt_float(x)),
        );
        cells.extend(self.max_q.iter().map(|&x| fmt_float(x)));
        cells.push(self.max_q_outliers.to_string());
        cells.extend(self.min_q.iter().map(|&x| fmt_float(x)));
        cells.push(self.min_q_outliers.to_string());
        cells.join(",")
    }

    pub fn from_row(line: &str) -> Result<Self> {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != METRIC_COLUMNS.len() {
            return Err(Error::Format(format!(
                "metrics row has {} cells, expected {}",
                cells.len(),
                METRIC_COLUMNS.len()
            )));
        }
        let f = |i: usize| -> Result<f64> {
            cells[i]
                .parse()
                .map_err(|_| Error::Format(format!("column {}: bad number {:?}", METRIC_COLUMNS[i], cells[i])))
        };
        let u = |i: usize| -> Result<u64> {
            cells[i]
                .parse()
                .map_err(|_| Error::Format(format!("column {}: bad integer {:?}", METRIC_COLUMNS[i], cells[i])))
        };
        Ok(MetricRecord {
            env_step: u(0)?,
            episode_return: f(1)?,
            avg_q_prediction: f(2)?,
            mean_bias: f(3)?,
            mean_normalized_bias: f(4)?,
            std_normalized_bias: f(5)?,
            bias_denominator: f(6)?,
            critic_loss: f(7)?,
            actor_loss: f(8)?,
            alpha: f(9)?,
            max_q: [f(10)?, f(11)?, f(12)?, f(13)?, f(14)?],
            max_q_outliers: u(15)?,
            min_q: [f(16)?, f(17)?, f(18)?, f(19)?, f(20)?],
            min_q_outliers: u(21)?,
        })
    }
}

/// Parses metrics text. A trailing line without its newline (a row still
/// being written) is ignored.
pub fn parse_metrics(text: &str) -> Result<Vec<MetricRecord>> {
    let complete = match text.rfind('\n') {
        Some(i) => &text[..=i],
        None => "",
    };
    let mut rows = Vec::new();
    let mut header_seen = false;
    for line in complete.lines() {
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        if !header_seen {
            if line != METRIC_COLUMNS.join(",") {
                return Err(Error::Format(format!("unexpected metrics header {line:?}")));
            }
            header_seen = true;
            continue;
        }
        rows.push(MetricRecord::from_row(line)?);
    }
    for w in rows.windows(2) {
        if w[1].env_step <= w[0].env_step {
            return Err(Error::Format(format!("env_step not increasing at {}", w[1].env_step)));
        }
    }
    Ok(rows)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_metrics(&text).map_err(|e| e.context(path.display()))
}

struct LineWriter(BufWriter<File>);

impl LineWriter {
    fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Ok(LineWriter(BufWriter::new(f)))
    }

    fn line(&mut self, s: &str) -> Result<()> {
        self.0.write_all(s.as_bytes())?;
        self.0.write_all(b"\n")?;
        self.0.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub run_id: String,
    pub output_dir: PathBuf,
    pub records: Vec<MetricRecord>,
}

/// Trains to `total_env_steps`, writing `config.txt`, `metrics.csv`,
/// `timing.csv` and `checkpoint.ensq` into the output directory.
pub fn run(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    match cfg.precision {
        Precision::Fast => run_typed::<f32>(cfg),
        Precision::Check => run_typed::<f64>(cfg),
    }
}

fn run_typed<T: Real>(cfg: &RunConfig) -> Result<RunSummary> {
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::Io(format!("{}: {e}", out.display())))?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    let run_id = cfg.run_id();
    let mut metrics = LineWriter::create(&out.join("metrics.csv"))?;
    metrics.line(&format!("# enseq-metrics v{METRICS_VERSION} run={run_id}"))?;
    metrics.line(&METRIC_COLUMNS.join(","))?;
    let mut timing = LineWriter::create(&out.join("timing.csv"))?;
    timing.line("env_step,wall_time")?;

    let env = EnvRegistry::with_builtins().make(&cfg.env)?;
    let mut trainer = Trainer::<T>::new(cfg.trainer.clone(), &VariantRegistry::with_builtins(), env)?;
    let start = Instant::now();
    let total = cfg.trainer.total_env_steps;
    let interval = cfg.trainer.eval_interval;
    let (mut closs, mut aloss) = (Vec::new(), Vec::new());
    let mut records = Vec::new();
    for step in 1..=total {
        let m = trainer.train_step()?;
        closs.extend(m.critic_loss);
        aloss.extend(m.actor_loss);
        if step % interval == 0 || step == total {
            let rec = evaluate(&trainer, cfg, step as u64, &closs, &aloss)
                .map_err(|e| e.context(format!("evaluation at env step {step}")))?;
            metrics.line(&rec.to_row())?;
            timing.line(&format!("{step},{}", fmt_float(start.elapsed().as_secs_f64())))?;
            records.push(rec);
            closs.clear();
            aloss.clear();
        }
    }
    checkpoint(&trainer, cfg).save(&out.join("checkpoint.ensq"))?;
    Ok(RunSummary {
        run_id,
        output_dir: out.clone(),
        records,
    })
}

fn mean_or_nan(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        crate::diagnostics::kahan_sum(xs.iter().copied()) / xs.len() as f64
    }
}

fn evaluate<T: Real>(
    trainer: &Trainer<T>,
    cfg: &RunConfig,
    step: u64,
    closs: &[f64],
    aloss: &[f64],
) -> Result<MetricRecord> {
    let seed = cfg.trainer.seed;
    let ret = evaluate_return(&trainer.agent.policy, trainer.env(), cfg.eval_episodes, seed, step)?;
    let (bias, dist, avg_q) = evaluate_bias(
        &trainer.agent,
        trainer.env(),
        cfg.trainer.m,
        cfg.trainer.gamma,
        cfg.bias,
        seed,
        step,
    )?;
    let (mean_bias, mnb, snb, denom) = match bias {
        Ok(b) => (
            b.mean_bias,
            b.mean_normalized_bias,
            b.std_normalized_bias,
            b.denominator,
        ),
        Err(Error::DegenerateNormalization { mean_bias, denominator }) => (mean_bias, f64::NAN, f64::NAN, denominator),
        Err(e) => return Err(e),
    };
    Ok(MetricRecord {
        env_step: step,
        episode_return: ret,
        avg_q_prediction: avg_q,
        mean_bias,
        mean_normalized_bias: mnb,
        std_normalized_bias: snb,
        bias_denominator: denom,
        critic_loss: mean_or_nan(closs),
        actor_loss: mean_or_nan(aloss),
        alpha: trainer.agent.temperature.alpha().to_f64_lossy(),
        max_q: quartiles(&dist.max_summary),
        max_q_outliers: dist.max_summary.outliers as u64,
        min_q: quartiles(&dist.min_summary),
        min_q_outliers: dist.min_summary.outliers as u64,
    })
}

fn put_adam<T: Real>(ar: &mut Archive, prefix: &str, opt: &Adam<T>) {
    ar.put_u64(&format!("{prefix}.steps"), &[opt.steps()]);
    let (m, v) = opt.moments();
    for (j, (mj, vj)) in m.iter().zip(v).enumerate() {
        ar.put_real(&format!("{prefix}.m.{j}"), &[mj.len()], mj);
        ar.put_real(&format!("{prefix}.v.{j}"), &[vj.len()], vj);
    }
}

/// Parameters, optimizer moments and run metadata in one archive.
pub fn checkpoint<T: Real>(trainer: &Trainer<T>, cfg: &RunConfig) -> Archive {
    let mut ar = Archive::new();
    let agent = &trainer.agent;
    ar.set_meta("kind", "enseq-checkpoint");
    ar.set_meta("variant", &cfg.trainer.variant);
    ar.set_meta("env", &cfg.env);
    ar.set_meta("precision", T::PRECISION.name());
    ar.set_meta("config_hash", cfg.run_id());
    ar.set_meta("env_step", trainer.counters().env_steps);
    ar.set_meta("config", cfg.to_text());
    for (name, p) in agent.critic.named_params() {
        ar.put_tensor(&format!("critic.{name}"), p);
    }
    for (name, p) in agent.policy.named_params() {
        ar.put_tensor(&format!("policy.{name}"), p);
    }
    ar.put_tensor("temperature.log_alpha", &agent.temperature.log_alpha);
    for (i, opt) in agent.critic_opts.iter().enumerate() {
        put_adam(&mut ar, &format!("adam.critic.{i}"), opt);
    }
    put_adam(&mut ar, "adam.policy", &agent.actor_opt);
    put_adam(&mut ar, "adam.temperature", agent.temperature.optimizer());
    ar
}

/// Copies checkpointed parameters into `module`, whose names are looked up
/// under `prefix`.
pub fn restore_params<T: Real, M: Module<T>>(ar: &Archive, prefix: &str, module: &mut M) -> Result<()> {
    let names: Vec<String> = module.named_params().into_iter().map(|(n, _)| n).collect();
    for (name, p) in names.iter().zip(module.params_mut()) {
        let t = ar.get_tensor::<T>(&format!("{prefix}.{name}"))?;
        p.copy_from(&t).map_err(|e| e.context(name))?;
    }
    Ok(())
}

/// One sweep axis, e.g. `group_size=2,4,8`.
#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub key: String,
    pub values: Vec<String>,
}

impl Axis {
    pub fn parse(spec: &str) -> Result<Self> {
        let (key, values) = spec
            .split_once('=')
            .ok_or_else(|| Error::param(format!("axis {spec:?} is not key=v1,v2,...")))?;
        let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
        if values.iter().any(String::is_empty) {
            return Err(Error::param(format!("axis {spec:?} has an empty value")));
        }
        Ok(Axis {
            key: key.trim().to_string(),
            values,
        })
    }
}

/// A sweep cell: its overrides and resulting config.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub index: usize,
    pub overrides: Vec<(String, String)>,
    pub config: RunConfig,
}

/// Cartesian product of `axes` over `base`, first axis slowest. Cell `i`
/// runs with seed `base.seed + i` in `<base.output_dir>/cell_<i>`.
pub fn sweep_cells(base: &RunConfig, axes: &[Axis]) -> Result<Vec<Cell>> {
    for a in axes {
        if a.key == "seed" || a.key == "output_dir" {
            return Err(Error::param(format!("{} cannot be swept", a.key)));
        }
    }
    let mut combos: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for a in axes {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                a.values.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push((a.key.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    combos
        .into_iter()
        .enumerate()
        .map(|(index, overrides)| {
            let mut config = base.clone();
            for (k, v) in &overrides {
                config.set(k, v).map_err(Error::Parameter)?;
            }
            config.trainer.seed = base.trainer.seed.wrapping_add(index as u64);
            config.output_dir = base.output_dir.join(format!("cell_{index:03}"));
            config.validate().map_err(|e| e.context(format!("cell {index}")))?;
            Ok(Cell {
                index,
                overrides,
                config,
            })
        })
        .collect()
}

pub const SUMMARY_COLUMNS: &[&str] = &[
    "cell",
    "seed",
    "overrides",
    "status",
    "rows",
    "final_step",
    "final_return",
    "min_return",
    "max_return",
    "final_mean_normalized_bias",
    "final_std_normalized_bias",
];

#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub cell: Cell,
    pub result: std::result::Result<Vec<MetricRecord>, String>,
}

impl CellOutcome {
    fn row(&self) -> String {
        let ov: Vec<String> = self.cell.overrides.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let head = [
            self.cell.index.to_string(),
            self.cell.config.trainer.seed.to_string(),
            ov.join(";"),
        ];
        let tail: Vec<String> = match &self.result {
            Ok(recs) => {
                let rets = recs.iter().map(|r| r.episode_return);
                let last = recs.last();
                vec![
                    "ok".into(),
                    recs.len().to_string(),
                    last.map_or("0".into(), |r| r.env_step.to_string()),
                    fmt_float(last.map_or(f64::NAN, |r| r.episode_return)),
                    fmt_float(rets.clone().fold(f64::INFINITY, f64::min)),
                    fmt_float(rets.fold(f64::NEG_INFINITY, f64::max)),
                    fmt_float(last.map_or(f64::NAN, |r| r.mean_normalized_bias)),
                    fmt_float(last.map_or(f64::NAN, |r| r.std_normalized_bias)),
                ]
            }
            Err(msg) => {
                let mut v = vec![format!("failed: {}", msg.replace([',', '\n'], " "))];
                v.extend(std::iter::repeat_n(String::new(), 7));
                v
            }
        };
        head.into_iter().chain(tail).collect::<Vec<_>>().join(",")
    }
}

/// Runs every cell in order; a failed cell is recorded and the rest still
/// run. Writes `summary.csv` next to the cell directories.
pub fn sweep(base: &RunConfig, axes: &[Axis]) -> Result<Vec<CellOutcome>> {
    let cells = sweep_cells(base, axes)?;
    fs::create_dir_all(&base.output_dir)?;
    let mut summary = LineWriter::create(&base.output_dir.join("summary.csv"))?;
    summary.line(&SUMMARY_COLUMNS.join(","))?;
    let mut outcomes = Vec::new();
    for cell in cells {
        let result = run(&cell.config).map(|s| s.records).map_err(|e| e.to_string());
        let outcome = CellOutcome { cell, result };
        summary.line(&outcome.row())?;
        outcomes.push(outcome);
    }
    Ok(outcomes)
}

/// Per-step table aligning several runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub runs: Vec<String>,
    pub steps: Vec<u64>,
    /// `[run][row]`
    pub returns: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
    pub bias_std: Vec<Vec<f64>>,
}

/// Reads `metrics.csv` from each run directory and aligns rows by step.
/// Runs still in progress are cut to the common prefix; runs whose step
/// sequences disagree are an error naming them.
pub fn compare(dirs: &[PathBuf]) -> Result<Comparison> {
    if dirs.is_empty() {
        return Err(Error::param("nothing to compare"));
    }
    let all: Vec<Vec<MetricRecord>> = dirs
        .iter()
        .map(|d| read_metrics(&d.join("metrics.csv")))
        .collect::<Result<_>>()?;
    let len = all.iter().map(Vec::len).min().unwrap_or(0);
    let steps: Vec<u64> = all[0][..len].iter().map(|r| r.env_step).collect();
    let offending: Vec<String> = dirs
        .iter()
        .zip(&all)
        .filter(|(_, recs)| recs[..len].iter().map(|r| r.env_step).ne(steps.iter().copied()))
        .map(|(d, _)| d.display().to_string())
        .collect();
    if !offending.is_empty() {
        return Err(Error::Format(format!(
            "evaluation cadence differs from {}: {}",
            dirs[0].display(),
            offending.join(", ")
        )));
    }
    let col = |f: fn(&MetricRecord) -> f64| -> Vec<Vec<f64>> {
        all.iter().map(|recs| recs[..len].iter().map(f).collect()).collect()
    };
    Ok(Comparison {
        runs: dirs.iter().map(|d| d.display().to_string()).collect(),
        steps,
        returns: col(|r| r.episode_return),
        bias: col(|r| r.mean_normalized_bias),
        bias_std: col(|r| r.std_normalized_bias),
    })
}

fn mean_spread(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let mean = crate::diagnostics::kahan_sum(xs.clone()) / n;
    let (lo, hi) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    (mean, hi - lo)
}

impl Comparison {
    /// Column names; run `i` contributes `return_i`, `bias_i`, `bias_std_i`.
    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["env_step".to_string()];
        for metric in ["return", "bias", "bias_std"] {
            h.extend((0..self.runs.len()).map(|i| format!("{metric}_{i}")));
            h.push(format!("mean_{metric}"));
            h.push(format!("spread_{metric}"));
        }
        h
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (i, r) in self.runs.iter().enumerate() {
            let _ = writeln!(out, "# run {i}: {r}");
        }
        let _ = writeln!(out, "{}", self.header().join(","));
        for (row, step) in self.steps.iter().enumerate() {
            let mut cells = vec![step.to_string()];
            for table in [&self.returns, &self.bias, &self.bias_std] {
                let vals = table.iter().map(|run| run[row]);
                cells.extend(vals.clone().map(fmt_float));
                let (mean, spread) = mean_spread(vals);
                cells.push(fmt_float(mean));
                cells.push(fmt_float(spread));
            }
            let _ = writeln!(out, "{}", cells.join(","));
        }
        out
    }
}
