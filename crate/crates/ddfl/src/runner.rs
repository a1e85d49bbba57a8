//! Experiment orchestration: configuration, training loops for every method,
//! evaluation metrics, binary checkpoints, and diagnostic suites.
//!
//! A run is described by an [`ExperimentConfig`] (task, method, sample count,
//! architecture, optimizer settings, data source). [`train`] executes the
//! configured loop deterministically per seed and returns a [`Checkpoint`]
//! plus one [`MetricsRow`] per epoch; [`evaluate`] scores a checkpoint on a
//! held-out dataset. The decision-focused methods follow the same per-step
//! recipe: sample `M` outcomes from the predictor, solve the sample-average
//! decision problem, differentiate the realized cost through the KKT system
//! with the configured estimator, add the regularizing prediction loss, and
//! apply one Adam update.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::decision::{solve_saa, AffineConstraints, CostModel, SolveOptions};
use crate::diffusion::{
    build_schedule, draw_noises, elbo_grad_with_probs, reverse_sample, sample_y0, EpsilonModel,
    TimestepSampler, Trajectory,
};
use crate::error::{Error, Result};
use crate::estimators::{
    deterministic_grad, diff_reparam_grad, diff_score_grad, diff_score_grad_with_weights,
    gauss_reparam_grad, gauss_score_grad, score_weights, GaussianPredictor, GradientEstimate,
};
use crate::nn::{Activation, DenseNet, ParamLayout, ParamVector};
use crate::tasks::{
    factory_margin_mixture, inventory_shift_mixture, Dataset, FactoryTask, InventoryTask,
    MixtureOfGaussians, PortfolioTask, PowerTask, SyntheticGenerator,
};
use crate::twostage::{two_stage_batch, two_stage_loss, Predictor, TwoStageLoss};
use crate::validation::{cosine, fd_grad, END_TO_END_FD_STEP};

/// Default noise-schedule endpoints for runner-built diffusion models. The
/// top of the range is set so a 50-step chain ends with a cumulative signal
/// level near zero; reverse sampling starts from a standard normal, and a
/// cooler schedule would leave that start far from the forward chain's
/// terminal state whenever the outcome data sit away from the origin.
pub const DEFAULT_BETA_MIN: f64 = 1e-4;
pub const DEFAULT_BETA_MAX: f64 = 2e-1;

const STREAM_DATA: u64 = 1;
const STREAM_INIT: u64 = 2;
const STREAM_TRAIN: u64 = 3;
const STREAM_EVAL: u64 = 4;
const STREAM_ORACLE: u64 = 5;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Adam optimizer over a flat parameter vector (β₁ = 0.9, β₂ = 0.999,
/// ε = 1e-8).
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u32,
}

impl Adam {
    pub fn new(lr: f64, dim: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            steps: 0,
        }
    }

    /// One descent update in place.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grad.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Rescales `grad` in place so its L2 norm is at most `max_norm`.
fn clip_to_norm(grad: &mut [f64], max_norm: f64) {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grad.iter_mut() {
            *g *= scale;
        }
    }
}

/// Benchmark decision problem selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Factory,
    Power,
    Portfolio,
    Inventory,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::Factory,
        TaskKind::Power,
        TaskKind::Portfolio,
        TaskKind::Inventory,
    ];

    /// Default sample count `M` for the task's decision layer.
    pub fn default_samples(self) -> usize {
        match self {
            TaskKind::Factory => 10,
            TaskKind::Power => 25,
            TaskKind::Portfolio => 50,
            TaskKind::Inventory => 10,
        }
    }

    pub fn default_y_dim(self) -> usize {
        match self {
            TaskKind::Factory => 10,
            TaskKind::Power => 24,
            TaskKind::Portfolio => 5,
            TaskKind::Inventory => 1,
        }
    }

    pub fn default_x_dim(self) -> usize {
        match self {
            TaskKind::Factory => 0,
            TaskKind::Power => 3,
            TaskKind::Portfolio => 3,
            TaskKind::Inventory => 1,
        }
    }

    /// Cost model and feasible region for the given outcome dimension.
    pub fn decision_problem(self, y_dim: usize) -> Result<(Box<dyn CostModel>, AffineConstraints)> {
        match self {
            TaskKind::Factory => {
                let task = FactoryTask::new(y_dim)?;
                let cons = task.constraints();
                Ok((Box::new(task), cons))
            }
            TaskKind::Power => {
                let task = PowerTask::custom(y_dim, 50.0, 0.5, 0.4)?;
                let cons = task.constraints();
                Ok((Box::new(task), cons))
            }
            TaskKind::Portfolio => {
                let task = PortfolioTask::new(y_dim, 10.0)?;
                let cons = task.constraints();
                Ok((Box::new(task), cons))
            }
            TaskKind::Inventory => {
                if y_dim != 1 {
                    return Err(Error::Config(format!(
                        "inventory decisions are scalar; y_dim must be 1, got {y_dim}"
                    )));
                }
                let task = InventoryTask::new(0.1, 0.05, 2.0, 0.05, 0.5, 0.05, 20.0)?;
                let cons = task.constraints();
                Ok((Box::new(task), cons))
            }
        }
    }

    /// Synthetic outcome generator used when the data source is `generator`.
    /// The linear map is fixed per task (independent of the run seed) so all
    /// seeds see the same ground-truth distribution.
    pub fn generator(self, y_dim: usize, x_dim: usize) -> Result<SyntheticGenerator> {
        let seeded = |scale: f64, salt: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(salt);
            DMatrix::from_fn(y_dim, x_dim, |_, _| rng.random_range(-scale..scale))
        };
        match self {
            TaskKind::Factory => SyntheticGenerator::new(
                seeded(0.5, 0xfac0),
                DVector::zeros(y_dim),
                factory_margin_mixture(),
            ),
            TaskKind::Power => SyntheticGenerator::new(
                seeded(1.0, 0x9073),
                DVector::from_element(y_dim, 5.0),
                MixtureOfGaussians::scalar(&[(1.0, 0.0, 0.5)])?,
            ),
            TaskKind::Portfolio => SyntheticGenerator::new(
                seeded(0.1, 0x9f17),
                DVector::from_element(y_dim, 0.05),
                MixtureOfGaussians::scalar(&[(1.0, 0.0, 0.1)])?,
            ),
            TaskKind::Inventory => {
                if y_dim != 1 {
                    return Err(Error::Config(format!(
                        "inventory demand is scalar; y_dim must be 1, got {y_dim}"
                    )));
                }
                SyntheticGenerator::new(
                    DMatrix::from_element(1, x_dim, 1.5),
                    DVector::from_element(1, 8.0),
                    inventory_shift_mixture(&[0.7, 0.15, 0.15])?,
                )?
                .with_feature_range(-2.0, 2.0)
            }
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            TaskKind::Factory => "factory",
            TaskKind::Power => "power",
            TaskKind::Portfolio => "portfolio",
            TaskKind::Inventory => "inventory",
        };
        f.write_str(name)
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "factory" => Ok(TaskKind::Factory),
            "power" => Ok(TaskKind::Power),
            "portfolio" => Ok(TaskKind::Portfolio),
            "inventory" => Ok(TaskKind::Inventory),
            other => Err(Error::Config(format!(
                "unknown task `{other}`; expected factory, power, portfolio, or inventory"
            ))),
        }
    }
}

/// Training method: predictor family crossed with the training signal
/// (two-stage prediction loss, or decision-focused with a given estimator).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    DetTs,
    GaussTs,
    DiffTs,
    DetDfl,
    GaussRp,
    GaussSf,
    DiffRp,
    DiffSf,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::DetTs,
        Method::GaussTs,
        Method::DiffTs,
        Method::DetDfl,
        Method::GaussRp,
        Method::GaussSf,
        Method::DiffRp,
        Method::DiffSf,
    ];

    pub fn family(self) -> &'static str {
        match self {
            Method::DetTs | Method::DetDfl => "deterministic",
            Method::GaussTs | Method::GaussRp | Method::GaussSf => "gaussian",
            Method::DiffTs | Method::DiffRp | Method::DiffSf => "diffusion",
        }
    }

    /// Whether training differentiates through the decision layer.
    pub fn is_dfl(self) -> bool {
        !matches!(self, Method::DetTs | Method::GaussTs | Method::DiffTs)
    }

    pub fn default_lr(self) -> f64 {
        match self {
            Method::DiffRp => 1e-5,
            Method::DiffSf => 8e-6,
            _ => 1e-4,
        }
    }

    /// Prediction loss for this method's family, used both by the two-stage
    /// methods and as the DFL regularizer.
    pub fn prediction_loss(self) -> TwoStageLoss {
        match self.family() {
            "deterministic" => TwoStageLoss::Mse,
            "gaussian" => TwoStageLoss::GaussianNll,
            _ => TwoStageLoss::Denoising,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Method::DetTs => "det-ts",
            Method::GaussTs => "gauss-ts",
            Method::DiffTs => "diff-ts",
            Method::DetDfl => "det-dfl",
            Method::GaussRp => "gauss-rp",
            Method::GaussSf => "gauss-sf",
            Method::DiffRp => "diff-rp",
            Method::DiffSf => "diff-sf",
        };
        f.write_str(name)
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "det-ts" => Ok(Method::DetTs),
            "gauss-ts" => Ok(Method::GaussTs),
            "diff-ts" => Ok(Method::DiffTs),
            "det-dfl" => Ok(Method::DetDfl),
            "gauss-rp" => Ok(Method::GaussRp),
            "gauss-sf" => Ok(Method::GaussSf),
            "diff-rp" => Ok(Method::DiffRp),
            "diff-sf" => Ok(Method::DiffSf),
            other => Err(Error::Config(format!(
                "unknown method `{other}`; expected det-ts, gauss-ts, diff-ts, det-dfl, \
                 gauss-rp, gauss-sf, diff-rp, or diff-sf"
            ))),
        }
    }
}

/// Where training and test pairs come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSource {
    /// The task's built-in synthetic generator.
    Generator,
    /// A CSV file in the dataset format (`d_x,d_y` header).
    Csv(PathBuf),
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSource::Generator => f.write_str("generator"),
            DataSource::Csv(path) => write!(f, "csv:{}", path.display()),
        }
    }
}

impl FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "generator" {
            Ok(DataSource::Generator)
        } else if let Some(path) = s.strip_prefix("csv:") {
            if path.is_empty() {
                return Err(Error::Config("csv data source needs a path".into()));
            }
            Ok(DataSource::Csv(PathBuf::from(path)))
        } else {
            Err(Error::Config(format!(
                "unknown data source `{s}`; expected `generator` or `csv:<path>`"
            )))
        }
    }
}

/// Full description of one training run. Defaults derive from the task and
/// method; every field can be overridden by config keys of the same name.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub method: Method,
    /// Decision-layer sample count `M`.
    pub samples: usize,
    /// Diffusion chain length `T`.
    pub t_steps: usize,
    /// Hidden trunk widths.
    pub hidden: Vec<usize>,
    pub lr: f64,
    /// Weight on the prediction-loss regularizer added to DFL gradients.
    pub lambda_reg: f64,
    pub epochs: usize,
    pub seed: u64,
    pub data: DataSource,
    pub solver_tol: f64,
    pub y_dim: usize,
    pub x_dim: usize,
    pub train_size: usize,
    pub test_size: usize,
    /// Minibatch size for the two-stage methods.
    pub batch_size: usize,
    /// Surrogate timestep draws per sample in the score-function estimator.
    pub elbo_draws: usize,
    /// Generator draws behind the regret oracle.
    pub oracle_draws: usize,
    /// Global L2 bound applied to each training gradient before the
    /// optimizer step. Exponential task costs produce occasional spikes many
    /// orders of magnitude above typical gradients, and a single unclipped
    /// spike leaves Adam's second-moment state too large to recover from
    /// within a run.
    pub clip_norm: f64,
}

impl ExperimentConfig {
    pub fn new(task: TaskKind, method: Method) -> Self {
        Self {
            task,
            method,
            samples: task.default_samples(),
            t_steps: 50,
            hidden: vec![64, 64],
            lr: method.default_lr(),
            lambda_reg: 0.01,
            epochs: 20,
            seed: 0,
            data: DataSource::Generator,
            solver_tol: 1e-8,
            y_dim: task.default_y_dim(),
            x_dim: task.default_x_dim(),
            train_size: 256,
            test_size: 128,
            batch_size: 32,
            elbo_draws: 1,
            oracle_draws: 10_000,
            clip_norm: 100.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Config("samples must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be positive and finite, got {}",
                self.lr
            )));
        }
        if !(self.lambda_reg >= 0.0) || !self.lambda_reg.is_finite() {
            return Err(Error::Config(format!(
                "lambda_reg must be nonnegative and finite, got {}",
                self.lambda_reg
            )));
        }
        if self.t_steps == 0 {
            return Err(Error::Config("t_steps must be at least 1".into()));
        }
        if !(self.solver_tol > 0.0) {
            return Err(Error::Config(format!(
                "solver_tol must be positive, got {}",
                self.solver_tol
            )));
        }
        if self.y_dim == 0 {
            return Err(Error::Config("y_dim must be at least 1".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be nonzero".into()));
        }
        if self.train_size == 0 || self.test_size == 0 {
            return Err(Error::Config(
                "train_size and test_size must be at least 1".into(),
            ));
        }
        if self.batch_size == 0 || self.elbo_draws == 0 || self.oracle_draws == 0 {
            return Err(Error::Config(
                "batch_size, elbo_draws, and oracle_draws must be at least 1".into(),
            ));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!(
                "clip_norm must be positive, got {}",
                self.clip_norm
            )));
        }
        if self.task == TaskKind::Inventory && self.y_dim != 1 {
            return Err(Error::Config(
                "the inventory task has a scalar outcome; set y_dim = 1".into(),
            ));
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment and blank lines are
    /// ignored. Defaults come from the `task` and `method` keys (themselves
    /// defaulting to factory / diff-rp), so overrides may appear in any
    /// order.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", idx + 1))
            })?;
            pairs.push((key.trim().to_string(), value.trim().to_string()));
        }
        Self::from_pairs(&pairs)
    }

    /// Builds a config from `(key, value)` pairs applied in order on top of
    /// the task/method defaults.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut task = TaskKind::Factory;
        let mut method = Method::DiffRp;
        for (key, value) in pairs {
            match key.as_str() {
                "task" => task = value.parse()?,
                "method" => method = value.parse()?,
                _ => {}
            }
        }
        let mut config = Self::new(task, method);
        for (key, value) in pairs {
            config.apply_kv(key, value)?;
        }
        Ok(config)
    }

    /// Applies a single config override. Task and method assignments do not
    /// re-derive dependent defaults; [`Self::from_pairs`] handles that.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        fn usize_of(key: &str, value: &str) -> Result<usize> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("{key}: expected a nonnegative integer, got `{value}`")))
        }
        fn f64_of(key: &str, value: &str) -> Result<f64> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("{key}: expected a number, got `{value}`")))
        }
        match key {
            "task" => self.task = value.parse()?,
            "method" => self.method = value.parse()?,
            "samples" => self.samples = usize_of(key, value)?,
            "t_steps" => self.t_steps = usize_of(key, value)?,
            "hidden" => {
                self.hidden = if value.is_empty() {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|w| usize_of("hidden", w.trim()))
                        .collect::<Result<_>>()?
                };
            }
            "lr" => self.lr = f64_of(key, value)?,
            "lambda_reg" => self.lambda_reg = f64_of(key, value)?,
            "epochs" => self.epochs = usize_of(key, value)?,
            "seed" => {
                self.seed = value
                    .parse()
                    .map_err(|_| Error::Config(format!("seed: expected an integer, got `{value}`")))?;
            }
            "data" => self.data = value.parse()?,
            "solver_tol" => self.solver_tol = f64_of(key, value)?,
            "y_dim" => self.y_dim = usize_of(key, value)?,
            "x_dim" => self.x_dim = usize_of(key, value)?,
            "train_size" => self.train_size = usize_of(key, value)?,
            "test_size" => self.test_size = usize_of(key, value)?,
            "batch_size" => self.batch_size = usize_of(key, value)?,
            "elbo_draws" => self.elbo_draws = usize_of(key, value)?,
            "oracle_draws" => self.oracle_draws = usize_of(key, value)?,
            "clip_norm" => self.clip_norm = f64_of(key, value)?,
            other => {
                return Err(Error::Config(format!("unknown config key `{other}`")));
            }
        }
        Ok(())
    }

    /// Serializes every field as `key = value` lines; parsing the output
    /// reproduces the config exactly.
    pub fn to_kv_text(&self) -> String {
        let hidden: Vec<String> = self.hidden.iter().map(|w| w.to_string()).collect();
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        push("task", self.task.to_string());
        push("method", self.method.to_string());
        push("samples", self.samples.to_string());
        push("t_steps", self.t_steps.to_string());
        push("hidden", hidden.join(","));
        push("lr", format_f64(self.lr));
        push("lambda_reg", format_f64(self.lambda_reg));
        push("epochs", self.epochs.to_string());
        push("seed", self.seed.to_string());
        push("data", self.data.to_string());
        push("solver_tol", format_f64(self.solver_tol));
        push("y_dim", self.y_dim.to_string());
        push("x_dim", self.x_dim.to_string());
        push("train_size", self.train_size.to_string());
        push("test_size", self.test_size.to_string());
        push("batch_size", self.batch_size.to_string());
        push("elbo_draws", self.elbo_draws.to_string());
        push("oracle_draws", self.oracle_draws.to_string());
        push("clip_norm", format_f64(self.clip_norm));
        out
    }
}

/// Prints a float with 17 significant digits so it round-trips exactly.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// One evaluation snapshot. `wall_time_s` is seconds elapsed since training
/// started and is informational; all other fields are seed-deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub train_task_loss: f64,
    pub test_task_loss: f64,
    pub test_rmse: f64,
    pub regret: f64,
    pub wall_time_s: f64,
}

pub const METRICS_HEADER: &str =
    "epoch,train_task_loss,test_task_loss,test_rmse,regret,wall_time_s";

pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch,
            format_f64(r.train_task_loss),
            format_f64(r.test_task_loss),
            format_f64(r.test_rmse),
            format_f64(r.regret),
            format_f64(r.wall_time_s),
        ));
    }
    out
}

pub fn metrics_from_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::CsvParse {
        line: 1,
        message: "missing header".into(),
    })?;
    if header.trim_end_matches('\r') != METRICS_HEADER {
        return Err(Error::CsvParse {
            line: 1,
            message: format!("expected header `{METRICS_HEADER}`"),
        });
    }
    let mut rows: Vec<MetricsRow> = Vec::new();
    for (idx, raw) in lines {
        let line = idx + 1;
        let fields: Vec<&str> = raw.trim_end_matches('\r').split(',').collect();
        if fields.len() != 6 {
            return Err(Error::CsvParse {
                line,
                message: format!("expected 6 fields, found {}", fields.len()),
            });
        }
        let epoch: usize = fields[0].parse().map_err(|_| Error::CsvParse {
            line,
            message: format!("invalid epoch `{}`", fields[0]),
        })?;
        let mut nums = [0.0; 5];
        for (slot, field) in nums.iter_mut().zip(&fields[1..]) {
            let v: f64 = field.parse().map_err(|_| Error::CsvParse {
                line,
                message: format!("invalid number `{field}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("metrics line {line}"),
                });
            }
            *slot = v;
        }
        if let Some(prev) = rows.last() {
            if epoch <= prev.epoch {
                return Err(Error::CsvParse {
                    line,
                    message: format!(
                        "epoch {epoch} does not increase past {}",
                        prev.epoch
                    ),
                });
            }
        }
        rows.push(MetricsRow {
            epoch,
            train_task_loss: nums[0],
            test_task_loss: nums[1],
            test_rmse: nums[2],
            regret: nums[3],
            wall_time_s: nums[4],
        });
    }
    Ok(rows)
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DDFL";
pub const CHECKPOINT_VERSION: u32 = 2;

/// Serialized parameter snapshot: magic `DDFL`, format version, the layout's
/// name/shape table, the raw little-endian f64 payload, the outcome
/// standardizer (dimension, means, standard deviations), and a trailing
/// CRC-32 over everything before it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamVector,
    pub norm: Standardizer,
}

impl Checkpoint {
    pub fn new(params: ParamVector, norm: Standardizer) -> Self {
        Self { params, norm }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let entries = self.params.layout.entries();
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for entry in entries {
            let name = entry.name.as_bytes();
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name);
            out.extend_from_slice(&(entry.shape.len() as u32).to_le_bytes());
            for &dim in &entry.shape {
                out.extend_from_slice(&(dim as u32).to_le_bytes());
            }
        }
        for v in &self.params.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.norm.dim() as u32).to_le_bytes());
        for v in self.norm.mean.iter().chain(self.norm.std.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Checkpoint(format!(
                "file too short ({} bytes)",
                bytes.len()
            )));
        }
        let (head, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("split leaves four bytes"));
        let actual = crc32fast::hash(head);
        if stored != actual {
            return Err(Error::Checkpoint(format!(
                "CRC mismatch (stored {stored:#010x}, computed {actual:#010x})"
            )));
        }
        let mut reader = ByteReader { bytes: head, pos: 0 };
        let magic = reader.take(4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = reader.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let n_entries = reader.u32("entry count")? as usize;
        let mut layout = ParamLayout::new();
        for i in 0..n_entries {
            let name_len = reader.u32("name length")? as usize;
            let name_bytes = reader.take(name_len, "entry name")?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| Error::Checkpoint(format!("entry {i} name is not UTF-8")))?
                .to_string();
            let rank = reader.u32("shape rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(reader.u32("shape dim")? as usize);
            }
            layout.push(name, shape);
        }
        let mut values = Vec::with_capacity(layout.len());
        for _ in 0..layout.len() {
            let raw = reader.take(8, "parameter payload")?;
            values.push(f64::from_le_bytes(raw.try_into().expect("chunk is eight bytes")));
        }
        if reader.pos != head.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the payload",
                head.len() - reader.pos
            )));
        }
        let mut params = ParamVector::zeros(layout);
        params.values = values;
        Ok(Self { params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!("truncated while reading {what}")));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let raw = self.take(4, what)?;
        Ok(u32::from_le_bytes(raw.try_into().expect("chunk is four bytes")))
    }
}

/// Draws a dataset from the task's synthetic generator with the same stream
/// a training run with this seed would use.
pub fn generate_dataset(
    task: TaskKind,
    y_dim: usize,
    x_dim: usize,
    count: usize,
    seed: u64,
) -> Result<Dataset> {
    let gen = task.generator(y_dim, x_dim)?;
    gen.dataset(count, &mut stream_rng(seed, STREAM_DATA))
}

/// Materializes the train/test split the config describes: generator sources
/// draw `train_size` then `test_size` fresh pairs, CSV sources split the file
/// front to back.
pub fn load_split(config: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    config.validate()?;
    let bundle = build_bundle(config)?;
    load_data(config, &bundle)
}

/// Builds the predictor family the configured method trains.
pub fn build_predictor(config: &ExperimentConfig) -> Result<Predictor> {
    match config.method {
        Method::DetTs | Method::DetDfl => {
            Predictor::deterministic(config.x_dim, config.y_dim, &config.hidden)
        }
        Method::GaussTs | Method::GaussRp | Method::GaussSf => Ok(Predictor::Gaussian(
            GaussianPredictor::new(config.x_dim, config.y_dim, &config.hidden)?,
        )),
        Method::DiffTs | Method::DiffRp | Method::DiffSf => {
            let schedule = build_schedule(config.t_steps, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX)?;
            let model = EpsilonModel::new(config.y_dim, config.x_dim, 16, 16, &config.hidden)?;
            Ok(Predictor::Diffusion { model, schedule })
        }
    }
}

/// Per-coordinate affine map between raw outcomes and the unit-scale space
/// the predictors model. Diffusion chains start reverse sampling from a
/// standard normal, so outcome data far from that scale would otherwise fight
/// the prior; fitting the map on the training labels keeps every task near
/// the scale the models expect. The map is stored in the checkpoint so a
/// saved model decodes its samples the same way it was trained.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fits per-coordinate mean and standard deviation. A coordinate with
    /// (near-)zero spread keeps unit scale so decoding stays invertible.
    pub fn fit(ys: &[Vec<f64>]) -> Result<Self> {
        let n = ys.len();
        if n == 0 {
            return Err(Error::InvalidArgument(
                "standardizer needs at least one outcome".into(),
            ));
        }
        let dim = ys[0].len();
        let mut mean = vec![0.0; dim];
        for y in ys {
            if y.len() != dim {
                return Err(Error::dim("standardizer outcome", dim, y.len()));
            }
            for (m, v) in mean.iter_mut().zip(y.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; dim];
        for y in ys {
            for ((s, v), m) in var.iter_mut().zip(y.iter()).zip(mean.iter()) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 1e-8 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Raw outcome to model space.
    pub fn encode(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(self.mean.iter().zip(self.std.iter()))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    /// Model-space outcome back to raw units.
    pub fn decode(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(self.mean.iter().zip(self.std.iter()))
            .map(|(v, (m, s))| m + s * v)
            .collect()
    }
}

/// View of a cost model whose outcome argument is in standardized space.
/// Solving the sample-average problem on encoded samples through this wrapper
/// yields the same decisions as raw samples through the inner cost, and the
/// scaled mixed Hessian carries the decode map's chain rule into the
/// estimators without them knowing about it.
struct StandardizedCost<'a> {
    inner: &'a dyn CostModel,
    norm: &'a Standardizer,
}

impl CostModel for StandardizedCost<'_> {
    fn value(&self, y: &[f64], z: &[f64]) -> f64 {
        self.inner.value(&self.norm.decode(y), z)
    }

    fn grad_z(&self, y: &[f64], z: &[f64]) -> Vec<f64> {
        self.inner.grad_z(&self.norm.decode(y), z)
    }

    fn hess_zz(&self, y: &[f64], z: &[f64]) -> DMatrix<f64> {
        self.inner.hess_zz(&self.norm.decode(y), z)
    }

    fn hess_zy(&self, y: &[f64], z: &[f64]) -> DMatrix<f64> {
        let mut h = self.inner.hess_zy(&self.norm.decode(y), z);
        for (j, s) in self.norm.std.iter().enumerate() {
            h.column_mut(j).scale_mut(*s);
        }
        h
    }

    fn grad_z_interval(&self, y: &[f64], z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        self.inner.grad_z_interval(&self.norm.decode(y), z)
    }

    fn grad_kinks(&self, y: &[f64]) -> Vec<(usize, f64)> {
        self.inner.grad_kinks(&self.norm.decode(y))
    }
}

struct TaskBundle {
    cost: Box<dyn CostModel>,
    cons: AffineConstraints,
    generator: Option<SyntheticGenerator>,
}

fn build_bundle(config: &ExperimentConfig) -> Result<TaskBundle> {
    let (cost, cons) = config.task.decision_problem(config.y_dim)?;
    let generator = match config.data {
        DataSource::Generator => Some(config.task.generator(config.y_dim, config.x_dim)?),
        DataSource::Csv(_) => None,
    };
    Ok(TaskBundle {
        cost,
        cons,
        generator,
    })
}

fn load_data(config: &ExperimentConfig, bundle: &TaskBundle) -> Result<(Dataset, Dataset)> {
    match &config.data {
        DataSource::Generator => {
            let gen = bundle
                .generator
                .as_ref()
                .expect("generator source builds a generator");
            let mut rng = stream_rng(config.seed, STREAM_DATA);
            let train = gen.dataset(config.train_size, &mut rng)?;
            let test = gen.dataset(config.test_size, &mut rng)?;
            Ok((train, test))
        }
        DataSource::Csv(path) => {
            let data = Dataset::load_csv(path)?;
            if data.x_dim() != config.x_dim || data.y_dim() != config.y_dim {
                return Err(Error::Config(format!(
                    "dataset dims ({}, {}) do not match the config ({}, {})",
                    data.x_dim(),
                    data.y_dim(),
                    config.x_dim,
                    config.y_dim
                )));
            }
            let needed = config.train_size + config.test_size;
            if data.len() < needed {
                return Err(Error::Config(format!(
                    "dataset has {} rows but train_size + test_size = {needed}",
                    data.len()
                )));
            }
            let mut train = Dataset::new(config.x_dim, config.y_dim)?;
            let mut test = Dataset::new(config.x_dim, config.y_dim)?;
            for i in 0..config.train_size {
                let (x, y) = data.row(i);
                train.push(x.to_vec(), y.to_vec())?;
            }
            for i in config.train_size..needed {
                let (x, y) = data.row(i);
                test.push(x.to_vec(), y.to_vec())?;
            }
            Ok((train, test))
        }
    }
}

/// Regret baseline: one decision per test instance computed by solving the
/// sample-average problem over many draws from the true generator at that
/// instance's features. Without a generator (CSV data) the pooled training
/// labels stand in for the distribution.
fn oracle_decisions(
    config: &ExperimentConfig,
    bundle: &TaskBundle,
    pool: &[Vec<f64>],
    xs: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    let opts = SolveOptions::with_tol(config.solver_tol);
    let mut rng = stream_rng(config.seed, STREAM_ORACLE);
    match &bundle.generator {
        Some(gen) if gen.x_dim() == 0 => {
            let draws: Vec<Vec<f64>> = (0..config.oracle_draws)
                .map(|_| gen.sample_y_given(&[], &mut rng))
                .collect::<Result<_>>()?;
            let sol = solve_saa(&draws, bundle.cost.as_ref(), &bundle.cons, &opts)?;
            Ok(vec![sol.z.as_slice().to_vec(); xs.len()])
        }
        Some(gen) => xs
            .iter()
            .map(|x| {
                let draws: Vec<Vec<f64>> = (0..config.oracle_draws)
                    .map(|_| gen.sample_y_given(x, &mut rng))
                    .collect::<Result<_>>()?;
                let sol = solve_saa(&draws, bundle.cost.as_ref(), &bundle.cons, &opts)?;
                Ok(sol.z.as_slice().to_vec())
            })
            .collect(),
        None => {
            let sol = solve_saa(pool, bundle.cost.as_ref(), &bundle.cons, &opts)?;
            Ok(vec![sol.z.as_slice().to_vec(); xs.len()])
        }
    }
}

/// Evaluation summary on one dataset.
#[derive(Debug, Clone)]
pub struct Evaluation {
    /// Mean realized decision cost `f(y_label, z_model)`.
    pub task_loss: f64,
    /// Root mean squared error of the predictive mean, pooled over
    /// coordinates.
    pub rmse: f64,
    /// Mean cost gap to the oracle decisions, when an oracle was supplied.
    pub regret: Option<f64>,
    /// Realized decision cost per instance, for win-rate comparisons.
    pub per_instance_cost: Vec<f64>,
}

fn decision_samples(
    predictor: &Predictor,
    params: &[f64],
    x: &[f64],
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    match predictor {
        Predictor::Deterministic { net, .. } => Ok(vec![net.forward(params, x)?]),
        _ => (0..m).map(|_| predictor.sample(params, x, rng)).collect(),
    }
}

fn predictive_mean(
    predictor: &Predictor,
    params: &[f64],
    x: &[f64],
    samples: &[Vec<f64>],
) -> Result<Vec<f64>> {
    match predictor {
        Predictor::Deterministic { .. } => Ok(samples[0].clone()),
        Predictor::Gaussian(pred) => Ok(pred.forward(params, x)?.0),
        Predictor::Diffusion { model, .. } => {
            let mut mean = vec![0.0; model.y_dim()];
            for s in samples {
                for (acc, v) in mean.iter_mut().zip(s.iter()) {
                    *acc += v;
                }
            }
            let scale = 1.0 / samples.len() as f64;
            mean.iter_mut().for_each(|v| *v *= scale);
            Ok(mean)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn evaluate_on(
    predictor: &Predictor,
    params: &[f64],
    cost: &dyn CostModel,
    cons: &AffineConstraints,
    opts: &SolveOptions,
    m: usize,
    data: &Dataset,
    oracle: Option<&[Vec<f64>]>,
    rng: &mut ChaCha8Rng,
) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::InvalidArgument(
            "evaluation dataset is empty".into(),
        ));
    }
    let mut task_total = 0.0;
    let mut sq_err = 0.0;
    let mut regret_total = 0.0;
    let mut per_instance = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let (x, y) = data.row(i);
        let samples = decision_samples(predictor, params, x, m, rng)?;
        let mean = predictive_mean(predictor, params, x, &samples)?;
        let sol = match solve_saa(&samples, cost, cons, opts) {
            Ok(sol) => sol,
            Err(Error::NonConvergence { best, .. }) => best.0,
            Err(e) => return Err(e),
        };
        let realized = cost.value(y, sol.z.as_slice());
        per_instance.push(realized);
        task_total += realized;
        sq_err += mean
            .iter()
            .zip(y.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        if let Some(oracle) = oracle {
            regret_total += realized - cost.value(y, oracle[i].as_slice());
        }
    }
    let n = data.len() as f64;
    Ok(Evaluation {
        task_loss: task_total / n,
        rmse: (sq_err / (n * data.y_dim() as f64)).sqrt(),
        regret: oracle.map(|_| regret_total / n),
        per_instance_cost: per_instance,
    })
}

/// Paired comparison of per-instance decision costs; a win is a strictly
/// lower cost, equal costs count as ties.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WinRate {
    pub wins: usize,
    pub ties: usize,
    pub losses: usize,
}

impl WinRate {
    pub fn rate(&self) -> f64 {
        let total = self.wins + self.ties + self.losses;
        if total == 0 {
            return 0.0;
        }
        self.wins as f64 / total as f64
    }
}

pub fn win_rate(costs: &[f64], baseline: &[f64]) -> Result<WinRate> {
    if costs.len() != baseline.len() {
        return Err(Error::dim("win-rate pairs", costs.len(), baseline.len()));
    }
    let mut rate = WinRate {
        wins: 0,
        ties: 0,
        losses: 0,
    };
    for (a, b) in costs.iter().zip(baseline.iter()) {
        if a < b {
            rate.wins += 1;
        } else if a > b {
            rate.losses += 1;
        } else {
            rate.ties += 1;
        }
    }
    Ok(rate)
}

/// One decision-focused gradient step's estimate: draws `m` outcomes, solves
/// the sample-average problem, and differentiates the realized cost at
/// `y_label` through the KKT system with the method's estimator.
#[allow(clippy::too_many_arguments)]
fn dfl_gradient(
    method: Method,
    predictor: &Predictor,
    params: &[f64],
    x: &[f64],
    y_label: &[f64],
    m: usize,
    cost: &dyn CostModel,
    cons: &AffineConstraints,
    opts: &SolveOptions,
    sampler: &mut TimestepSampler,
    elbo_draws: usize,
    rng: &mut ChaCha8Rng,
) -> Result<GradientEstimate> {
    match (method, predictor) {
        (Method::DetDfl, Predictor::Deterministic { net, layout }) => {
            let samples = vec![net.forward(params, x)?];
            let sol = solve_saa(&samples, cost, cons, opts)?;
            let df_dz = cost.grad_z(y_label, sol.z.as_slice());
            deterministic_grad(net, params, x, &sol, cost, cons, &df_dz, layout)
        }
        (Method::GaussRp, Predictor::Gaussian(pred)) => {
            let eps: Vec<Vec<f64>> = (0..m)
                .map(|_| (0..pred.y_dim()).map(|_| rng.sample(StandardNormal)).collect())
                .collect();
            let samples: Vec<Vec<f64>> = eps
                .iter()
                .map(|e| pred.sample_with(params, x, e))
                .collect::<Result<_>>()?;
            let sol = solve_saa(&samples, cost, cons, opts)?;
            let df_dz = cost.grad_z(y_label, sol.z.as_slice());
            gauss_reparam_grad(pred, params, x, &eps, &sol, cost, cons, &df_dz)
        }
        (Method::GaussSf, Predictor::Gaussian(pred)) => {
            let samples: Vec<Vec<f64>> = (0..m)
                .map(|_| pred.sample(params, x, rng))
                .collect::<Result<_>>()?;
            let sol = solve_saa(&samples, cost, cons, opts)?;
            let df_dz = cost.grad_z(y_label, sol.z.as_slice());
            gauss_score_grad(pred, params, x, &samples, &sol, cost, cons, &df_dz)
        }
        (Method::DiffRp, Predictor::Diffusion { model, schedule }) => {
            let trajectories: Vec<Trajectory> = (0..m)
                .map(|_| {
                    let noises = draw_noises(model.y_dim(), schedule.t_steps(), rng);
                    reverse_sample(model, params, x, schedule, noises)
                })
                .collect::<Result<_>>()?;
            let samples: Vec<Vec<f64>> =
                trajectories.iter().map(|t| t.y0().to_vec()).collect();
            let sol = solve_saa(&samples, cost, cons, opts)?;
            let df_dz = cost.grad_z(y_label, sol.z.as_slice());
            diff_reparam_grad(
                model,
                params,
                schedule,
                x,
                &trajectories,
                &sol,
                cost,
                cons,
                &df_dz,
            )
        }
        (Method::DiffSf, Predictor::Diffusion { model, schedule }) => {
            let samples: Vec<Vec<f64>> = (0..m)
                .map(|_| sample_y0(model, params, x, schedule, rng))
                .collect::<Result<_>>()?;
            let sol = solve_saa(&samples, cost, cons, opts)?;
            let df_dz = cost.grad_z(y_label, sol.z.as_slice());
            diff_score_grad(
                model, params, schedule, x, &samples, &sol, cost, cons, &df_dz, sampler,
                elbo_draws, rng,
            )
        }
        (method, predictor) => Err(Error::InvalidArgument(format!(
            "method `{method}` cannot train a {} predictor",
            predictor.family()
        ))),
    }
}

/// Final checkpoint and the per-epoch metric series of one training run.
#[derive(Debug, Clone)]
pub struct TrainResult {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
    /// Per-instance test costs at the final parameters, for paired
    /// comparisons across runs.
    pub final_test_costs: Vec<f64>,
}

/// Runs the configured training loop. Deterministic per `(config, seed)`
/// except for the informational wall-time column.
///
/// Implicit decision gradients are only defined at a converged KKT point, so
/// a training instance whose lower-level solve hits the iteration limit
/// contributes just its prediction-loss term for that step; evaluation
/// instead falls back to the solver's best feasible iterate, which is enough
/// to realize a cost.
pub fn train(config: &ExperimentConfig) -> Result<TrainResult> {
    config.validate()?;
    let start = Instant::now();
    let bundle = build_bundle(config)?;
    let (train_data, test_data) = load_data(config, &bundle)?;
    let predictor = build_predictor(config)?;
    let mut params = predictor.init_params(&mut stream_rng(config.seed, STREAM_INIT));
    let opts = SolveOptions::with_tol(config.solver_tol);
    let oracle = oracle_decisions(config, &bundle, train_data.ys(), test_data.xs())?;
    let mut adam = Adam::new(config.lr, params.len());
    let mut sampler = TimestepSampler::new(config.t_steps);
    let mut train_rng = stream_rng(config.seed, STREAM_TRAIN);
    let reg_kind = config.method.prediction_loss();

    let mut metrics = Vec::with_capacity(config.epochs + 1);
    let mut final_costs = Vec::new();
    let mut push_row = |epoch: usize,
                        params: &ParamVector,
                        final_costs: &mut Vec<f64>|
     -> Result<()> {
        let test_eval = evaluate_on(
            &predictor,
            &params.values,
            bundle.cost.as_ref(),
            &bundle.cons,
            &opts,
            config.samples,
            &test_data,
            Some(&oracle),
            &mut stream_rng(config.seed, STREAM_EVAL),
        )?;
        let train_eval = evaluate_on(
            &predictor,
            &params.values,
            bundle.cost.as_ref(),
            &bundle.cons,
            &opts,
            config.samples,
            &train_data,
            None,
            &mut stream_rng(config.seed, STREAM_EVAL),
        )?;
        *final_costs = test_eval.per_instance_cost;
        metrics.push(MetricsRow {
            epoch,
            train_task_loss: train_eval.task_loss,
            test_task_loss: test_eval.task_loss,
            test_rmse: test_eval.rmse,
            regret: test_eval.regret.expect("test evaluation has an oracle"),
            wall_time_s: start.elapsed().as_secs_f64(),
        });
        Ok(())
    };

    push_row(0, &params, &mut final_costs)?;

    let mut step = 0usize;
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..train_data.len()).collect();
        order.shuffle(&mut train_rng);
        if config.method.is_dfl() {
            for &i in &order {
                step += 1;
                let (x, y) = train_data.row(i);
                let mut grad = match dfl_gradient(
                    config.method,
                    &predictor,
                    &params.values,
                    x,
                    y,
                    config.samples,
                    bundle.cost.as_ref(),
                    &bundle.cons,
                    &opts,
                    &mut sampler,
                    config.elbo_draws,
                    &mut train_rng,
                ) {
                    Ok(out) => out.grad,
                    Err(Error::NonConvergence { .. }) => {
                        ParamVector::zeros(predictor.layout().clone())
                    }
                    Err(e) => {
                        return Err(Error::TrainingStep {
                            step,
                            source: Box::new(e),
                        })
                    }
                };
                if config.lambda_reg > 0.0 {
                    let (_, reg) = two_stage_loss(
                        reg_kind,
                        &predictor,
                        &params.values,
                        x,
                        y,
                        &mut train_rng,
                    )
                    .map_err(|e| Error::TrainingStep {
                        step,
                        source: Box::new(e),
                    })?;
                    for (g, r) in grad.values.iter_mut().zip(reg.values.iter()) {
                        *g += config.lambda_reg * r;
                    }
                }
                if grad.values.iter().any(|g| !g.is_finite()) {
                    return Err(Error::NonFinite {
                        context: format!("gradient at training step {step}"),
                    });
                }
                clip_to_norm(&mut grad.values, config.clip_norm);
                adam.step(&mut params.values, &grad.values);
            }
        } else {
            for batch in order.chunks(config.batch_size) {
                step += 1;
                let xs: Vec<Vec<f64>> =
                    batch.iter().map(|&i| train_data.row(i).0.to_vec()).collect();
                let ys: Vec<Vec<f64>> =
                    batch.iter().map(|&i| train_data.row(i).1.to_vec()).collect();
                let (loss, grad) = two_stage_batch(
                    reg_kind,
                    &predictor,
                    &params.values,
                    &xs,
                    &ys,
                    &mut train_rng,
                )
                .map_err(|e| Error::TrainingStep {
                    step,
                    source: Box::new(e),
                })?;
                if !loss.is_finite() || grad.values.iter().any(|g| !g.is_finite()) {
                    return Err(Error::NonFinite {
                        context: format!("loss at training step {step}"),
                    });
                }
                let mut grad = grad;
                clip_to_norm(&mut grad.values, config.clip_norm);
                adam.step(&mut params.values, &grad.values);
            }
        }
        push_row(epoch, &params, &mut final_costs)?;
    }

    Ok(TrainResult {
        checkpoint: Checkpoint::new(params),
        metrics,
        final_test_costs: final_costs,
    })
}

/// Evaluation of a stored checkpoint: sample-based decision quality, RMSE of
/// the predictive mean, and regret against the generator oracle (pooled
/// labels when the data source is a CSV file).
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub task_loss: f64,
    pub rmse: f64,
    pub regret: f64,
    pub per_instance_cost: Vec<f64>,
}

pub fn evaluate(
    checkpoint: &Checkpoint,
    config: &ExperimentConfig,
    test: &Dataset,
) -> Result<EvalReport> {
    config.validate()?;
    let predictor = build_predictor(config)?;
    if checkpoint.params.layout != *predictor.layout() {
        return Err(Error::dim(
            "checkpoint parameters",
            predictor.layout().len(),
            checkpoint.params.len(),
        ));
    }
    if test.x_dim() != config.x_dim || test.y_dim() != config.y_dim {
        return Err(Error::dim("evaluation dataset labels", config.y_dim, test.y_dim()));
    }
    let bundle = build_bundle(config)?;
    let opts = SolveOptions::with_tol(config.solver_tol);
    let oracle = oracle_decisions(config, &bundle, test.ys(), test.xs())?;
    let eval = evaluate_on(
        &predictor,
        &checkpoint.params.values,
        bundle.cost.as_ref(),
        &bundle.cons,
        &opts,
        config.samples,
        test,
        Some(&oracle),
        &mut stream_rng(config.seed, STREAM_EVAL),
    )?;
    Ok(EvalReport {
        task_loss: eval.task_loss,
        rmse: eval.rmse,
        regret: eval.regret.expect("oracle decisions were supplied"),
        per_instance_cost: eval.per_instance_cost,
    })
}

/// One finite-difference comparison from the gradient-correctness suite.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: &'static str,
    pub rel_err: f64,
    pub tol: f64,
}

impl GradCheck {
    pub fn pass(&self) -> bool {
        self.rel_err.is_finite() && self.rel_err <= self.tol
    }
}

const GRADCHECK_TOL: f64 = 1e-4;

fn max_rel_err(got: &[f64], want: &[f64], floor: f64) -> f64 {
    let denom = want.iter().fold(floor, |m, v| m.max(v.abs()));
    got.iter()
        .zip(want.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0_f64, f64::max)
        / denom
}

fn jitter_zeros(params: &mut ParamVector, rng: &mut ChaCha8Rng) {
    for v in params.values.iter_mut() {
        if *v == 0.0 {
            *v = rng.random_range(-0.3..0.3);
        }
    }
}

/// End-to-end finite-difference checks for every pathwise estimator on the
/// factory task with frozen noise: the analytic gradient of
/// `f(y_label, z*(theta))` must match central differences. The deterministic
/// single-prediction entry sits at a fully active corner, where both sides
/// are zero up to solver noise, so its error is measured on an absolute
/// scale.
pub fn gradcheck_suite() -> Result<Vec<GradCheck>> {
    Ok(vec![
        diff_rp_check("diff-rp-t1", 1, 3)?,
        diff_rp_check("diff-rp-t3", 3, 12)?,
        gauss_rp_check()?,
        deterministic_check()?,
    ])
}

fn diff_rp_check(name: &'static str, t_steps: usize, seed: u64) -> Result<GradCheck> {
    let task = FactoryTask::new(1)?;
    let cons = task.constraints();
    let sched = build_schedule(t_steps, 1e-2, 5e-2)?;
    let model = EpsilonModel::new(1, 0, 4, 4, &[6])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = model.init_params(&mut rng);
    jitter_zeros(&mut params, &mut rng);
    let noises: Vec<Vec<Vec<f64>>> = (0..3)
        .map(|_| draw_noises(1, t_steps, &mut rng))
        .collect();
    let y_label = [0.8];
    let opts = SolveOptions::with_tol(1e-10);

    let objective = |theta: &ParamVector| -> Result<f64> {
        let samples: Vec<Vec<f64>> = noises
            .iter()
            .map(|n| {
                reverse_sample(&model, &theta.values, &[], &sched, n.clone())
                    .map(|t| t.y0().to_vec())
            })
            .collect::<Result<_>>()?;
        let sol = solve_saa(&samples, &task, &cons, &opts)?;
        Ok(task.value(&y_label, sol.z.as_slice()))
    };
    let fd = fd_grad(objective, &params, END_TO_END_FD_STEP)?;

    let trajectories: Vec<Trajectory> = noises
        .iter()
        .map(|n| reverse_sample(&model, &params.values, &[], &sched, n.clone()))
        .collect::<Result<_>>()?;
    let samples: Vec<Vec<f64>> = trajectories.iter().map(|t| t.y0().to_vec()).collect();
    let sol = solve_saa(&samples, &task, &cons, &opts)?;
    let df_dz = task.grad_z(&y_label, sol.z.as_slice());
    let grad = diff_reparam_grad(
        &model,
        &params.values,
        &sched,
        &[],
        &trajectories,
        &sol,
        &task,
        &cons,
        &df_dz,
    )?;
    Ok(GradCheck {
        name,
        rel_err: max_rel_err(&grad.grad.values, &fd.values, 1e-12),
        tol: GRADCHECK_TOL,
    })
}

fn gauss_rp_check() -> Result<GradCheck> {
    let task = FactoryTask::new(2)?;
    let cons = task.constraints();
    let pred = GaussianPredictor::new(0, 2, &[6])?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut params = pred.init_params(&mut rng);
    jitter_zeros(&mut params, &mut rng);
    let eps: Vec<Vec<f64>> = (0..6)
        .map(|_| (0..2).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let y_label = [0.5, -0.4];
    let opts = SolveOptions::with_tol(1e-10);

    let objective = |theta: &ParamVector| -> Result<f64> {
        let samples: Vec<Vec<f64>> = eps
            .iter()
            .map(|e| pred.sample_with(&theta.values, &[], e))
            .collect::<Result<_>>()?;
        let sol = solve_saa(&samples, &task, &cons, &opts)?;
        Ok(task.value(&y_label, sol.z.as_slice()))
    };
    let fd = fd_grad(objective, &params, END_TO_END_FD_STEP)?;

    let samples: Vec<Vec<f64>> = eps
        .iter()
        .map(|e| pred.sample_with(&params.values, &[], e))
        .collect::<Result<_>>()?;
    let sol = solve_saa(&samples, &task, &cons, &opts)?;
    let df_dz = task.grad_z(&y_label, sol.z.as_slice());
    let grad = gauss_reparam_grad(&pred, &params.values, &[], &eps, &sol, &task, &cons, &df_dz)?;
    Ok(GradCheck {
        name: "gauss-rp",
        rel_err: max_rel_err(&grad.grad.values, &fd.values, 1e-12),
        tol: GRADCHECK_TOL,
    })
}

fn deterministic_check() -> Result<GradCheck> {
    let task = FactoryTask::new(2)?;
    let cons = task.constraints();
    let mut layout = ParamLayout::new();
    let net = DenseNet::new(&mut layout, "net", &[0, 6, 2], Activation::Silu)?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut params = ParamVector::zeros(layout.clone());
    net.init(&mut params.values, &mut rng);
    jitter_zeros(&mut params, &mut rng);
    let y_label = [0.5, -0.4];
    let opts = SolveOptions::with_tol(1e-10);

    let objective = |theta: &ParamVector| -> Result<f64> {
        let samples = vec![net.forward(&theta.values, &[])?];
        let sol = solve_saa(&samples, &task, &cons, &opts)?;
        Ok(task.value(&y_label, sol.z.as_slice()))
    };
    let fd = fd_grad(objective, &params, END_TO_END_FD_STEP)?;

    let samples = vec![net.forward(&params.values, &[])?];
    let sol = solve_saa(&samples, &task, &cons, &opts)?;
    let df_dz = task.grad_z(&y_label, sol.z.as_slice());
    let grad = deterministic_grad(
        &net,
        &params.values,
        &[],
        &sol,
        &task,
        &cons,
        &df_dz,
        &layout,
    )?;
    Ok(GradCheck {
        name: "deterministic",
        rel_err: max_rel_err(&grad.grad.values, &fd.values, 1.0),
        tol: GRADCHECK_TOL,
    })
}

/// Cosine similarity between the Gaussian reparameterization and score
/// gradients computed on one shared batch of `n_samples` draws from a 2-D
/// factory instance.
pub fn gaussian_agreement_cosine(n_samples: usize, seed: u64) -> Result<f64> {
    let task = FactoryTask::new(2)?;
    let cons = task.constraints();
    let pred = GaussianPredictor::new(0, 2, &[8])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = pred.init_params(&mut rng);
    jitter_zeros(&mut params, &mut rng);
    let eps: Vec<Vec<f64>> = (0..n_samples)
        .map(|_| (0..2).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let samples: Vec<Vec<f64>> = eps
        .iter()
        .map(|e| pred.sample_with(&params.values, &[], e))
        .collect::<Result<_>>()?;
    let opts = SolveOptions::default();
    let sol = solve_saa(&samples, &task, &cons, &opts)?;
    let y_label = [0.6, -0.8];
    let df_dz = task.grad_z(&y_label, sol.z.as_slice());
    let rp = gauss_reparam_grad(&pred, &params.values, &[], &eps, &sol, &task, &cons, &df_dz)?;
    let sf = gauss_score_grad(&pred, &params.values, &[], &samples, &sol, &task, &cons, &df_dz)?;
    cosine(&rp.grad.values, &sf.grad.values)
}

/// Fits a small unconditional diffusion model to iid scalar-mixture outcomes
/// by plain denoising training and returns it with its parameters.
fn fitted_mixture_diffusion(
    mixture: &MixtureOfGaussians,
    dim: usize,
    schedule: crate::diffusion::NoiseSchedule,
    hidden: &[usize],
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<(Predictor, ParamVector)> {
    let model = EpsilonModel::new(dim, 0, 16, 16, hidden)?;
    let pred = Predictor::Diffusion { model, schedule };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = pred.init_params(&mut rng);
    let mut adam = Adam::new(lr, params.len());
    let batch = 32;
    let xs = vec![Vec::new(); batch];
    for _ in 0..steps {
        let ys: Vec<Vec<f64>> = (0..batch)
            .map(|_| mixture.sample_iid(dim, &mut rng))
            .collect::<Result<_>>()?;
        let (_, grad) = two_stage_batch(
            TwoStageLoss::Denoising,
            &pred,
            &params.values,
            &xs,
            &ys,
            &mut rng,
        )?;
        adam.step(&mut params.values, &grad.values);
    }
    Ok((pred, params))
}

/// Cosine similarity between the averaged diffusion reparameterization and
/// score-function gradients on one factory instance of the given dimension.
/// Both estimators see the same per-repetition sample batch and decision.
///
/// The model is denoising-fitted on Gaussian outcome data first: the
/// score-function path reads the model score off the simplified-loss
/// gradient, a surrogate that tracks the true score only near the denoising
/// optimum, and a small net reaches that regime on Gaussian targets.
pub fn diffusion_agreement_cosine(dim: usize, reps: usize, seed: u64) -> Result<f64> {
    let outcomes = MixtureOfGaussians::scalar(&[(1.0, 0.2, 0.5)])?;
    let schedule = build_schedule(50, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX)?;
    let (pred, params) =
        fitted_mixture_diffusion(&outcomes, dim, schedule, &[24], 2500, 2e-3, seed)?;
    let (model, schedule) = match &pred {
        Predictor::Diffusion { model, schedule } => (model, schedule),
        _ => unreachable!("fitted predictor is diffusion"),
    };
    let task = FactoryTask::new(dim)?;
    let cons = task.constraints();
    let opts = SolveOptions::default();
    let y_label: Vec<f64> = (0..dim).map(|j| if j % 2 == 0 { 0.9 } else { -0.6 }).collect();
    let m = 32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut sampler = TimestepSampler::new(schedule.t_steps());
    let mut rp_mean = vec![0.0; params.len()];
    let mut sf_mean = vec![0.0; params.len()];
    for _ in 0..reps {
        let trajectories: Vec<Trajectory> = (0..m)
            .map(|_| {
                let noises = draw_noises(dim, schedule.t_steps(), &mut rng);
                reverse_sample(model, &params.values, &[], schedule, noises)
            })
            .collect::<Result<_>>()?;
        let samples: Vec<Vec<f64>> = trajectories.iter().map(|t| t.y0().to_vec()).collect();
        let sol = solve_saa(&samples, &task, &cons, &opts)?;
        let df_dz = task.grad_z(&y_label, sol.z.as_slice());
        let rp = diff_reparam_grad(
            model,
            &params.values,
            schedule,
            &[],
            &trajectories,
            &sol,
            &task,
            &cons,
            &df_dz,
        )?;
        let sf = diff_score_grad(
            model,
            &params.values,
            schedule,
            &[],
            &samples,
            &sol,
            &task,
            &cons,
            &df_dz,
            &mut sampler,
            8,
            &mut rng,
        )?;
        for (acc, g) in rp_mean.iter_mut().zip(rp.grad.values.iter()) {
            *acc += g;
        }
        for (acc, g) in sf_mean.iter_mut().zip(sf.grad.values.iter()) {
            *acc += g;
        }
    }
    cosine(&rp_mean, &sf_mean)
}

/// Empirical covariance traces of the score-function gradient under the
/// importance-sampled timestep distribution versus uniform timesteps, on a
/// frozen fitted model and a frozen decision. Returns `(is, uniform)`.
///
/// The frozen checkpoint is a scalar demand-mixture model under a schedule
/// whose terminal signal level is near zero, so per-timestep gradient norms
/// vary strongly and the recorded history has real structure to exploit.
pub fn timestep_variance_traces(draws: usize, seed: u64) -> Result<(f64, f64)> {
    let demand =
        MixtureOfGaussians::scalar(&[(0.7, 8.0, 0.25), (0.15, 4.0, 0.15), (0.15, 12.0, 0.15)])?;
    let schedule = build_schedule(50, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX)?;
    let (pred, params) =
        fitted_mixture_diffusion(&demand, 1, schedule, &[24], 1600, 2e-3, seed)?;
    let (model, schedule) = match &pred {
        Predictor::Diffusion { model, schedule } => (model, schedule),
        _ => unreachable!("fitted predictor is diffusion"),
    };
    let task = InventoryTask::new(0.1, 0.05, 2.0, 0.05, 0.5, 0.05, 20.0)?;
    let cons = task.constraints();
    let opts = SolveOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7ace);
    let m = 8;
    let samples: Vec<Vec<f64>> = (0..m)
        .map(|_| sample_y0(model, &params.values, &[], schedule, &mut rng))
        .collect::<Result<_>>()?;
    let sol = solve_saa(&samples, &task, &cons, &opts)?;
    let y_label = [9.0];
    let df_dz = task.grad_z(&y_label, sol.z.as_slice());
    let weights = score_weights(&samples, &sol, &task, &cons, &df_dz)?;

    let mut sampler = TimestepSampler::new(schedule.t_steps());
    for _ in 0..200 {
        diff_score_grad_with_weights(
            model,
            &params.values,
            schedule,
            &[],
            &samples,
            &weights,
            &mut sampler,
            1,
            &mut rng,
        )?;
    }

    let p = params.len();
    let mut is_stats = VarianceAccumulator::new(p);
    for _ in 0..draws {
        let est = diff_score_grad_with_weights(
            model,
            &params.values,
            schedule,
            &[],
            &samples,
            &weights,
            &mut sampler,
            1,
            &mut rng,
        )?;
        is_stats.push(&est.grad.values);
    }

    let uniform = vec![1.0 / schedule.t_steps() as f64; schedule.t_steps()];
    let m_f = samples.len() as f64;
    let mut uni_stats = VarianceAccumulator::new(p);
    let mut grad = vec![0.0; p];
    for _ in 0..draws {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (y, w) in samples.iter().zip(weights.iter()) {
            let (g, _) = elbo_grad_with_probs(
                model,
                &params.values,
                schedule,
                y,
                &[],
                &uniform,
                1,
                &mut rng,
            )?;
            let scale = -w / m_f;
            for (acc, gi) in grad.iter_mut().zip(g.iter()) {
                *acc += scale * gi;
            }
        }
        uni_stats.push(&grad);
    }

    Ok((is_stats.trace(), uni_stats.trace()))
}

struct VarianceAccumulator {
    n: usize,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl VarianceAccumulator {
    fn new(dim: usize) -> Self {
        Self {
            n: 0,
            sum: vec![0.0; dim],
            sum_sq: vec![0.0; dim],
        }
    }

    fn push(&mut self, v: &[f64]) {
        self.n += 1;
        for ((s, q), x) in self.sum.iter_mut().zip(self.sum_sq.iter_mut()).zip(v.iter()) {
            *s += x;
            *q += x * x;
        }
    }

    /// Sum of per-coordinate unbiased sample variances.
    fn trace(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let n = self.n as f64;
        self.sum
            .iter()
            .zip(self.sum_sq.iter())
            .map(|(s, q)| (q - s * s / n) / (n - 1.0))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(method: Method) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(TaskKind::Factory, method);
        cfg.y_dim = 1;
        cfg.samples = 3;
        cfg.t_steps = 4;
        cfg.hidden = vec![8];
        cfg.epochs = 1;
        cfg.train_size = 8;
        cfg.test_size = 4;
        cfg.oracle_draws = 100;
        cfg.seed = 5;
        cfg
    }

    fn rows_match_ignoring_wall_time(a: &[MetricsRow], b: &[MetricsRow]) -> bool {
        a.len() == b.len()
            && a.iter().zip(b.iter()).all(|(r, s)| {
                r.epoch == s.epoch
                    && r.train_task_loss == s.train_task_loss
                    && r.test_task_loss == s.test_task_loss
                    && r.test_rmse == s.test_rmse
                    && r.regret == s.regret
            })
    }

    #[test]
    fn adam_first_step_matches_the_closed_form() {
        let mut adam = Adam::new(0.1, 2);
        let mut params = vec![1.0, -2.0];
        let grad = [0.5, -4.0];
        adam.step(&mut params, &grad);
        for (p, (p0, g)) in params.iter().zip([1.0, -2.0].iter().zip(grad.iter())) {
            let want = p0 - 0.1 * g / (g.abs() + 1e-8);
            assert!((p - want).abs() < 1e-12, "got {p}, want {want}");
        }
    }

    #[test]
    fn task_and_method_names_round_trip() {
        for task in TaskKind::ALL {
            assert_eq!(task.to_string().parse::<TaskKind>().unwrap(), task);
        }
        for method in Method::ALL {
            assert_eq!(method.to_string().parse::<Method>().unwrap(), method);
        }
        assert!("plasma".parse::<TaskKind>().is_err());
        assert!("diff-zz".parse::<Method>().is_err());
    }

    #[test]
    fn config_defaults_follow_task_and_method() {
        let cfg = ExperimentConfig::new(TaskKind::Portfolio, Method::DiffSf);
        assert_eq!(cfg.samples, 50);
        assert_eq!(cfg.y_dim, 5);
        assert_eq!(cfg.lr, 8e-6);
        let cfg = ExperimentConfig::new(TaskKind::Power, Method::DiffRp);
        assert_eq!(cfg.samples, 25);
        assert_eq!(cfg.y_dim, 24);
        assert_eq!(cfg.lr, 1e-5);
        let cfg = ExperimentConfig::new(TaskKind::Factory, Method::GaussTs);
        assert_eq!(cfg.samples, 10);
        assert_eq!(cfg.lr, 1e-4);
    }

    #[test]
    fn config_kv_text_round_trips_exactly() {
        let mut cfg = ExperimentConfig::new(TaskKind::Inventory, Method::DiffSf);
        cfg.lr = 3.7e-5;
        cfg.lambda_reg = 1.0 / 3.0;
        cfg.solver_tol = 2.5e-9;
        cfg.hidden = vec![48, 32, 16];
        cfg.seed = 99;
        cfg.data = DataSource::Csv(PathBuf::from("/tmp/demand.csv"));
        let parsed = ExperimentConfig::from_kv_text(&cfg.to_kv_text()).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn config_overrides_apply_in_any_order() {
        let text = "samples = 7\nlr = 2e-3\ntask = power\nmethod = gauss-sf\n";
        let cfg = ExperimentConfig::from_kv_text(text).unwrap();
        assert_eq!(cfg.task, TaskKind::Power);
        assert_eq!(cfg.method, Method::GaussSf);
        assert_eq!(cfg.samples, 7);
        assert_eq!(cfg.lr, 2e-3);
        assert_eq!(cfg.y_dim, 24);
    }

    #[test]
    fn config_ignores_comments_and_blank_lines() {
        let text = "# experiment\n\ntask = factory # inline note\n\n  epochs = 3\n";
        let cfg = ExperimentConfig::from_kv_text(text).unwrap();
        assert_eq!(cfg.task, TaskKind::Factory);
        assert_eq!(cfg.epochs, 3);
    }

    #[test]
    fn config_rejects_unknown_keys_and_malformed_lines() {
        assert!(matches!(
            ExperimentConfig::from_kv_text("warp = 9\n"),
            Err(Error::Config(_))
        ));
        let err = ExperimentConfig::from_kv_text("task = factory\nno separator\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "got {err}");
        assert!(ExperimentConfig::from_kv_text("samples = many\n").is_err());
    }

    #[test]
    fn config_validation_catches_bad_fields() {
        let mut cfg = ExperimentConfig::new(TaskKind::Factory, Method::DiffRp);
        cfg.samples = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::new(TaskKind::Factory, Method::DiffRp);
        cfg.lr = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::new(TaskKind::Inventory, Method::DetTs);
        cfg.y_dim = 2;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::new(TaskKind::Factory, Method::DiffRp);
        cfg.clip_norm = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn gradient_clipping_rescales_only_oversized_gradients() {
        let mut small = vec![0.3, -0.4];
        clip_to_norm(&mut small, 1.0);
        assert_eq!(small, vec![0.3, -0.4]);
        let mut large = vec![30.0, -40.0];
        clip_to_norm(&mut large, 1.0);
        assert!((large[0] - 0.6).abs() < 1e-15);
        assert!((large[1] + 0.8).abs() < 1e-15);
    }

    #[test]
    fn metrics_csv_round_trips_exactly() {
        let rows = vec![
            MetricsRow {
                epoch: 0,
                train_task_loss: 1.0 / 3.0,
                test_task_loss: -2.75e-11,
                test_rmse: 1.4142135623730951,
                regret: 3.0e-300,
                wall_time_s: 0.125,
            },
            MetricsRow {
                epoch: 2,
                train_task_loss: -7.2,
                test_task_loss: 0.0,
                test_rmse: 9.9e280,
                regret: -1.0e-17,
                wall_time_s: 12.5,
            },
        ];
        let text = metrics_to_csv(&rows);
        let parsed = metrics_from_csv(&text).unwrap();
        assert_eq!(parsed, rows);
    }

    #[test]
    fn metrics_csv_rejects_header_and_epoch_violations() {
        assert!(metrics_from_csv("epoch,loss\n").is_err());
        let bad_order = format!(
            "{METRICS_HEADER}\n1,0.0,0.0,0.0,0.0,0.0\n1,0.0,0.0,0.0,0.0,0.0\n"
        );
        assert!(metrics_from_csv(&bad_order).is_err());
        let non_finite = format!("{METRICS_HEADER}\n0,inf,0.0,0.0,0.0,0.0\n");
        assert!(matches!(
            metrics_from_csv(&non_finite),
            Err(Error::NonFinite { .. })
        ));
        let short = format!("{METRICS_HEADER}\n0,1.0,2.0\n");
        assert!(metrics_from_csv(&short).is_err());
    }

    #[test]
    fn checkpoint_round_trips_byte_identically() {
        let mut layout = ParamLayout::new();
        layout.push("net.w0", vec![3, 2]);
        layout.push("net.b0", vec![3]);
        let mut params = ParamVector::zeros(layout);
        for (i, v) in params.values.iter_mut().enumerate() {
            *v = (i as f64 + 1.0) * 0.37 - 1.1;
        }
        let ckpt = Checkpoint::new(params);
        let bytes = ckpt.to_bytes();
        let loaded = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(loaded, ckpt);
        assert_eq!(loaded.to_bytes(), bytes);
    }

    #[test]
    fn checkpoint_rejects_corrupted_bytes() {
        let mut layout = ParamLayout::new();
        layout.push("w", vec![2]);
        let mut params = ParamVector::zeros(layout);
        params.values = vec![0.5, -0.5];
        let good = Checkpoint::new(params).to_bytes();

        let mut flipped = good.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0xff;
        assert!(matches!(
            Checkpoint::from_bytes(&flipped),
            Err(Error::Checkpoint(_))
        ));

        assert!(Checkpoint::from_bytes(&good[..good.len() - 6]).is_err());
        assert!(Checkpoint::from_bytes(&[]).is_err());

        let reseal = |mut head: Vec<u8>| {
            let crc = crc32fast::hash(&head);
            head.extend_from_slice(&crc.to_le_bytes());
            head
        };
        let mut bad_magic = good[..good.len() - 4].to_vec();
        bad_magic[0] = b'X';
        let err = Checkpoint::from_bytes(&reseal(bad_magic)).unwrap_err();
        assert!(err.to_string().contains("magic"), "got {err}");

        let mut bad_version = good[..good.len() - 4].to_vec();
        bad_version[4] = 9;
        let err = Checkpoint::from_bytes(&reseal(bad_version)).unwrap_err();
        assert!(err.to_string().contains("version"), "got {err}");

        let mut padded = good[..good.len() - 4].to_vec();
        padded.extend_from_slice(&[0u8; 3]);
        assert!(Checkpoint::from_bytes(&reseal(padded)).is_err());
    }

    #[test]
    fn zero_epochs_produce_only_the_initial_evaluation() {
        let mut cfg = tiny_config(Method::DetTs);
        cfg.epochs = 0;
        let result = train(&cfg).unwrap();
        assert_eq!(result.metrics.len(), 1);
        assert_eq!(result.metrics[0].epoch, 0);
    }

    #[test]
    fn identical_config_and_seed_reproduce_the_run() {
        let cfg = tiny_config(Method::DiffSf);
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        assert!(rows_match_ignoring_wall_time(&a.metrics, &b.metrics));
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
        assert_eq!(a.final_test_costs, b.final_test_costs);

        let mut other = cfg.clone();
        other.seed = 6;
        let c = train(&other).unwrap();
        assert!(!rows_match_ignoring_wall_time(&a.metrics, &c.metrics));
    }

    #[test]
    fn every_method_trains_at_tiny_scale() {
        for method in Method::ALL {
            let cfg = tiny_config(method);
            let result = train(&cfg).unwrap();
            assert_eq!(result.metrics.len(), 2, "{method}");
            for row in &result.metrics {
                for v in [
                    row.train_task_loss,
                    row.test_task_loss,
                    row.test_rmse,
                    row.regret,
                ] {
                    assert!(v.is_finite(), "{method} produced a non-finite metric");
                }
            }
        }
    }

    #[test]
    fn regret_is_small_when_decisions_come_from_the_true_generator() {
        let mut cfg = ExperimentConfig::new(TaskKind::Factory, Method::DiffSf);
        cfg.y_dim = 1;
        cfg.oracle_draws = 10_000;
        let bundle = build_bundle(&cfg).unwrap();
        let gen = bundle.generator.as_ref().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let labels: Vec<Vec<f64>> = (0..256)
            .map(|_| gen.sample_y_given(&[], &mut rng).unwrap())
            .collect();
        let xs = vec![Vec::new(); labels.len()];
        let oracle = oracle_decisions(&cfg, &bundle, &[], &xs).unwrap();

        let opts = SolveOptions::with_tol(cfg.solver_tol);
        let model_draws: Vec<Vec<f64>> = (0..2000)
            .map(|_| gen.sample_y_given(&[], &mut rng).unwrap())
            .collect();
        let sol = solve_saa(&model_draws, bundle.cost.as_ref(), &bundle.cons, &opts).unwrap();

        let regret: f64 = labels
            .iter()
            .zip(oracle.iter())
            .map(|(y, zo)| {
                bundle.cost.value(y, sol.z.as_slice()) - bundle.cost.value(y, zo.as_slice())
            })
            .sum::<f64>()
            / labels.len() as f64;
        assert!(regret.abs() <= 1e-2, "self-oracle regret {regret}");
    }

    #[test]
    fn constant_prediction_rmse_equals_the_label_standard_deviation() {
        let mut cfg = tiny_config(Method::DetTs);
        cfg.oracle_draws = 100;
        let predictor = build_predictor(&cfg).unwrap();
        let checkpoint = Checkpoint::new(ParamVector::zeros(predictor.layout().clone()));
        let mut test = Dataset::new(0, 1).unwrap();
        for i in 0..8 {
            let y = if i % 2 == 0 { 1.5 } else { -1.5 };
            test.push(Vec::new(), vec![y]).unwrap();
        }
        let report = evaluate(&checkpoint, &cfg, &test).unwrap();
        assert!(
            (report.rmse - 1.5).abs() < 1e-12,
            "rmse {} differs from the label std 1.5",
            report.rmse
        );
    }

    #[test]
    fn win_rate_counts_wins_ties_and_losses() {
        let costs = [1.0, 2.0, 3.0];
        let rate = win_rate(&costs, &costs).unwrap();
        assert_eq!(
            rate,
            WinRate {
                wins: 0,
                ties: 3,
                losses: 0
            }
        );
        let rate = win_rate(&[1.0, 5.0, 2.0], &[2.0, 5.0, 1.0]).unwrap();
        assert_eq!(rate.wins, 1);
        assert_eq!(rate.ties, 1);
        assert_eq!(rate.losses, 1);
        assert!((rate.rate() - 1.0 / 3.0).abs() < 1e-15);
        assert!(win_rate(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn evaluate_rejects_a_checkpoint_with_the_wrong_layout() {
        let cfg = tiny_config(Method::DetTs);
        let mut wide = cfg.clone();
        wide.hidden = vec![16];
        let predictor = build_predictor(&wide).unwrap();
        let checkpoint = Checkpoint::new(ParamVector::zeros(predictor.layout().clone()));
        let mut test = Dataset::new(0, 1).unwrap();
        test.push(Vec::new(), vec![0.3]).unwrap();
        assert!(matches!(
            evaluate(&checkpoint, &cfg, &test),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn csv_data_source_feeds_training_and_checks_dimensions() {
        let dir = std::env::temp_dir().join(format!("ddfl-runner-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("factory.csv");

        let cfg = {
            let mut cfg = tiny_config(Method::DetTs);
            cfg.data = DataSource::Csv(path.clone());
            cfg
        };
        let gen = cfg.task.generator(1, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = gen.dataset(cfg.train_size + cfg.test_size, &mut rng).unwrap();
        data.write_csv(&path).unwrap();

        let result = train(&cfg).unwrap();
        assert_eq!(result.metrics.len(), cfg.epochs + 1);

        let mut mismatched = cfg.clone();
        mismatched.y_dim = 2;
        assert!(matches!(train(&mismatched), Err(Error::Config(_))));

        let mut oversized = cfg.clone();
        oversized.train_size = 1000;
        assert!(matches!(train(&oversized), Err(Error::Config(_))));

        std::fs::remove_dir_all(&dir).ok();
    }
}
