//! Training loops: fitting the model behind an estimator, running the
//! step-function MI schedule, and minimizing a channel's MI through an
//! estimator (with or without negative sampling).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bench::{EstimateTrace, TraceRecord};
use crate::distributions::{
    rho_for_mi, stream_rng, ChannelNoise, Conditional, CorrelatedGaussianSource, DiagGaussianCond,
    LinearGaussianChannel,
};
use crate::error::{Error, Result};
use crate::estimators::{
    club_graph, club_sampled_graph, critic_scores, infonce_from_matrix, l1out_graph,
    loglik_loss_graph, mine_from_scores, nwj_from_scores, sample_negatives, vub_graph, Batch,
    BoundCritic, Critic, Estimate, EstimatorId, MarginalPairing, ModelFamily,
};
use crate::graph::{Graph, Var};
use crate::nn::Parameters;
use crate::optim::Adam;
use crate::tensor::{Axis, Tensor};

/// Decay of the optional MINE moving average.
pub const MINE_EMA_DECAY: f64 = 0.99;

const DATA_STREAM: u64 = 0x1000;
const MODEL_STREAM: u64 = 0x2000;
const CHANNEL_STREAM: u64 = 0x3000;

/// Which simulated pair the schedule draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Gaussian,
    Cubic,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::Gaussian, Task::Cubic];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Gaussian => "gaussian",
            Task::Cubic => "cubic",
        }
    }

    fn index(self) -> u64 {
        match self {
            Task::Gaussian => 0,
            Task::Cubic => 1,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gaussian" => Ok(Task::Gaussian),
            "cubic" => Ok(Task::Cubic),
            other => Err(Error::contract(format!(
                "unknown task `{other}`; valid: gaussian, cubic"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iters_per_level: usize,
    pub learning_rate: f64,
    pub hidden_units: usize,
    pub seed: u64,
    pub approx_steps_per_iter: usize,
    /// Dimension of `x` and `y` in the simulation tasks.
    pub dim: usize,
    pub pairing: MarginalPairing,
    /// Moving-average gradient correction for MINE.
    pub mine_ema: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            iters_per_level: 4000,
            learning_rate: 5e-3,
            hidden_units: 15,
            seed: 0,
            approx_steps_per_iter: 1,
            dim: 20,
            pairing: MarginalPairing::AllPairs,
            mine_ema: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::contract("batch_size must be >= 2"));
        }
        for (name, v) in [
            ("iters_per_level", self.iters_per_level),
            ("hidden_units", self.hidden_units),
            ("approx_steps_per_iter", self.approx_steps_per_iter),
            ("dim", self.dim),
        ] {
            if v == 0 {
                return Err(Error::contract(format!("{name} must be positive")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::contract("learning_rate must be positive and finite"));
        }
        Ok(())
    }
}

/// The trainable (or fixed) object behind an estimator.
#[derive(Clone, Debug)]
pub enum EstimatorModel {
    /// The true conditional of the current source is used as is.
    Known,
    Variational {
        cond: DiagGaussianCond,
        opt: Adam,
    },
    Critic {
        critic: Critic,
        opt: Adam,
        /// `ln` of the MINE moving average, when enabled.
        log_ema: Option<f64>,
    },
}

impl EstimatorModel {
    pub fn new<R: Rng + ?Sized>(
        id: EstimatorId,
        x_dim: usize,
        y_dim: usize,
        cfg: &TrainConfig,
        rng: &mut R,
    ) -> Self {
        match id.family() {
            ModelFamily::Known => EstimatorModel::Known,
            ModelFamily::Variational => {
                let cond = DiagGaussianCond::new(x_dim, y_dim, cfg.hidden_units, rng);
                let opt = Adam::new(cfg.learning_rate, &cond.parameters());
                EstimatorModel::Variational { cond, opt }
            }
            ModelFamily::Critic => {
                let critic = Critic::new(x_dim, y_dim, cfg.hidden_units, rng);
                let opt = Adam::new(cfg.learning_rate, &critic.parameters());
                EstimatorModel::Critic {
                    critic,
                    opt,
                    log_ema: None,
                }
            }
        }
    }

    pub fn conditional(&self) -> Option<&DiagGaussianCond> {
        match self {
            EstimatorModel::Variational { cond, .. } => Some(cond),
            _ => None,
        }
    }

    pub fn critic(&self) -> Option<&Critic> {
        match self {
            EstimatorModel::Critic { critic, .. } => Some(critic),
            _ => None,
        }
    }
}

/// The bound itself on the graph, for any conditional-based estimator.
pub fn conditional_bound_graph<C: Conditional + ?Sized, R: Rng + ?Sized>(
    g: &mut Graph,
    id: EstimatorId,
    cond: &C,
    x: Var,
    y: Var,
    rng: &mut R,
) -> Var {
    match id {
        EstimatorId::Club | EstimatorId::VClub => club_graph(g, cond, x, y),
        EstimatorId::VClubS => {
            let negatives = sample_negatives(g.shape(x).0, rng);
            club_sampled_graph(g, cond, x, y, &negatives)
        }
        EstimatorId::Vub | EstimatorId::VVub => vub_graph(g, cond, x, y),
        EstimatorId::L1Out | EstimatorId::VL1Out => l1out_graph(g, cond, x, y),
        other => panic!("{other} is not a conditional-based bound"),
    }
}

/// Value of a critic bound, plus the `ln mean exp` of the marginal scores
/// (needed by the MINE moving average).
pub fn critic_bound_graph<R: Rng + ?Sized>(
    g: &mut Graph,
    id: EstimatorId,
    critic: &BoundCritic,
    x: Var,
    y: Var,
    pairing: MarginalPairing,
    rng: &mut R,
) -> (Var, Option<Var>) {
    if id == EstimatorId::InfoNce {
        let full = critic.score_matrix(g, x, y);
        return (infonce_from_matrix(g, full), None);
    }
    let (joint, marginal, _) = critic_scores(g, critic, x, y, pairing, rng);
    match id {
        EstimatorId::Nwj => (nwj_from_scores(g, joint, marginal), None),
        EstimatorId::Mine => {
            let k = g.value(marginal).len() as f64;
            let lse = g.logsumexp(marginal, Axis::All);
            let lme = g.add_scalar(lse, -k.ln());
            (mine_from_scores(g, joint, marginal), Some(lme))
        }
        other => panic!("{other} is not a critic bound"),
    }
}

fn param_grads(g: &Graph, loss: Var, params: &[Var]) -> Result<Vec<Tensor>> {
    let mut grads = g.backward(loss)?;
    Ok(params.iter().map(|&p| grads.take(p)).collect())
}

fn diverged(iter: usize, err: Error) -> Error {
    match err {
        Error::Diverged { .. } => err,
        Error::Numeric(message) => Error::Diverged { iter, message },
        other => other,
    }
}

/// One estimator with its model, optimizer and private RNG.
#[derive(Clone, Debug)]
pub struct EstimatorTrainer {
    pub id: EstimatorId,
    pub model: EstimatorModel,
    pairing: MarginalPairing,
    mine_ema: bool,
    approx_steps: usize,
    rng: ChaCha8Rng,
    iter: usize,
}

impl EstimatorTrainer {
    /// The model's initial parameters and every later random draw come from
    /// the `(cfg.seed, id)` stream.
    pub fn new(id: EstimatorId, x_dim: usize, y_dim: usize, cfg: &TrainConfig) -> Self {
        let mut rng = stream_rng(cfg.seed, MODEL_STREAM + id as u64);
        let model = EstimatorModel::new(id, x_dim, y_dim, cfg, &mut rng);
        Self {
            id,
            model,
            pairing: cfg.pairing,
            mine_ema: cfg.mine_ema,
            approx_steps: cfg.approx_steps_per_iter,
            rng,
            iter: 0,
        }
    }

    /// Number of completed [`fit_step`](Self::fit_step) calls.
    pub fn iterations(&self) -> usize {
        self.iter
    }

    /// Upper bounds: `approx_steps_per_iter` likelihood steps, then the bound
    /// on the same batch. Lower bounds: one ascent step on the bound, then
    /// its value. Bounds on the exact conditional are only evaluated.
    ///
    /// `source` supplies the exact conditional for the known family.
    pub fn fit_step(
        &mut self,
        batch: &Batch,
        source: Option<&CorrelatedGaussianSource>,
    ) -> Result<Estimate> {
        let iter = self.iter;
        let value = self
            .fit_step_inner(batch, source)
            .map_err(|e| diverged(iter, e))?;
        self.iter += 1;
        if !value.is_finite() {
            return Err(Error::Diverged {
                iter,
                message: format!("{} produced {value}", self.id),
            });
        }
        Ok(Estimate {
            value,
            kind: self.id.kind(),
            id: self.id,
        })
    }

    fn fit_step_inner(
        &mut self,
        batch: &Batch,
        source: Option<&CorrelatedGaussianSource>,
    ) -> Result<f64> {
        let id = self.id;
        match &mut self.model {
            EstimatorModel::Known => {
                let src = source.ok_or_else(|| {
                    Error::Unsupported(format!("{id} needs the exact conditional of a source"))
                })?;
                let cond = src.known_conditional()?;
                let mut g = Graph::new();
                let x = g.constant(batch.x.clone());
                let y = g.constant(batch.y.clone());
                let v = conditional_bound_graph(&mut g, id, &cond, x, y, &mut self.rng);
                g.check()?;
                Ok(g.scalar(v))
            }
            EstimatorModel::Variational { cond, opt } => {
                for _ in 0..self.approx_steps {
                    loglik_step(cond, opt, batch)?;
                }
                let mut g = Graph::new();
                let bound = crate::distributions::ConditionalModel::bind(cond, &mut g);
                let x = g.constant(batch.x.clone());
                let y = g.constant(batch.y.clone());
                let v = conditional_bound_graph(&mut g, id, &bound, x, y, &mut self.rng);
                g.check()?;
                Ok(g.scalar(v))
            }
            EstimatorModel::Critic {
                critic,
                opt,
                log_ema,
            } => {
                critic_step(
                    id,
                    critic,
                    opt,
                    log_ema,
                    self.mine_ema,
                    self.pairing,
                    batch,
                    &mut self.rng,
                )?;
                critic_value(id, critic, self.pairing, batch, &mut self.rng)
            }
        }
    }
}

/// One Adam step on `−(1/N) Σ log q(y_i|x_i)`; returns the pre-step loss.
pub fn loglik_step(cond: &mut DiagGaussianCond, opt: &mut Adam, batch: &Batch) -> Result<f64> {
    let mut g = Graph::new();
    let bound = crate::distributions::ConditionalModel::bind(cond, &mut g);
    let x = g.constant(batch.x.clone());
    let y = g.constant(batch.y.clone());
    let loss = loglik_loss_graph(&mut g, &bound, x, y);
    g.check()?;
    let grads = param_grads(&g, loss, &bound.params())?;
    opt.step(cond.parameters_mut(), &grads)?;
    Ok(g.scalar(loss))
}

#[allow(clippy::too_many_arguments)]
fn critic_step<R: Rng + ?Sized>(
    id: EstimatorId,
    critic: &mut Critic,
    opt: &mut Adam,
    log_ema: &mut Option<f64>,
    use_ema: bool,
    pairing: MarginalPairing,
    batch: &Batch,
    rng: &mut R,
) -> Result<()> {
    let mut g = Graph::new();
    let bound = critic.bind(&mut g);
    let x = g.constant(batch.x.clone());
    let y = g.constant(batch.y.clone());
    let (value, lme) = critic_bound_graph(&mut g, id, &bound, x, y, pairing, rng);
    let objective = match (use_ema, lme) {
        (true, Some(lme)) => {
            // Replace the gradient of ln mean exp(f) by grad mean exp(f) / ema.
            let current = g.scalar(lme);
            let next = match *log_ema {
                None => current,
                Some(prev) => log_add_exp(
                    prev + MINE_EMA_DECAY.ln(),
                    current + (1.0 - MINE_EMA_DECAY).ln(),
                ),
            };
            *log_ema = Some(next);
            let joint_part = g.add(value, lme);
            let shifted = g.add_scalar(lme, -next);
            let ratio = g.exp(shifted);
            g.sub(joint_part, ratio)
        }
        _ => value,
    };
    let loss = g.neg(objective);
    g.check()?;
    let grads = param_grads(&g, loss, &bound.net.params())?;
    opt.step(critic.parameters_mut(), &grads)
}

fn critic_value<R: Rng + ?Sized>(
    id: EstimatorId,
    critic: &Critic,
    pairing: MarginalPairing,
    batch: &Batch,
    rng: &mut R,
) -> Result<f64> {
    let mut g = Graph::new();
    let bound = critic.bind(&mut g);
    let x = g.constant(batch.x.clone());
    let y = g.constant(batch.y.clone());
    let (value, _) = critic_bound_graph(&mut g, id, &bound, x, y, pairing, rng);
    g.check()?;
    Ok(g.scalar(value))
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Builds the source for `task` at correlation `rho`. The cubic mixing
/// matrix depends only on `seed`, so it stays fixed across levels.
pub fn task_source(
    task: Task,
    dim: usize,
    rho: f64,
    seed: u64,
) -> Result<CorrelatedGaussianSource> {
    CorrelatedGaussianSource::new(dim, rho, task == Task::Cubic, seed)
}

fn check_schedule(id: EstimatorId, task: Task, levels: &[f64], cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if levels.is_empty() {
        return Err(Error::contract("the schedule needs at least one level"));
    }
    if let Some(bad) = levels.iter().find(|m| !(**m >= 0.0) || !m.is_finite()) {
        return Err(Error::contract(format!(
            "MI level {bad} is not a finite non-negative value"
        )));
    }
    if task == Task::Cubic && id.family() == ModelFamily::Known {
        return Err(Error::Unsupported(format!(
            "{id} needs the exact conditional, which the cubic task does not have"
        )));
    }
    Ok(())
}

/// Trains one estimator through the step-function schedule, warm-starting
/// across levels. A divergence stops the run and is recorded on the trace
/// instead of being returned; set-up problems are still errors.
///
/// The data stream depends only on `(seed, task)`, so every estimator sees
/// the same batches.
pub fn run_schedule(
    id: EstimatorId,
    task: Task,
    levels: &[f64],
    cfg: &TrainConfig,
) -> Result<EstimateTrace> {
    check_schedule(id, task, levels, cfg)?;
    let mut data_rng = stream_rng(cfg.seed, DATA_STREAM + task.index());
    let mut trainer = EstimatorTrainer::new(id, cfg.dim, cfg.dim, cfg);
    let mut trace = EstimateTrace::new(id, task, cfg.iters_per_level);
    let base = task_source(task, cfg.dim, 0.0, cfg.seed)?;
    for (level_index, &level) in levels.iter().enumerate() {
        let src = base.with_rho(rho_for_mi(level, cfg.dim)?)?;
        for k in 0..cfg.iters_per_level {
            let iter = level_index * cfg.iters_per_level + k;
            let batch = src.sample_joint(cfg.batch_size, &mut data_rng)?;
            match trainer.fit_step(&batch, Some(&src)) {
                Ok(est) => trace.records.push(TraceRecord {
                    iter,
                    level,
                    estimate: est.value,
                }),
                Err(Error::Diverged { message, .. }) => {
                    trace.failure = Some(
                        Error::Diverged {
                            iter,
                            message: format!("at MI level {level}: {message}"),
                        }
                        .to_string(),
                    );
                    trace.failed_at = Some(iter);
                    return Ok(trace);
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(trace)
}

/// Like [`run_schedule`] for several estimators, but any divergence is an
/// error carrying the iteration and level.
pub fn estimate_over_schedule(
    ids: &[EstimatorId],
    task: Task,
    levels: &[f64],
    cfg: &TrainConfig,
) -> Result<Vec<EstimateTrace>> {
    ids.iter()
        .map(|&id| {
            let trace = run_schedule(id, task, levels, cfg)?;
            match (trace.failed_at, &trace.failure) {
                (Some(iter), Some(message)) => Err(Error::Diverged {
                    iter,
                    message: format!("{id}: {message}"),
                }),
                _ => Ok(trace),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinimizeConfig {
    pub train: TrainConfig,
    pub estimator: EstimatorId,
    pub target_mi_start: f64,
    pub max_iters: usize,
    pub mi_eval_every: usize,
    /// Learning rate for the channel matrix.
    pub channel_learning_rate: f64,
    /// Skip the channel update (ablation).
    pub freeze_channel: bool,
    /// Keep an event log of the loop body.
    pub record_events: bool,
}

impl Default for MinimizeConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                dim: 4,
                ..TrainConfig::default()
            },
            estimator: EstimatorId::VClubS,
            target_mi_start: 2.0,
            max_iters: 2000,
            mi_eval_every: 10,
            channel_learning_rate: 5e-3,
            freeze_channel: false,
            record_events: false,
        }
    }
}

impl MinimizeConfig {
    /// Estimators that can drive the minimization.
    pub const ESTIMATORS: [EstimatorId; 7] = [
        EstimatorId::VClub,
        EstimatorId::VClubS,
        EstimatorId::VL1Out,
        EstimatorId::VVub,
        EstimatorId::Nwj,
        EstimatorId::Mine,
        EstimatorId::InfoNce,
    ];

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !Self::ESTIMATORS.contains(&self.estimator) {
            let valid: Vec<&str> = Self::ESTIMATORS.iter().map(|e| e.as_str()).collect();
            return Err(Error::contract(format!(
                "{} cannot drive minimization; valid: {}",
                self.estimator,
                valid.join(", ")
            )));
        }
        if self.max_iters == 0
            || self.mi_eval_every == 0
            || !self.max_iters.is_multiple_of(self.mi_eval_every)
        {
            return Err(Error::contract(
                "mi_eval_every must be positive and divide max_iters",
            ));
        }
        if !(self.target_mi_start >= 0.0 && self.target_mi_start.is_finite()) {
            return Err(Error::contract(
                "target_mi_start must be a finite non-negative value",
            ));
        }
        if !(self.channel_learning_rate > 0.0 && self.channel_learning_rate.is_finite()) {
            return Err(Error::contract(
                "channel_learning_rate must be positive and finite",
            ));
        }
        Ok(())
    }
}

/// One step of the minimization loop, in the order it happened.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopEvent {
    Sample,
    /// Likelihood step on `q`, or ascent step on the critic.
    ApproxStep,
    Estimate,
    ChannelStep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinimizeRecord {
    pub iter: usize,
    pub estimate: f64,
    /// Present every `mi_eval_every` iterations.
    pub true_mi: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct MinimizeTrace {
    /// True MI before the first update.
    pub initial_true_mi: f64,
    /// One record per iteration; `true_mi` is measured after that iteration's update.
    pub records: Vec<MinimizeRecord>,
    /// First iteration at which true MI had risen by more than 1 nat within 500 iterations.
    pub diverged_at: Option<usize>,
    pub events: Vec<(usize, LoopEvent)>,
    pub channel: LinearGaussianChannel,
}

impl MinimizeTrace {
    pub fn final_true_mi(&self) -> f64 {
        self.records
            .iter()
            .rev()
            .find_map(|r| r.true_mi)
            .unwrap_or(self.initial_true_mi)
    }
}

/// The channel whose MI the minimizer starts from.
pub fn initial_channel(cfg: &MinimizeConfig) -> Result<LinearGaussianChannel> {
    let mut rng = stream_rng(cfg.train.seed, CHANNEL_STREAM);
    LinearGaussianChannel::with_true_mi(cfg.train.dim, cfg.target_mi_start, &mut rng)
}

/// Estimate of the bound on a channel draw and its gradient with respect
/// to `A`, with `y = x Aᵀ + ε` built on the graph.
pub fn channel_objective<R: Rng + ?Sized>(
    model: &EstimatorModel,
    id: EstimatorId,
    a: &Tensor,
    noise: &ChannelNoise,
    pairing: MarginalPairing,
    rng: &mut R,
) -> Result<(f64, Tensor)> {
    let mut g = Graph::new();
    let av = g.leaf(a.clone());
    let x = g.constant(noise.x.clone());
    let eps = g.constant(noise.eps.clone());
    let y = LinearGaussianChannel::response(&mut g, av, x, eps);
    let value = match model {
        EstimatorModel::Variational { cond, .. } => {
            let bound = crate::distributions::ConditionalModel::bind(cond, &mut g);
            conditional_bound_graph(&mut g, id, &bound, x, y, rng)
        }
        EstimatorModel::Critic { critic, .. } => {
            let bound = critic.bind(&mut g);
            critic_bound_graph(&mut g, id, &bound, x, y, pairing, rng).0
        }
        EstimatorModel::Known => {
            return Err(Error::Unsupported(format!(
                "{id} cannot drive minimization"
            )));
        }
    };
    g.check()?;
    let mut grads = g.backward(value)?;
    Ok((g.scalar(value), grads.take(av)))
}

/// Minimizes the channel's MI by gradient descent on an estimator, with the
/// approximation network refit on each fresh batch first.
pub fn minimize_mi(channel: LinearGaussianChannel, cfg: &MinimizeConfig) -> Result<MinimizeTrace> {
    cfg.validate()?;
    if channel.dim() != cfg.train.dim {
        return Err(Error::dim(format!(
            "channel has dimension {}, config says {}",
            channel.dim(),
            cfg.train.dim
        )));
    }
    let train = &cfg.train;
    let id = cfg.estimator;
    let n = train.batch_size;
    let mut data_rng = stream_rng(train.seed, DATA_STREAM + 0x10);
    let mut model_rng = stream_rng(train.seed, MODEL_STREAM + 0x10 + id as u64);
    let mut model = EstimatorModel::new(id, channel.dim(), channel.dim(), train, &mut model_rng);
    let mut channel = channel;
    let mut channel_opt = Adam::new(cfg.channel_learning_rate, &[&channel.a]);

    let mut records = Vec::with_capacity(cfg.max_iters);
    let mut events = Vec::new();
    let log = |events: &mut Vec<(usize, LoopEvent)>, iter, e| {
        if cfg.record_events {
            events.push((iter, e));
        }
    };
    let mut mi_history: Vec<(usize, f64)> = vec![(0, channel.true_mi()?)];
    let mut diverged_at = None;

    for iter in 0..cfg.max_iters {
        let noise = channel.sample_noise(n, &mut data_rng);
        log(&mut events, iter, LoopEvent::Sample);

        let batch = channel.realize(&noise)?;
        for _ in 0..train.approx_steps_per_iter {
            match &mut model {
                EstimatorModel::Variational { cond, opt } => {
                    loglik_step(cond, opt, &batch).map_err(|e| diverged(iter, e))?;
                }
                EstimatorModel::Critic {
                    critic,
                    opt,
                    log_ema,
                } => {
                    critic_step(
                        id,
                        critic,
                        opt,
                        log_ema,
                        train.mine_ema,
                        train.pairing,
                        &batch,
                        &mut model_rng,
                    )
                    .map_err(|e| diverged(iter, e))?;
                }
                EstimatorModel::Known => unreachable!("validated above"),
            }
            log(&mut events, iter, LoopEvent::ApproxStep);
        }

        let (value, grad) = channel_objective(
            &model,
            id,
            &channel.a,
            &noise,
            train.pairing,
            &mut model_rng,
        )
        .map_err(|e| diverged(iter, e))?;
        log(&mut events, iter, LoopEvent::Estimate);

        if !cfg.freeze_channel {
            channel_opt
                .step(vec![&mut channel.a], &[grad])
                .map_err(|e| diverged(iter, e))?;
            log(&mut events, iter, LoopEvent::ChannelStep);
        }

        let done = iter + 1;
        let true_mi = if done % cfg.mi_eval_every == 0 {
            let mi = channel.true_mi().map_err(|e| diverged(iter, e))?;
            if diverged_at.is_none()
                && mi_history
                    .iter()
                    .any(|&(t, past)| done - t <= 500 && mi - past > 1.0)
            {
                diverged_at = Some(iter);
            }
            mi_history.push((done, mi));
            Some(mi)
        } else {
            None
        };
        records.push(MinimizeRecord {
            iter,
            estimate: value,
            true_mi,
        });
    }

    Ok(MinimizeTrace {
        initial_true_mi: mi_history[0].1,
        records,
        diverged_at,
        events,
        channel,
    })
}
