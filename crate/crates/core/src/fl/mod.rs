//! Flexible-aggregation training: local SGD with clipping, weighted global
//! aggregation and allocator-driven rounds.

pub mod model;

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocator::{allocate, join, AllocError, AllocatorKind, Assignment, SolverOptions};
use crate::datasets::{sample_minibatch, BatchMode, ClientPartition, DataError, ExampleStore};
use crate::phy::{delays, sample_channels, ChannelRealization, PhyError};
use crate::rng::{self, Purpose};
use crate::scenario::Scenario;

pub use model::{Evaluation, LossKind};

#[derive(Debug, Error)]
pub enum FlError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error(transparent)]
    Phy(#[from] PhyError),
    #[error("client {client}: non-finite gradient at local step {step}")]
    NonFinite { client: usize, step: u32 },
    #[error("client {client}: {iterations} local iterations outside [1, {max}]")]
    IterationRange { client: usize, iterations: u32, max: u32 },
    #[error("empty aggregation round")]
    EmptyRound,
    #[error("client {client}: round takes {total} s, over the {limit} s budget")]
    OverBudget { client: usize, total: f64, limit: f64 },
    #[error("invalid training setup: {0}")]
    Invalid(String),
    #[error("cannot write trace: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot write trace: {0}")]
    Csv(#[from] csv::Error),
}

/// Global model parameters at a given round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelVector {
    pub params: Vec<f64>,
    pub version: u64,
}

impl ModelVector {
    pub fn new(params: Vec<f64>) -> Self {
        Self { params, version: 0 }
    }

    pub fn norm(&self) -> f64 {
        norm(&self.params)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scales `params` onto the ball of radius `clip_norm` if it lies outside.
pub fn clip(params: &mut [f64], clip_norm: f64) {
    let factor = (norm(params) / clip_norm).max(1.0);
    if factor > 1.0 {
        params.iter_mut().for_each(|p| *p /= factor);
    }
}

/// How per-client coefficients combine into the global model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// `sum_m w_m x_m` with the raw coefficients.
    AsWritten,
    /// Coefficients rescaled to sum to one over the contributors.
    #[default]
    Normalized,
}

/// Who trains in a round, for how long, and with what coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSchedule {
    pub selected: Vec<bool>,
    /// Zero for unselected clients.
    pub iterations: Vec<u32>,
    /// `(A / I_m) (D_m / D)` for selected clients, zero otherwise.
    pub weights: Vec<f64>,
}

impl RoundSchedule {
    pub fn new(selected: Vec<bool>, iterations: Vec<u32>, sizes: &[usize], max_iterations: u32) -> Result<Self, FlError> {
        if selected.len() != sizes.len() || iterations.len() != sizes.len() {
            return Err(FlError::Invalid("schedule and dataset sizes disagree on client count".into()));
        }
        let total: usize = sizes.iter().sum();
        let mut weights = vec![0.0; sizes.len()];
        for (m, w) in weights.iter_mut().enumerate() {
            if !selected[m] {
                continue;
            }
            let i = iterations[m];
            if i == 0 || i > max_iterations {
                return Err(FlError::IterationRange { client: m, iterations: i, max: max_iterations });
            }
            *w = (max_iterations as f64 / i as f64) * (sizes[m] as f64 / total as f64);
        }
        Ok(Self { selected, iterations, weights })
    }

    /// Every client selected with the same iteration count.
    pub fn uniform(sizes: &[usize], iterations: u32, max_iterations: u32) -> Result<Self, FlError> {
        Self::new(vec![true; sizes.len()], vec![iterations; sizes.len()], sizes, max_iterations)
    }

    pub fn from_assignment(assignment: &Assignment, sizes: &[usize], max_iterations: u32) -> Result<Self, FlError> {
        let selected: Vec<bool> =
            assignment.selected.iter().zip(&assignment.iterations).map(|(s, i)| *s && *i > 0).collect();
        let iterations = assignment.iterations.iter().zip(&selected).map(|(i, s)| if *s { *i } else { 0 }).collect();
        Self::new(selected, iterations, sizes, max_iterations)
    }

    pub fn num_selected(&self) -> usize {
        self.selected.iter().filter(|s| **s).count()
    }
}

/// Loss, data and optimizer settings of one training job.
#[derive(Debug, Clone)]
pub struct TrainTask {
    pub loss: LossKind,
    pub train: Arc<ExampleStore>,
    /// Held-out store for reported loss and accuracy; the training store
    /// is used when absent.
    pub test: Option<Arc<ExampleStore>>,
    pub partition: ClientPartition,
    pub batch: BatchMode,
    pub learning_rate: f64,
    /// `f64::INFINITY` disables clipping.
    pub clip_norm: f64,
    pub aggregation: AggregationMode,
    /// Minimum of the full training loss, when known.
    pub optimal_loss: Option<f64>,
}

impl TrainTask {
    pub const DEFAULT_CLIP_NORM: f64 = 10.0;

    pub fn validate(&self) -> Result<(), FlError> {
        if !(self.learning_rate > 0.0) {
            return Err(FlError::Invalid(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(FlError::Invalid(format!("clip norm must be positive, got {}", self.clip_norm)));
        }
        if let Some(bad) = self.partition.indices.iter().flatten().find(|i| **i >= self.train.len()) {
            return Err(FlError::Invalid(format!("partition index {bad} outside a store of {}", self.train.len())));
        }
        Ok(())
    }

    /// Loss over all partitioned training examples.
    pub fn training_loss(&self, params: &[f64]) -> f64 {
        let all: Vec<usize> = self.partition.indices.iter().flatten().copied().collect();
        self.loss.loss(params, &self.train, &all)
    }

    fn report(&self, params: &[f64]) -> (Evaluation, Option<f64>) {
        let eval = self.loss.evaluate(params, self.test.as_deref().unwrap_or(&self.train));
        let gap = self.optimal_loss.map(|opt| self.training_loss(params) - opt);
        (eval, gap)
    }
}

/// Runs `iterations` clipped SGD steps of client `client` from `global`.
pub fn local_train(
    global: &[f64],
    client: usize,
    iterations: u32,
    max_iterations: u32,
    task: &TrainTask,
    seed: u64,
    round: u64,
) -> Result<Vec<f64>, FlError> {
    if iterations == 0 || iterations > max_iterations {
        return Err(FlError::IterationRange { client, iterations, max: max_iterations });
    }
    let mut rng = rng::stream(seed, Purpose::Minibatch, round, client as u64);
    let mut w = global.to_vec();
    for step in 0..iterations {
        let batch = sample_minibatch(&task.partition, client, task.batch, &mut rng)?;
        let (_, grad) = task.loss.loss_grad(&w, &task.train, &batch);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(FlError::NonFinite { client, step });
        }
        w.iter_mut().zip(&grad).for_each(|(p, g)| *p -= task.learning_rate * g);
        if task.clip_norm.is_finite() {
            clip(&mut w, task.clip_norm);
        }
    }
    Ok(w)
}

/// Combines local models of the selected clients.
pub fn aggregate(locals: &[(usize, Vec<f64>)], schedule: &RoundSchedule, mode: AggregationMode) -> Result<Vec<f64>, FlError> {
    if locals.is_empty() {
        return Err(FlError::EmptyRound);
    }
    if let Some((m, _)) = locals.iter().find(|(m, _)| !schedule.selected.get(*m).copied().unwrap_or(false)) {
        return Err(FlError::Invalid(format!("client {m} contributed without being selected")));
    }
    let scale = match mode {
        AggregationMode::AsWritten => 1.0,
        AggregationMode::Normalized => locals.iter().map(|(m, _)| schedule.weights[*m]).sum::<f64>(),
    };
    let mut out = vec![0.0; locals[0].1.len()];
    for (m, w) in locals {
        if w.len() != out.len() {
            return Err(FlError::Invalid("local models differ in size".into()));
        }
        let c = schedule.weights[*m] / scale;
        out.iter_mut().zip(w).for_each(|(o, x)| *o += c * x);
    }
    Ok(out)
}

/// Trains every selected client of `schedule` in parallel and aggregates.
pub fn train_schedule(
    global: &[f64],
    schedule: &RoundSchedule,
    max_iterations: u32,
    task: &TrainTask,
    seed: u64,
    round: u64,
) -> Result<Vec<f64>, FlError> {
    let clients: Vec<usize> = (0..schedule.selected.len()).filter(|m| schedule.selected[*m]).collect();
    let locals = clients
        .par_iter()
        .map(|m| Ok((*m, local_train(global, *m, schedule.iterations[*m], max_iterations, task, seed, round)?)))
        .collect::<Result<Vec<_>, FlError>>()?;
    aggregate(&locals, schedule, task.aggregation)
}

/// What happened in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u64,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub gap: Option<f64>,
    pub objective: f64,
    pub sum_rate: f64,
    pub selected: Vec<bool>,
    pub iterations: Vec<u32>,
    /// Uplink rate per client (bits/s).
    pub rates: Vec<f64>,
    /// Realized `T_UL + T_DL + I t_iter` per selected client, zero otherwise.
    pub delays: Vec<f64>,
    /// Set when the round produced no new global model.
    pub note: Option<String>,
}

/// Allocator settings for a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPlan {
    pub allocator: AllocatorKind,
    pub solver: SolverOptions,
    pub rounds: u64,
}

/// One allocator-driven round starting from `global`.
///
/// A round whose allocation is infeasible or empty keeps the global model
/// and says so in `note`.
#[allow(clippy::too_many_arguments)]
pub fn run_round(
    global: &ModelVector,
    channels: &ChannelRealization,
    scenario: &Scenario,
    task: &TrainTask,
    plan: &TrainingPlan,
    seed: u64,
    round: u64,
) -> Result<(ModelVector, RoundMetrics), FlError> {
    let a = scenario.timing.max_local_iterations;
    let report = match allocate(plan.allocator, channels, scenario, &plan.solver, seed) {
        Ok(r) => Some(r),
        Err(AllocError::Infeasible { .. }) => None,
        Err(e) => return Err(e.into()),
    };
    let assignment = report.as_ref().map(|r| r.assignment.clone()).unwrap_or_else(|| Assignment::idle(scenario));
    let schedule = RoundSchedule::from_assignment(&assignment, &task.partition.sizes(), a)?;

    let mut round_delays = vec![0.0; scenario.num_clients()];
    for (m, d) in round_delays.iter_mut().enumerate() {
        if !schedule.selected[m] {
            continue;
        }
        let client = &scenario.clients[m];
        let t = delays(client, assignment.rates[m], scenario.model_bits(), &scenario.timing, schedule.iterations[m])?;
        let limit = scenario.timing.round_duration;
        if t.total > limit * (1.0 + 1e-9) {
            return Err(FlError::OverBudget { client: m, total: t.total, limit });
        }
        *d = t.total;
    }

    let (next, note) = match train_schedule(&global.params, &schedule, a, task, seed, round) {
        Ok(params) => (ModelVector { params, version: global.version + 1 }, None),
        Err(FlError::EmptyRound) => {
            let why = if report.is_none() { "allocation infeasible; " } else { "" };
            (ModelVector { params: global.params.clone(), version: global.version + 1 }, Some(format!("{why}{}", FlError::EmptyRound)))
        }
        Err(e) => return Err(e),
    };
    let (eval, gap) = task.report(&next.params);
    let metrics = RoundMetrics {
        round,
        loss: eval.loss,
        accuracy: eval.accuracy,
        gap,
        objective: report.as_ref().map_or(0.0, |r| r.objective),
        sum_rate: report.as_ref().map_or(0.0, |r| r.sum_rate),
        selected: schedule.selected,
        iterations: schedule.iterations,
        rates: assignment.rates,
        delays: round_delays,
        note,
    };
    Ok((next, metrics))
}

/// Per-round log of a training run; round 0 is the initial model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub rounds: Vec<RoundMetrics>,
    pub final_model: ModelVector,
}

/// Flat CSV row of [`RoundMetrics`]; per-client lists are `;`-joined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub round: u64,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub gap: Option<f64>,
    pub bound: Option<f64>,
    pub objective: f64,
    pub sum_rate: f64,
    pub num_selected: usize,
    pub selected: String,
    pub iterations: String,
    pub rates: String,
    pub note: String,
}

impl TrainingTrace {
    pub fn final_metrics(&self) -> &RoundMetrics {
        self.rounds.last().expect("trace holds the initial evaluation")
    }

    /// Rows for CSV output; `bounds[τ]` fills the bound column when given.
    pub fn records(&self, bounds: Option<&[f64]>) -> Vec<TraceRecord> {
        self.rounds
            .iter()
            .enumerate()
            .map(|(i, r)| TraceRecord {
                round: r.round,
                loss: r.loss,
                accuracy: r.accuracy,
                gap: r.gap,
                bound: bounds.and_then(|b| b.get(i).copied()),
                objective: r.objective,
                sum_rate: r.sum_rate,
                num_selected: r.selected.iter().filter(|s| **s).count(),
                selected: join(r.selected.iter().map(|s| u8::from(*s))),
                iterations: join(r.iterations.iter()),
                rates: join(r.rates.iter()),
                note: r.note.clone().unwrap_or_default(),
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W, bounds: Option<&[f64]>) -> Result<(), FlError> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        for rec in self.records(bounds) {
            w.serialize(rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path, bounds: Option<&[f64]>) -> Result<(), FlError> {
        self.write_csv(std::fs::File::create(path)?, bounds)
    }
}

/// `plan.rounds` rounds with fresh channels each round, starting from
/// `initial` (or the loss's default initialization).
pub fn run_training(
    scenario: &Scenario,
    task: &TrainTask,
    plan: &TrainingPlan,
    seed: u64,
    initial: Option<Vec<f64>>,
) -> Result<TrainingTrace, FlError> {
    task.validate()?;
    if task.partition.sizes() != scenario.clients.iter().map(|c| c.dataset_size).collect::<Vec<_>>() {
        return Err(FlError::Invalid("partition sizes differ from the scenario's dataset sizes".into()));
    }
    let mut global = ModelVector::new(initial.unwrap_or_else(|| task.loss.init(&task.train, seed)));
    let (eval, gap) = task.report(&global.params);
    let m = scenario.num_clients();
    let mut rounds = vec![RoundMetrics {
        round: 0,
        loss: eval.loss,
        accuracy: eval.accuracy,
        gap,
        objective: 0.0,
        sum_rate: 0.0,
        selected: vec![false; m],
        iterations: vec![0; m],
        rates: vec![0.0; m],
        delays: vec![0.0; m],
        note: None,
    }];
    for round in 1..=plan.rounds {
        let channels = sample_channels(scenario, seed, round)?;
        let (next, metrics) = run_round(&global, &channels, scenario, task, plan, seed, round)?;
        global = next;
        rounds.push(metrics);
    }
    Ok(TrainingTrace { rounds, final_model: global })
}
