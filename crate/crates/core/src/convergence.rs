//! Optimality-gap bound for flexible aggregation and its empirical check.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{BatchMode, Targets};
use crate::fl::{train_schedule, FlError, LossKind, RoundSchedule, TrainTask};
use crate::rng::{self, Purpose};

/// Inflation applied to fitted gradient-moment constants.
pub const SAFETY_FACTOR: f64 = 1.2;

#[derive(Debug, Error)]
pub enum ConvergenceError {
    #[error("bound not contracting, check kappa2 condition (phi2 = {phi2})")]
    NotContracting { phi2: f64 },
    #[error("learning rate {eta} exceeds 1/L_c = {limit}; no bound claim")]
    StepTooLarge { eta: f64, limit: f64 },
    #[error("constants unavailable: {0}")]
    Unavailable(String),
    #[error(transparent)]
    Fl(#[from] FlError),
}

/// Smoothness, PL and gradient-moment constants of a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceConstants {
    pub lipschitz: f64,
    pub pl: f64,
    pub kappa1: f64,
    pub kappa2: f64,
    /// Initial gap `F(w0) - F(w*)`.
    pub theta: f64,
    /// Per-client bound on `|grad F_m - grad F|` over the sampled points.
    pub divergence: Vec<f64>,
    /// `sum_m D_m gamma_m / D`.
    pub global_divergence: f64,
}

/// `sum_m D_m^2 zeta_m / (D^2 I_m)` over the selected clients.
pub fn schedule_sum(schedule: &RoundSchedule, sizes: &[usize]) -> f64 {
    let total: usize = sizes.iter().sum();
    (0..sizes.len())
        .filter(|m| schedule.selected[*m])
        .map(|m| {
            let share = sizes[m] as f64 / total as f64;
            share * share / schedule.iterations[m] as f64
        })
        .sum()
}

/// Returns `(phi1, phi2)`.
pub fn phi_constants(
    schedule: &RoundSchedule,
    sizes: &[usize],
    consts: &ConvergenceConstants,
    eta: f64,
    max_iterations: u32,
) -> (f64, f64) {
    let a2 = (max_iterations as f64).powi(2);
    let s = schedule_sum(schedule, sizes);
    let c = eta * eta * consts.lipschitz / 2.0;
    (c * a2 * consts.kappa1 * s, eta - c * a2 * consts.kappa2 * s)
}

/// `(1 - 2 rho phi2)^tau theta + phi1 (1 - (1 - 2 rho phi2)^tau) / (2 rho phi2)`.
pub fn gap_bound(tau: u32, phi1: f64, phi2: f64, rho: f64, theta: f64) -> Result<f64, ConvergenceError> {
    if !(phi2 > 0.0) {
        return Err(ConvergenceError::NotContracting { phi2 });
    }
    let rate = 2.0 * rho * phi2;
    let decay = (1.0 - rate).powi(tau as i32);
    Ok(decay * theta + phi1 * (1.0 - decay) / rate)
}

/// Limit of the bound as the round count grows.
pub fn asymptotic_bound(phi1: f64, phi2: f64, rho: f64) -> Result<f64, ConvergenceError> {
    if !(phi2 > 0.0) {
        return Err(ConvergenceError::NotContracting { phi2 });
    }
    Ok(phi1 / (2.0 * rho * phi2))
}

/// The bound at rounds `0..=rounds` by iterating the one-step recurrence
/// `b' = (1 - 2 rho phi2) b + phi1` from `theta`.
pub fn iterate_recurrence(rounds: u32, phi1: f64, phi2: f64, rho: f64, theta: f64) -> Vec<f64> {
    let factor = 1.0 - 2.0 * rho * phi2;
    let mut out = Vec::with_capacity(rounds as usize + 1);
    let mut b = theta;
    out.push(b);
    for _ in 0..rounds {
        b = factor * b + phi1;
        out.push(b);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kappa2Check {
    pub threshold: f64,
    pub satisfied: bool,
}

/// Largest `kappa2` for which the bound contracts under `schedule`.
pub fn kappa2_condition(
    schedule: &RoundSchedule,
    sizes: &[usize],
    kappa2: f64,
    eta: f64,
    lipschitz: f64,
    max_iterations: u32,
) -> Kappa2Check {
    let s = schedule_sum(schedule, sizes);
    let threshold = if s == 0.0 {
        f64::INFINITY
    } else {
        2.0 / (eta * lipschitz * (max_iterations as f64).powi(2) * s)
    };
    Kappa2Check { threshold, satisfied: kappa2 < threshold }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn full_gradient(task: &TrainTask, w: &[f64], idx: &[usize]) -> Vec<f64> {
    task.loss.loss_grad(w, &task.train, idx).1
}

/// Exact `E |g|^2` of a client minibatch gradient at `w`.
fn expected_sq_norm(task: &TrainTask, client: usize, w: &[f64]) -> f64 {
    let own = &task.partition.indices[client];
    let mean = full_gradient(task, w, own);
    match task.batch {
        BatchMode::Full => norm2(&mean),
        BatchMode::Sample { size } => {
            // with-replacement draws: E|g|^2 = |mean|^2 + (E|g_i|^2 - |mean|^2) / b
            let second: f64 = own.iter().map(|i| norm2(&full_gradient(task, w, &[*i]))).sum::<f64>() / own.len() as f64;
            let m2 = norm2(&mean);
            m2 + (second - m2) / size as f64
        }
    }
}

fn extreme_eigenvalues(task: &TrainTask) -> (f64, f64) {
    let all: Vec<usize> = task.partition.indices.iter().flatten().copied().collect();
    let d = task.train.dim();
    let x = DMatrix::from_fn(all.len(), d, |r, c| task.train.features[[all[r], c]]);
    let eig = SymmetricEigen::new(x.transpose() * x / all.len() as f64).eigenvalues;
    (eig.max(), eig.min())
}

/// Constants of a quadratic or logistic task around `optimum`, starting
/// from `initial`.
///
/// Smoothness and PL constants come from the data's spectrum. The moment
/// constants fit `max_m E|g_m(w)|^2` against `|grad F(w)|^2` over points
/// between `initial` and `optimum` plus random offsets, keep the slope,
/// lift the intercept over every sample and inflate both by
/// [`SAFETY_FACTOR`].
pub fn estimate_constants(
    task: &TrainTask,
    optimum: &[f64],
    initial: &[f64],
    seed: u64,
) -> Result<ConvergenceConstants, ConvergenceError> {
    let (lipschitz, pl) = match (task.loss, &task.train.targets) {
        (LossKind::Quadratic, Targets::Real(_)) => extreme_eigenvalues(task),
        (LossKind::Logistic { reg }, Targets::Labels { .. }) => (extreme_eigenvalues(task).0 / 4.0 + reg, reg),
        _ => return Err(ConvergenceError::Unavailable(format!("{:?} has no closed-form constants", task.loss))),
    };
    let optimal_loss = task
        .optimal_loss
        .ok_or_else(|| ConvergenceError::Unavailable("task optimum unknown".into()))?;
    let theta = task.training_loss(initial) - optimal_loss;

    let mut rng = rng::stream(seed, Purpose::Estimation, 0, 0);
    let offset: Vec<f64> = initial.iter().zip(optimum).map(|(a, b)| a - b).collect();
    let radius = norm2(&offset).sqrt().max(1.0);
    let mut points = Vec::new();
    for s in 0..=10 {
        for r in [0.0, 0.25, 0.5] {
            let u: Vec<f64> = (0..optimum.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let un = norm2(&u).sqrt();
            let t = s as f64 / 10.0;
            points.push(
                optimum
                    .iter()
                    .zip(&offset)
                    .zip(&u)
                    .map(|((o, d), u)| o + t * d + r * radius * u / un)
                    .collect::<Vec<f64>>(),
            );
        }
    }

    let all: Vec<usize> = task.partition.indices.iter().flatten().copied().collect();
    let m = task.partition.num_clients();
    let samples: Vec<(f64, f64, Vec<f64>)> = points
        .par_iter()
        .map(|w| {
            let g = full_gradient(task, w, &all);
            let moment = (0..m).map(|c| expected_sq_norm(task, c, w)).fold(0.0, f64::max);
            let div = (0..m)
                .map(|c| {
                    let gm = full_gradient(task, w, &task.partition.indices[c]);
                    norm2(&gm.iter().zip(&g).map(|(a, b)| a - b).collect::<Vec<_>>()).sqrt()
                })
                .collect();
            (norm2(&g), moment, div)
        })
        .collect();

    let n = samples.len() as f64;
    let mx = samples.iter().map(|s| s.0).sum::<f64>() / n;
    let my = samples.iter().map(|s| s.1).sum::<f64>() / n;
    let sxx: f64 = samples.iter().map(|s| (s.0 - mx).powi(2)).sum();
    let sxy: f64 = samples.iter().map(|s| (s.0 - mx) * (s.1 - my)).sum();
    let slope = if sxx > 0.0 { (sxy / sxx).max(0.0) } else { 0.0 };
    let intercept = samples.iter().map(|s| s.1 - slope * s.0).fold(0.0, f64::max);

    let divergence: Vec<f64> = (0..m).map(|c| samples.iter().map(|s| s.2[c]).fold(0.0, f64::max)).collect();
    let sizes = task.partition.sizes();
    let total: usize = sizes.iter().sum();
    let global_divergence = divergence.iter().zip(&sizes).map(|(g, d)| g * *d as f64).sum::<f64>() / total as f64;
    Ok(ConvergenceConstants {
        lipschitz,
        pl,
        kappa1: SAFETY_FACTOR * intercept,
        kappa2: SAFETY_FACTOR * slope,
        theta,
        divergence,
        global_divergence,
    })
}

/// One row of the gap-vs-bound table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapBound {
    pub round: u32,
    pub gap: f64,
    pub bound: f64,
    pub holds: bool,
    /// `gap(t) <= (1 - 2 rho phi2) gap(t-1) + phi1`; true at round 0.
    pub step_holds: bool,
}

/// Compares measured gaps (index = round) against the bound for a fixed
/// schedule.
pub fn gap_vs_bound(
    gaps: &[f64],
    consts: &ConvergenceConstants,
    schedule: &RoundSchedule,
    sizes: &[usize],
    eta: f64,
    max_iterations: u32,
) -> Result<Vec<GapBound>, ConvergenceError> {
    let limit = 1.0 / consts.lipschitz;
    if eta > limit * (1.0 + 1e-12) {
        return Err(ConvergenceError::StepTooLarge { eta, limit });
    }
    let (phi1, phi2) = phi_constants(schedule, sizes, consts, eta, max_iterations);
    let factor = 1.0 - 2.0 * consts.pl * phi2;
    gaps.iter()
        .enumerate()
        .map(|(t, gap)| {
            let bound = gap_bound(t as u32, phi1, phi2, consts.pl, consts.theta)?;
            let step_holds = t == 0 || *gap <= factor * gaps[t - 1] + phi1;
            Ok(GapBound { round: t as u32, gap: *gap, bound, holds: *gap <= bound, step_holds })
        })
        .collect()
}

/// Mean optimality gap per round over independent minibatch streams, with
/// the same schedule every round.
pub fn replica_gaps(
    task: &TrainTask,
    schedule: &RoundSchedule,
    max_iterations: u32,
    initial: &[f64],
    rounds: u32,
    seeds: &[u64],
) -> Result<Vec<f64>, ConvergenceError> {
    let optimal = task
        .optimal_loss
        .ok_or_else(|| ConvergenceError::Unavailable("task optimum unknown".into()))?;
    let runs = seeds
        .par_iter()
        .map(|seed| {
            let mut w = initial.to_vec();
            let mut gaps = vec![task.training_loss(&w) - optimal];
            for round in 1..=rounds as u64 {
                w = train_schedule(&w, schedule, max_iterations, task, *seed, round)?;
                gaps.push(task.training_loss(&w) - optimal);
            }
            Ok(gaps)
        })
        .collect::<Result<Vec<_>, FlError>>()?;
    let n = runs.len().max(1) as f64;
    Ok((0..=rounds as usize).map(|t| runs.iter().map(|r| r[t]).sum::<f64>() / n).collect())
}

/// Per-client inputs of the mean-inequality chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainTerm {
    /// `D_m / D`.
    pub share: f64,
    /// Realized round time `T_m`.
    pub total_delay: f64,
    pub uplink_delay: f64,
    pub downlink_delay: f64,
    /// Seconds per local iteration.
    pub iteration_time: f64,
    /// Round deadline.
    pub round_duration: f64,
}

/// Values of the chain `sum share^2 / I >= M'^2 / sum(I / share^2)`
/// `= M'^2 / sum(compute time / (t_iter share^2))`
/// `>= M'^2 / sum(deadline compute time / (t_iter share^2))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanChain {
    pub objective: f64,
    pub harmonic: f64,
    pub by_delay: f64,
    pub by_deadline: f64,
}

impl MeanChain {
    /// Whether every link of the chain holds to relative tolerance `tol`.
    pub fn holds(&self, tol: f64) -> bool {
        let le = |a: f64, b: f64| a <= b * (1.0 + tol);
        le(self.harmonic, self.objective)
            && (self.harmonic - self.by_delay).abs() <= tol * self.harmonic.abs()
            && le(self.by_deadline, self.by_delay)
    }

    /// Whether the first link is tight to relative tolerance `tol`.
    pub fn first_link_tight(&self, tol: f64) -> bool {
        (self.objective - self.harmonic).abs() <= tol * self.objective
    }
}

pub fn mean_chain(terms: &[ChainTerm]) -> MeanChain {
    let n2 = (terms.len() as f64).powi(2);
    let iterations = |t: &ChainTerm| (t.total_delay - t.uplink_delay - t.downlink_delay) / t.iteration_time;
    MeanChain {
        objective: terms.iter().map(|t| t.share * t.share / iterations(t)).sum(),
        harmonic: n2 / terms.iter().map(|t| iterations(t) / (t.share * t.share)).sum::<f64>(),
        by_delay: n2
            / terms
                .iter()
                .map(|t| (t.total_delay - t.uplink_delay - t.downlink_delay) / (t.iteration_time * t.share * t.share))
                .sum::<f64>(),
        by_deadline: n2
            / terms
                .iter()
                .map(|t| (t.round_duration - t.uplink_delay - t.downlink_delay) / (t.iteration_time * t.share * t.share))
                .sum::<f64>(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{partition_with_sizes, synth_quadratic, ClientPartition, ExampleStore};
    use crate::fl::AggregationMode;
    use approx::assert_relative_eq;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn consts(lc: f64, rho: f64, k1: f64, k2: f64, theta: f64) -> ConvergenceConstants {
        ConvergenceConstants {
            lipschitz: lc,
            pl: rho,
            kappa1: k1,
            kappa2: k2,
            theta,
            divergence: vec![],
            global_divergence: 0.0,
        }
    }

    #[test]
    fn phi_examples() {
        let one = RoundSchedule::uniform(&[100], 10, 10).unwrap();
        let (p1, p2) = phi_constants(&one, &[100], &consts(2.0, 1.0, 0.0, 0.3, 1.0), 0.1, 10);
        assert_eq!(p1, 0.0);
        assert!(p2 < 0.1);
        let (_, p2) = phi_constants(&one, &[100], &consts(2.0, 1.0, 0.7, 0.0, 1.0), 0.1, 10);
        assert_eq!(p2, 0.1);
        // hand evaluation: eta^2 Lc / 2 * A^2 kappa1 * 1 / A = eta^2 Lc kappa1 A / 2
        let (eta, lc, k1, a) = (0.05, 3.0, 0.4, 10.0);
        let (p1, _) = phi_constants(&one, &[100], &consts(lc, 1.0, k1, 0.0, 1.0), eta, 10);
        assert_relative_eq!(p1, 0.05 * 0.05 * 3.0 * 0.4 * 10.0 / 2.0, max_relative = 1e-14);
        assert_relative_eq!(p1, eta * eta * lc * k1 * a / 2.0, max_relative = 1e-14);
    }

    #[test]
    fn bound_examples() {
        assert_eq!(gap_bound(0, 0.3, 0.2, 1.0, 5.0).unwrap(), 5.0);
        assert_relative_eq!(gap_bound(2, 0.0, 0.25, 1.0, 1.0).unwrap(), 0.25, max_relative = 1e-15);
        let far = gap_bound(10_000, 0.3, 0.2, 1.0, 5.0).unwrap();
        assert_relative_eq!(far, asymptotic_bound(0.3, 0.2, 1.0).unwrap(), max_relative = 1e-12);
        assert!(matches!(gap_bound(3, 0.1, 0.0, 1.0, 1.0), Err(ConvergenceError::NotContracting { .. })));
    }

    #[test]
    fn kappa2_threshold_examples() {
        let one = RoundSchedule::uniform(&[7], 10, 10).unwrap();
        let c = kappa2_condition(&one, &[7], 0.0, 1.0 / 4.0, 4.0, 10);
        assert_relative_eq!(c.threshold, 2.0 / 10.0, max_relative = 1e-14);
        assert!(c.satisfied);
        let none = RoundSchedule::new(vec![false], vec![0], &[7], 10).unwrap();
        assert_eq!(kappa2_condition(&none, &[7], 1e9, 0.1, 1.0, 10).threshold, f64::INFINITY);
    }

    #[test]
    fn above_threshold_is_not_contracting_and_half_is() {
        let sizes = [300, 400, 500];
        let schedule = RoundSchedule::new(vec![true; 3], vec![10, 4, 7], &sizes, 10).unwrap();
        let lc = 2.0;
        let eta = 1.0 / lc;
        let thr = kappa2_condition(&schedule, &sizes, 0.0, eta, lc, 10).threshold;
        let c = consts(lc, 0.3, 0.1, 1.01 * thr, 1.0);
        let (p1, p2) = phi_constants(&schedule, &sizes, &c, eta, 10);
        assert!(gap_bound(5, p1, p2, c.pl, c.theta).is_err());
        let c = consts(lc, 0.3, 0.1, 0.5 * thr, 1.0);
        let (_, p2) = phi_constants(&schedule, &sizes, &c, eta, 10);
        let f = 1.0 - 2.0 * c.pl * p2;
        assert!(f > 0.0 && f < 1.0);
    }

    #[test]
    fn identity_design_has_unit_constants_and_zero_divergence() {
        let store = ExampleStore::new(Array2::eye(1), Targets::Real(vec![0.0])).unwrap();
        let task = TrainTask {
            loss: LossKind::Quadratic,
            train: std::sync::Arc::new(store),
            test: None,
            partition: ClientPartition { indices: vec![vec![0]] },
            batch: BatchMode::Full,
            learning_rate: 1.0,
            clip_norm: f64::INFINITY,
            aggregation: AggregationMode::AsWritten,
            optimal_loss: Some(0.0),
        };
        let c = estimate_constants(&task, &[0.0], &[2.0], 1).unwrap();
        assert_relative_eq!(c.lipschitz, 1.0, max_relative = 1e-12);
        assert_relative_eq!(c.pl, 1.0, max_relative = 1e-12);
        assert!(c.divergence[0] < 1e-12);
        assert_relative_eq!(c.theta, 2.0, max_relative = 1e-12);
    }

    #[test]
    fn identical_clients_have_zero_divergence() {
        // the same four rows twice, one copy per client
        let x = ndarray::array![[1.0, 0.2], [0.3, -1.0], [0.5, 0.5], [-0.7, 0.1]];
        let rows = ndarray::concatenate(ndarray::Axis(0), &[x.view(), x.view()]).unwrap();
        let y = vec![0.3, -0.2, 1.0, 0.4, 0.3, -0.2, 1.0, 0.4];
        let task = TrainTask {
            loss: LossKind::Quadratic,
            train: std::sync::Arc::new(ExampleStore::new(rows, Targets::Real(y)).unwrap()),
            test: None,
            partition: ClientPartition { indices: vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7]] },
            batch: BatchMode::Full,
            learning_rate: 0.1,
            clip_norm: f64::INFINITY,
            aggregation: AggregationMode::AsWritten,
            optimal_loss: Some(0.0),
        };
        let c = estimate_constants(&task, &[0.0, 0.0], &[1.0, 1.0], 3).unwrap();
        assert!(c.divergence.iter().all(|g| *g < 1e-12), "{:?}", c.divergence);
        // identical full-batch client gradients equal the global one
        assert_relative_eq!(c.kappa2, SAFETY_FACTOR, max_relative = 1e-9);
        assert!(c.kappa1 < 1e-12);
    }

    #[test]
    fn oversized_step_makes_no_claim() {
        let one = RoundSchedule::uniform(&[5], 10, 10).unwrap();
        let c = consts(2.0, 1.0, 0.0, 0.0, 1.0);
        let err = gap_vs_bound(&[1.0, 0.5], &c, &one, &[5], 0.6, 10).unwrap_err();
        assert!(matches!(err, ConvergenceError::StepTooLarge { .. }));
    }

    #[test]
    fn round_zero_gap_equals_bound() {
        let one = RoundSchedule::uniform(&[5], 10, 10).unwrap();
        let c = consts(2.0, 1.0, 0.0, 0.0, 0.7);
        let rows = gap_vs_bound(&[0.7], &c, &one, &[5], 0.5, 10).unwrap();
        assert_eq!(rows[0].gap, rows[0].bound);
        assert!(rows[0].holds);
    }

    #[test]
    fn full_batch_quadratic_gap_stays_under_bound() {
        let sizes = vec![40, 50, 60, 45];
        let n: usize = sizes.iter().sum();
        let synth = synth_quadratic(n, 6, 10.0, 0.2, 8).unwrap();
        let mut task = TrainTask {
            loss: synth.loss,
            partition: partition_with_sizes(n, &sizes, 8).unwrap(),
            train: std::sync::Arc::new(synth.store.clone()),
            test: None,
            batch: BatchMode::Full,
            learning_rate: 1.0,
            clip_norm: f64::INFINITY,
            aggregation: AggregationMode::AsWritten,
            optimal_loss: Some(synth.optimal_loss),
        };
        let init = vec![1.0; 6];
        let consts = estimate_constants(&task, &synth.optimum, &init, 8).unwrap();
        task.learning_rate = 1.0 / consts.lipschitz;
        let schedule = RoundSchedule::uniform(&sizes, 2, 2).unwrap();
        let gaps = replica_gaps(&task, &schedule, 2, &init, 40, &[0]).unwrap();
        let rows = gap_vs_bound(&gaps, &consts, &schedule, &sizes, task.learning_rate, 2).unwrap();
        assert!(rows.iter().all(|r| r.holds), "{rows:?}");
    }

    proptest! {
        #[test]
        fn recurrence_reproduces_closed_form(
            phi1 in 0.0..1.0f64, phi2 in 0.01..0.5f64, rho in 0.05..0.99f64, theta in 0.0..100.0f64,
        ) {
            let rounds = 100;
            let it = iterate_recurrence(rounds, phi1, phi2, rho, theta);
            for (t, b) in it.iter().enumerate() {
                let closed = gap_bound(t as u32, phi1, phi2, rho, theta).unwrap();
                prop_assert!((b - closed).abs() <= 1e-12 * closed.abs().max(1e-300) + 1e-300, "{} vs {}", b, closed);
            }
        }

        #[test]
        fn bound_monotone_toward_asymptote(
            phi1 in 0.0..1.0f64, phi2 in 0.01..0.5f64, rho in 0.05..0.99f64, theta in 0.0..10.0f64,
        ) {
            let limit = asymptotic_bound(phi1, phi2, rho).unwrap();
            let b: Vec<f64> = (0..50).map(|t| gap_bound(t, phi1, phi2, rho, theta).unwrap()).collect();
            for w in b.windows(2) {
                if limit <= theta {
                    prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-15);
                } else {
                    prop_assert!(w[1] >= w[0] * (1.0 - 1e-12) - 1e-15);
                }
            }
        }

        #[test]
        fn asymptote_proportional_to_schedule_sum(
            iters in prop::collection::vec(1u32..=10, 2..6),
            sizes in prop::collection::vec(100usize..500, 6),
        ) {
            let sizes = &sizes[..iters.len()];
            let c = consts(1.0, 0.5, 0.3, 0.0, 1.0);
            let eta = 0.5;
            let a = RoundSchedule::new(vec![true; iters.len()], iters.clone(), sizes, 10).unwrap();
            let b = RoundSchedule::uniform(sizes, 10, 10).unwrap();
            let ra = asymptotic_bound(phi_constants(&a, sizes, &c, eta, 10).0, eta, 0.5).unwrap();
            let rb = asymptotic_bound(phi_constants(&b, sizes, &c, eta, 10).0, eta, 0.5).unwrap();
            let ratio = schedule_sum(&a, sizes) / schedule_sum(&b, sizes);
            prop_assert!((ra / rb - ratio).abs() <= 1e-12 * ratio);
        }
    }
}
