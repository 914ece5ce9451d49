//! Self-checks: oracle agreement, link-budget round trip, the optimality-gap
//! bound and its contraction gate, objective sweeps, solver scaling and the
//! mean-inequality chain.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::IndexedRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{run_experiment, summarize, sweep_objective, ExperimentSpec, HarnessError, TaskKind};
use crate::allocator::{brute_force_reference, select_winners, solve, AllocatorKind, DualState, SolverOptions};
use crate::convergence::{
    estimate_constants, gap_vs_bound, iterate_recurrence, kappa2_condition, mean_chain, phi_constants,
    replica_gaps, gap_bound, ChainTerm,
};
use crate::datasets::{partition_with_sizes, synth_quadratic, BatchMode};
use crate::fl::{AggregationMode, RoundSchedule, TrainTask};
use crate::phy::{ber, min_power, sample_channels, snr, ChannelRealization};
use crate::rng::{self, Purpose};
use crate::scenario::{Scenario, ScenarioConfig};

/// Outcome of one check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String, elapsed: Duration) -> Self {
        Self { name: name.into(), passed, detail, seconds: elapsed.as_secs_f64() }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {}: {} ({:.2} s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.seconds
        )
    }
}

fn relative_gap(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Dual solver against exhaustive search on random small instances
/// (`M <= 4`, `K <= 3`, `L <= 3`, reference physics).
pub fn oracle_agreement(instances: u64, base_seed: u64) -> Check {
    let start = Instant::now();
    // (seed, (M, K, L), dual objective, oracle objective)
    type Outcome = (u64, (usize, usize, usize), f64, f64);
    let outcomes: Vec<Outcome> = (base_seed..base_seed + instances)
        .into_par_iter()
        .map(|seed| {
            let mut r = rng::stream(seed, Purpose::Geometry, 1, 0);
            let (m, k, l) = (r.random_range(1..=4), r.random_range(1..=3), r.random_range(1..=3));
            let mut cfg = ScenarioConfig::default();
            cfg.geometry.num_clients = m;
            cfg.radio.num_subchannels = k;
            cfg.modulation.rates.truncate(l + 1);
            let scenario = Scenario::from_config(&cfg, seed).expect("reference scenario");
            let ch = sample_channels(&scenario, seed, 1).expect("channel draw");
            let oracle = brute_force_reference(&ch, &scenario).expect("oracle").objective;
            let dual = solve(&ch, &scenario, &SolverOptions::default()).map_or(0.0, |r| r.objective);
            (seed, (m, k, l), dual, oracle)
        })
        .collect();
    let misses: Vec<_> = outcomes.iter().filter(|o| relative_gap(o.2, o.3) > 1e-9).collect();
    let elapsed = start.elapsed();
    let worst = misses.iter().map(|o| relative_gap(o.2, o.3)).fold(0.0, f64::max);
    let mut detail = format!("{}/{} instances within 1e-9 of the oracle", instances as usize - misses.len(), instances);
    if !misses.is_empty() {
        let seeds: Vec<String> =
            misses.iter().map(|o| format!("seed {} (M,K,L)={:?}", o.0, o.1)).collect();
        detail += &format!("; worst relative shortfall {worst:.3}; misses: {}", seeds.join(", "));
    }
    detail += "; runtime limit 60 s";
    Check::new("allocator matches brute force", misses.is_empty() && elapsed.as_secs_f64() < 60.0, detail, elapsed)
}

/// `ber(snr(min_power))` returns the target on random gains and rates.
pub fn ber_round_trip(pairs: usize, seed: u64) -> Check {
    let start = Instant::now();
    let cfg = ScenarioConfig::default();
    let scheme = cfg.scheme().expect("reference scheme");
    let sigma2 = cfg.radio_config().noise_power();
    let mut r = rng::stream(seed, Purpose::Estimation, 0, 7);
    let active = &scheme.rates[1..];
    let mut worst = 0.0f64;
    for _ in 0..pairs {
        let gain = 10f64.powf(r.random_range(-14.0..-6.0));
        let rate = *active.choose(&mut r).expect("active modes");
        let p = min_power(gain, rate, sigma2, &scheme).expect("positive gain");
        let back = ber(snr(p, gain, sigma2), rate, &scheme).expect("valid rate");
        worst = worst.max(relative_gap(back, scheme.target_ber));
    }
    let elapsed = start.elapsed();
    Check::new(
        "BER/power round trip",
        worst <= 1e-12 && elapsed.as_secs_f64() < 1.0,
        format!("{pairs} pairs, worst relative error {worst:.2e} (limit 1e-12, runtime limit 1 s)"),
        elapsed,
    )
}

/// Shared setup of the bound checks: reference client population, a
/// conditioned quadratic over its data, full participation with `A`
/// iterations each.
pub struct BoundSetup {
    pub task: TrainTask,
    pub optimum: Vec<f64>,
    pub initial: Vec<f64>,
    pub sizes: Vec<usize>,
    pub max_iterations: u32,
}

pub fn bound_setup(dim: usize, batch: usize, seed: u64) -> BoundSetup {
    let scenario = Scenario::from_config(&ScenarioConfig::default(), seed).expect("reference scenario");
    let sizes: Vec<usize> = scenario.clients.iter().map(|c| c.dataset_size).collect();
    let n = sizes.iter().sum();
    let synth = synth_quadratic(n, dim, 10.0, 0.5, seed).expect("synthetic quadratic");
    let task = TrainTask {
        loss: synth.loss,
        partition: partition_with_sizes(n, &sizes, seed).expect("sizes fit"),
        train: Arc::new(synth.store),
        test: None,
        batch: if batch == 0 { BatchMode::Full } else { BatchMode::Sample { size: batch } },
        learning_rate: 1.0,
        clip_norm: f64::INFINITY,
        aggregation: AggregationMode::AsWritten,
        optimal_loss: Some(synth.optimal_loss),
    };
    BoundSetup {
        task,
        optimum: synth.optimum,
        initial: vec![1.0; dim],
        sizes,
        max_iterations: scenario.timing.max_local_iterations,
    }
}

/// Mean measured gap against the closed-form bound, plus the closed form
/// against the iterated one-step recurrence.
pub fn bound_holds(replicas: u64, rounds: u32) -> Check {
    let start = Instant::now();
    let mut setup = bound_setup(10, 64, 11);
    let consts = match estimate_constants(&setup.task, &setup.optimum, &setup.initial, 11) {
        Ok(c) => c,
        Err(e) => return Check::new("optimality-gap bound", false, e.to_string(), start.elapsed()),
    };
    setup.task.learning_rate = 1.0 / consts.lipschitz;
    let a = setup.max_iterations;
    let schedule = RoundSchedule::uniform(&setup.sizes, a, a).expect("valid schedule");
    let seeds: Vec<u64> = (0..replicas).collect();
    let result = replica_gaps(&setup.task, &schedule, a, &setup.initial, rounds, &seeds)
        .and_then(|gaps| gap_vs_bound(&gaps, &consts, &schedule, &setup.sizes, setup.task.learning_rate, a));
    let rows = match result {
        Ok(r) => r,
        Err(e) => return Check::new("optimality-gap bound", false, e.to_string(), start.elapsed()),
    };
    let violations = rows.iter().filter(|r| !r.holds).count();
    let step_violations = rows.iter().filter(|r| !r.step_holds).count();
    let (phi1, phi2) = phi_constants(&schedule, &setup.sizes, &consts, setup.task.learning_rate, a);
    let iterated = iterate_recurrence(rounds, phi1, phi2, consts.pl, consts.theta);
    let recurrence_err = iterated
        .iter()
        .enumerate()
        .map(|(t, b)| relative_gap(*b, gap_bound(t as u32, phi1, phi2, consts.pl, consts.theta).unwrap_or(f64::NAN)))
        .fold(0.0, f64::max);
    let elapsed = start.elapsed();
    let last = rows.last().expect("round 0 present");
    Check::new(
        "optimality-gap bound",
        violations == 0 && recurrence_err <= 1e-12 && elapsed.as_secs_f64() < 120.0,
        format!(
            "{replicas} replicas x {rounds} rounds: {violations} rounds above bound; one-step recurrence \
             violated in {step_violations} rounds; recurrence vs closed form max rel err {recurrence_err:.1e} \
             (limit 1e-12); L_c={:.3} rho={:.3} kappa1={:.3} kappa2={:.3}; final gap {:.3e} <= bound {:.3e}",
            consts.lipschitz, consts.pl, consts.kappa1, consts.kappa2, last.gap, last.bound
        ),
        elapsed,
    )
}

/// `kappa2` just over the threshold must be rejected; half of it must give
/// a contraction factor in `(0, 1)`.
pub fn contraction_gate() -> Check {
    let start = Instant::now();
    let setup = bound_setup(10, 64, 11);
    let consts = match estimate_constants(&setup.task, &setup.optimum, &setup.initial, 11) {
        Ok(c) => c,
        Err(e) => return Check::new("contraction condition gate", false, e.to_string(), start.elapsed()),
    };
    let a = setup.max_iterations;
    let iters: Vec<u32> = (0..setup.sizes.len() as u32).map(|m| 1 + m % a).collect();
    let schedule = RoundSchedule::new(vec![true; setup.sizes.len()], iters, &setup.sizes, a).expect("valid schedule");
    let eta = 1.0 / consts.lipschitz;
    let threshold = kappa2_condition(&schedule, &setup.sizes, 0.0, eta, consts.lipschitz, a).threshold;
    let mut over = consts.clone();
    over.kappa2 = threshold * 1.01;
    let (p1, p2) = phi_constants(&schedule, &setup.sizes, &over, eta, a);
    let rejected = gap_bound(10, p1, p2, over.pl, over.theta).is_err();
    let mut half = consts;
    half.kappa2 = threshold / 2.0;
    let (_, p2) = phi_constants(&schedule, &setup.sizes, &half, eta, a);
    let factor = 1.0 - 2.0 * half.pl * p2;
    Check::new(
        "contraction condition gate",
        rejected && factor > 0.0 && factor < 1.0,
        format!(
            "threshold {threshold:.4}; 1.01x threshold rejected: {rejected}; at half threshold 1 - 2 rho phi2 = {factor:.4}"
        ),
        start.elapsed(),
    )
}

/// Settings of the MLP reproduction check.
#[derive(Debug, Clone)]
pub struct MlpCheck {
    pub seeds: Vec<u64>,
    pub rounds: u64,
    pub data_dir: Option<PathBuf>,
}

impl Default for MlpCheck {
    fn default() -> Self {
        Self { seeds: vec![1, 2, 3, 4, 5], rounds: 50, data_dir: None }
    }
}

/// Spec of the desk-scale MLP run: reference physics, `K = 16`.
pub fn mlp_spec(check: &MlpCheck) -> ExperimentSpec {
    let mut spec = ExperimentSpec::default();
    spec.experiment.name = "mlp_mnist".into();
    spec.experiment.allocators = vec![AllocatorKind::Optimal, AllocatorKind::Baseline2];
    spec.experiment.rounds = check.rounds;
    spec.experiment.seeds = check.seeds.clone();
    spec.experiment.subchannels = Some(vec![16]);
    spec.training.task = TaskKind::Mlp;
    spec.training.clip_norm = Some(100.0);
    spec.training.data_dir = check.data_dir.clone();
    spec
}

pub fn mlp_reproduction(check: &MlpCheck) -> Check {
    let name = "MLP/MNIST reproduction";
    let start = Instant::now();
    let bundle = match run_experiment(&mlp_spec(check)) {
        Ok(b) => b,
        Err(e) => return Check::new(name, false, e.to_string(), start.elapsed()),
    };
    if let Some(f) = bundle.failures().next() {
        return Check::new(name, false, format!("run {} failed: {}", f.key, f.error.as_deref().unwrap_or("")), start.elapsed());
    }
    let rows = summarize(&bundle);
    let find = |a: AllocatorKind| rows.iter().find(|r| r.allocator == a).expect("allocator ran");
    let opt = find(AllocatorKind::Optimal);
    let rnd = find(AllocatorKind::Baseline2);
    let acc = opt.final_accuracy.unwrap_or(0.0);
    let rnd_acc = rnd.final_accuracy.unwrap_or(0.0);
    let elapsed = start.elapsed();
    let passed = acc >= 0.90 && opt.final_loss <= 0.45 && acc > rnd_acc && elapsed.as_secs_f64() < 1800.0;
    Check::new(
        name,
        passed,
        format!(
            "{} seeds, G = {}: optimal accuracy {acc:.4} (>= 0.90), loss {:.4} (<= 0.45); \
             random-client accuracy {rnd_acc:.4}, loss {:.4} (optimal must exceed); mean clients per round \
             optimal {:.2}, random {:.2}",
            check.seeds.len(),
            check.rounds,
            opt.final_loss,
            rnd.final_loss,
            opt.mean_selected,
            rnd.mean_selected
        ),
        elapsed,
    )
}

fn affine_residual(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = if sxx > 0.0 { xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / sxx } else { 0.0 };
    let scale = ys.iter().fold(0.0f64, |a, y| a.max(y.abs())).max(f64::MIN_POSITIVE);
    xs.iter().zip(ys).map(|(x, y)| (y - my - slope * (x - mx)).abs()).fold(0.0, f64::max) / scale
}

/// Shape of the objective-vs-subchannels curves.
pub fn sweep_shape(seeds: Vec<u64>, draws: u64) -> Check {
    let start = Instant::now();
    let ks = vec![2, 4, 6, 8, 12, 16];
    let mut spec = ExperimentSpec::default();
    spec.experiment.subchannels = Some(ks.clone());
    spec.experiment.seeds = seeds.clone();
    spec.experiment.channel_draws = draws;
    let rows = match sweep_objective(&spec) {
        Ok(r) => r,
        Err(e) => return Check::new("objective sweep shape", false, e.to_string(), start.elapsed()),
    };
    let series = |rows: &[super::SweepRow], a: AllocatorKind, f: fn(&super::SweepRow) -> f64| -> Vec<f64> {
        ks.iter().map(|k| f(rows.iter().find(|r| r.allocator == a && r.value == *k).expect("row"))).collect()
    };
    let opt = series(&rows, AllocatorKind::Optimal, |r| r.mean_objective);
    let nondecreasing = opt.windows(2).all(|w| w[1] >= w[0] * (1.0 - 1e-12));
    let sync_rate = series(&rows, AllocatorKind::Baseline3, |r| r.mean_sum_rate);
    let sync_zero = ks.iter().zip(&sync_rate).filter(|(k, _)| **k <= 6).all(|(_, r)| *r == 0.0);

    let mut fixed = spec.clone();
    fixed.experiment.fading = false;
    fixed.experiment.allocators = vec![AllocatorKind::Baseline1];
    fixed.experiment.channel_draws = 1;
    let b1 = match sweep_objective(&fixed) {
        Ok(r) => series(&r, AllocatorKind::Baseline1, |r| r.mean_objective),
        Err(e) => return Check::new("objective sweep shape", false, e.to_string(), start.elapsed()),
    };
    let xs: Vec<f64> = ks.iter().map(|k| *k as f64).collect();
    let residual = affine_residual(&xs, &b1);
    let affine = residual <= 1e-9;
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4e}")).collect::<Vec<_>>().join(", ");
    Check::new(
        "objective sweep shape",
        nondecreasing && sync_zero && affine,
        format!(
            "K = {ks:?}; optimal objective nondecreasing: {nondecreasing} [{}]; synchronous baseline sum rate zero \
             for K <= 6: {sync_zero} [{}]; two-modulation objective affine on mean gains: {affine} \
             (max residual {residual:.1e}) [{}]",
            fmt(&opt),
            fmt(&sync_rate),
            fmt(&b1)
        ),
        start.elapsed(),
    )
}

/// Median winner-selection time against `M K L` over a 16x range, with the
/// coefficient of determination of a least-squares line.
pub fn winner_scaling() -> Check {
    let start = Instant::now();
    let (m, l) = (10usize, 3usize);
    let ks = [32usize, 64, 128, 256, 512];
    let setups: Vec<(Scenario, ChannelRealization)> = ks
        .iter()
        .map(|k| {
            let mut cfg = ScenarioConfig::default();
            cfg.geometry.num_clients = m;
            cfg.radio.num_subchannels = *k;
            let scenario = Scenario::from_config(&cfg, 3).expect("scenario");
            let ch = sample_channels(&scenario, 3, 1).expect("channels");
            (scenario, ch)
        })
        .collect();
    let duals = DualState::new(m, 0.1, 0.01, Default::default());
    let call = |(s, ch): &(Scenario, ChannelRealization)| {
        std::hint::black_box(select_winners(&duals, ch, s).expect("winners"));
    };
    // enough calls per sample to last about 5 ms
    let reps: Vec<usize> = setups
        .iter()
        .map(|setup| {
            let t = Instant::now();
            for _ in 0..10 {
                call(setup);
            }
            ((5e-3 / (t.elapsed().as_secs_f64() / 10.0)).ceil() as usize).max(1)
        })
        .collect();
    // sizes are interleaved so a slow stretch of the machine hits all of them
    let mut times = vec![Vec::new(); ks.len()];
    for _ in 0..31 {
        for (i, setup) in setups.iter().enumerate() {
            let t = Instant::now();
            for _ in 0..reps[i] {
                call(setup);
            }
            times[i].push(t.elapsed().as_secs_f64() / reps[i] as f64);
        }
    }
    let points: Vec<(f64, f64)> = ks
        .iter()
        .zip(&mut times)
        .map(|(k, t)| {
            t.sort_by(f64::total_cmp);
            ((m * k * l) as f64, t[t.len() / 2])
        })
        .collect();
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let r2 = sxy * sxy / (sxx * syy);
    let detail = points.iter().map(|(x, t)| format!("{x:.0}: {:.1} us", t * 1e6)).collect::<Vec<_>>().join(", ");
    Check::new(
        "winner selection scales linearly",
        r2 >= 0.95,
        format!("R^2 = {r2:.4} (>= 0.95); median time by M*K*L: {detail}"),
        start.elapsed(),
    )
}

/// The mean-inequality chain on random schedules; half are built with all
/// per-client terms equal, where the first link must be tight.
pub fn mean_chain_property(schedules: usize, seed: u64) -> Check {
    let start = Instant::now();
    let mut r = rng::stream(seed, Purpose::Estimation, 0, 8);
    let mut broken = 0;
    let mut misdetected = 0;
    for i in 0..schedules {
        let n = r.random_range(1..=10);
        let equal = i % 2 == 0 || n == 1;
        let deadline = 10.0;
        let downlink = 0.1;
        let common = r.random_range(50.0..5000.0);
        let terms: Vec<ChainTerm> = (0..n)
            .map(|_| {
                let share: f64 = r.random_range(0.02..0.3);
                let iteration_time = r.random_range(0.01..0.05);
                let uplink = r.random_range(0.05..2.0);
                let iterations = if equal {
                    common * share * share
                } else {
                    r.random_range(0.1..(deadline - uplink - downlink) / iteration_time)
                };
                // keep the realized round time inside the deadline
                let iterations = iterations.min((deadline - uplink - downlink) / iteration_time);
                ChainTerm {
                    share,
                    total_delay: uplink + downlink + iterations * iteration_time,
                    uplink_delay: uplink,
                    downlink_delay: downlink,
                    iteration_time,
                    round_duration: deadline,
                }
            })
            .collect();
        let ratios: Vec<f64> = terms
            .iter()
            .map(|t| (t.total_delay - t.uplink_delay - t.downlink_delay) / t.iteration_time / (t.share * t.share))
            .collect();
        let truly_equal = ratios.iter().all(|x| relative_gap(*x, ratios[0]) <= 1e-12);
        let chain = mean_chain(&terms);
        if !chain.holds(1e-12) {
            broken += 1;
        }
        if chain.first_link_tight(1e-10) != truly_equal {
            misdetected += 1;
        }
    }
    Check::new(
        "mean-inequality chain",
        broken == 0 && misdetected == 0,
        format!("{schedules} schedules: chain broken on {broken}, equality misdetected on {misdetected}"),
        start.elapsed(),
    )
}

/// Fixed-gain helper used by tests of the two-modulation baseline.
pub fn mean_gain_channels(scenario: &Scenario) -> ChannelRealization {
    ChannelRealization::mean_gains(scenario, 1).expect("mean gains")
}

/// The quick suites (everything except the MLP run and the sweep).
pub fn quick_checks() -> Vec<Check> {
    vec![
        oracle_agreement(100, 0),
        ber_round_trip(10_000, 1),
        bound_holds(20, 100),
        contraction_gate(),
        winner_scaling(),
        mean_chain_property(10_000, 2),
    ]
}

/// Returns an error only for setup failures; failed checks are reported in
/// the returned list.
pub fn all_checks(mlp: Option<&MlpCheck>) -> Result<Vec<Check>, HarnessError> {
    let mut out = quick_checks();
    out.push(sweep_shape(vec![1, 2, 3, 4, 5], 10));
    if let Some(m) = mlp {
        out.push(mlp_reproduction(m));
    }
    Ok(out)
}
