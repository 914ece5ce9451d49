use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dual::{Normalization, RewardTable};
use super::{solve, solve_restricted, AllocError, AllocatorReport, Assignment, Grant, SolverOptions, Violation};
use crate::phy::ChannelRealization;
use crate::rng::{self, Purpose};
use crate::scenario::Scenario;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Idle plus one active mode: 4 bits/symbol, or the scenario's
    /// closest rate when 4 is not offered.
    TwoModulation,
    /// Random client subset, optimal subchannels and modulations within it.
    RandomClient,
}

pub fn baseline_allocators(
    kind: BaselineKind,
    channels: &ChannelRealization,
    scenario: &Scenario,
    opts: &SolverOptions,
    seed: u64,
) -> Result<AllocatorReport, AllocError> {
    match kind {
        BaselineKind::TwoModulation => {
            solve(channels, &scenario.with_rates(vec![0.0, two_modulation_rate(scenario)]), opts)
        }
        BaselineKind::RandomClient => {
            let subset = random_subset(seed, channels.round, scenario.num_clients());
            if !subset.iter().any(|s| *s) {
                return Ok(AllocatorReport::from_assignment(Assignment::idle(scenario), scenario));
            }
            solve_restricted(channels, scenario, opts, &subset)
        }
    }
}

/// The active rate of the two-modulation baseline: the largest offered rate
/// not above 4 bits/symbol, else the smallest offered one.
pub fn two_modulation_rate(scenario: &Scenario) -> f64 {
    let active = &scenario.scheme.rates[1..];
    active
        .iter()
        .copied()
        .filter(|r| *r <= 4.0)
        .fold(None, |best: Option<f64>, r| Some(best.map_or(r, |b| b.max(r))))
        .unwrap_or_else(|| active.iter().copied().fold(f64::INFINITY, f64::min))
}

/// Uniform draw over all client subsets: each client independently with
/// probability 1/2.
pub fn random_subset(seed: u64, round: u64, num_clients: usize) -> Vec<bool> {
    let mut rng = rng::stream(seed, Purpose::ClientSubset, round, 0);
    (0..num_clients).map(|_| rng.random_bool(0.5)).collect()
}

/// Constraints a synchronous schedule breaks: power budgets, and every
/// selected client must upload in time to run all `A` iterations.
pub(crate) fn sync_violations(a: &Assignment, scenario: &Scenario) -> Vec<Violation> {
    let mut out = Vec::new();
    for (c, client) in scenario.clients.iter().enumerate() {
        if !a.selected[c] {
            continue;
        }
        if a.powers[c] > client.power_budget {
            out.push(Violation::Power { client: c, power: a.powers[c], budget: client.power_budget });
        }
        let floor = sync_floor(scenario, c);
        if !(a.rates[c] >= floor) {
            out.push(Violation::RateBelowWindow { client: c, rate: a.rates[c], lower: floor });
        }
    }
    out
}

/// Smallest rate (bits/s) leaving time for `A` iterations; `inf` if none does.
fn sync_floor(scenario: &Scenario, client: usize) -> f64 {
    scenario.rate_window(client).map_or(f64::INFINITY, |w| w.upper)
}

/// Synchronous FL baseline: maximize the selected data share
/// `sum_m D_m^2 zeta_m / D^2`, each selected client running exactly `A`
/// iterations.
///
/// Same dual machinery as [`solve`], with a selection variable per client
/// tied to its subchannels by a linking multiplier `pi`. A subchannel's
/// reward is `pi + nu * r - xi * p`; a client is worth selecting when its
/// share exceeds `pi + nu * floor`. Clients of an iterate that miss the
/// deadline or the power budget are dropped, then unselected clients are
/// greedily added on spare subchannels, before the iterate is scored. An
/// all-idle schedule is returned when nobody can make it.
pub fn sync_fl_allocate(
    channels: &ChannelRealization,
    scenario: &Scenario,
    opts: &SolverOptions,
) -> Result<AllocatorReport, AllocError> {
    let table = RewardTable::new(channels, scenario)?;
    let m = scenario.num_clients();
    let norm = Normalization::new(scenario);
    let share: Vec<f64> = (0..m).map(|c| scenario.selection_weight(c)).collect();
    let smax = share.iter().cloned().fold(0.0, f64::max);
    let share: Vec<f64> = share.iter().map(|s| s / smax).collect();
    let floor: Vec<f64> = (0..m).map(|c| sync_floor(scenario, c) / norm.rate_scale).collect();
    let eligible: Vec<bool> = floor.iter().map(|f| f.is_finite()).collect();

    let init = opts.initial_dual;
    let (mut xi, mut nu, mut pi) = (vec![init; m], vec![init; m], vec![init; m]);
    let mut best = Assignment::idle(scenario);
    let mut best_score = 0.0;
    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;

    for iter in 0..opts.max_iterations {
        let reward = |c: usize, k: usize, l: usize| {
            let p = table.power[(c * table.num_subchannels + k) * table.num_active + l - 1];
            if p.is_infinite() {
                f64::NEG_INFINITY
            } else {
                pi[c] + nu[c] * table.rate[l - 1] - xi[c] * p
            }
        };
        let mut grants = vec![None; table.num_subchannels];
        let mut value = 0.0;
        for (k, slot) in grants.iter_mut().enumerate() {
            let mut top = 0.0;
            for c in (0..m).filter(|c| eligible[*c]) {
                for l in 1..=table.num_active {
                    let v = reward(c, k, l);
                    if v > top {
                        top = v;
                        *slot = Some(Grant { client: c, mode: l });
                    }
                }
            }
            value += top;
        }
        let pick: Vec<bool> = (0..m).map(|c| eligible[c] && share[c] - pi[c] - nu[c] * floor[c] > 0.0).collect();
        for c in (0..m).filter(|c| pick[*c]) {
            value += share[c] - pi[c] - nu[c] * floor[c];
        }
        value += xi.iter().sum::<f64>();

        let a = Assignment::evaluate(grants, channels, scenario)?;
        let failing: Vec<usize> = sync_violations(&a, scenario).iter().map(Violation::client).collect();
        let kept: Vec<Option<Grant>> =
            a.grants.iter().map(|g| g.filter(|g| !failing.contains(&g.client))).collect();
        let recovered = augment_sync(Assignment::evaluate(kept, channels, scenario)?, &share, &table, channels, scenario)?;
        let score: f64 = (0..m).filter(|c| recovered.selected[*c]).map(|c| share[c]).sum();
        if score > best_score {
            best_score = score;
            best = recovered;
        }

        let eps = match opts.schedule {
            super::StepSchedule::Constant => opts.step,
            super::StepSchedule::InverseSqrt => opts.step / ((iter + 1) as f64).sqrt(),
        };
        for c in 0..m {
            let n = a.grants.iter().flatten().filter(|g| g.client == c).count() as f64;
            let z = if pick[c] { 1.0 } else { 0.0 };
            let rate = a.rates[c] / norm.rate_scale;
            xi[c] = (xi[c] + eps * (a.powers[c] / norm.budget[c] - 1.0)).max(0.0);
            if eligible[c] {
                nu[c] = (nu[c] + eps * (floor[c] * z - rate)).max(0.0);
            }
            pi[c] = (pi[c] - eps * (n - z)).max(0.0);
        }

        let settled = trace
            .last()
            .is_some_and(|prev: &f64| (value - prev).abs() <= opts.tolerance * prev.abs().max(f64::MIN_POSITIVE));
        trace.push(value);
        if settled {
            converged = true;
            break;
        }
    }

    Ok(AllocatorReport {
        iterations_used: trace.len(),
        lagrangian_trace: trace,
        converged,
        ..AllocatorReport::from_assignment(best, scenario)
    })
}

/// Adds unselected clients, largest share first, on a free subchannel or one
/// its holder can spare, at the lowest-power mode that meets the deadline.
fn augment_sync(
    mut a: Assignment,
    share: &[f64],
    table: &RewardTable,
    channels: &ChannelRealization,
    scenario: &Scenario,
) -> Result<Assignment, AllocError> {
    let mut order: Vec<usize> = (0..share.len()).filter(|c| !a.selected[*c]).collect();
    order.sort_by(|x, y| share[*y].total_cmp(&share[*x]).then(x.cmp(y)));
    for c in order {
        let mut pick: Option<(f64, Vec<Option<Grant>>)> = None;
        for k in 0..table.num_subchannels {
            for l in 1..=table.num_active {
                let p = table.power[(c * table.num_subchannels + k) * table.num_active + l - 1];
                if p > 1.0 || pick.as_ref().is_some_and(|(best, _)| p >= *best) {
                    continue;
                }
                let mut trial = a.grants.clone();
                trial[k] = Some(Grant { client: c, mode: l });
                let t = Assignment::evaluate(trial, channels, scenario)?;
                let holder_kept = a.grants[k].is_none_or(|g| t.selected[g.client]);
                if holder_kept && sync_violations(&t, scenario).is_empty() {
                    pick = Some((p, t.grants));
                }
            }
        }
        if let Some((_, grants)) = pick {
            a = Assignment::evaluate(grants, channels, scenario)?;
        }
    }
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::super::{brute_force_reference, brute_force_sync};
    use super::*;
    use crate::phy;
    use crate::scenario::ScenarioConfig;

    #[test]
    fn full_subset_equals_optimal() {
        let s = small_scenario(4, 3, 3, 11);
        let ch = phy::sample_channels(&s, 11, 2).unwrap();
        let opts = SolverOptions::default();
        let full = solve_restricted(&ch, &s, &opts, &[true; 4]).unwrap();
        assert_eq!(full, solve(&ch, &s, &opts).unwrap());
    }

    #[test]
    fn subsets_are_seeded() {
        assert_eq!(random_subset(3, 7, 10), random_subset(3, 7, 10));
        let draws: Vec<Vec<bool>> = (0..20).map(|r| random_subset(3, r, 10)).collect();
        assert!(draws.windows(2).any(|w| w[0] != w[1]));
        let share = draws.iter().flatten().filter(|b| **b).count() as f64 / 200.0;
        assert!((share - 0.5).abs() < 0.15, "{share}");
    }

    #[test]
    fn two_modulation_only_uses_four_bits() {
        let s = small_scenario(4, 6, 3, 2);
        let ch = phy::sample_channels(&s, 2, 0).unwrap();
        let r = baseline_allocators(BaselineKind::TwoModulation, &ch, &s, &SolverOptions::default(), 0).unwrap();
        assert!(r.assignment.grants.iter().flatten().all(|g| g.mode == 1));
        let sym = s.radio.symbol_rate();
        for rate in r.assignment.rates {
            assert_eq!((rate / sym) % 4.0, 0.0);
        }
    }

    #[test]
    fn two_modulation_rate_falls_back_within_the_offered_set() {
        let s = small_scenario(2, 2, 3, 0);
        assert_eq!(two_modulation_rate(&s), 4.0);
        assert_eq!(two_modulation_rate(&s.with_rates(vec![0.0, 2.0])), 2.0);
        assert_eq!(two_modulation_rate(&s.with_rates(vec![0.0, 6.0, 8.0])), 6.0);
    }

    #[test]
    fn generous_resources_select_everyone_with_full_iterations() {
        let s = Scenario::from_config(&ScenarioConfig::default(), 5).unwrap();
        let ch = phy::sample_channels(&s, 5, 0).unwrap();
        let r = sync_fl_allocate(&ch, &s, &SolverOptions::default()).unwrap();
        assert!(r.assignment.selected.iter().all(|z| *z), "{:?}", r.assignment.selected);
        assert!(r.assignment.iterations.iter().all(|i| *i == 10));
        assert!(sync_violations(&r.assignment, &s).is_empty());
    }

    #[test]
    fn impossible_deadline_gives_all_idle() {
        let mut s = small_scenario(3, 2, 3, 1);
        s.model_params = 1e12;
        let ch = phy::sample_channels(&s, 1, 0).unwrap();
        let r = sync_fl_allocate(&ch, &s, &SolverOptions::default()).unwrap();
        assert_eq!(r.sum_rate, 0.0);
        assert_eq!(r.objective, 0.0);
    }

    #[test]
    fn sync_matches_its_oracle_on_small_instances() {
        for seed in 0..30 {
            let s = small_scenario(3, 2, 3, seed);
            let ch = phy::sample_channels(&s, seed, 0).unwrap();
            let r = sync_fl_allocate(&ch, &s, &SolverOptions::default()).unwrap();
            let o = brute_force_sync(&ch, &s).unwrap();
            let score = |a: &Assignment| (0..3).filter(|c| a.selected[*c]).map(|c| s.selection_weight(c)).sum::<f64>();
            assert!(sync_violations(&r.assignment, &s).is_empty());
            assert!(score(&r.assignment) <= score(&o.assignment) + 1e-12);
        }
    }

    #[test]
    fn baselines_never_beat_the_oracle() {
        for seed in 0..20 {
            let s = small_scenario(3, 3, 3, seed);
            let ch = phy::sample_channels(&s, seed, 0).unwrap();
            let o = brute_force_reference(&ch, &s).unwrap().objective;
            for kind in [BaselineKind::TwoModulation, BaselineKind::RandomClient] {
                if let Ok(r) = baseline_allocators(kind, &ch, &s, &SolverOptions::default(), seed) {
                    assert!(r.objective <= o * (1.0 + 1e-12));
                }
            }
        }
    }
}
