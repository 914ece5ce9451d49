use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{AllocError, AllocatorReport, Assignment, Grant, Violation};
use crate::phy::{self, ChannelRealization};
use crate::scenario::{IterationCap, Scenario};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StepSchedule {
    #[default]
    Constant,
    /// `step / sqrt(l + 1)` at iteration `l`.
    InverseSqrt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub step: f64,
    pub schedule: StepSchedule,
    pub initial_dual: f64,
    /// Relative change of the dual function that counts as converged.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Greedily repair infeasible iterates before discarding them.
    pub repair: bool,
    /// Finish with a single-subchannel local search from the best feasible
    /// assignments seen.
    pub polish: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            step: 0.01,
            schedule: StepSchedule::Constant,
            initial_dual: 0.1,
            tolerance: 1e-8,
            max_iterations: 5000,
            repair: true,
            polish: true,
        }
    }
}

/// Feasible candidates the local search starts from.
const POLISH_CANDIDATES: usize = 32;

/// Per-client multipliers: `xi` prices power, `nu` the rate floor and `iota`
/// the rate cap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    pub xi: Vec<f64>,
    pub nu: Vec<f64>,
    pub iota: Vec<f64>,
    pub step: f64,
    pub schedule: StepSchedule,
    pub iter: usize,
}

impl DualState {
    pub fn new(num_clients: usize, initial: f64, step: f64, schedule: StepSchedule) -> Self {
        Self {
            xi: vec![initial; num_clients],
            nu: vec![initial; num_clients],
            iota: vec![initial; num_clients],
            step,
            schedule,
            iter: 0,
        }
    }

    pub fn zero(num_clients: usize) -> Self {
        Self::new(num_clients, 0.0, 0.01, StepSchedule::Constant)
    }

    pub fn step_size(&self) -> f64 {
        match self.schedule {
            StepSchedule::Constant => self.step,
            StepSchedule::InverseSqrt => self.step / ((self.iter + 1) as f64).sqrt(),
        }
    }
}

/// Scale factors that put every reward term on a common O(1) footing:
/// power as a fraction of the budget, rate in units of one subchannel at
/// the top modulation, and weights relative to the largest.
#[derive(Debug, Clone, PartialEq)]
pub(super) struct Normalization {
    /// bits/s per normalized rate unit.
    pub(super) rate_scale: f64,
    pub(super) weight: Vec<f64>,
    /// Normalized rate floor; `inf` when one iteration never fits.
    pub(super) lower: Vec<f64>,
    /// Normalized rate cap; `inf` unless the cap is enforced.
    pub(super) upper: Vec<f64>,
    pub(super) budget: Vec<f64>,
}

impl Normalization {
    pub(super) fn new(scenario: &Scenario) -> Self {
        let m = scenario.num_clients();
        let top = scenario.scheme.max_rate();
        let rate_scale = scenario.radio.symbol_rate() * if top > 0.0 { top } else { 1.0 };
        let raw: Vec<f64> = (0..m).map(|c| scenario.rate_weight(c)).collect();
        let wmax = raw.iter().cloned().fold(0.0, f64::max);
        let mut lower = Vec::with_capacity(m);
        let mut upper = Vec::with_capacity(m);
        for c in 0..m {
            match scenario.rate_window(c) {
                Some(w) => {
                    lower.push(w.lower / rate_scale);
                    upper.push(match scenario.iteration_cap {
                        IterationCap::Enforce => w.upper / rate_scale,
                        IterationCap::Saturate => f64::INFINITY,
                    });
                }
                None => {
                    lower.push(f64::INFINITY);
                    upper.push(f64::INFINITY);
                }
            }
        }
        Self {
            rate_scale,
            weight: raw.iter().map(|w| w / wmax).collect(),
            lower,
            upper,
            budget: scenario.clients.iter().map(|c| c.power_budget).collect(),
        }
    }
}

/// Normalized power of every (client, subchannel, active mode) plus the
/// factors needed to price it.
#[derive(Debug, Clone)]
pub struct RewardTable {
    pub(super) num_clients: usize,
    pub(super) num_subchannels: usize,
    pub(super) num_active: usize,
    /// `p / P_max` at `[(m * K + k) * L + (l - 1)]`; `inf` for deep fades.
    pub(super) power: Vec<f64>,
    /// `r_l / r_max` for `l = 1..=L`.
    pub(super) rate: Vec<f64>,
    pub(super) norm: Normalization,
}

impl RewardTable {
    pub fn new(channels: &ChannelRealization, scenario: &Scenario) -> Result<Self, AllocError> {
        let (m, k) = (scenario.num_clients(), scenario.num_subchannels());
        if channels.num_clients != m || channels.num_subchannels != k {
            return Err(AllocError::InvalidAssignment(format!(
                "channels are {}x{}, scenario is {m}x{k}",
                channels.num_clients, channels.num_subchannels
            )));
        }
        let scheme = &scenario.scheme;
        let l = scheme.num_active();
        let sigma2 = scenario.radio.noise_power();
        let norm = Normalization::new(scenario);
        let mut power = Vec::with_capacity(m * k * l);
        for c in 0..m {
            for sub in 0..k {
                let g = channels.gain(c, sub);
                for &r in &scheme.rates[1..] {
                    let p = phy::min_power(g, r, sigma2, scheme).unwrap_or(f64::INFINITY);
                    power.push(p / norm.budget[c]);
                }
            }
        }
        let top = scheme.max_rate();
        Ok(Self {
            num_clients: m,
            num_subchannels: k,
            num_active: l,
            power,
            rate: scheme.rates[1..].iter().map(|r| r / top).collect(),
            norm,
        })
    }

    /// Normalized net reward of giving subchannel `k` to client `m` at mode `l`.
    pub fn reward(&self, m: usize, k: usize, l: usize, duals: &DualState) -> f64 {
        if l == 0 {
            return 0.0;
        }
        let p = self.power[(m * self.num_subchannels + k) * self.num_active + l - 1];
        if p.is_infinite() || self.norm.lower[m].is_infinite() {
            return f64::NEG_INFINITY;
        }
        -duals.xi[m] * p + (self.norm.weight[m] + duals.nu[m] - duals.iota[m]) * self.rate[l - 1]
    }

    /// Per-subchannel argmax over eligible clients and modes. Ties go to the
    /// lowest client, then the lowest mode; a best reward of 0 leaves the
    /// subchannel idle.
    pub fn winners(&self, duals: &DualState, eligible: &[bool]) -> Vec<Option<Grant>> {
        (0..self.num_subchannels)
            .map(|k| {
                let mut best = 0.0;
                let mut winner = None;
                for m in (0..self.num_clients).filter(|m| eligible[*m]) {
                    for l in 1..=self.num_active {
                        let v = self.reward(m, k, l, duals);
                        if v > best {
                            best = v;
                            winner = Some(Grant { client: m, mode: l });
                        }
                    }
                }
                winner
            })
            .collect()
    }

    /// Lagrangian of `grants` under `duals`; at the winners this is the dual function.
    pub fn lagrangian(&self, duals: &DualState, grants: &[Option<Grant>]) -> f64 {
        let mut value: f64 = grants
            .iter()
            .enumerate()
            .filter_map(|(k, g)| g.map(|g| self.reward(g.client, k, g.mode, duals)))
            .sum();
        let mut selected = vec![false; self.num_clients];
        for g in grants.iter().flatten() {
            selected[g.client] = true;
        }
        for m in 0..self.num_clients {
            value += duals.xi[m];
            if selected[m] {
                value -= duals.nu[m] * self.norm.lower[m];
            }
            if duals.iota[m] > 0.0 && self.norm.upper[m].is_finite() {
                value += duals.iota[m] * self.norm.upper[m];
            }
        }
        value
    }

    fn update(&self, duals: &DualState, assignment: &Assignment) -> DualState {
        let eps = duals.step_size();
        let mut next = duals.clone();
        for m in 0..self.num_clients {
            let rate = assignment.rates[m] / self.norm.rate_scale;
            next.xi[m] = (duals.xi[m] + eps * (assignment.powers[m] / self.norm.budget[m] - 1.0)).max(0.0);
            if assignment.selected[m] {
                next.nu[m] = (duals.nu[m] + eps * (self.norm.lower[m] - rate)).max(0.0);
            }
            next.iota[m] = (duals.iota[m] + eps * (rate - self.norm.upper[m])).max(0.0);
        }
        next.iter += 1;
        next
    }
}

/// Net reward in normalized units, see [`RewardTable::reward`].
pub fn net_reward(
    m: usize,
    k: usize,
    l: usize,
    duals: &DualState,
    channels: &ChannelRealization,
    scenario: &Scenario,
) -> Result<f64, AllocError> {
    Ok(RewardTable::new(channels, scenario)?.reward(m, k, l, duals))
}

/// One winner-takes-all primal step.
pub fn select_winners(
    duals: &DualState,
    channels: &ChannelRealization,
    scenario: &Scenario,
) -> Result<Assignment, AllocError> {
    let table = RewardTable::new(channels, scenario)?;
    let grants = table.winners(duals, &vec![true; scenario.num_clients()]);
    Assignment::evaluate(grants, channels, scenario)
}

/// Projected subgradient step on the multipliers.
///
/// Each multiplier moves along its constraint's violation (power over budget,
/// rate below the floor, rate above the cap) and is clipped at zero. The floor
/// multiplier of an unselected client is left as is, since its constraint is
/// inactive.
pub fn dual_update(duals: &DualState, assignment: &Assignment, scenario: &Scenario) -> DualState {
    let norm = Normalization::new(scenario);
    let table = RewardTable {
        num_clients: scenario.num_clients(),
        num_subchannels: 0,
        num_active: 0,
        power: Vec::new(),
        rate: Vec::new(),
        norm,
    };
    table.update(duals, assignment)
}

/// Dual subgradient method with winner-takes-all primal steps.
pub fn solve(channels: &ChannelRealization, scenario: &Scenario, opts: &SolverOptions) -> Result<AllocatorReport, AllocError> {
    solve_restricted(channels, scenario, opts, &vec![true; scenario.num_clients()])
}

/// [`solve`] with only the clients flagged in `eligible` allowed to transmit.
pub fn solve_restricted(
    channels: &ChannelRealization,
    scenario: &Scenario,
    opts: &SolverOptions,
    eligible: &[bool],
) -> Result<AllocatorReport, AllocError> {
    let table = RewardTable::new(channels, scenario)?;
    let m = scenario.num_clients();
    if eligible.iter().zip(&table.norm.lower).all(|(e, l)| !e || l.is_infinite()) {
        let violations = (0..m)
            .filter(|c| eligible[*c])
            .map(|client| Violation::RateBelowWindow { client, rate: 0.0, lower: f64::INFINITY })
            .collect();
        return Err(AllocError::Infeasible { violations });
    }
    let mut duals = DualState::new(m, opts.initial_dual, opts.step, opts.schedule);
    // distinct feasible non-idle assignments, in order of discovery
    let mut pool: Vec<Assignment> = Vec::new();
    let mut seen: HashSet<Vec<Option<Grant>>> = HashSet::new();
    let mut last_violations: Option<Vec<Violation>> = None;
    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;

    let mut consider = |a: Assignment| {
        if a.num_selected() > 0 && seen.insert(a.grants.clone()) {
            pool.push(a);
        }
    };

    for _ in 0..opts.max_iterations {
        let grants = table.winners(&duals, eligible);
        let value = table.lagrangian(&duals, &grants);
        let a = Assignment::evaluate(grants, channels, scenario)?;
        let violations = a.violations(scenario);
        if violations.is_empty() {
            consider(a.clone());
        } else {
            if opts.repair {
                consider(repair(&a, &table, &duals, channels, scenario, eligible)?);
            }
            last_violations = Some(violations);
        }
        duals = table.update(&duals, &a);
        let settled = trace
            .last()
            .is_some_and(|prev: &f64| (value - prev).abs() <= opts.tolerance * prev.abs().max(f64::MIN_POSITIVE));
        trace.push(value);
        if settled {
            converged = true;
            break;
        }
    }

    let iterations_used = trace.len();
    let mut scored: Vec<(f64, Assignment)> = pool.into_iter().map(|a| (a.objective(scenario), a)).collect();
    // stable: equal objectives keep discovery order
    scored.sort_by(|x, y| y.0.total_cmp(&x.0));
    if opts.polish {
        scored.truncate(POLISH_CANDIDATES);
        for entry in scored.iter_mut() {
            let a = polish(entry.1.clone(), &table, channels, scenario, eligible)?;
            *entry = (a.objective(scenario), a);
        }
    }
    let mut best: Option<(f64, Assignment)> = None;
    for (obj, a) in scored {
        if best.as_ref().is_none_or(|(b, _)| obj > *b) {
            best = Some((obj, a));
        }
    }
    match (best, last_violations) {
        (Some((_, a)), _) => Ok(AllocatorReport {
            objective: a.objective(scenario),
            sum_rate: a.sum_rate(),
            assignment: a,
            lagrangian_trace: trace,
            converged,
            iterations_used,
        }),
        (None, Some(violations)) => Err(AllocError::Infeasible { violations }),
        // every iterate left all subchannels idle: nothing can transmit
        (None, None) => Ok(AllocatorReport {
            lagrangian_trace: trace,
            converged,
            iterations_used,
            ..AllocatorReport::from_assignment(Assignment::idle(scenario), scenario)
        }),
    }
}

/// Turns an infeasible iterate into a feasible one.
///
/// Over-budget clients shed power by repeatedly applying the single
/// downgrade (one mode lower, or releasing the subchannel) that loses the
/// least weighted rate per watt saved. Clients still short of the rate floor
/// release all their subchannels. Released subchannels are then offered to
/// the remaining clients in weighted-rate order, keeping only additions that stay
/// feasible.
fn repair(
    start: &Assignment,
    table: &RewardTable,
    duals: &DualState,
    channels: &ChannelRealization,
    scenario: &Scenario,
    eligible: &[bool],
) -> Result<Assignment, AllocError> {
    let mut grants = start.grants.clone();
    let power_of = |g: &Grant, k: usize| table.power[(g.client * table.num_subchannels + k) * table.num_active + g.mode - 1];
    let rate_of = |mode: usize| if mode == 0 { 0.0 } else { table.rate[mode - 1] };

    for c in 0..table.num_clients {
        loop {
            let load: f64 = grants
                .iter()
                .enumerate()
                .filter_map(|(k, g)| g.filter(|g| g.client == c).map(|g| power_of(&g, k)))
                .sum();
            if load <= 1.0 {
                break;
            }
            let mut pick: Option<(f64, usize)> = None;
            for (k, g) in grants.iter().enumerate() {
                let Some(g) = g.filter(|g| g.client == c) else { continue };
                let saved = power_of(&g, k) - if g.mode > 1 { power_of(&Grant { mode: g.mode - 1, ..g }, k) } else { 0.0 };
                let lost = rate_of(g.mode) - rate_of(g.mode - 1);
                let cost = if saved.is_infinite() { 0.0 } else { lost / saved };
                if pick.is_none_or(|(best, _)| cost < best) {
                    pick = Some((cost, k));
                }
            }
            let (_, k) = pick.expect("over budget implies at least one grant");
            let g = grants[k].expect("picked a granted subchannel");
            grants[k] = (g.mode > 1).then_some(Grant { mode: g.mode - 1, ..g });
        }
    }
    let mut a = Assignment::evaluate(grants, channels, scenario)?;
    for v in a.violations(scenario) {
        if matches!(v, Violation::RateBelowWindow { .. } | Violation::RateAboveWindow { .. }) {
            let c = v.client();
            for g in a.grants.iter_mut() {
                if g.is_some_and(|g| g.client == c) {
                    *g = None;
                }
            }
        }
    }
    let mut a = Assignment::evaluate(a.grants, channels, scenario)?;

    // refill released subchannels with the best feasible candidates
    let free: Vec<usize> = (0..a.grants.len()).filter(|k| a.grants[*k].is_none()).collect();
    for k in free {
        let mut options: Vec<(f64, Grant)> = Vec::new();
        for c in (0..table.num_clients).filter(|c| eligible[*c]) {
            for l in 1..=table.num_active {
                if table.reward(c, k, l, duals).is_finite() {
                    options.push((table.norm.weight[c] * table.rate[l - 1], Grant { client: c, mode: l }));
                }
            }
        }
        options.sort_by(|x, y| y.0.total_cmp(&x.0));
        for (_, g) in options {
            let mut trial = a.grants.clone();
            trial[k] = Some(g);
            let t = Assignment::evaluate(trial, channels, scenario)?;
            if t.is_feasible(scenario) {
                a = t;
                break;
            }
        }
    }
    Ok(a)
}

/// Single-subchannel local search: reassigns one subchannel at a time to the
/// (client, mode) or idle choice that most improves the objective while
/// staying feasible, until no such move remains.
fn polish(
    mut a: Assignment,
    table: &RewardTable,
    channels: &ChannelRealization,
    scenario: &Scenario,
    eligible: &[bool],
) -> Result<Assignment, AllocError> {
    let mut value = a.objective(scenario);
    loop {
        let mut improved = false;
        for k in 0..table.num_subchannels {
            let candidates = std::iter::once(None).chain(
                (0..table.num_clients)
                    .filter(|c| eligible[*c])
                    .flat_map(|c| (1..=table.num_active).map(move |mode| Some(Grant { client: c, mode }))),
            );
            for g in candidates {
                if g == a.grants[k] {
                    continue;
                }
                let mut trial = a.grants.clone();
                trial[k] = g;
                let t = Assignment::evaluate(trial, channels, scenario)?;
                let v = t.objective(scenario);
                if v > value * (1.0 + 1e-12) && t.is_feasible(scenario) {
                    a = t;
                    value = v;
                    improved = true;
                }
            }
        }
        if !improved {
            return Ok(a);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;
    use crate::phy::ChannelRealization;

    #[test]
    fn idle_mode_reward_is_zero_and_fade_is_excluded() {
        let (s, ch) = single_client(1e-9);
        let d = DualState::new(1, 0.3, 0.01, StepSchedule::Constant);
        assert_eq!(net_reward(0, 0, 0, &d, &ch, &s).unwrap(), 0.0);
        let (s0, ch0) = single_client(0.0);
        assert_eq!(net_reward(0, 0, 2, &d, &ch0, &s0).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn no_duals_gives_positive_weighted_rate() {
        let (s, ch) = single_client(1e-9);
        let d = DualState::zero(1);
        for l in 1..=3 {
            let v = net_reward(0, 0, l, &d, &ch, &s).unwrap();
            assert_eq!(v, s.scheme.rates[l] / 6.0); // single client: normalized weight 1
        }
    }

    #[test]
    fn large_power_price_idles_the_subchannel() {
        let (s, ch) = single_client(1e-9);
        let table = RewardTable::new(&ch, &s).unwrap();
        // per-mode threshold weight * r / p, all normalized
        let threshold = (1..=3)
            .map(|l| table.rate[l - 1] / table.power[l - 1])
            .fold(0.0, f64::max);
        let mut d = DualState::zero(1);
        d.xi[0] = threshold * 1.001;
        for l in 1..=3 {
            assert!(net_reward(0, 0, l, &d, &ch, &s).unwrap() < 0.0);
        }
        assert_eq!(select_winners(&d, &ch, &s).unwrap().grants, vec![None]);
        d.xi[0] = threshold * 0.999;
        assert!(select_winners(&d, &ch, &s).unwrap().grants[0].is_some());
    }

    #[test]
    fn deep_fade_everywhere_idles_everything() {
        let s = small_scenario(3, 4, 3, 1);
        let ch = ChannelRealization::from_gains(0, 3, 4, vec![0.0; 12]).unwrap();
        let a = select_winners(&DualState::zero(3), &ch, &s).unwrap();
        assert!(a.grants.iter().all(Option::is_none));
        assert!(a.selected.iter().all(|z| !z));
        let r = solve(&ch, &s, &SolverOptions::default()).unwrap();
        assert_eq!(r.objective, 0.0);
    }

    #[test]
    fn ties_go_to_lowest_client_then_mode() {
        let s = small_scenario(2, 1, 3, 0);
        let ch = ChannelRealization::from_gains(0, 2, 1, vec![1e-9, 1e-9]).unwrap();
        let mut table = RewardTable::new(&ch, &s).unwrap();
        table.norm.weight = vec![1.0, 1.0];
        table.power = vec![0.0; 6];
        table.rate = vec![1.0, 1.0, 1.0];
        let g = table.winners(&DualState::zero(2), &[true, true]);
        assert_eq!(g, vec![Some(Grant { client: 0, mode: 1 })]);
    }

    #[test]
    fn dual_update_examples() {
        let (s, ch) = single_client(1e-9);
        let mut a = Assignment::evaluate(vec![Some(Grant { client: 0, mode: 1 })], &ch, &s).unwrap();
        let d = DualState::new(1, 0.5, 0.1, StepSchedule::Constant);

        a.powers[0] = s.clients[0].power_budget;
        assert_eq!(dual_update(&d, &a, &s).xi[0], 0.5);
        a.powers[0] = 2.0 * s.clients[0].power_budget;
        assert!(dual_update(&d, &a, &s).xi[0] > 0.5);
        a.powers[0] = 0.5 * s.clients[0].power_budget;
        let zero = DualState::new(1, 0.0, 0.1, StepSchedule::Constant);
        let next = dual_update(&zero, &a, &s);
        assert_eq!(next.xi[0], 0.0);
        assert_eq!(next.iter, 1);
        // the cap is not enforced by default, so its multiplier collapses
        assert_eq!(next.iota[0], 0.0);
    }

    #[test]
    fn diminishing_step() {
        let mut d = DualState::new(1, 0.0, 0.04, StepSchedule::InverseSqrt);
        d.iter = 3;
        assert_eq!(d.step_size(), 0.02);
    }

    #[test]
    fn single_link_takes_top_mode_under_saturation() {
        let (s, ch) = single_client(1e-6);
        let r = solve(&ch, &s, &SolverOptions::default()).unwrap();
        assert_eq!(r.assignment.grants, vec![Some(Grant { client: 0, mode: 3 })]);
        assert!(r.converged);
        assert!(r.iterations_used < 50, "{}", r.iterations_used);
    }

    #[test]
    fn single_link_respects_an_enforced_cap() {
        let (mut s, ch) = single_client(1e-6);
        s.iteration_cap = IterationCap::Enforce;
        s.clients[0].compute_speed = 0.21;
        // cap at 5 bits/symbol on one 100 MHz subchannel: mode 2 (4 bits) is the best admissible
        let step = s.timing.iteration_time(&s.clients[0]);
        let high_den = s.timing.round_duration - s.timing.downlink_delay - 10.0 * step;
        s.model_params = 5.0 * 100e6 * high_den / 32.0;
        let w = s.rate_window(0).unwrap();
        assert!(w.contains(4.0e8) && !w.contains(6.0e8));
        let r = solve(&ch, &s, &SolverOptions::default()).unwrap();
        assert_eq!(r.assignment.grants, vec![Some(Grant { client: 0, mode: 2 })]);
    }

    #[test]
    fn unreachable_rate_floor_is_infeasible() {
        let (mut s, ch) = single_client(1e-6);
        s.model_params = 1e12;
        match solve(&ch, &s, &SolverOptions::default()) {
            Err(AllocError::Infeasible { violations }) => {
                assert!(matches!(violations[0], Violation::RateBelowWindow { client: 0, .. }))
            }
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn multipliers_stay_nonnegative() {
        let s = small_scenario(4, 3, 3, 3);
        let ch = phy::sample_channels(&s, 3, 0).unwrap();
        let table = RewardTable::new(&ch, &s).unwrap();
        let mut d = DualState::new(4, 0.1, 0.05, StepSchedule::Constant);
        for _ in 0..500 {
            let a = Assignment::evaluate(table.winners(&d, &[true; 4]), &ch, &s).unwrap();
            d = table.update(&d, &a);
            assert!(d.xi.iter().chain(&d.nu).chain(&d.iota).all(|x| *x >= 0.0));
        }
    }
}
