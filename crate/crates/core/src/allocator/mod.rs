//! Per-round joint client, subchannel and modulation selection.
//!
//! The optimal allocator is a projected subgradient method on the Lagrange
//! dual of the weighted-sum-rate problem, whose inner maximization decomposes
//! into an independent winner-takes-all choice per subchannel. A brute-force
//! enumerator certifies it on small instances.

mod baselines;
mod dual;
mod oracle;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::phy::{self, ChannelRealization, PhyError};
use crate::scenario::{IterationCap, Scenario};

pub use baselines::{baseline_allocators, random_subset, sync_fl_allocate, BaselineKind};
pub use dual::{
    dual_update, net_reward, select_winners, solve, solve_restricted, DualState, RewardTable, SolverOptions,
    StepSchedule,
};
pub use oracle::{brute_force_reference, brute_force_sync, ORACLE_GUARD};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AllocError {
    #[error(transparent)]
    Phy(#[from] PhyError),
    #[error("no feasible assignment found; last violations: {}", describe(.violations))]
    Infeasible { violations: Vec<Violation> },
    #[error("oracle guard exceeded: {combinations:.3e} combinations")]
    OracleGuard { combinations: f64 },
    #[error("invalid assignment: {0}")]
    InvalidAssignment(String),
}

fn describe(v: &[Violation]) -> String {
    if v.is_empty() {
        return "none (every iterate was idle)".into();
    }
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

/// A constraint an assignment breaks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Error)]
pub enum Violation {
    #[error("client {client}: power {power:.4e} W over budget {budget:.4e} W")]
    Power { client: usize, power: f64, budget: f64 },
    #[error("client {client}: rate {rate:.4e} b/s below the one-iteration floor {lower:.4e} b/s")]
    RateBelowWindow { client: usize, rate: f64, lower: f64 },
    #[error("client {client}: rate {rate:.4e} b/s above the cap {upper:.4e} b/s")]
    RateAboveWindow { client: usize, rate: f64, upper: f64 },
}

impl Violation {
    pub fn client(&self) -> usize {
        match *self {
            Violation::Power { client, .. }
            | Violation::RateBelowWindow { client, .. }
            | Violation::RateAboveWindow { client, .. } => client,
        }
    }
}

/// Subchannel granted to `client` at modulation index `mode` (>= 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Grant {
    pub client: usize,
    pub mode: usize,
}

/// A per-round schedule with its derived per-client quantities.
///
/// Exclusivity holds by construction: each subchannel carries at most one
/// grant. Idle subchannels are `None` and do not count toward selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub grants: Vec<Option<Grant>>,
    pub selected: Vec<bool>,
    /// Uplink rate (bits/s).
    pub rates: Vec<f64>,
    /// Total transmit power (W), `inf` if a grant sits on a zero-gain subchannel.
    pub powers: Vec<f64>,
    /// Local iterations, 0 for unselected clients and for selected clients
    /// whose upload leaves no time for one iteration.
    pub iterations: Vec<u32>,
    num_modes: usize,
}

impl Assignment {
    pub fn idle(scenario: &Scenario) -> Self {
        let m = scenario.num_clients();
        Self {
            grants: vec![None; scenario.num_subchannels()],
            selected: vec![false; m],
            rates: vec![0.0; m],
            powers: vec![0.0; m],
            iterations: vec![0; m],
            num_modes: scenario.scheme.rates.len(),
        }
    }

    /// Derives rates, powers and iteration counts of `grants`.
    pub fn evaluate(
        grants: Vec<Option<Grant>>,
        channels: &ChannelRealization,
        scenario: &Scenario,
    ) -> Result<Self, AllocError> {
        let k = scenario.num_subchannels();
        let m = scenario.num_clients();
        if grants.len() != k || channels.num_subchannels != k || channels.num_clients != m {
            return Err(AllocError::InvalidAssignment(format!(
                "shape mismatch: {} grants, {}x{} channels, scenario {m}x{k}",
                grants.len(),
                channels.num_clients,
                channels.num_subchannels
            )));
        }
        let scheme = &scenario.scheme;
        let sigma2 = scenario.radio.noise_power();
        let mut out = Self::idle(scenario);
        let mut bits_per_symbol = vec![0.0; m];
        for (sub, grant) in grants.iter().enumerate() {
            let Some(g) = grant else { continue };
            if g.client >= m || g.mode == 0 || g.mode >= scheme.rates.len() {
                return Err(AllocError::InvalidAssignment(format!("subchannel {sub}: bad grant {g:?}")));
            }
            let r = scheme.rates[g.mode];
            out.selected[g.client] = true;
            bits_per_symbol[g.client] += r;
            out.powers[g.client] +=
                phy::min_power(channels.gain(g.client, sub), r, sigma2, scheme).unwrap_or(f64::INFINITY);
        }
        for c in 0..m {
            if !out.selected[c] {
                continue;
            }
            out.rates[c] = bits_per_symbol[c] * scenario.radio.symbol_rate();
            let uplink = scenario.model_bits() / out.rates[c];
            out.iterations[c] = phy::iterations_from_budget(uplink, &scenario.clients[c], &scenario.timing).unwrap_or(0);
        }
        out.grants = grants;
        Ok(out)
    }

    /// Constraints this assignment breaks; empty means feasible.
    pub fn violations(&self, scenario: &Scenario) -> Vec<Violation> {
        let mut out = Vec::new();
        for (c, client) in scenario.clients.iter().enumerate() {
            if !self.selected[c] {
                continue;
            }
            if self.powers[c] > client.power_budget {
                out.push(Violation::Power { client: c, power: self.powers[c], budget: client.power_budget });
            }
            let window = scenario.rate_window(c);
            if self.iterations[c] == 0 {
                let lower = window.map_or(f64::INFINITY, |w| w.lower);
                out.push(Violation::RateBelowWindow { client: c, rate: self.rates[c], lower });
            }
            if scenario.iteration_cap == IterationCap::Enforce {
                if let Some(w) = window {
                    if self.rates[c] > w.upper {
                        out.push(Violation::RateAboveWindow { client: c, rate: self.rates[c], upper: w.upper });
                    }
                }
            }
        }
        out
    }

    pub fn is_feasible(&self, scenario: &Scenario) -> bool {
        self.violations(scenario).is_empty()
    }

    pub fn num_selected(&self) -> usize {
        self.selected.iter().filter(|s| **s).count()
    }

    /// Weighted sum rate `sum_m R_m D_m^2 / (beta_m D^2)` in bits/s.
    pub fn objective(&self, scenario: &Scenario) -> f64 {
        (0..self.rates.len()).map(|c| self.rates[c] * scenario.rate_weight(c)).sum()
    }

    pub fn sum_rate(&self) -> f64 {
        self.rates.iter().sum()
    }

    /// Flattened binary tensor indexed `[client][subchannel][mode]`.
    pub fn to_tensor(&self) -> Vec<u8> {
        let (m, k, l) = (self.selected.len(), self.grants.len(), self.num_modes);
        let mut t = vec![0u8; m * k * l];
        for (sub, g) in self.grants.iter().enumerate() {
            if let Some(g) = g {
                t[(g.client * k + sub) * l + g.mode] = 1;
            }
        }
        t
    }

    /// Inverse of [`Assignment::to_tensor`]. A one in the idle mode column is
    /// read as an idle subchannel.
    pub fn from_tensor(tensor: &[u8], channels: &ChannelRealization, scenario: &Scenario) -> Result<Self, AllocError> {
        let (m, k, l) = (scenario.num_clients(), scenario.num_subchannels(), scenario.scheme.rates.len());
        if tensor.len() != m * k * l {
            return Err(AllocError::InvalidAssignment(format!("tensor has {} entries, expected {}", tensor.len(), m * k * l)));
        }
        let mut grants = vec![None; k];
        for (sub, slot) in grants.iter_mut().enumerate() {
            let mut ones = 0;
            for c in 0..m {
                for mode in 0..l {
                    match tensor[(c * k + sub) * l + mode] {
                        0 => {}
                        1 => {
                            ones += 1;
                            if mode > 0 {
                                *slot = Some(Grant { client: c, mode });
                            }
                        }
                        v => return Err(AllocError::InvalidAssignment(format!("non-binary entry {v}"))),
                    }
                }
            }
            if ones > 1 {
                return Err(AllocError::InvalidAssignment(format!("subchannel {sub} allocated {ones} times")));
            }
        }
        Self::evaluate(grants, channels, scenario)
    }
}

/// Result of one allocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocatorReport {
    pub assignment: Assignment,
    /// Weighted sum rate in bits/s, recomputed from `assignment`.
    pub objective: f64,
    pub sum_rate: f64,
    /// Dual function value per iteration (normalized reward units).
    pub lagrangian_trace: Vec<f64>,
    pub converged: bool,
    pub iterations_used: usize,
}

impl AllocatorReport {
    pub fn from_assignment(assignment: Assignment, scenario: &Scenario) -> Self {
        Self {
            objective: assignment.objective(scenario),
            sum_rate: assignment.sum_rate(),
            assignment,
            lagrangian_trace: Vec::new(),
            converged: true,
            iterations_used: 0,
        }
    }

    pub fn record(&self, round: u64) -> ReportRecord {
        let a = &self.assignment;
        ReportRecord {
            round,
            objective: self.objective,
            sum_rate: self.sum_rate,
            iterations_used: self.iterations_used,
            converged: self.converged,
            selected: join(a.selected.iter().map(|s| u8::from(*s))),
            rates: join(a.rates.iter()),
            powers: join(a.powers.iter()),
            local_iterations: join(a.iterations.iter()),
        }
    }
}

/// Flat CSV row of an [`AllocatorReport`]; per-client lists are `;`-joined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub round: u64,
    pub objective: f64,
    pub sum_rate: f64,
    pub iterations_used: usize,
    pub converged: bool,
    pub selected: String,
    pub rates: String,
    pub powers: String,
    pub local_iterations: String,
}

pub(crate) fn join<T: std::fmt::Display>(items: impl Iterator<Item = T>) -> String {
    items.map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

/// Which allocator drives a round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocatorKind {
    Optimal,
    /// Two modulations only (`{0, 4}` bits/symbol).
    Baseline1,
    /// Random client subset, then winner-takes-all on the subset.
    Baseline2,
    /// Synchronous FL: every selected client runs exactly `A` iterations.
    Baseline3,
}

impl AllocatorKind {
    pub const ALL: [AllocatorKind; 4] =
        [AllocatorKind::Optimal, AllocatorKind::Baseline1, AllocatorKind::Baseline2, AllocatorKind::Baseline3];

    pub fn name(&self) -> &'static str {
        match self {
            AllocatorKind::Optimal => "optimal",
            AllocatorKind::Baseline1 => "baseline1",
            AllocatorKind::Baseline2 => "baseline2",
            AllocatorKind::Baseline3 => "baseline3",
        }
    }
}

impl std::str::FromStr for AllocatorKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown allocator `{s}` (expected optimal, baseline1, baseline2 or baseline3)"))
    }
}

/// Runs the allocator of `kind`. `seed` and `round` only matter for the random
/// client subset of baseline 2.
pub fn allocate(
    kind: AllocatorKind,
    channels: &ChannelRealization,
    scenario: &Scenario,
    opts: &SolverOptions,
    seed: u64,
) -> Result<AllocatorReport, AllocError> {
    match kind {
        AllocatorKind::Optimal => solve(channels, scenario, opts),
        AllocatorKind::Baseline1 => baseline_allocators(BaselineKind::TwoModulation, channels, scenario, opts, seed),
        AllocatorKind::Baseline2 => baseline_allocators(BaselineKind::RandomClient, channels, scenario, opts, seed),
        AllocatorKind::Baseline3 => sync_fl_allocate(channels, scenario, opts),
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use crate::phy::{ChannelRealization, ClientProfile, Position};
    use crate::scenario::{Scenario, ScenarioConfig};

    /// Reference physics with `m` clients, `k` subchannels and the first `l`
    /// active modes of the reference modulation set.
    pub fn small_scenario(m: usize, k: usize, l: usize, seed: u64) -> Scenario {
        let mut cfg = ScenarioConfig::default();
        cfg.geometry.num_clients = m;
        cfg.radio.num_subchannels = k;
        cfg.modulation.rates.truncate(l + 1);
        Scenario::from_config(&cfg, seed).unwrap()
    }

    pub fn single_client(gain: f64) -> (Scenario, ChannelRealization) {
        let mut s = small_scenario(1, 1, 3, 0);
        s.clients[0] = ClientProfile {
            id: 0,
            position: Position::new(10.0, 0.0, 1.5),
            dataset_size: 400,
            compute_speed: 10.0,
            power_budget: 0.1,
        };
        let ch = ChannelRealization::from_gains(0, 1, 1, vec![gain]).unwrap();
        (s, ch)
    }
}

#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;

    #[test]
    fn evaluate_derives_rates_powers_and_iterations() {
        let (s, ch) = single_client(1e-8);
        let a = Assignment::evaluate(vec![Some(Grant { client: 0, mode: 2 })], &ch, &s).unwrap();
        assert!(a.selected[0]);
        assert_eq!(a.rates[0], 4.0 * 100e6);
        let expected = phy::min_power(1e-8, 4.0, s.radio.noise_power(), &s.scheme).unwrap();
        assert_eq!(a.powers[0], expected);
        assert_eq!(a.iterations[0], 10);
        assert!(a.is_feasible(&s));
        assert_eq!(a.objective(&s), a.rates[0] * s.rate_weight(0));
    }

    #[test]
    fn deep_fade_grant_is_infeasible() {
        let (s, ch) = single_client(0.0);
        let a = Assignment::evaluate(vec![Some(Grant { client: 0, mode: 1 })], &ch, &s).unwrap();
        assert!(a.powers[0].is_infinite());
        assert!(matches!(a.violations(&s)[..], [Violation::Power { client: 0, .. }]));
    }

    #[test]
    fn bad_grants_are_rejected() {
        let (s, ch) = single_client(1e-9);
        for g in [Grant { client: 1, mode: 1 }, Grant { client: 0, mode: 0 }, Grant { client: 0, mode: 4 }] {
            assert!(Assignment::evaluate(vec![Some(g)], &ch, &s).is_err());
        }
    }

    #[test]
    fn tensor_round_trip() {
        let s = small_scenario(3, 4, 3, 5);
        let ch = phy::sample_channels(&s, 5, 0).unwrap();
        let grants = vec![Some(Grant { client: 2, mode: 1 }), None, Some(Grant { client: 0, mode: 3 }), None];
        let a = Assignment::evaluate(grants, &ch, &s).unwrap();
        let t = a.to_tensor();
        assert_eq!(t.iter().map(|x| *x as usize).sum::<usize>(), 2);
        assert_eq!(Assignment::from_tensor(&t, &ch, &s).unwrap(), a);
        let mut doubled = t.clone();
        doubled[4 * 4 + 2] = 1; // client 1, subchannel 0, mode 2
        assert!(Assignment::from_tensor(&doubled, &ch, &s).is_err());
    }

    #[test]
    fn record_joins_per_client_fields() {
        let (s, ch) = single_client(1e-9);
        let a = Assignment::evaluate(vec![Some(Grant { client: 0, mode: 1 })], &ch, &s).unwrap();
        let r = AllocatorReport::from_assignment(a, &s).record(3);
        assert_eq!(r.round, 3);
        assert_eq!(r.selected, "1");
        assert_eq!(r.local_iterations, "10");
    }

    #[test]
    fn kind_names_parse() {
        for k in AllocatorKind::ALL {
            assert_eq!(k.name().parse::<AllocatorKind>().unwrap(), k);
        }
        assert!("best".parse::<AllocatorKind>().is_err());
    }
}
