use super::baselines::sync_violations;
use super::{AllocError, AllocatorReport, Assignment, Grant};
use crate::phy::ChannelRealization;
use crate::scenario::Scenario;

/// Largest `(M (L + 1))^K` the enumerators accept.
pub const ORACLE_GUARD: f64 = 1e7;

/// Exhaustive maximizer of the weighted sum rate over every exclusive
/// assignment that meets the power budgets and rate window.
pub fn brute_force_reference(channels: &ChannelRealization, scenario: &Scenario) -> Result<AllocatorReport, AllocError> {
    enumerate(channels, scenario, |a| a.is_feasible(scenario).then(|| a.objective(scenario)))
}

/// Exhaustive maximizer of the synchronous selection objective
/// `sum_m D_m^2 zeta_m / D^2`, every selected client uploading fast enough to
/// run all `A` iterations.
pub fn brute_force_sync(channels: &ChannelRealization, scenario: &Scenario) -> Result<AllocatorReport, AllocError> {
    enumerate(channels, scenario, |a| {
        sync_violations(a, scenario)
            .is_empty()
            .then(|| (0..a.selected.len()).filter(|c| a.selected[*c]).map(|c| scenario.selection_weight(c)).sum())
    })
}

/// Walks every per-subchannel choice (idle or one (client, active mode)),
/// keeping the first assignment with the strictly largest score.
fn enumerate(
    channels: &ChannelRealization,
    scenario: &Scenario,
    score: impl Fn(&Assignment) -> Option<f64>,
) -> Result<AllocatorReport, AllocError> {
    let (m, k, modes) = (scenario.num_clients(), scenario.num_subchannels(), scenario.scheme.rates.len());
    let combinations = ((m * modes) as f64).powi(k as i32);
    if combinations > ORACLE_GUARD {
        return Err(AllocError::OracleGuard { combinations });
    }
    let per_sub = 1 + m * (modes - 1);
    let choice = |i: usize| (i > 0).then(|| Grant { client: (i - 1) / (modes - 1), mode: 1 + (i - 1) % (modes - 1) });

    let mut digits = vec![0usize; k];
    let mut best = Assignment::idle(scenario);
    let mut best_score = score(&best).unwrap_or(f64::NEG_INFINITY);
    let mut visited = 0usize;
    loop {
        visited += 1;
        let grants = digits.iter().map(|d| choice(*d)).collect();
        let a = Assignment::evaluate(grants, channels, scenario)?;
        if let Some(s) = score(&a) {
            if s > best_score {
                best_score = s;
                best = a;
            }
        }
        // odometer increment
        let mut pos = 0;
        while pos < k {
            digits[pos] += 1;
            if digits[pos] < per_sub {
                break;
            }
            digits[pos] = 0;
            pos += 1;
        }
        if pos == k {
            break;
        }
    }
    Ok(AllocatorReport { iterations_used: visited, ..AllocatorReport::from_assignment(best, scenario) })
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;
    use crate::phy;

    #[test]
    fn idle_only_scheme_scores_zero() {
        let s = small_scenario(2, 2, 0, 4);
        let ch = phy::sample_channels(&s, 4, 0).unwrap();
        let r = brute_force_reference(&ch, &s).unwrap();
        assert_eq!(r.objective, 0.0);
        assert_eq!(r.iterations_used, 1);
    }

    #[test]
    fn single_link_is_a_scan_over_modes() {
        let (s, ch) = single_client(1e-9);
        let r = brute_force_reference(&ch, &s).unwrap();
        assert_eq!(r.iterations_used, 4);
        let best = (1..4)
            .rev()
            .find(|l| {
                phy::min_power(1e-9, s.scheme.rates[*l], s.radio.noise_power(), &s.scheme).unwrap()
                    <= s.clients[0].power_budget
            })
            .map(|mode| Grant { client: 0, mode });
        assert_eq!(r.assignment.grants, vec![best]);
    }

    #[test]
    fn guard_rejects_large_instances() {
        let s = small_scenario(10, 8, 3, 0);
        let ch = phy::sample_channels(&s, 0, 0).unwrap();
        assert!(matches!(brute_force_reference(&ch, &s), Err(AllocError::OracleGuard { .. })));
    }
}
