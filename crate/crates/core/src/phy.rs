//! Uplink physical layer: block-fading channel draws, BER-constrained link
//! adaptation, and the rate and delay arithmetic of one aggregation round.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Purpose};
use crate::scenario::Scenario;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhyError {
    #[error("client {client} sits at the base station (zero distance)")]
    InvalidGeometry { client: usize },
    #[error("no-transmission mode has no BER")]
    NoTransmissionBer,
    #[error("deep fade, modulation infeasible")]
    DeepFade,
    #[error("selected client {client} cannot upload (zero uplink rate)")]
    CannotUpload { client: usize },
    #[error("iteration budget below 1 for client {client} (raw {raw:.4})")]
    IterationBudget { client: usize, raw: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Position {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn distance(&self, other: &Position) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2) + (self.z - other.z).powi(2)).sqrt()
    }
}

/// One edge client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientProfile {
    pub id: usize,
    pub position: Position,
    /// Local dataset size D_m (samples).
    pub dataset_size: usize,
    /// Processing speed in GFLOP/s.
    pub compute_speed: f64,
    /// Transmit power budget in watts.
    pub power_budget: f64,
}

impl ClientProfile {
    pub fn validate(&self) -> Result<(), PhyError> {
        if self.dataset_size == 0 {
            return Err(PhyError::InvalidParameter(format!("client {}: empty dataset", self.id)));
        }
        if !(self.compute_speed > 0.0) || !(self.power_budget > 0.0) {
            return Err(PhyError::InvalidParameter(format!(
                "client {}: compute speed and power budget must be positive",
                self.id
            )));
        }
        Ok(())
    }
}

/// Discrete modulation set with the exponential BER model
/// `ber = beta1 * exp(-beta2 * snr / (2^r - 1))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModulationScheme {
    /// Bits per symbol, `rates[0] == 0` is the no-transmission mode.
    pub rates: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub target_ber: f64,
}

impl ModulationScheme {
    pub fn new(rates: Vec<f64>, beta1: f64, beta2: f64, target_ber: f64) -> Result<Self, PhyError> {
        let scheme = Self { rates, beta1, beta2, target_ber };
        scheme.validate()?;
        Ok(scheme)
    }

    pub fn validate(&self) -> Result<(), PhyError> {
        if self.rates.first() != Some(&0.0) {
            return Err(PhyError::InvalidParameter("rates must start with 0 (idle mode)".into()));
        }
        if self.rates.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(PhyError::InvalidParameter("rates must be strictly increasing".into()));
        }
        if !(self.beta2 > 0.0) {
            return Err(PhyError::InvalidParameter("beta2 must be positive".into()));
        }
        if !(self.target_ber > 0.0 && self.target_ber < self.beta1) {
            return Err(PhyError::InvalidParameter("target BER must lie in (0, beta1)".into()));
        }
        Ok(())
    }

    /// Number of transmitting modes (excludes the idle mode).
    pub fn num_active(&self) -> usize {
        self.rates.len() - 1
    }

    pub fn max_rate(&self) -> f64 {
        *self.rates.last().unwrap_or(&0.0)
    }

    /// `ln(beta1 / chi0) / beta2`, the SNR per unit of `2^r - 1` needed to hit the target.
    fn snr_margin(&self) -> f64 {
        (self.beta1 / self.target_ber).ln() / self.beta2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadioConfig {
    /// Linear path gain at the 1 m reference distance.
    pub pathloss_ref: f64,
    pub pathloss_exp: f64,
    /// Noise power spectral density (W/Hz).
    pub noise_density: f64,
    /// Total uplink bandwidth (Hz).
    pub bandwidth: f64,
    pub num_subchannels: usize,
    /// Encoding width of one model parameter.
    pub bits_per_param: u32,
}

impl RadioConfig {
    pub fn validate(&self) -> Result<(), PhyError> {
        if self.num_subchannels == 0 {
            return Err(PhyError::InvalidParameter("need at least one subchannel".into()));
        }
        if !(self.bandwidth > 0.0) || !(self.noise_density > 0.0) || !(self.pathloss_ref > 0.0) {
            return Err(PhyError::InvalidParameter(
                "bandwidth, noise density and reference gain must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn subchannel_bandwidth(&self) -> f64 {
        self.bandwidth / self.num_subchannels as f64
    }

    /// Symbols per second carried by one subchannel (one symbol per Hz).
    pub fn symbol_rate(&self) -> f64 {
        self.subchannel_bandwidth()
    }

    /// Per-subchannel noise power sigma^2 (W).
    pub fn noise_power(&self) -> f64 {
        self.noise_density * self.subchannel_bandwidth()
    }

    /// Mean path gain `eps_o * d^-alpha`.
    pub fn mean_gain(&self, distance: f64) -> f64 {
        self.pathloss_ref * distance.powf(-self.pathloss_exp)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingBudget {
    /// Round duration T_th (s).
    pub round_duration: f64,
    /// Broadcast delay T^DL (s).
    pub downlink_delay: f64,
    /// GFLOP per local iteration.
    pub flops_per_iteration: f64,
    /// Local iteration cap A.
    pub max_local_iterations: u32,
}

impl TimingBudget {
    pub fn validate(&self) -> Result<(), PhyError> {
        if !(self.round_duration > self.downlink_delay) || self.downlink_delay < 0.0 {
            return Err(PhyError::InvalidParameter("need T_th > T_DL >= 0".into()));
        }
        if self.max_local_iterations == 0 || !(self.flops_per_iteration > 0.0) {
            return Err(PhyError::InvalidParameter("need A >= 1 and mu > 0".into()));
        }
        Ok(())
    }

    /// Seconds one local iteration takes on `client`.
    pub fn iteration_time(&self, client: &ClientProfile) -> f64 {
        self.flops_per_iteration / client.compute_speed
    }
}

/// Per-round power gains `|h_{m,k}|^2`, row-major over (client, subchannel).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRealization {
    pub round: u64,
    pub num_clients: usize,
    pub num_subchannels: usize,
    gains: Vec<f64>,
}

impl ChannelRealization {
    pub fn from_gains(round: u64, num_clients: usize, num_subchannels: usize, gains: Vec<f64>) -> Result<Self, PhyError> {
        if gains.len() != num_clients * num_subchannels {
            return Err(PhyError::InvalidParameter(format!(
                "expected {} gains, got {}",
                num_clients * num_subchannels,
                gains.len()
            )));
        }
        if gains.iter().any(|g| !(*g >= 0.0) || !g.is_finite()) {
            return Err(PhyError::InvalidParameter("gains must be finite and nonnegative".into()));
        }
        Ok(Self { round, num_clients, num_subchannels, gains })
    }

    /// Every entry set to the mean path gain of its client (no fading).
    pub fn mean_gains(scenario: &Scenario, round: u64) -> Result<Self, PhyError> {
        let k = scenario.radio.num_subchannels;
        let mut gains = Vec::with_capacity(scenario.clients.len() * k);
        for client in &scenario.clients {
            let g = scenario.radio.mean_gain(scenario.distance(client.id)?);
            gains.extend(std::iter::repeat_n(g, k));
        }
        Self::from_gains(round, scenario.clients.len(), k, gains)
    }

    pub fn gain(&self, client: usize, subchannel: usize) -> f64 {
        self.gains[client * self.num_subchannels + subchannel]
    }

    pub fn row(&self, client: usize) -> &[f64] {
        &self.gains[client * self.num_subchannels..(client + 1) * self.num_subchannels]
    }

    pub fn gains(&self) -> &[f64] {
        &self.gains
    }
}

/// Draws the round-`round` Rayleigh block-fading realization.
///
/// `gain = eps_o * d^-alpha * |h|^2` with `h` a unit-variance circularly
/// symmetric complex Gaussian. Each client row comes from its own stream.
pub fn sample_channels(scenario: &Scenario, seed: u64, round: u64) -> Result<ChannelRealization, PhyError> {
    let k = scenario.radio.num_subchannels;
    let mut gains = Vec::with_capacity(scenario.clients.len() * k);
    for client in &scenario.clients {
        let mean = scenario.radio.mean_gain(scenario.distance(client.id)?);
        let mut rng = rng::stream(seed, Purpose::Channel, round, client.id as u64);
        for _ in 0..k {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            gains.push(mean * 0.5 * (re * re + im * im));
        }
    }
    ChannelRealization::from_gains(round, scenario.clients.len(), k, gains)
}

pub fn snr(power: f64, gain: f64, sigma2: f64) -> f64 {
    power * gain / sigma2
}

pub fn ber(snr: f64, rate: f64, scheme: &ModulationScheme) -> Result<f64, PhyError> {
    if rate <= 0.0 {
        return Err(PhyError::NoTransmissionBer);
    }
    Ok(scheme.beta1 * (-scheme.beta2 * snr / (rate.exp2() - 1.0)).exp())
}

/// Smallest power meeting the target BER at `rate` bits/symbol.
pub fn min_power(gain: f64, rate: f64, sigma2: f64, scheme: &ModulationScheme) -> Result<f64, PhyError> {
    if rate == 0.0 {
        return Ok(0.0);
    }
    if !(gain > 0.0) {
        return Err(PhyError::DeepFade);
    }
    Ok((rate.exp2() - 1.0) * scheme.snr_margin() * sigma2 / gain)
}

/// Uplink rate in bits/s of a client transmitting on subchannels with the
/// given per-subchannel rates (bits/symbol).
pub fn uplink_rate<I: IntoIterator<Item = f64>>(rates: I, radio: &RadioConfig) -> f64 {
    rates.into_iter().sum::<f64>() * radio.symbol_rate()
}

/// Delay breakdown of one selected client in one round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Delays {
    pub uplink: f64,
    /// Time left for computation, `T_th - T_UL - T_DL`.
    pub compute_available: f64,
    /// Time spent computing `iterations` local steps.
    pub compute: f64,
    pub total: f64,
}

pub fn delays(
    client: &ClientProfile,
    rate: f64,
    model_bits: f64,
    timing: &TimingBudget,
    iterations: u32,
) -> Result<Delays, PhyError> {
    if !(rate > 0.0) {
        return Err(PhyError::CannotUpload { client: client.id });
    }
    let uplink = model_bits / rate;
    let compute = iterations as f64 * timing.iteration_time(client);
    Ok(Delays {
        uplink,
        compute_available: timing.round_duration - uplink - timing.downlink_delay,
        compute,
        total: compute + uplink + timing.downlink_delay,
    })
}

/// Unclamped iteration count the remaining time allows.
pub fn raw_iterations(uplink_delay: f64, client: &ClientProfile, timing: &TimingBudget) -> f64 {
    (timing.round_duration - uplink_delay - timing.downlink_delay) / timing.iteration_time(client)
}

/// Local iterations a client fits in the round: floor, then clamp to `[1, A]`.
pub fn iterations_from_budget(uplink_delay: f64, client: &ClientProfile, timing: &TimingBudget) -> Result<u32, PhyError> {
    let raw = raw_iterations(uplink_delay, client, timing);
    // absorbs rounding when the budget lands exactly on an integer
    let whole = (raw + 1e-9).floor();
    if !(whole >= 1.0) {
        return Err(PhyError::IterationBudget { client: client.id, raw });
    }
    Ok(whole.min(timing.max_local_iterations as f64) as u32)
}

/// Uplink rates (bits/s) for which the iteration count lies in `[1, A]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateWindow {
    pub lower: f64,
    /// `+inf` when even A iterations leave spare time at any rate.
    pub upper: f64,
}

impl RateWindow {
    pub fn contains(&self, rate: f64) -> bool {
        rate >= self.lower && rate <= self.upper
    }
}

/// Returns `None` when one iteration alone does not fit in the round.
pub fn rate_window(client: &ClientProfile, model_bits: f64, timing: &TimingBudget) -> Option<RateWindow> {
    let step = timing.iteration_time(client);
    let base = timing.round_duration - timing.downlink_delay;
    let low_den = base - step;
    if low_den <= 0.0 {
        return None;
    }
    let high_den = base - timing.max_local_iterations as f64 * step;
    let upper = if high_den <= 0.0 { f64::INFINITY } else { model_bits / high_den };
    Some(RateWindow { lower: model_bits / low_den, upper })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn table2_scheme() -> ModulationScheme {
        ModulationScheme::new(vec![0.0, 2.0, 4.0, 6.0], 0.2, 1.6, 1e-6).unwrap()
    }

    fn client(beta: f64) -> ClientProfile {
        ClientProfile {
            id: 0,
            position: Position::new(10.0, 0.0, 1.5),
            dataset_size: 400,
            compute_speed: beta,
            power_budget: 0.1,
        }
    }

    fn timing() -> TimingBudget {
        TimingBudget { round_duration: 10.0, downlink_delay: 0.1, flops_per_iteration: 0.2, max_local_iterations: 10 }
    }

    #[test]
    fn gain_at_reference_distance() {
        let radio = RadioConfig {
            pathloss_ref: 1e-3,
            pathloss_exp: 2.8,
            noise_density: dbm_to_watts(-169.0),
            bandwidth: 100e6,
            num_subchannels: 16,
            bits_per_param: 32,
        };
        assert_relative_eq!(radio.mean_gain(1.0), 1e-3);
        // log domain: -30 dB - 28 * log10(100) dB = -86 dB
        assert_relative_eq!(radio.mean_gain(100.0), 10f64.powf(-8.6), max_relative = 1e-12);
        assert_relative_eq!(radio.mean_gain(100.0), 2.51e-9, max_relative = 2e-3);
    }

    #[test]
    fn snr_examples() {
        assert_eq!(snr(0.0, 1e-9, 1.26e-12), 0.0);
        assert_relative_eq!(snr(0.1, 1e-9, 1.26e-12), 79.365, max_relative = 1e-4);
        assert_relative_eq!(snr(0.2, 1e-9, 1.26e-12), 2.0 * snr(0.1, 1e-9, 1.26e-12));
    }

    #[test]
    fn ber_limits_and_idle_mode() {
        let s = table2_scheme();
        assert_eq!(ber(0.0, 2.0, &s).unwrap(), 0.2);
        assert!(ber(1e6, 2.0, &s).unwrap() < 1e-300);
        assert_eq!(ber(10.0, 0.0, &s), Err(PhyError::NoTransmissionBer));
        assert!(ber(10.0, 2.0, &s).unwrap() < ber(5.0, 2.0, &s).unwrap());
        assert!(ber(10.0, 2.0, &s).unwrap() < ber(10.0, 4.0, &s).unwrap());
    }

    #[test]
    fn min_power_examples() {
        let s = table2_scheme();
        assert_eq!(min_power(1e-10, 0.0, 1.26e-12, &s).unwrap(), 0.0);
        let p = min_power(1e-10, 2.0, 1.26e-12, &s).unwrap();
        // 3 * ln(2e5) * 1.26e-12 / (1.6 * 1e-10)
        assert_relative_eq!(p, 3.0 * 200_000f64.ln() * 1.26e-12 / 1.6e-10, max_relative = 1e-14);
        assert_relative_eq!(p, 0.29, max_relative = 0.01);
        let back = ber(snr(p, 1e-10, 1.26e-12), 2.0, &s).unwrap();
        assert_relative_eq!(back, 1e-6, max_relative = 1e-12);
        assert_relative_eq!(min_power(0.5e-10, 2.0, 1.26e-12, &s).unwrap(), 2.0 * p, max_relative = 1e-14);
        assert_eq!(min_power(0.0, 2.0, 1.26e-12, &s), Err(PhyError::DeepFade));
    }

    #[test]
    fn scheme_validation() {
        assert!(ModulationScheme::new(vec![0.0, 2.0], 0.2, -1.6, 1e-6).is_err());
        assert!(ModulationScheme::new(vec![1.0, 2.0], 0.2, 1.6, 1e-6).is_err());
        assert!(ModulationScheme::new(vec![0.0, 4.0, 2.0], 0.2, 1.6, 1e-6).is_err());
        assert!(ModulationScheme::new(vec![0.0, 2.0], 0.2, 1.6, 0.3).is_err());
    }

    #[test]
    fn uplink_rate_examples() {
        let radio = RadioConfig {
            pathloss_ref: 1e-3,
            pathloss_exp: 2.8,
            noise_density: 1e-20,
            bandwidth: 100e6,
            num_subchannels: 16,
            bits_per_param: 32,
        };
        assert_eq!(uplink_rate(std::iter::empty(), &radio), 0.0);
        assert_relative_eq!(uplink_rate([4.0], &radio), 2.5e7);
        assert_relative_eq!(uplink_rate([2.0, 4.0], &radio), 6.0 * 6.25e6);
    }

    #[test]
    fn delay_examples() {
        let bits = 1.018e5 * 32.0;
        let c = client(10.0);
        let d = delays(&c, 2.5e7, bits, &timing(), 10).unwrap();
        assert_relative_eq!(d.uplink, 0.130_304, max_relative = 1e-9);
        assert_relative_eq!(d.compute, 0.2, max_relative = 1e-12);
        assert_relative_eq!(d.total, 0.2 + d.uplink + 0.1, max_relative = 1e-12);
        assert!(delays(&c, 1e300, bits, &timing(), 1).unwrap().uplink < 1e-290);
        assert_eq!(delays(&c, 0.0, bits, &timing(), 1), Err(PhyError::CannotUpload { client: 0 }));
    }

    #[test]
    fn iteration_budget_examples() {
        let c = client(10.0);
        let t = timing();
        let boundary = t.round_duration - t.downlink_delay - t.flops_per_iteration / c.compute_speed;
        assert_eq!(iterations_from_budget(boundary, &c, &t).unwrap(), 1);
        // raw = (10 - 0.13 - 0.1) * 10 / 0.2 = 488.5 -> A
        assert_relative_eq!(raw_iterations(0.13, &c, &t), 488.5, max_relative = 1e-12);
        assert_eq!(iterations_from_budget(0.13, &c, &t).unwrap(), 10);
        assert!(matches!(
            iterations_from_budget(boundary + 1e-3, &c, &t),
            Err(PhyError::IterationBudget { .. })
        ));
    }

    #[test]
    fn degenerate_rate_window() {
        let c = client(0.05); // 4 s per iteration
        let t = timing();
        let w = rate_window(&c, 1e6, &t).unwrap();
        assert!(w.upper.is_infinite());
        let slow = client(0.01); // 20 s per iteration
        assert!(rate_window(&slow, 1e6, &t).is_none());
    }
}
