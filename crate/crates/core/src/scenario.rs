//! Experiment scenario: declarative TOML config and the concrete client
//! population drawn from it.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::phy::{
    self, db_to_linear, dbm_to_watts, ClientProfile, ModulationScheme, PhyError, Position, RadioConfig, RateWindow,
    TimingBudget,
};
use crate::rng::{self, Purpose};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config override `{0}`: {1}")]
    Override(String, String),
    #[error(transparent)]
    Invalid(#[from] PhyError),
}

/// How the upper end of the rate window is treated by the allocators.
///
/// `Saturate`: a client whose upload is fast enough for more than `A`
/// iterations runs `A` and idles. `Enforce`: such rates are infeasible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum IterationCap {
    #[default]
    Saturate,
    Enforce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub num_clients: usize,
    pub side_length: f64,
    pub bs_position: [f64; 3],
    pub client_height: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self { num_clients: 10, side_length: 250.0, bs_position: [0.0, 0.0, 20.0], client_height: 1.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientsConfig {
    /// Uniform range for D_m (inclusive).
    pub dataset_size: [usize; 2],
    /// Uniform range for the compute speed (GFLOP/s).
    pub compute_speed: [f64; 2],
    pub power_budget_dbm: f64,
}

impl Default for ClientsConfig {
    fn default() -> Self {
        Self { dataset_size: [300, 500], compute_speed: [9.0, 12.0], power_budget_dbm: 20.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadioSection {
    pub pathloss_ref_db: f64,
    pub pathloss_exp: f64,
    pub noise_density_dbm_hz: f64,
    pub bandwidth_hz: f64,
    pub num_subchannels: usize,
    pub bits_per_param: u32,
    /// Parameter count of the transmitted model.
    pub model_params: f64,
}

impl Default for RadioSection {
    fn default() -> Self {
        Self {
            pathloss_ref_db: -30.0,
            pathloss_exp: 2.8,
            noise_density_dbm_hz: -169.0,
            bandwidth_hz: 100e6,
            num_subchannels: 16,
            bits_per_param: 32,
            model_params: 1.018e5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModulationSection {
    pub rates: Vec<f64>,
    pub beta1: f64,
    /// Magnitude of the exponent coefficient.
    pub beta2: f64,
    pub target_ber: f64,
}

impl Default for ModulationSection {
    fn default() -> Self {
        Self { rates: vec![0.0, 2.0, 4.0, 6.0], beta1: 0.2, beta2: 1.6, target_ber: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingSection {
    pub round_duration: f64,
    pub downlink_delay: f64,
    pub flops_per_iteration: f64,
    pub max_local_iterations: u32,
    pub iteration_cap: IterationCap,
}

impl Default for TimingSection {
    fn default() -> Self {
        Self {
            round_duration: 10.0,
            downlink_delay: 0.1,
            flops_per_iteration: 0.2,
            max_local_iterations: 10,
            iteration_cap: IterationCap::Saturate,
        }
    }
}

/// Declarative scenario; every field defaults to the reference parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub geometry: GeometryConfig,
    pub clients: ClientsConfig,
    pub radio: RadioSection,
    pub modulation: ModulationSection,
    pub timing: TimingSection,
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml_str(&text)
    }

    pub fn radio_config(&self) -> RadioConfig {
        RadioConfig {
            pathloss_ref: db_to_linear(self.radio.pathloss_ref_db),
            pathloss_exp: self.radio.pathloss_exp,
            noise_density: dbm_to_watts(self.radio.noise_density_dbm_hz),
            bandwidth: self.radio.bandwidth_hz,
            num_subchannels: self.radio.num_subchannels,
            bits_per_param: self.radio.bits_per_param,
        }
    }

    pub fn scheme(&self) -> Result<ModulationScheme, PhyError> {
        let m = &self.modulation;
        ModulationScheme::new(m.rates.clone(), m.beta1, m.beta2, m.target_ber)
    }

    pub fn timing_budget(&self) -> TimingBudget {
        TimingBudget {
            round_duration: self.timing.round_duration,
            downlink_delay: self.timing.downlink_delay,
            flops_per_iteration: self.timing.flops_per_iteration,
            max_local_iterations: self.timing.max_local_iterations,
        }
    }
}

/// Applies `section.key=value` overrides to a TOML document. Values are parsed
/// as TOML; anything that fails to parse is taken as a bare string.
pub fn apply_overrides(doc: &mut toml::Table, overrides: &[String]) -> Result<(), ConfigError> {
    for item in overrides {
        let (path, raw) = item
            .split_once('=')
            .ok_or_else(|| ConfigError::Override(item.clone(), "expected key=value".into()))?;
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let keys: Vec<&str> = path.trim().split('.').collect();
        let (last, parents) = keys.split_last().expect("split yields at least one item");
        let mut table = &mut *doc;
        for key in parents {
            table = table
                .entry(key.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| ConfigError::Override(item.clone(), format!("`{key}` is not a table")))?;
        }
        table.insert(last.to_string(), value);
    }
    Ok(())
}

/// Immutable experiment configuration with a concrete client population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub bs_position: Position,
    pub clients: Vec<ClientProfile>,
    pub radio: RadioConfig,
    pub scheme: ModulationScheme,
    pub timing: TimingBudget,
    pub model_params: f64,
    pub iteration_cap: IterationCap,
}

impl Scenario {
    /// Draws client positions, dataset sizes and compute speeds from `config`.
    pub fn from_config(config: &ScenarioConfig, seed: u64) -> Result<Self, ConfigError> {
        let g = &config.geometry;
        let c = &config.clients;
        if c.dataset_size[0] == 0 || c.dataset_size[0] > c.dataset_size[1] {
            return Err(PhyError::InvalidParameter("dataset_size range must satisfy 1 <= lo <= hi".into()).into());
        }
        if !(c.compute_speed[0] > 0.0 && c.compute_speed[0] <= c.compute_speed[1]) {
            return Err(PhyError::InvalidParameter("compute_speed range must be positive and ordered".into()).into());
        }
        let mut rng = rng::stream(seed, Purpose::Geometry, 0, 0);
        let half = g.side_length / 2.0;
        let bs = Position::new(g.bs_position[0], g.bs_position[1], g.bs_position[2]);
        let clients = (0..g.num_clients)
            .map(|id| {
                let x = bs.x + rng.random_range(-half..=half);
                let y = bs.y + rng.random_range(-half..=half);
                ClientProfile {
                    id,
                    position: Position::new(x, y, g.client_height),
                    dataset_size: rng.random_range(c.dataset_size[0]..=c.dataset_size[1]),
                    compute_speed: rng.random_range(c.compute_speed[0]..=c.compute_speed[1]),
                    power_budget: dbm_to_watts(c.power_budget_dbm),
                }
            })
            .collect();
        let scenario = Self {
            bs_position: bs,
            clients,
            radio: config.radio_config(),
            scheme: config.scheme()?,
            timing: config.timing_budget(),
            model_params: config.radio.model_params,
            iteration_cap: config.timing.iteration_cap,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn validate(&self) -> Result<(), PhyError> {
        self.radio.validate()?;
        self.scheme.validate()?;
        self.timing.validate()?;
        for (i, c) in self.clients.iter().enumerate() {
            if c.id != i {
                return Err(PhyError::InvalidParameter(format!("client at index {i} has id {}", c.id)));
            }
            c.validate()?;
        }
        if !(self.model_params > 0.0) {
            return Err(PhyError::InvalidParameter("model size must be positive".into()));
        }
        Ok(())
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn num_subchannels(&self) -> usize {
        self.radio.num_subchannels
    }

    /// Model size N in bits.
    pub fn model_bits(&self) -> f64 {
        self.model_params * self.radio.bits_per_param as f64
    }

    pub fn total_data(&self) -> usize {
        self.clients.iter().map(|c| c.dataset_size).sum()
    }

    pub fn distance(&self, client: usize) -> Result<f64, PhyError> {
        let d = self.clients[client].position.distance(&self.bs_position);
        if d > 0.0 {
            Ok(d)
        } else {
            Err(PhyError::InvalidGeometry { client })
        }
    }

    /// Weighted-sum-rate coefficient `D_m^2 / (beta_m D^2)`.
    pub fn rate_weight(&self, client: usize) -> f64 {
        let d = self.total_data() as f64;
        let c = &self.clients[client];
        (c.dataset_size as f64).powi(2) / (c.compute_speed * d * d)
    }

    /// Selection weight `D_m^2 / D^2` of the synchronous baseline.
    pub fn selection_weight(&self, client: usize) -> f64 {
        let d = self.total_data() as f64;
        (self.clients[client].dataset_size as f64 / d).powi(2)
    }

    pub fn rate_window(&self, client: usize) -> Option<RateWindow> {
        phy::rate_window(&self.clients[client], self.model_bits(), &self.timing)
    }

    pub fn with_subchannels(&self, k: usize) -> Self {
        let mut s = self.clone();
        s.radio.num_subchannels = k;
        s
    }

    pub fn with_rates(&self, rates: Vec<f64>) -> Self {
        let mut s = self.clone();
        s.scheme.rates = rates;
        s
    }

    pub fn with_iteration_cap(&self, cap: IterationCap) -> Self {
        let mut s = self.clone();
        s.iteration_cap = cap;
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_table() {
        let cfg = ScenarioConfig::default();
        let radio = cfg.radio_config();
        assert!((radio.pathloss_ref - 1e-3).abs() < 1e-15);
        assert!((radio.noise_density - 1.258_925_411_794e-20).abs() < 1e-30);
        assert!((dbm_to_watts(cfg.clients.power_budget_dbm) - 0.1).abs() < 1e-15);
        let s = Scenario::from_config(&cfg, 1).unwrap();
        assert_eq!(s.num_clients(), 10);
        assert_eq!(s.num_subchannels(), 16);
        assert!((s.model_bits() - 3.2576e6).abs() < 1e-6);
        for c in &s.clients {
            assert!(c.position.x.abs() <= 125.0 && c.position.y.abs() <= 125.0);
            assert_eq!(c.position.z, 1.5);
            assert!((300..=500).contains(&c.dataset_size));
            assert!((9.0..=12.0).contains(&c.compute_speed));
        }
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let cfg = ScenarioConfig::from_toml_str("[radio]\nnum_subchannels = 8\n[timing]\niteration_cap = \"enforce\"\n")
            .unwrap();
        assert_eq!(cfg.radio.num_subchannels, 8);
        assert_eq!(cfg.timing.iteration_cap, IterationCap::Enforce);
        assert_eq!(cfg.modulation, ModulationSection::default());
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(ScenarioConfig::from_toml_str(&text).unwrap(), cfg);
        assert!(ScenarioConfig::from_toml_str("[radio]\nbogus = 1\n").is_err());
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let mut doc = toml::Table::new();
        apply_overrides(
            &mut doc,
            &["radio.num_subchannels=4".into(), "modulation.rates=[0, 4]".into(), "timing.iteration_cap=enforce".into()],
        )
        .unwrap();
        let cfg: ScenarioConfig = doc.try_into().unwrap();
        assert_eq!(cfg.radio.num_subchannels, 4);
        assert_eq!(cfg.modulation.rates, vec![0.0, 4.0]);
        assert_eq!(cfg.timing.iteration_cap, IterationCap::Enforce);
        assert!(apply_overrides(&mut toml::Table::new(), &["novalue".into()]).is_err());
    }

    #[test]
    fn same_seed_same_population() {
        let cfg = ScenarioConfig::default();
        assert_eq!(Scenario::from_config(&cfg, 9).unwrap(), Scenario::from_config(&cfg, 9).unwrap());
        assert_ne!(Scenario::from_config(&cfg, 9).unwrap(), Scenario::from_config(&cfg, 10).unwrap());
    }

    #[test]
    fn client_at_base_station_is_rejected() {
        let mut s = Scenario::from_config(&ScenarioConfig::default(), 1).unwrap();
        s.clients[3].position = s.bs_position;
        assert_eq!(s.distance(3), Err(PhyError::InvalidGeometry { client: 3 }));
        assert!(phy::sample_channels(&s, 1, 0).is_err());
    }
}
