//! Experiment runner: seeded sweeps over subchannel and modulation counts,
//! per-run traces, summaries and plot data.

mod emit;
pub mod verify;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::allocator::{allocate, AllocError, AllocatorKind, SolverOptions};
use crate::datasets::{
    data_root, load_mnist, partition_with_sizes, synth_logistic, synth_quadratic, BatchMode, DataError, ExampleStore,
};
use crate::fl::{run_training, AggregationMode, FlError, LossKind, RoundMetrics, TrainTask, TrainingPlan};
use crate::phy::{sample_channels, ChannelRealization, PhyError};
use crate::scenario::{apply_overrides, ConfigError, Scenario, ScenarioConfig};

pub use emit::{
    emit_plot_data, ACCURACY_COLUMNS, LOSS_COLUMNS, OBJECTIVE_K_COLUMNS, OBJECTIVE_L_COLUMNS, SELECTION_COLUMNS,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Fl(#[from] FlError),
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error(transparent)]
    Phy(#[from] PhyError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("invalid experiment: {0}")]
    Invalid(String),
}

impl HarnessError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.display().to_string(), source }
    }

    /// True for errors in the experiment description rather than the run.
    pub fn is_config(&self) -> bool {
        matches!(self, HarnessError::Config(_) | HarnessError::Invalid(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Mlp,
    Quadratic,
    Logistic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    pub allocators: Vec<AllocatorKind>,
    pub rounds: u64,
    pub seeds: Vec<u64>,
    /// Subchannel counts to run; absent means the scenario's own.
    pub subchannels: Option<Vec<usize>>,
    /// Active modulation counts; each `L` uses rates `{0, 2, .., 2L}`.
    /// Absent means the scenario's rate set.
    pub modes: Option<Vec<usize>>,
    /// Channel draws per seed in objective sweeps.
    pub channel_draws: u64,
    /// Rayleigh fading in objective sweeps; `false` uses mean path gains.
    pub fading: bool,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            allocators: AllocatorKind::ALL.to_vec(),
            rounds: 50,
            seeds: vec![1, 2, 3, 4, 5],
            subchannels: None,
            modes: None,
            channel_draws: 10,
            fading: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub task: TaskKind,
    pub learning_rate: f64,
    /// Zero selects full local batches.
    pub batch_size: usize,
    /// `inf` disables clipping.
    pub clip_norm: Option<f64>,
    pub aggregation: AggregationMode,
    pub hidden: usize,
    /// Synthetic tasks only.
    pub dim: usize,
    pub conditioning: f64,
    pub noise: f64,
    pub reg: f64,
    /// Directory holding `mnist/`; falls back to the environment, then `data`.
    pub data_dir: Option<PathBuf>,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            task: TaskKind::Mlp,
            learning_rate: 0.5,
            batch_size: 32,
            clip_norm: Some(TrainTask::DEFAULT_CLIP_NORM),
            aggregation: AggregationMode::Normalized,
            hidden: 128,
            dim: 20,
            conditioning: 10.0,
            noise: 0.5,
            reg: 0.01,
            data_dir: None,
        }
    }
}

/// Everything that determines a set of runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ExperimentSpec {
    pub experiment: ExperimentSection,
    pub training: TrainingSection,
    pub solver: SolverOptions,
    pub scenario: ScenarioConfig,
}

impl ExperimentSpec {
    /// Parses a TOML document after applying `key=value` overrides. The
    /// `experiment`, `training` and `solver` tables configure the run; all
    /// other tables form the scenario.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self, HarnessError> {
        let mut doc: toml::Table = toml::from_str(text).map_err(ConfigError::from)?;
        apply_overrides(&mut doc, overrides)?;
        let mut take = |key: &str| doc.remove(key).unwrap_or_else(|| toml::Value::Table(toml::Table::new()));
        let experiment: ExperimentSection = take("experiment").try_into().map_err(ConfigError::from)?;
        let training: TrainingSection = take("training").try_into().map_err(ConfigError::from)?;
        let solver: SolverOptions = take("solver").try_into().map_err(ConfigError::from)?;
        let scenario: ScenarioConfig = toml::Value::Table(doc).try_into().map_err(ConfigError::from)?;
        let spec = Self { experiment, training, solver, scenario };
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            HarnessError::Config(ConfigError::Io { path: path.display().to_string(), source: e })
        })?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let t = &self.training;
        if !(t.learning_rate > 0.0) {
            return Err(HarnessError::Invalid(format!("learning_rate must be positive, got {}", t.learning_rate)));
        }
        if let Some(c) = t.clip_norm {
            if !(c > 0.0) {
                return Err(HarnessError::Invalid(format!("clip_norm must be positive, got {c}")));
            }
        }
        if self.experiment.allocators.is_empty() {
            return Err(HarnessError::Invalid("no allocators listed".into()));
        }
        if self.experiment.modes.iter().flatten().any(|l| *l == 0) {
            return Err(HarnessError::Invalid("modes entries must be at least 1".into()));
        }
        if self.experiment.subchannels.iter().flatten().any(|k| *k == 0) {
            return Err(HarnessError::Invalid("subchannels entries must be at least 1".into()));
        }
        // catches bad physics before any run starts
        Scenario::from_config(&self.scenario, 0)?;
        Ok(())
    }

    /// Hex prefix of the SHA-256 of the spec's canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    fn subchannel_values(&self) -> Vec<usize> {
        self.experiment.subchannels.clone().unwrap_or_else(|| vec![self.scenario.radio.num_subchannels])
    }

    fn mode_values(&self) -> Vec<usize> {
        self.experiment.modes.clone().unwrap_or_else(|| vec![self.scenario.modulation.rates.len() - 1])
    }

    /// Scenario config with `k` subchannels and, when modes are swept, the
    /// `{0, 2, .., 2l}` rate ladder.
    pub fn point_config(&self, k: usize, l: usize) -> ScenarioConfig {
        let mut cfg = self.scenario.clone();
        cfg.radio.num_subchannels = k;
        if self.experiment.modes.is_some() {
            cfg.modulation.rates = rate_ladder(l);
        }
        cfg
    }
}

/// `{0, 2, 4, .., 2l}` bits per symbol.
pub fn rate_ladder(l: usize) -> Vec<f64> {
    (0..=l).map(|i| 2.0 * i as f64).collect()
}

/// One (sweep point, allocator, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub key: String,
    pub subchannels: usize,
    pub modes: usize,
    pub allocator: AllocatorKind,
    pub seed: u64,
    pub rounds: Vec<RoundMetrics>,
    pub error: Option<String>,
}

impl RunResult {
    pub fn final_metrics(&self) -> Option<&RoundMetrics> {
        self.rounds.last()
    }
}

/// Objective sweep row, averaged over seeds and channel draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// `subchannels` or `modes`.
    pub axis: String,
    pub value: usize,
    pub allocator: AllocatorKind,
    pub mean_objective: f64,
    pub mean_sum_rate: f64,
    pub mean_selected: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ResultBundle {
    pub name: String,
    pub digest: String,
    pub runs: Vec<RunResult>,
    pub sweeps: Vec<SweepRow>,
}

impl ResultBundle {
    pub fn failures(&self) -> impl Iterator<Item = &RunResult> {
        self.runs.iter().filter(|r| r.error.is_some())
    }
}

/// Seed-averaged final metrics of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub subchannels: usize,
    pub modes: usize,
    pub allocator: AllocatorKind,
    pub runs: usize,
    pub failures: usize,
    pub final_loss: f64,
    pub final_accuracy: Option<f64>,
    pub final_gap: Option<f64>,
    pub mean_objective: f64,
    pub mean_sum_rate: f64,
    pub mean_selected: f64,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn mean_opt(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = xs.collect();
    v.filter(|v| !v.is_empty()).map(|v| mean(v.into_iter()))
}

/// Groups runs by configuration in key order.
pub fn summarize(bundle: &ResultBundle) -> Vec<SummaryRow> {
    let mut keys: Vec<(usize, usize, AllocatorKind)> = Vec::new();
    for r in &bundle.runs {
        let k = (r.subchannels, r.modes, r.allocator);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(k, l, a)| {
            let group: Vec<&RunResult> =
                bundle.runs.iter().filter(|r| (r.subchannels, r.modes, r.allocator) == (k, l, a)).collect();
            let ok: Vec<&RunResult> = group.iter().copied().filter(|r| r.error.is_none()).collect();
            let finals = || ok.iter().filter_map(|r| r.final_metrics());
            let executed = || ok.iter().flat_map(|r| r.rounds.iter().skip(1));
            SummaryRow {
                subchannels: k,
                modes: l,
                allocator: a,
                runs: group.len(),
                failures: group.len() - ok.len(),
                final_loss: mean(finals().map(|m| m.loss)),
                final_accuracy: mean_opt(finals().map(|m| m.accuracy)),
                final_gap: mean_opt(finals().map(|m| m.gap)),
                mean_objective: mean(executed().map(|m| m.objective)),
                mean_sum_rate: mean(executed().map(|m| m.sum_rate)),
                mean_selected: mean(executed().map(|m| m.selected.iter().filter(|s| **s).count() as f64)),
            }
        })
        .collect()
}

type Stores = (Arc<ExampleStore>, Arc<ExampleStore>);

fn build_task(spec: &ExperimentSpec, scenario: &Scenario, seed: u64, mnist: Option<&Stores>) -> Result<TrainTask, HarnessError> {
    let t = &spec.training;
    let sizes: Vec<usize> = scenario.clients.iter().map(|c| c.dataset_size).collect();
    let n: usize = sizes.iter().sum();
    let (loss, train, test, optimal_loss) = match t.task {
        TaskKind::Mlp => {
            let (train, test) = mnist.expect("MNIST loaded for MLP tasks");
            (LossKind::Mlp { hidden: t.hidden }, train.clone(), Some(test.clone()), None)
        }
        TaskKind::Quadratic => {
            let s = synth_quadratic(n, t.dim, t.conditioning, t.noise, seed)?;
            (s.loss, Arc::new(s.store), None, Some(s.optimal_loss))
        }
        TaskKind::Logistic => {
            let s = synth_logistic(n, t.dim, t.reg, seed)?;
            (s.loss, Arc::new(s.store), None, Some(s.optimal_loss))
        }
    };
    Ok(TrainTask {
        loss,
        partition: partition_with_sizes(train.len(), &sizes, seed)?,
        train,
        test,
        batch: if t.batch_size == 0 { BatchMode::Full } else { BatchMode::Sample { size: t.batch_size } },
        learning_rate: t.learning_rate,
        clip_norm: t.clip_norm.unwrap_or(f64::INFINITY),
        aggregation: t.aggregation,
        optimal_loss,
    })
}

fn load_stores(spec: &ExperimentSpec) -> Result<Option<Stores>, HarnessError> {
    if spec.training.task != TaskKind::Mlp {
        return Ok(None);
    }
    let (train, test) = load_mnist(&data_root(spec.training.data_dir.as_deref()))?;
    Ok(Some((Arc::new(train), Arc::new(test))))
}

/// Runs every (sweep point, allocator, seed) combination in parallel. A
/// failing run is recorded in its `error` field; only setup problems (bad
/// spec, missing data) abort the whole experiment.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ResultBundle, HarnessError> {
    spec.validate()?;
    let digest = spec.digest();
    let e = &spec.experiment;
    let mut jobs = Vec::new();
    if !e.seeds.is_empty() {
        for k in spec.subchannel_values() {
            for l in spec.mode_values() {
                for a in &e.allocators {
                    for s in &e.seeds {
                        jobs.push((k, l, *a, *s));
                    }
                }
            }
        }
    }
    let stores = if jobs.is_empty() { None } else { load_stores(spec)? };
    let runs = jobs
        .par_iter()
        .map(|(k, l, allocator, seed)| {
            let key = format!("{digest}-k{k}-l{l}-{}-s{seed}", allocator.name());
            let outcome = (|| -> Result<Vec<RoundMetrics>, HarnessError> {
                let scenario = Scenario::from_config(&spec.point_config(*k, *l), *seed)?;
                let task = build_task(spec, &scenario, *seed, stores.as_ref())?;
                let plan = TrainingPlan { allocator: *allocator, solver: spec.solver.clone(), rounds: e.rounds };
                Ok(run_training(&scenario, &task, &plan, *seed, None)?.rounds)
            })();
            let (rounds, error) = match outcome {
                Ok(r) => (r, None),
                Err(err) => (Vec::new(), Some(err.to_string())),
            };
            RunResult { key, subchannels: *k, modes: *l, allocator: *allocator, seed: *seed, rounds, error }
        })
        .collect();
    Ok(ResultBundle { name: e.name.clone(), digest, runs, sweeps: Vec::new() })
}

fn sweep_axis(
    spec: &ExperimentSpec,
    axis: &str,
    values: &[usize],
    point: impl Fn(usize) -> (usize, usize) + Sync,
) -> Result<Vec<SweepRow>, HarnessError> {
    let e = &spec.experiment;
    let mut rows = Vec::new();
    for v in values {
        let (k, l) = point(*v);
        let cfg = spec.point_config(k, l);
        let samples = e
            .seeds
            .par_iter()
            .map(|seed| -> Result<Vec<Vec<DrawSample>>, HarnessError> {
                let scenario = Scenario::from_config(&cfg, *seed)?;
                (1..=e.channel_draws)
                    .map(|round| {
                        let ch = if e.fading {
                            sample_channels(&scenario, *seed, round)?
                        } else {
                            ChannelRealization::mean_gains(&scenario, round)?
                        };
                        e.allocators
                            .iter()
                            .map(|a| match allocate(*a, &ch, &scenario, &spec.solver, *seed) {
                                Ok(r) => Ok((r.objective, r.sum_rate, r.assignment.num_selected() as f64)),
                                Err(AllocError::Infeasible { .. }) => Ok((0.0, 0.0, 0.0)),
                                Err(err) => Err(err.into()),
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect::<Result<Vec<_>, _>>()?;
        for (i, a) in e.allocators.iter().enumerate() {
            let flat: Vec<(f64, f64, f64)> = samples.iter().flatten().map(|draw| draw[i]).collect();
            rows.push(SweepRow {
                axis: axis.into(),
                value: *v,
                allocator: *a,
                mean_objective: mean(flat.iter().map(|s| s.0)),
                mean_sum_rate: mean(flat.iter().map(|s| s.1)),
                mean_selected: mean(flat.iter().map(|s| s.2)),
                samples: flat.len(),
            });
        }
    }
    Ok(rows)
}

/// Objective, sum rate and selected count of one allocation.
type DrawSample = (f64, f64, f64);

/// Seed- and draw-averaged allocator objective and sum rate along each
/// listed axis (`subchannels` with the scenario's rates, `modes` with the
/// scenario's subchannel count).
pub fn sweep_objective(spec: &ExperimentSpec) -> Result<Vec<SweepRow>, HarnessError> {
    spec.validate()?;
    let e = &spec.experiment;
    if e.subchannels.as_ref().is_none_or(|v| v.is_empty()) && e.modes.as_ref().is_none_or(|v| v.is_empty()) {
        return Err(HarnessError::Invalid("objective sweep needs a nonempty subchannels or modes list".into()));
    }
    let base_k = spec.scenario.radio.num_subchannels;
    let base_l = spec.scenario.modulation.rates.len() - 1;
    let mut rows = Vec::new();
    if let Some(ks) = &e.subchannels {
        // keep the scenario's own rates along the subchannel axis
        let mut flat = spec.clone();
        flat.experiment.modes = None;
        rows.extend(sweep_axis(&flat, "subchannels", ks, |k| (k, base_l))?);
    }
    if let Some(ls) = &e.modes {
        rows.extend(sweep_axis(spec, "modes", ls, |l| (base_k, l))?);
    }
    Ok(rows)
}

fn create_dir(dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))
}

pub(crate) fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>, HarnessError> {
    let file = std::fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).has_headers(false).from_writer(file))
}

/// Column order of `summary.csv`.
pub const SUMMARY_COLUMNS: [&str; 11] = [
    "subchannels",
    "modes",
    "allocator",
    "runs",
    "failures",
    "final_loss",
    "final_accuracy",
    "final_gap",
    "mean_objective",
    "mean_sum_rate",
    "mean_selected",
];

/// Column order of `sweep.csv`.
pub const SWEEP_COLUMNS: [&str; 7] =
    ["axis", "value", "allocator", "mean_objective", "mean_sum_rate", "mean_selected", "samples"];

pub(crate) fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes `traces/<key>.csv`, `summary.csv`, `bundle.json` and, when
/// present, `sweep.csv`.
pub fn write_bundle(bundle: &ResultBundle, out_dir: &Path) -> Result<(), HarnessError> {
    let traces = out_dir.join("traces");
    create_dir(&traces)?;
    for run in bundle.runs.iter().filter(|r| r.error.is_none()) {
        let trace = crate::fl::TrainingTrace {
            rounds: run.rounds.clone(),
            final_model: crate::fl::ModelVector::new(Vec::new()),
        };
        trace.write_csv_file(&traces.join(format!("{}.csv", run.key)), None)?;
    }
    let mut w = csv_writer(&out_dir.join("summary.csv"))?;
    w.write_record(SUMMARY_COLUMNS)?;
    for r in summarize(bundle) {
        w.write_record([
            r.subchannels.to_string(),
            r.modes.to_string(),
            r.allocator.name().to_string(),
            r.runs.to_string(),
            r.failures.to_string(),
            r.final_loss.to_string(),
            fmt_opt(r.final_accuracy),
            fmt_opt(r.final_gap),
            r.mean_objective.to_string(),
            r.mean_sum_rate.to_string(),
            r.mean_selected.to_string(),
        ])?;
    }
    w.flush().map_err(|e| HarnessError::io(out_dir, e))?;
    if !bundle.sweeps.is_empty() {
        write_sweep(&bundle.sweeps, &out_dir.join("sweep.csv"))?;
    }
    let json_path = out_dir.join("bundle.json");
    let file = std::fs::File::create(&json_path).map_err(|e| HarnessError::io(&json_path, e))?;
    serde_json::to_writer(std::io::BufWriter::new(file), bundle)?;
    Ok(())
}

pub fn write_sweep(rows: &[SweepRow], path: &Path) -> Result<(), HarnessError> {
    let mut w = csv_writer(path)?;
    w.write_record(SWEEP_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.axis.clone(),
            r.value.to_string(),
            r.allocator.name().to_string(),
            r.mean_objective.to_string(),
            r.mean_sum_rate.to_string(),
            r.mean_selected.to_string(),
            r.samples.to_string(),
        ])?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

/// Reads a bundle written by [`write_bundle`].
pub fn read_bundle(dir: &Path) -> Result<ResultBundle, HarnessError> {
    let path = dir.join("bundle.json");
    let file = std::fs::File::open(&path).map_err(|e| HarnessError::io(&path, e))?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_spec() -> ExperimentSpec {
        let text = r#"
            [experiment]
            allocators = ["optimal", "baseline2"]
            rounds = 3
            seeds = [1, 2]
            [training]
            task = "quadratic"
            dim = 4
            learning_rate = 0.1
            [geometry]
            num_clients = 3
            [clients]
            dataset_size = [20, 30]
        "#;
        ExperimentSpec::from_toml_str(text, &[]).unwrap()
    }

    #[test]
    fn overrides_reach_every_section() {
        let spec = ExperimentSpec::from_toml_str(
            "",
            &["radio.num_subchannels=4".into(), "training.task=\"logistic\"".into(), "solver.step=0.02".into()],
        )
        .unwrap();
        assert_eq!(spec.scenario.radio.num_subchannels, 4);
        assert_eq!(spec.training.task, TaskKind::Logistic);
        assert_eq!(spec.solver.step, 0.02);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let err = ExperimentSpec::from_toml_str("[training]\nlearnin_rate = 1.0", &[]).unwrap_err();
        assert!(err.is_config(), "{err}");
        let err = ExperimentSpec::from_toml_str("[radio]\nbogus = 1", &[]).unwrap_err();
        assert!(err.is_config(), "{err}");
    }

    #[test]
    fn digest_tracks_content() {
        let a = quadratic_spec();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.experiment.rounds += 1;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn empty_sweep_yields_no_rows() {
        let mut spec = quadratic_spec();
        spec.experiment.subchannels = Some(vec![]);
        let bundle = run_experiment(&spec).unwrap();
        assert!(bundle.runs.is_empty());
        assert!(summarize(&bundle).is_empty());
    }

    #[test]
    fn runs_cover_the_grid_and_repeat_exactly() {
        let mut spec = quadratic_spec();
        spec.experiment.subchannels = Some(vec![2, 4]);
        let a = run_experiment(&spec).unwrap();
        assert_eq!(a.runs.len(), 2 * 2 * 2);
        if let Some(f) = a.failures().next() {
            panic!("{}: {:?}", f.key, f.error);
        }
        let rows = summarize(&a);
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.final_gap.is_some() && r.runs == 2));
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        write_bundle(&a, dir_a.path()).unwrap();
        write_bundle(&run_experiment(&spec).unwrap(), dir_b.path()).unwrap();
        let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("summary.csv")).unwrap();
        assert_eq!(read(&dir_a), read(&dir_b));
        assert_eq!(read_bundle(dir_a.path()).unwrap(), a);
    }

    #[test]
    fn missing_mnist_names_the_path() {
        let mut spec = ExperimentSpec::default();
        spec.training.data_dir = Some("/nonexistent/flexsched".into());
        spec.experiment.seeds = vec![1];
        let err = run_experiment(&spec).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/flexsched/mnist/train-images-idx3-ubyte"), "{err}");
    }

    #[test]
    fn sweep_requires_an_axis() {
        assert!(sweep_objective(&quadratic_spec()).is_err());
        let mut spec = quadratic_spec();
        spec.experiment.modes = Some(vec![1, 2]);
        spec.experiment.channel_draws = 2;
        let rows = sweep_objective(&spec).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.axis == "modes" && r.samples == 4));
    }

    #[test]
    fn ladder_matches_reference_rates() {
        assert_eq!(rate_ladder(3), ScenarioConfig::default().modulation.rates);
    }
}
