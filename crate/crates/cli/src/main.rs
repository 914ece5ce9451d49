use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use flexsched::harness::verify::{self, MlpCheck};
use flexsched::harness::{
    emit_plot_data, read_bundle, run_experiment, summarize, sweep_objective, write_bundle, write_sweep,
    ExperimentSpec, HarnessError, ResultBundle,
};

/// Wireless federated-learning scheduling experiments.
#[derive(Debug, Parser)]
#[command(name = "flexsched", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train over every (K, L, allocator, seed) point of a config.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Replica seeds, comma separated. Replaces the config's seed list.
        #[arg(long, required = true, value_delimiter = ',')]
        seed: Vec<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Average allocator objective and sum rate along the K and L axes.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',')]
        seed: Vec<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run the self-checks and print one line per check.
    Verify {
        /// Skip the objective sweep.
        #[arg(long)]
        quick: bool,
        /// Also run the MLP reproduction (needs MNIST).
        #[arg(long)]
        mlp: bool,
        /// Directory holding mnist/ for the MLP check.
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Write plot-ready CSV files from a stored result bundle.
    Emit {
        /// Directory written by `run` (holds bundle.json).
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// TOML experiment file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set training.learning_rate=0.1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentSpec, HarnessError> {
        match &self.config {
            Some(path) => ExperimentSpec::from_file(path, &self.overrides),
            None => ExperimentSpec::from_toml_str("", &self.overrides),
        }
    }
}

fn print_summary(bundle: &ResultBundle) {
    println!("{:>4} {:>3} {:<10} {:>5} {:>12} {:>9} {:>14}", "K", "L", "allocator", "runs", "final_loss", "accuracy", "objective");
    for r in summarize(bundle) {
        let acc = r.final_accuracy.map_or_else(|| "-".into(), |a| format!("{a:.4}"));
        println!(
            "{:>4} {:>3} {:<10} {:>5} {:>12.5} {:>9} {:>14.6e}",
            r.subchannels,
            r.modes,
            r.allocator.name(),
            r.runs,
            r.final_loss,
            acc,
            r.mean_objective
        );
    }
}

fn write_plots(bundle: &ResultBundle, dir: &Path) -> anyhow::Result<()> {
    let files = emit_plot_data(bundle, dir).with_context(|| format!("writing plot data to {}", dir.display()))?;
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

/// Ok(true) when everything ran cleanly, Ok(false) when some run or check
/// failed after reporting.
fn execute(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let mut spec = config.load()?;
            spec.experiment.seeds = seed;
            let bundle = run_experiment(&spec)?;
            write_bundle(&bundle, &out).with_context(|| format!("writing results to {}", out.display()))?;
            write_plots(&bundle, &out.join("plots"))?;
            print_summary(&bundle);
            let failures: Vec<_> = bundle.failures().collect();
            for f in &failures {
                eprintln!("run {} failed: {}", f.key, f.error.as_deref().unwrap_or("unknown error"));
            }
            Ok(failures.is_empty())
        }
        Command::Sweep { config, seed, out } => {
            let mut spec = config.load()?;
            if !seed.is_empty() {
                spec.experiment.seeds = seed;
            }
            let rows = sweep_objective(&spec)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let path = out.join("sweep.csv");
            write_sweep(&rows, &path)?;
            let bundle = ResultBundle { name: spec.experiment.name.clone(), digest: spec.digest(), runs: vec![], sweeps: rows };
            write_plots(&bundle, &out.join("plots"))?;
            for r in &bundle.sweeps {
                println!(
                    "{:<11} {:>3} {:<10} objective {:.6e} sum_rate {:.6e}",
                    r.axis,
                    r.value,
                    r.allocator.name(),
                    r.mean_objective,
                    r.mean_sum_rate
                );
            }
            println!("wrote {}", path.display());
            Ok(true)
        }
        Command::Verify { quick, mlp, data_dir } => {
            let mut checks = verify::quick_checks();
            if !quick {
                checks.push(verify::sweep_shape(vec![1, 2, 3, 4, 5], 10));
            }
            if mlp {
                checks.push(verify::mlp_reproduction(&MlpCheck { data_dir, ..MlpCheck::default() }));
            }
            for c in &checks {
                println!("{}", c.line());
            }
            Ok(checks.iter().all(|c| c.passed))
        }
        Command::Emit { bundle, out } => {
            let b = read_bundle(&bundle)?;
            write_plots(&b, &out)?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            // thiserror messages often embed their source; skip causes already shown
            let mut shown = e.to_string();
            for cause in e.chain().skip(1) {
                let text = cause.to_string();
                if !shown.contains(&text) {
                    shown = format!("{shown}: {text}");
                }
            }
            eprintln!("error: {shown}");
            let config = e.chain().any(|c| c.downcast_ref::<HarnessError>().is_some_and(HarnessError::is_config));
            ExitCode::from(if config { 2 } else { 1 })
        }
    }
}
