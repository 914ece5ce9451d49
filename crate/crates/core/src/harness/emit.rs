//! Plot-ready CSV files with fixed column schemas.

use std::path::{Path, PathBuf};

use super::{create_dir, csv_writer, fmt_opt, mean, HarnessError, ResultBundle, RunResult};

pub const LOSS_COLUMNS: [&str; 6] = ["allocator", "subchannels", "modes", "round", "mean_loss", "runs"];
pub const ACCURACY_COLUMNS: [&str; 6] = ["allocator", "subchannels", "modes", "round", "mean_accuracy", "runs"];
pub const OBJECTIVE_K_COLUMNS: [&str; 4] = ["allocator", "subchannels", "mean_objective", "mean_sum_rate"];
pub const OBJECTIVE_L_COLUMNS: [&str; 4] = ["allocator", "modes", "mean_objective", "mean_sum_rate"];
pub const SELECTION_COLUMNS: [&str; 8] =
    ["allocator", "subchannels", "modes", "seed", "round", "client", "selected", "iterations"];

/// Writes `loss_vs_round.csv`, `accuracy_vs_round.csv`,
/// `objective_vs_subchannels.csv`, `objective_vs_modes.csv` and
/// `selection_map.csv` into `out_dir`. Curves average the successful runs of
/// each configuration; files with nothing to plot keep their header.
pub fn emit_plot_data(bundle: &ResultBundle, out_dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    create_dir(out_dir)?;
    let ok: Vec<&RunResult> = bundle.runs.iter().filter(|r| r.error.is_none()).collect();
    let mut configs = Vec::new();
    for r in &ok {
        let c = (r.allocator, r.subchannels, r.modes);
        if !configs.contains(&c) {
            configs.push(c);
        }
    }

    let loss_path = out_dir.join("loss_vs_round.csv");
    let acc_path = out_dir.join("accuracy_vs_round.csv");
    let mut loss = csv_writer(&loss_path)?;
    let mut acc = csv_writer(&acc_path)?;
    loss.write_record(LOSS_COLUMNS)?;
    acc.write_record(ACCURACY_COLUMNS)?;
    for (a, k, l) in &configs {
        let group: Vec<&&RunResult> =
            ok.iter().filter(|r| (r.allocator, r.subchannels, r.modes) == (*a, *k, *l)).collect();
        let rounds = group.iter().map(|r| r.rounds.len()).min().unwrap_or(0);
        for t in 0..rounds {
            let prefix = [a.name().to_string(), k.to_string(), l.to_string(), t.to_string()];
            let n = group.len().to_string();
            let mean_loss = mean(group.iter().map(|r| r.rounds[t].loss));
            loss.write_record(prefix.iter().cloned().chain([mean_loss.to_string(), n.clone()]))?;
            let accs: Option<Vec<f64>> = group.iter().map(|r| r.rounds[t].accuracy).collect();
            if let Some(accs) = accs {
                acc.write_record(prefix.iter().cloned().chain([fmt_opt(Some(mean(accs.into_iter()))), n]))?;
            }
        }
    }
    loss.flush().map_err(|e| HarnessError::io(&loss_path, e))?;
    acc.flush().map_err(|e| HarnessError::io(&acc_path, e))?;

    let mut paths = vec![loss_path, acc_path];
    for (axis, columns, file) in [
        ("subchannels", OBJECTIVE_K_COLUMNS, "objective_vs_subchannels.csv"),
        ("modes", OBJECTIVE_L_COLUMNS, "objective_vs_modes.csv"),
    ] {
        let path = out_dir.join(file);
        let mut w = csv_writer(&path)?;
        w.write_record(columns)?;
        for row in bundle.sweeps.iter().filter(|r| r.axis == axis) {
            w.write_record([
                row.allocator.name().to_string(),
                row.value.to_string(),
                row.mean_objective.to_string(),
                row.mean_sum_rate.to_string(),
            ])?;
        }
        w.flush().map_err(|e| HarnessError::io(&path, e))?;
        paths.push(path);
    }

    let sel_path = out_dir.join("selection_map.csv");
    let mut sel = csv_writer(&sel_path)?;
    sel.write_record(SELECTION_COLUMNS)?;
    for r in &ok {
        for m in r.rounds.iter().skip(1) {
            for (c, (s, i)) in m.selected.iter().zip(&m.iterations).enumerate() {
                sel.write_record([
                    r.allocator.name().to_string(),
                    r.subchannels.to_string(),
                    r.modes.to_string(),
                    r.seed.to_string(),
                    m.round.to_string(),
                    c.to_string(),
                    u8::from(*s).to_string(),
                    i.to_string(),
                ])?;
            }
        }
    }
    sel.flush().map_err(|e| HarnessError::io(&sel_path, e))?;
    paths.push(sel_path);
    Ok(paths)
}
