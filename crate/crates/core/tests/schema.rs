//! Output files keep the column schema recorded in `golden/headers.txt`.

use std::path::Path;

use flexsched::harness::{emit_plot_data, run_experiment, sweep_objective, write_bundle, ExperimentSpec};

fn header(path: &Path) -> String {
    let text = std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert!(!text.contains('\r'), "{} has CR line endings", path.display());
    text.lines().next().unwrap_or_default().to_string()
}

#[test]
fn written_files_match_golden_headers() {
    let spec = ExperimentSpec::from_toml_str(
        r#"
        [experiment]
        allocators = ["optimal", "baseline3"]
        rounds = 2
        seeds = [1]
        subchannels = [4, 8]
        modes = [2, 3]
        channel_draws = 1
        [training]
        task = "logistic"
        dim = 3
        [geometry]
        num_clients = 3
        "#,
        &[],
    )
    .unwrap();
    let mut bundle = run_experiment(&spec).unwrap();
    bundle.sweeps = sweep_objective(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_bundle(&bundle, dir.path()).unwrap();
    emit_plot_data(&bundle, &dir.path().join("plots")).unwrap();

    let golden = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden/headers.txt")).unwrap();
    for line in golden.lines() {
        let (file, expected) = line.split_once(": ").unwrap();
        let path = if file == "trace" {
            dir.path().join("traces").join(format!("{}.csv", bundle.runs[0].key))
        } else {
            dir.path().join(file)
        };
        assert_eq!(header(&path), expected, "{file}");
    }
    // the logistic task reports accuracy, so every curve has rows
    let acc = std::fs::read_to_string(dir.path().join("plots/accuracy_vs_round.csv")).unwrap();
    assert_eq!(acc.lines().count(), 1 + 2 * 2 * 2 * 3);
}
