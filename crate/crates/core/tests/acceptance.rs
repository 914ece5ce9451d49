//! Acceptance gate: one PASS/FAIL line per criterion.
//!
//! Exits 0 after reporting unless `FLEXSCHED_ACCEPTANCE_STRICT` is set, in
//! which case any failing criterion makes the target fail. The MLP run needs
//! MNIST under `FLEXSCHED_DATA_DIR` (or the bundled `data/`); set
//! `FLEXSCHED_SKIP_MLP` to leave it out.

use std::path::PathBuf;

use flexsched::harness::verify::{self, Check, MlpCheck};

fn main() {
    let data_dir = std::env::var_os("FLEXSCHED_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data")));

    let mut checks: Vec<(u8, Box<dyn Fn() -> Check>)> = vec![
        (1, Box::new(|| verify::oracle_agreement(100, 0))),
        (2, Box::new(|| verify::ber_round_trip(10_000, 1))),
        (3, Box::new(|| verify::bound_holds(20, 100))),
        (4, Box::new(verify::contraction_gate)),
    ];
    if std::env::var_os("FLEXSCHED_SKIP_MLP").is_none() {
        let mlp = MlpCheck { data_dir: Some(data_dir), ..MlpCheck::default() };
        checks.push((5, Box::new(move || verify::mlp_reproduction(&mlp))));
    }
    checks.push((6, Box::new(|| verify::sweep_shape(vec![1, 2, 3, 4, 5], 10))));
    checks.push((7, Box::new(verify::winner_scaling)));
    checks.push((8, Box::new(|| verify::mean_chain_property(10_000, 2))));

    let mut failed = Vec::new();
    for (id, run) in &checks {
        let c = run();
        println!("[{id}] {}", c.line());
        if !c.passed {
            failed.push(*id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all {} criteria pass", checks.len());
    } else {
        println!("acceptance: {} of {} criteria fail: {failed:?}", failed.len(), checks.len());
        if std::env::var_os("FLEXSCHED_ACCEPTANCE_STRICT").is_some() {
            std::process::exit(1);
        }
    }
}
