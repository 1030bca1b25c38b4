//! Refit versus linear response along `p₀ φ^δ` for the built-in
//! perturbations, written as a report directory.
//!
//!     cargo run --release --example functional_sweep -- [output_dir]

use dp_sensitivity::app::{emit_report, prepare, run_functional_sweep, ExperimentConfig};
use dp_sensitivity::quantities::CountMode;

fn main() -> dp_sensitivity::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut cfg = ExperimentConfig::default();
    let out = std::env::args().nth(1).unwrap_or_else(|| "out/phi".into());
    cfg.apply_overrides(&[format!("output_dir={out}"), "count_method=closed_form".into()])?;

    let prep = prepare(&cfg)?;
    let report = run_functional_sweep(&cfg, &prep)?;
    emit_report(&report, &cfg.output_dir)?;

    println!("{:<32} {:>5} {:>9} {:>9}", "perturbation", "delta", "refit", "linear");
    for r in report
        .rows
        .iter()
        .filter(|r| r.threshold == 0 && r.mode == CountMode::InSample)
    {
        println!("{:<32} {:5.1} {:9.3} {:9.3}", r.group, r.param, r.refit, r.linear);
    }
    Ok(())
}
