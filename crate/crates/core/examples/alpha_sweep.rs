//! Refit versus linear response over the concentration, from several
//! centers, written as a report directory.
//!
//!     cargo run --release --example alpha_sweep -- [output_dir]

use dp_sensitivity::app::sweep::mean_abs_error;
use dp_sensitivity::app::{emit_report, prepare, run_alpha_sweep, ExperimentConfig};
use dp_sensitivity::quantities::CountMode;

fn main() -> dp_sensitivity::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut cfg = ExperimentConfig::default();
    let out = std::env::args().nth(1).unwrap_or_else(|| "out/alpha".into());
    cfg.apply_overrides(&[format!("output_dir={out}"), "count_method=closed_form".into()])?;

    let prep = prepare(&cfg)?;
    let report = run_alpha_sweep(&cfg, &prep)?;
    emit_report(&report, &cfg.output_dir)?;

    println!("mean absolute error of the linear approximation, expected distinct clusters:");
    for (center, mae) in mean_abs_error(&report.rows, 0, CountMode::InSample) {
        println!("  {center:<10} {mae:.3}");
    }
    println!(
        "refits {:.1}s, linear {:.2}s after {:.2}s of factorization",
        report.refit_seconds(),
        report.linear_seconds(),
        report.pack_seconds()
    );
    Ok(())
}
