//! Compare the forward-mode gradient, Hessian columns and cross derivatives
//! with central finite differences on Iris.

use dp_sensitivity::app::sweep::check_derivatives;
use dp_sensitivity::app::{load_csv, ExperimentConfig};

fn main() -> dp_sensitivity::Result<()> {
    let cfg = ExperimentConfig::default();
    let data = load_csv(&cfg.data_path, false)?;
    for step in [1e-3, 1e-4, 1e-5, 1e-6] {
        let r = check_derivatives(&cfg, &data, 20, step)?;
        println!(
            "step {step:.0e}: gradient {:.2e}  hessian {:.2e}  cross {:.2e}{}",
            r.gradient_rel_err,
            r.hessian_rel_err,
            r.cross_rel_err,
            if r.roundoff_dominated { "  (roundoff)" } else { "" }
        );
    }
    Ok(())
}
