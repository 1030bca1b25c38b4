//! Fit the truncated DP mixture to Iris and print the occupied clusters.
//!
//!     cargo run --release --example fit_iris -- [alpha]

use dp_sensitivity::app::{load_csv, BUNDLED_IRIS};
use dp_sensitivity::model::StickPriorSpec;
use dp_sensitivity::optimize::{initialize, optimize, OptimizeOptions};
use dp_sensitivity::quantities::{distinct_clusters_closed, thresholded_clusters_closed};
use dp_sensitivity::variational::{optimal_responsibilities, ModelSpec};

fn main() -> dp_sensitivity::Result<()> {
    let alpha: f64 = std::env::args().nth(1).map_or(8.0, |a| a.parse().expect("alpha"));
    let data = load_csv(BUNDLED_IRIS, false)?;
    let model = ModelSpec::for_data(&data, 30, alpha)?;

    let init = initialize(&data, &model, 0)?;
    let fit = optimize(&init, &data, &model, &StickPriorSpec::beta(alpha), &OptimizeOptions::default())?;
    println!(
        "alpha={alpha} KL={:.6} |grad|={:.1e} min eig={:.3e} iterations={} converged={}",
        fit.kl_value, fit.grad_norm, fit.hessian_min_eig, fit.iterations, fit.converged
    );

    let r = optimal_responsibilities(&fit.eta_opt, &data, &model)?;
    let occ = r.occupancy();
    println!("expected distinct clusters   {:.3}", distinct_clusters_closed(&r));
    println!("clusters with more than 3    {:.3}", thresholded_clusters_closed(&r, 3));
    println!("\n  k  occupancy  mean");
    for k in 0..model.layout().k {
        if occ[k] > 0.5 {
            let m: Vec<String> = fit.eta_opt.mean(k).iter().map(|v| format!("{v:.2}")).collect();
            println!("{k:3}  {:9.2}  [{}]", occ[k], m.join(", "));
        }
    }
    Ok(())
}
