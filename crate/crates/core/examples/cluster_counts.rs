//! In-sample and predictive cluster counts at one fit, by closed form and
//! by Monte Carlo.

use dp_sensitivity::app::{load_csv, BUNDLED_IRIS};
use dp_sensitivity::model::StickPriorSpec;
use dp_sensitivity::optimize::{initialize, optimize, OptimizeOptions};
use dp_sensitivity::quantities::{clusters_predictive_simulated, g_of_eta, ClusterCountQuery};
use dp_sensitivity::variational::ModelSpec;

fn main() -> dp_sensitivity::Result<()> {
    let data = load_csv(BUNDLED_IRIS, false)?;
    let model = ModelSpec::for_data(&data, 30, 8.0)?;
    let init = initialize(&data, &model, 0)?;
    let fit = optimize(&init, &data, &model, &StickPriorSpec::beta(8.0), &OptimizeOptions::default())?;
    let eta = &fit.eta_opt;

    println!("threshold  in-sample exact  in-sample MC        predictive (binomial)  predictive (simulated)");
    for t in [0, 1, 3, 5, 10] {
        let exact = g_of_eta(eta, &data, &model, &ClusterCountQuery::in_sample(t).closed_form())?;
        let mc = g_of_eta(eta, &data, &model, &ClusterCountQuery::in_sample(t).with_mc(2000, 1))?;
        let pred = ClusterCountQuery::predictive(t, data.n()).with_mc(2000, 1);
        let binom = g_of_eta(eta, &data, &model, &pred)?;
        let sim = clusters_predictive_simulated(eta, &pred)?;
        println!(
            "{t:9}  {:15.3}  {:7.3} ± {:5.3}     {:7.3} ± {:5.3}        {:7.3} ± {:5.3}",
            exact.value, mc.value, mc.mc_stderr, binom.value, binom.mc_stderr, sim.value, sim.mc_stderr
        );
    }
    Ok(())
}
