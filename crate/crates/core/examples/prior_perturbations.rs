//! The perturbation catalog: log φ, normalizers and the contaminated stick
//! prior, plus a user-defined polynomial tilt read from a config string.

use dp_sensitivity::app::config::parse_phi;
use dp_sensitivity::perturbation::{builtin_phis, log_normalizer, prior_density_table};

fn main() -> dp_sensitivity::Result<()> {
    let alpha = 8.0;
    let mut phis = builtin_phis(alpha);
    phis.push(parse_phi("polynomial(c0=0, c1=1.5, c2=-3)", alpha)?);

    for phi in &phis {
        println!("{}", phi.label());
        let logs: Vec<String> = [0.05, 0.25, 0.5, 0.75, 0.95]
            .iter()
            .map(|&nu| format!("{:+.3}", phi.log_phi_at(nu)))
            .collect();
        println!("  log φ at ν = .05 .25 .5 .75 .95: {}", logs.join(" "));
        for delta in [0.25, 0.5, 1.0] {
            println!("  log Z(δ={delta}) = {:+.5}", log_normalizer(alpha, phi, delta)?);
        }
        let table = prior_density_table(alpha, phi, 1.0, 9)?;
        let row: Vec<String> = table.iter().map(|[nu, p0, pc]| format!("{nu:.1}:{p0:.2}→{pc:.2}")).collect();
        println!("  density at δ=1: {}", row.join(" "));
    }
    Ok(())
}
