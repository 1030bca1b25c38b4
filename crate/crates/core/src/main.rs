use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dp_sensitivity::app::report::{emit_report, load_report};
use dp_sensitivity::app::sweep::{check_derivatives, prepare, run_alpha_sweep, run_functional_sweep};
use dp_sensitivity::app::{load_csv, ExperimentConfig};
use dp_sensitivity::quantities::g_of_eta;
use dp_sensitivity::Result;

#[derive(Parser)]
#[command(name = "dpsens", version, about = "Prior sensitivity for variational DP mixtures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key = value configuration file
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set k=20`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_file(p)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Fit at alpha0 and print a summary
    Fit(Common),
    /// Refit-vs-linear sweep over the concentration
    SweepAlpha(Common),
    /// Refit-vs-linear sweep over functional perturbations
    SweepPhi(Common),
    /// Compare derivatives with central finite differences
    CheckDerivatives {
        #[command(flatten)]
        common: Common,
        /// Number of random Hessian columns
        #[arg(long, default_value_t = 20)]
        columns: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
    },
    /// Rebuild plots and manifest from an existing results directory
    Report {
        dir: PathBuf,
    },
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Fit(c) => {
            let cfg = c.load()?;
            let prep = prepare(&cfg)?;
            let fit = &prep.anchor;
            println!("alpha0        {}", cfg.alpha0);
            println!("kl            {:.8}", fit.kl_value);
            println!("grad_inf      {:.3e}", fit.grad_norm);
            println!("hessian_min   {:.3e}", fit.hessian_min_eig);
            println!("iterations    {}", fit.iterations);
            println!("restarts      {}", fit.restarts);
            println!("converged     {}", fit.converged);
            for q in cfg.queries(prep.data.n()) {
                let e = g_of_eta(&fit.eta_opt, &prep.data, &prep.model, &q)?;
                println!(
                    "clusters      t={} {} {}: {:.4} ± {:.4}",
                    q.threshold,
                    q.mode.as_str(),
                    q.method.as_str(),
                    e.value,
                    e.mc_stderr
                );
            }
            Ok(fit.converged)
        }
        Command::SweepAlpha(c) => {
            let cfg = c.load()?;
            let report = run_alpha_sweep(&cfg, &prepare(&cfg)?)?;
            emit_report(&report, &cfg.output_dir)?;
            summarize(&report, &cfg);
            Ok(report.all_converged)
        }
        Command::SweepPhi(c) => {
            let cfg = c.load()?;
            let report = run_functional_sweep(&cfg, &prepare(&cfg)?)?;
            emit_report(&report, &cfg.output_dir)?;
            summarize(&report, &cfg);
            Ok(report.all_converged)
        }
        Command::CheckDerivatives {
            common,
            columns,
            step,
            tol,
        } => {
            let cfg = common.load()?;
            let data = load_csv(&cfg.data_path, cfg.standardize)?;
            let r = check_derivatives(&cfg, &data, columns, step)?;
            println!("step               {:e}", r.step);
            println!("gradient rel err   {:.3e}", r.gradient_rel_err);
            println!("hessian rel err    {:.3e} ({} columns)", r.hessian_rel_err, r.hessian_columns_checked);
            println!("cross rel err      {:.3e}", r.cross_rel_err);
            if r.roundoff_dominated {
                println!("warning: roundoff dominates at this step ({:.1e})", r.roundoff_estimate);
            }
            let ok = r.max_rel_err() <= tol;
            println!("{}", if ok { "ok" } else { "FAILED" });
            Ok(ok)
        }
        Command::Report { dir } => {
            let report = load_report(&dir)?;
            for p in emit_report(&report, &dir)? {
                println!("{}", p.display());
            }
            Ok(report.all_converged)
        }
    }
}

fn summarize(report: &dp_sensitivity::app::SweepReport, cfg: &ExperimentConfig) {
    println!("wrote {} rows to {}", report.rows.len(), cfg.output_dir.display());
    println!(
        "refit {:.2}s, linear {:.3}s, factorization {:.2}s",
        report.refit_seconds(),
        report.linear_seconds(),
        report.pack_seconds()
    );
    for &mode in &cfg.modes {
        for &t in &cfg.thresholds {
            for (group, mae) in dp_sensitivity::app::sweep::mean_abs_error(&report.rows, t, mode) {
                println!("mae t={t} {:<11} {group}: {mae:.4}", mode.as_str());
            }
        }
    }
    if !report.all_converged {
        eprintln!("some fits did not converge; see refit_converged in the results");
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
