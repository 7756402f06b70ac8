use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use beacon::audit::gradient_audit;
use beacon::io::{
    emit_report, load_checkpoint, parse_config, save_checkpoint, write_compare_csv, Checkpoint,
    RunConfig,
};
use beacon::oracle::{amortized_posterior_check, design_ordering_trial, OracleSettings, Report};
use beacon::twin::{continue_experiment, initial_state, report_from_state, Method};
use beacon::Error;

#[derive(Parser)]
#[command(
    name = "beacon",
    version,
    about = "Sequential well-placement design for CO2 plume monitoring"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// flat `key = value` config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// master seed, overrides the config
    #[arg(long)]
    seed: Option<u64>,
    /// output directory, overrides the config
    #[arg(long)]
    out: Option<PathBuf>,
    /// sequential in-batch scheduling
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Digital-twin run with learned well placement
    Twin {
        #[command(flatten)]
        common: Common,
        /// continue from a checkpoint written by an earlier run
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Same loop with uniformly random well placement
    Baseline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Paired runs of both methods over consecutive seeds
    Compare {
        #[command(flatten)]
        common: Common,
        /// number of seeds, starting at the master seed
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
    /// Finite-difference audit of every backward pass
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Linear-Gaussian validation of the flow posterior and the design density
    Oracle {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// seeded runs of the design-ordering toy
        #[arg(long, default_value_t = 10)]
        trials: u64,
    },
}

fn load_run_config(common: &Common) -> Result<RunConfig, Error> {
    let mut run = match &common.config {
        Some(path) => parse_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        run.twin.seed = seed;
    }
    if let Some(out) = &common.out {
        run.out_dir = out.clone();
    }
    if common.deterministic {
        run.twin.deterministic = true;
    }
    Ok(run)
}

fn run_method(
    run: &RunConfig,
    method: Method,
    resume: Option<&Path>,
    out: &Path,
) -> Result<Report, Error> {
    let cfg = &run.twin;
    let state = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.method != method {
                return Err(Error::Format(format!(
                    "checkpoint belongs to a `{}` run",
                    ckpt.method.label()
                )));
            }
            ckpt.into_state(cfg)?
        }
        None => initial_state(cfg)?,
    };
    std::fs::create_dir_all(out)?;
    let state = continue_experiment(state, cfg, method, |s| {
        let ckpt = Checkpoint::from_state(s, cfg, method);
        save_checkpoint(&ckpt, &out.join(format!("checkpoint-{}.bckp", s.k)))
    })?;
    let report = report_from_state(&state, cfg, method);
    emit_report(&report, cfg, out)?;
    Ok(report)
}

#[derive(Serialize)]
struct CompareSummary {
    seeds: Vec<u64>,
    beacon_final_rmse: Vec<f64>,
    random_final_rmse: Vec<f64>,
    beacon_median_final_rmse: f64,
    random_median_final_rmse: f64,
    beacon_runs_with_nonincreasing_std: usize,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn final_rmse(r: &Report) -> f64 {
    r.rows.last().map_or(f64::NAN, |m| m.rmse)
}

fn compare(run: &RunConfig, seeds: u64) -> Result<(), Error> {
    let base = run.twin.seed;
    let seeds: Vec<u64> = (base..base + seeds).collect();
    let pairs = seeds
        .par_iter()
        .map(|&seed| {
            let mut r = run.clone();
            r.twin.seed = seed;
            let dir = run.out_dir.join(format!("seed-{seed}"));
            let b = run_method(&r, Method::Beacon, None, &dir.join("beacon"))?;
            let rnd = run_method(&r, Method::Random, None, &dir.join("random"))?;
            Ok((b, rnd))
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let all: Vec<Report> = pairs
        .iter()
        .flat_map(|(b, r)| [b.clone(), r.clone()])
        .collect();
    write_compare_csv(&all, &run.out_dir.join("compare.csv"))?;

    let beacon: Vec<f64> = pairs.iter().map(|(b, _)| final_rmse(b)).collect();
    let random: Vec<f64> = pairs.iter().map(|(_, r)| final_rmse(r)).collect();
    let nonincreasing = pairs
        .iter()
        .filter(|(b, _)| {
            b.rows
                .windows(2)
                .all(|w| w[1].mean_posterior_std <= w[0].mean_posterior_std)
        })
        .count();
    let summary = CompareSummary {
        seeds,
        beacon_median_final_rmse: median(&beacon),
        random_median_final_rmse: median(&random),
        beacon_final_rmse: beacon,
        random_final_rmse: random,
        beacon_runs_with_nonincreasing_std: nonincreasing,
    };
    std::fs::write(
        run.out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    println!(
        "median final rmse: beacon {:.6}, random {:.6}; non-increasing std in {}/{} beacon runs",
        summary.beacon_median_final_rmse,
        summary.random_median_final_rmse,
        nonincreasing,
        summary.seeds.len()
    );
    Ok(())
}

fn gradcheck(seed: u64) -> Result<bool, Error> {
    let checks = gradient_audit(seed)?;
    for c in &checks {
        println!(
            "{:<32} {:>12.3e}  (tol {:.0e})  {}",
            c.name,
            c.value,
            c.tolerance,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    Ok(checks.iter().all(|c| c.passed()))
}

fn oracle(seed: u64, trials: u64) -> Result<bool, Error> {
    let settings = OracleSettings {
        seed,
        ..OracleSettings::amortized()
    };
    let amortized = amortized_posterior_check(&settings, 5)?;
    let posterior_ok = amortized.mean_rel_error <= 0.10 && amortized.std_rel_error <= 0.15;
    println!(
        "posterior: mean rel error {:.4} (<= 0.10), std rel error {:.4} (<= 0.15)",
        amortized.mean_rel_error, amortized.std_rel_error
    );
    let mut hits = 0;
    for t in 0..trials {
        let s = OracleSettings {
            seed: seed + t,
            ..OracleSettings::default()
        };
        let trial = design_ordering_trial(&s, 4, [0.1, 1.0])?;
        hits += (trial.chosen == trial.optimal) as u64;
        println!(
            "design seed {}: eig [{:.4}, {:.4}], density [{:.4}, {:.4}]",
            seed + t,
            trial.eig[0],
            trial.eig[1],
            trial.density[0],
            trial.density[1]
        );
    }
    println!("design ordering: {hits}/{trials} runs favour the higher-gain column");
    Ok(posterior_ok && hits * 10 >= trials * 8)
}

fn run(cli: Cli) -> Result<bool, Error> {
    match cli.command {
        Command::Twin { common, resume } => {
            let run = load_run_config(&common)?;
            let report = run_method(&run, Method::Beacon, resume.as_deref(), &run.out_dir)?;
            println!("final rmse {:.6}", final_rmse(&report));
            Ok(true)
        }
        Command::Baseline { common, resume } => {
            let run = load_run_config(&common)?;
            let report = run_method(&run, Method::Random, resume.as_deref(), &run.out_dir)?;
            println!("final rmse {:.6}", final_rmse(&report));
            Ok(true)
        }
        Command::Compare { common, seeds } => {
            let run = load_run_config(&common)?;
            compare(&run, seeds)?;
            Ok(true)
        }
        Command::Gradcheck { seed } => gradcheck(seed),
        Command::Oracle { seed, trials } => oracle(seed, trials),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
