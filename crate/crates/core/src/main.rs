use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use minimax_debias::debiased::{crossfit_estimate, estimate_all_methods, CrossfitConfig, Method, SplitMode};
use minimax_debias::dgp::oracle_slope_checks;
use minimax_debias::harness::{manifest_path, run_grid, write_outputs, ExperimentConfig};
use minimax_debias::oracle::{identity_suite, DiscreteProblem};
use minimax_debias::partially_linear::{pl_crossfit, PLDataset, PlColumnRoles};
use minimax_debias::problem::{ColumnRoles, Dataset, FunctionalSpec, MomentProblem};
use minimax_debias::{Error, Result};
use serde::de::DeserializeOwned;

#[derive(Parser)]
#[command(name = "minimax-debias", version, about = "Minimax nuisance estimation and debiased inference")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "MINIMAX_DEBIAS_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Simple,
    Crossfit,
}

impl From<Split> for SplitMode {
    fn from(s: Split) -> Self {
        match s {
            Split::Simple => SplitMode::SimpleSplit,
            Split::Crossfit => SplitMode::Crossfit,
        }
    }
}

#[derive(clap::Args)]
struct EstimatorFlags {
    /// Base seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    split: Option<Split>,
    /// Constrain `h` with the clever-instrument moment.
    #[arg(long)]
    clever: bool,
}

impl EstimatorFlags {
    fn apply(&self, cfg: &mut CrossfitConfig) {
        if let Some(split) = self.split {
            cfg.split_mode = split.into();
            if cfg.split_mode == SplitMode::SimpleSplit {
                cfg.k_folds = 2;
            }
        }
        if self.clever {
            cfg.clever_instrument = true;
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a Monte Carlo grid from a TOML experiment file.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// CSV output; the JSON manifest is written alongside.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        flags: EstimatorFlags,
    },
    /// Estimate the functional on one CSV dataset and print the estimate as JSON.
    Estimate {
        #[arg(long)]
        data: PathBuf,
        /// Column-role sidecar (JSON or TOML).
        #[arg(long)]
        roles: PathBuf,
        /// Estimator settings (TOML, same fields as `[estimator]` in experiments).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "dr")]
        method: String,
        /// Treat the roles file as a partially linear mapping (`a`, `b`, `z`, `y`).
        #[arg(long)]
        partially_linear: bool,
        #[command(flatten)]
        flags: EstimatorFlags,
    },
    /// Check the exact identities on discrete problems and the closed-form
    /// nuisances of the simulation design.
    OracleCheck {
        /// Extra discrete problems (JSON).
        #[arg(long = "problem")]
        problems: Vec<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sample size for the simulation-design checks.
        #[arg(long, default_value_t = 1_000_000)]
        slope_n: usize,
    },
}

fn read_structured<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    if path.extension().is_some_and(|e| e == "toml") {
        Ok(toml::from_str(&text)?)
    } else {
        Ok(serde_json::from_str(&text)?)
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, format!("{text}\n"))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn simulate(config: &Path, out: Option<&Path>, flags: &EstimatorFlags) -> Result<()> {
    let mut cfg = ExperimentConfig::from_toml_file(config)?;
    if let Some(seed) = flags.seed {
        cfg.base_seed = seed;
    }
    flags.apply(&mut cfg.estimator);
    let out = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from("results.csv"));
    let result = run_grid(&cfg)?;
    write_outputs(&result, &out)?;
    for cell in result.manifest.cells.iter().filter(|c| c.flagged) {
        eprintln!(
            "warning: cell {}/{}/{} failed {} of {} replications",
            cell.cell.h0, cell.cell.n, cell.cell.rho, cell.failed_reps, cfg.reps
        );
    }
    eprintln!("wrote {} and {}", out.display(), manifest_path(&out).display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn estimate(
    data: &Path,
    roles: &Path,
    config: Option<&Path>,
    out: Option<&Path>,
    method: &str,
    partially_linear: bool,
    flags: &EstimatorFlags,
) -> Result<()> {
    let mut cfg: CrossfitConfig = match config {
        Some(p) => toml::from_str(&std::fs::read_to_string(p)?)?,
        None => CrossfitConfig::default(),
    };
    if let Some(seed) = flags.seed {
        cfg.seed = seed;
    }
    flags.apply(&mut cfg);

    if partially_linear {
        let roles: PlColumnRoles = read_structured(roles)?;
        let d = PLDataset::from_csv(data, &roles)?;
        let est = pl_crossfit(&d, &cfg)?;
        let json = serde_json::json!({
            "method": "dr",
            "theta": est.theta.as_slice(),
            "se": est.se.as_slice(),
            "ci": est.ci,
            "alpha": est.alpha,
            "n": est.n,
            "k_folds": cfg.effective_folds(),
            "seed": cfg.seed,
        });
        return emit(&serde_json::to_string_pretty(&json)?, out);
    }

    let roles: ColumnRoles = read_structured(roles)?;
    let functional = roles
        .functional
        .clone()
        .unwrap_or_else(|| FunctionalSpec::average_finite_difference(0.1));
    let problem = MomentProblem::new(Dataset::from_csv(data, &roles)?, functional)?;
    let method: Method = method.parse()?;
    let est = if method == Method::Dr {
        crossfit_estimate(&problem, &cfg)?
    } else {
        estimate_all_methods(&problem, &cfg)?
            .remove(&method)
            .ok_or_else(|| Error::InvalidConfig(format!("method {method} not produced")))?
    };
    emit(&serde_json::to_string_pretty(&est)?, out)
}

fn oracle_check(problems: &[PathBuf], seed: u64, slope_n: usize) -> Result<bool> {
    let mut suites: Vec<(String, DiscreteProblem)> = DiscreteProblem::canonical()
        .into_iter()
        .map(|(name, dp)| (name.to_string(), dp))
        .collect();
    for path in problems {
        suites.push((path.display().to_string(), DiscreteProblem::from_json_file(path)?));
    }
    let mut ok = true;
    for (name, dp) in &suites {
        for check in identity_suite(dp, seed)? {
            ok &= check.passed();
            println!(
                "{} {name}/{} max_error={:.3e} tolerance={:.0e}",
                if check.passed() { "PASS" } else { "FAIL" },
                check.name,
                check.max_error,
                check.tolerance
            );
        }
    }
    for check in oracle_slope_checks(slope_n, seed)? {
        ok &= check.passed();
        println!(
            "{} design/{} slope={:.3e} tolerance={:.0e}",
            if check.passed() { "PASS" } else { "FAIL" },
            check.name,
            check.max_error,
            check.tolerance
        );
    }
    Ok(ok)
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Simulate { config, out, flags } => simulate(&config, out.as_deref(), &flags)?,
        Command::Estimate {
            data,
            roles,
            config,
            out,
            method,
            partially_linear,
            flags,
        } => estimate(
            &data,
            &roles,
            config.as_deref(),
            out.as_deref(),
            &method,
            partially_linear,
            &flags,
        )?,
        Command::OracleCheck {
            problems,
            seed,
            slope_n,
        } => {
            if !oracle_check(&problems, seed, slope_n)? {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
