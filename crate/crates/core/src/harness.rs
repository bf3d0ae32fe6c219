//! Monte Carlo study over a grid of designs: replications, coverage, rmse and
//! bias per estimator, with deterministic seeding and CSV/JSON output.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::debiased::{estimate_all_methods, CrossfitConfig, Method};
use crate::dgp::{oracle_theta, sample, DgpConfig, H0Kind};
use crate::error::{Error, Result};

/// Share of failed replications above which a cell is flagged.
pub const MAX_FAILURE_SHARE: f64 = 0.05;
pub const CSV_HEADER: [&str; 8] = ["h0", "n", "rho", "method", "cov", "rmse", "bias", "reps"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub h0: Vec<H0Kind>,
    pub n: Vec<usize>,
    pub rho: Vec<f64>,
}

/// Scale parameters of the simulation design shared by every cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DesignParams {
    pub sigma_t: f64,
    pub sigma_u: f64,
    pub zeta_sd: f64,
    pub nu_sd: f64,
    pub eps: f64,
}

impl Default for DesignParams {
    fn default() -> Self {
        Self {
            sigma_t: 2.0,
            sigma_u: 2.0,
            zeta_sd: 0.1,
            nu_sd: 0.1,
            eps: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub grid: Grid,
    pub reps: usize,
    pub alpha: f64,
    pub design: DesignParams,
    /// Fields left out keep the harness defaults (simple split).
    #[serde(deserialize_with = "estimator_over_defaults")]
    pub estimator: CrossfitConfig,
    pub oracle_mc_n: usize,
    pub base_seed: u64,
    pub output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            grid: Grid {
                h0: vec![H0Kind::Abs, H0Kind::Sigmoid, H0Kind::Sin],
                n: vec![2000],
                rho: vec![0.5, 0.7],
            },
            reps: 100,
            alpha: 0.05,
            design: DesignParams::default(),
            estimator: harness_estimator(),
            oracle_mc_n: 2_000_000,
            base_seed: 0,
            output: None,
        }
    }
}

fn harness_estimator() -> CrossfitConfig {
    CrossfitConfig::default().simple_split()
}

fn estimator_over_defaults<'de, D: serde::Deserializer<'de>>(de: D) -> std::result::Result<CrossfitConfig, D::Error> {
    use serde::de::Error as _;
    let given = serde_json::Value::deserialize(de)?;
    let mut merged = serde_json::to_value(harness_estimator()).map_err(D::Error::custom)?;
    match (merged.as_object_mut(), given) {
        (Some(base), serde_json::Value::Object(fields)) => base.extend(fields),
        (_, other) => return Err(D::Error::custom(format!("estimator must be a table, got {other}"))),
    }
    serde_json::from_value(merged).map_err(D::Error::custom)
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(Error::InvalidConfig("reps must be at least 1".into()));
        }
        if self.grid.h0.is_empty() || self.grid.n.is_empty() || self.grid.rho.is_empty() {
            return Err(Error::InvalidConfig("grid must be nonempty in every dimension".into()));
        }
        if self.oracle_mc_n == 0 {
            return Err(Error::InvalidConfig("oracle_mc_n must be positive".into()));
        }
        for cell in self.cells() {
            self.dgp(&cell, 0).validate()?;
            self.estimator_for(0).validate(cell.n)?;
        }
        Ok(())
    }

    /// Grid cells ordered by `(h0, n, rho)`.
    pub fn cells(&self) -> Vec<Cell> {
        let mut h0 = self.grid.h0.clone();
        h0.sort();
        h0.dedup();
        let mut n = self.grid.n.clone();
        n.sort_unstable();
        n.dedup();
        let mut rho = self.grid.rho.clone();
        rho.sort_by(f64::total_cmp);
        rho.dedup();
        let mut out = Vec::new();
        for &h in &h0 {
            for &nn in &n {
                for &r in &rho {
                    out.push(Cell { h0: h, n: nn, rho: r });
                }
            }
        }
        out
    }

    pub fn dgp(&self, cell: &Cell, seed: u64) -> DgpConfig {
        DgpConfig {
            rho: cell.rho,
            sigma_t: self.design.sigma_t,
            sigma_u: self.design.sigma_u,
            zeta_sd: self.design.zeta_sd,
            nu_sd: self.design.nu_sd,
            h0_kind: cell.h0,
            eps: self.design.eps,
            n: cell.n,
            seed,
        }
    }

    fn estimator_for(&self, seed: u64) -> CrossfitConfig {
        CrossfitConfig {
            seed,
            alpha: self.alpha,
            ..self.estimator.clone()
        }
    }

    /// Data seed of one replication.
    pub fn replication_seed(&self, cell: &Cell, rep: usize) -> u64 {
        self.base_seed
            .wrapping_add(cell.hash())
            .wrapping_add(rep as u64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub h0: H0Kind,
    pub n: usize,
    pub rho: f64,
}

impl Cell {
    /// FNV-1a over the cell label; stable across platforms and releases.
    pub fn hash(&self) -> u64 {
        let label = format!("{}|{}|{}", self.h0, self.n, self.rho);
        label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRecord {
    pub theta_hat: f64,
    pub covered: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub rep: usize,
    pub seed: u64,
    /// Per-method results, or the error message of a failed replication.
    pub outcome: std::result::Result<BTreeMap<Method, MethodRecord>, String>,
}

/// Sample, fit and score one replication.
pub fn run_replication(cfg: &ExperimentConfig, cell: &Cell, rep: usize, theta_star: f64) -> ReplicationRecord {
    let seed = cfg.replication_seed(cell, rep);
    let outcome = (|| -> Result<BTreeMap<Method, MethodRecord>> {
        let problem = sample(&cfg.dgp(cell, seed))?;
        // Fold assignment gets its own stream.
        let est = estimate_all_methods(&problem, &cfg.estimator_for(seed ^ 0x9e37_79b9_7f4a_7c15))?;
        Ok(est
            .into_iter()
            .map(|(m, e)| {
                let rec = MethodRecord {
                    theta_hat: e.theta,
                    covered: e.covers(theta_star),
                };
                (m, rec)
            })
            .collect())
    })()
    .map_err(|e| e.to_string());
    ReplicationRecord { rep, seed, outcome }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    /// Percent of intervals covering `θ*`.
    pub cov: Option<f64>,
    pub rmse: f64,
    pub bias: f64,
    pub reps: usize,
}

/// Coverage, rmse and absolute bias of one method over its successful records.
pub fn aggregate(records: &[MethodRecord], theta_star: f64) -> Result<Aggregate> {
    if records.is_empty() {
        return Err(Error::InvalidData("no successful replications to aggregate".into()));
    }
    let r = records.len() as f64;
    let mse = records.iter().map(|x| (x.theta_hat - theta_star).powi(2)).sum::<f64>() / r;
    let mean = records.iter().map(|x| x.theta_hat).sum::<f64>() / r;
    let flags: Vec<bool> = records.iter().filter_map(|x| x.covered).collect();
    let cov = (flags.len() == records.len())
        .then(|| 100.0 * flags.iter().filter(|&&c| c).count() as f64 / r);
    Ok(Aggregate {
        cov,
        rmse: mse.sqrt(),
        bias: (mean - theta_star).abs(),
        reps: records.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub h0: H0Kind,
    pub n: usize,
    pub rho: f64,
    pub method: Method,
    pub cov: Option<f64>,
    pub rmse: f64,
    pub bias: f64,
    pub reps: usize,
    pub theta_star_used: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub cell: Cell,
    pub theta_star: f64,
    pub theta_star_mc_se: f64,
    pub first_seed: u64,
    pub failed_reps: usize,
    pub flagged: bool,
    pub errors: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub library_version: String,
    pub config: ExperimentConfig,
    pub h0_forms: BTreeMap<String, String>,
    pub cells: Vec<CellReport>,
}

#[derive(Clone, Debug)]
pub struct GridResult {
    pub rows: Vec<MetricsRow>,
    pub manifest: Manifest,
}

/// Runs one cell: oracle target, all replications (in parallel), metrics.
pub fn run_cell(cfg: &ExperimentConfig, cell: &Cell) -> Result<(Vec<MetricsRow>, CellReport)> {
    let oracle = oracle_theta(&cfg.dgp(cell, 0), cfg.oracle_mc_n, cfg.base_seed ^ cell.hash())?;
    let theta_star = oracle.value;
    let records: Vec<ReplicationRecord> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| run_replication(cfg, cell, rep, theta_star))
        .collect();
    let mut errors: Vec<String> = Vec::new();
    let mut per_method: BTreeMap<Method, Vec<MethodRecord>> = BTreeMap::new();
    for rec in &records {
        match &rec.outcome {
            Ok(map) => {
                for (m, r) in map {
                    per_method.entry(*m).or_default().push(*r);
                }
            }
            Err(msg) => errors.push(format!("rep {} (seed {}): {msg}", rec.rep, rec.seed)),
        }
    }
    let failed = errors.len();
    let mut rows = Vec::new();
    for (method, recs) in &per_method {
        let agg = aggregate(recs, theta_star)?;
        rows.push(MetricsRow {
            h0: cell.h0,
            n: cell.n,
            rho: cell.rho,
            method: *method,
            cov: agg.cov,
            rmse: agg.rmse,
            bias: agg.bias,
            reps: agg.reps,
            theta_star_used: theta_star,
        });
    }
    let report = CellReport {
        cell: *cell,
        theta_star,
        theta_star_mc_se: oracle.mc_se,
        first_seed: cfg.replication_seed(cell, 0),
        failed_reps: failed,
        flagged: failed as f64 > MAX_FAILURE_SHARE * cfg.reps as f64,
        errors,
    };
    Ok((rows, report))
}

pub fn run_grid(cfg: &ExperimentConfig) -> Result<GridResult> {
    cfg.validate()?;
    let mut rows = Vec::new();
    let mut cells = Vec::new();
    for cell in cfg.cells() {
        let (r, report) = run_cell(cfg, &cell)?;
        rows.extend(r);
        cells.push(report);
    }
    let h0_forms = cfg
        .cells()
        .iter()
        .map(|c| (c.h0.name().to_string(), c.h0.formula().to_string()))
        .collect();
    Ok(GridResult {
        rows,
        manifest: Manifest {
            library_version: env!("CARGO_PKG_VERSION").to_string(),
            config: cfg.clone(),
            h0_forms,
            cells,
        },
    })
}

fn fmt_num(v: f64) -> String {
    format!("{v:.6}")
}

pub fn write_csv<W: Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.h0.name().to_string(),
            r.n.to_string(),
            r.rho.to_string(),
            r.method.to_string(),
            r.cov.map_or_else(|| "NA".to_string(), |c| format!("{c:.1}")),
            fmt_num(r.rmse),
            fmt_num(r.bias),
            r.reps.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Manifest path next to a CSV output: `results.csv` → `results.json`.
pub fn manifest_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

pub fn write_outputs(result: &GridResult, csv_path: &Path) -> Result<()> {
    if let Some(dir) = csv_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_csv(&result.rows, std::fs::File::create(csv_path)?)?;
    let manifest = serde_json::to_string_pretty(&result.manifest)?;
    std::fs::write(manifest_path(csv_path), manifest + "\n")?;
    Ok(())
}
