//! Experiment harness: seeded sweeps over horizon/replication grids, record
//! aggregation, and convergence-rate fits, plus the CLI entry point.
//!
//! A sweep cell is one (T, K, trial) combination. Each cell draws a fresh
//! random chain, simulates an ensemble, applies noise, and runs every
//! configured estimator on the same noisy data. All randomness is derived
//! from the master seed and the cell's position in the grid, so results are
//! byte-identical across runs and across worker counts.

use crate::chain::generate_random_chain;
use crate::error::{Error, Result};
use crate::estimators::{
    error_metric, estimate_cls, estimate_limle, estimate_mom, estimate_mom_nonstationary,
    estimate_naive, stationary_error_metric, EstimatedTransition, EstimatorKind,
};
use crate::noise::{
    apply_noise_ensemble, ensemble_totals, estimate_binomial_params, NoiseModel, NoiseSpec,
};
use crate::simulate::{realization_rng, simulate_ensemble, Ensemble};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

/// Full description of a sweep, parsed from a flat `key = value` config.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub s: usize,
    pub d: f64,
    pub n: u64,
    pub t_list: Vec<usize>,
    pub k_list: Vec<usize>,
    pub noise: NoiseSpec,
    pub estimators: Vec<EstimatorKind>,
    pub trials: usize,
    pub master_seed: u64,
    pub estimate_params: bool,
    pub initial_distribution: Option<Vec<f64>>,
}

impl ExperimentConfig {
    /// Parses the flat config format: one `key = value` per line, `#` starts
    /// a comment. Lists are comma-separated.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map: BTreeMap<String, String> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            map.insert(key.trim().to_string(), value.trim().to_string());
        }

        let take = |map: &BTreeMap<String, String>, key: &str| -> Result<String> {
            map.get(key)
                .cloned()
                .ok_or_else(|| Error::Config(format!("missing key: {}", key)))
        };
        let parse_num = |key: &str, value: &str| -> Result<f64> {
            value
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad number for {}: {}", key, value)))
        };
        let parse_list = |key: &str, value: &str| -> Result<Vec<usize>> {
            value
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Config(format!("bad list entry for {}: {}", key, v)))
                })
                .collect()
        };

        let s = parse_num("S", &take(&map, "S")?)? as usize;
        let d = parse_num("D", &take(&map, "D")?)?;
        let n = parse_num("N", &take(&map, "N")?)? as u64;
        let t_list = parse_list("T_list", &take(&map, "T_list")?)?;
        let k_list = parse_list("K_list", &take(&map, "K_list")?)?;
        let trials = parse_num("trials", &take(&map, "trials")?)? as usize;
        let master_seed = take(&map, "master_seed")?
            .parse::<u64>()
            .map_err(|_| Error::Config("bad master_seed".into()))?;

        let estimators = take(&map, "estimators")?
            .split(',')
            .map(EstimatorKind::parse)
            .collect::<Result<Vec<_>>>()?;

        let noise = match map.get("noise.kind").map(String::as_str) {
            None | Some("none") => NoiseSpec::none(),
            Some(kind @ ("binomial" | "poisson")) => NoiseSpec {
                kind: kind.into(),
                params: vec![parse_num("noise.alpha", &take(&map, "noise.alpha")?)?],
            },
            Some("gaussian") => NoiseSpec {
                kind: "gaussian".into(),
                params: vec![parse_num("noise.sigma2", &take(&map, "noise.sigma2")?)?],
            },
            Some("laplace") => NoiseSpec {
                kind: "laplace".into(),
                params: vec![parse_num("noise.b", &take(&map, "noise.b")?)?],
            },
            Some("state_binomial") => {
                let raw = take(&map, "noise.alphas")?;
                let params = raw
                    .split(',')
                    .map(|v| parse_num("noise.alphas", v.trim()))
                    .collect::<Result<Vec<_>>>()?;
                NoiseSpec {
                    kind: "state_binomial".into(),
                    params,
                }
            }
            Some(other) => {
                return Err(Error::Config(format!("unknown noise kind: {}", other)));
            }
        };

        let estimate_params = match map.get("estimate_params").map(String::as_str) {
            None => false,
            Some("true") => true,
            Some("false") => false,
            Some(other) => {
                return Err(Error::Config(format!(
                    "estimate_params must be true or false, got {}",
                    other
                )));
            }
        };

        let initial_distribution = match map.get("initial_distribution") {
            None => None,
            Some(raw) => Some(
                raw.split(',')
                    .map(|v| parse_num("initial_distribution", v.trim()))
                    .collect::<Result<Vec<_>>>()?,
            ),
        };

        let config = ExperimentConfig {
            s,
            d,
            n,
            t_list,
            k_list,
            noise,
            estimators,
            trials,
            master_seed,
            estimate_params,
            initial_distribution,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.s < 2 {
            return Err(Error::Config("S must be at least 2".into()));
        }
        if self.d.is_nan() || self.d <= 0.0 {
            return Err(Error::Config("D must be positive".into()));
        }
        if self.n == 0 {
            return Err(Error::Config("N must be positive".into()));
        }
        if self.t_list.is_empty() || self.k_list.is_empty() {
            return Err(Error::Config("T_list and K_list must be non-empty".into()));
        }
        if self.t_list.contains(&0) || self.k_list.contains(&0) {
            return Err(Error::Config("T and K values must be positive".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("estimators must be non-empty".into()));
        }
        if self.trials == 0 {
            return Err(Error::Config("trials must be positive".into()));
        }
        self.noise.build(self.s)?;
        if self.estimate_params && self.noise.kind != "binomial" {
            return Err(Error::Config(
                "estimate_params requires binomial noise".into(),
            ));
        }
        if let Some(init) = &self.initial_distribution {
            if init.len() != self.s {
                return Err(Error::Config(format!(
                    "initial_distribution has {} entries for S = {}",
                    init.len(),
                    self.s
                )));
            }
            let sum: f64 = init.iter().sum();
            if init.iter().any(|&x| x.is_nan() || x < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Config(
                    "initial_distribution must be non-negative and sum to 1".into(),
                ));
            }
        }
        Ok(())
    }
}

/// One estimator result on one sweep cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRecord {
    pub s: usize,
    pub d: f64,
    pub n: u64,
    pub t_len: usize,
    pub k: usize,
    pub noise_kind: String,
    pub noise_param: String,
    pub estimator: String,
    pub trial: usize,
    pub seed: u64,
    pub mse_raw: Option<f64>,
    pub mse_projected: Option<f64>,
    pub stat_err: Option<f64>,
    pub wall_ms: u64,
    pub status: String,
    pub n_hat: Option<f64>,
    pub alpha_hat: Option<f64>,
}

pub const RECORDS_HEADER: &str = "S,D,N,T,K,noise_kind,noise_param,estimator,trial,seed,mse_raw,mse_projected,stat_err,wall_ms,status,n_hat,alpha_hat";

fn opt_field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_opt(text: &str) -> Result<Option<f64>> {
    if text.is_empty() {
        Ok(None)
    } else {
        text.parse::<f64>()
            .map(Some)
            .map_err(|_| Error::Config(format!("bad numeric field: {}", text)))
    }
}

impl ExperimentRecord {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.s,
            self.d,
            self.n,
            self.t_len,
            self.k,
            self.noise_kind,
            self.noise_param,
            self.estimator,
            self.trial,
            self.seed,
            opt_field(self.mse_raw),
            opt_field(self.mse_projected),
            opt_field(self.stat_err),
            self.wall_ms,
            self.status,
            opt_field(self.n_hat),
            opt_field(self.alpha_hat),
        )
    }

    pub fn from_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 17 {
            return Err(Error::Config(format!(
                "record has {} fields, expected 17",
                f.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse::<f64>()
                .map_err(|_| Error::Config(format!("bad numeric field: {}", f[i])))
        };
        Ok(ExperimentRecord {
            s: num(0)? as usize,
            d: num(1)?,
            n: num(2)? as u64,
            t_len: num(3)? as usize,
            k: num(4)? as usize,
            noise_kind: f[5].to_string(),
            noise_param: f[6].to_string(),
            estimator: f[7].to_string(),
            trial: num(8)? as usize,
            seed: f[9]
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("bad seed field: {}", f[9])))?,
            mse_raw: parse_opt(f[10])?,
            mse_projected: parse_opt(f[11])?,
            stat_err: parse_opt(f[12])?,
            wall_ms: num(13)? as u64,
            status: f[14].to_string(),
            n_hat: parse_opt(f[15])?,
            alpha_hat: parse_opt(f[16])?,
        })
    }
}

pub fn write_records(path: &Path, records: &[ExperimentRecord]) -> Result<()> {
    let mut out = String::with_capacity(records.len() * 80 + 128);
    out.push_str(RECORDS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.to_csv_row());
        out.push('\n');
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<ExperimentRecord>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(header) if header == RECORDS_HEADER => {}
        _ => return Err(Error::Config("unrecognized records header".into())),
    }
    lines
        .filter(|l| !l.is_empty())
        .map(ExperimentRecord::from_csv_row)
        .collect()
}

const SEED_CHAIN: u64 = 1;
const SEED_SIM: u64 = 2;
const SEED_NOISE: u64 = 3;
const SEED_LIMLE: u64 = 4;

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Stable seed derivation: depends only on the master seed and the logical
/// position of the consumer, never on scheduling.
pub fn derive_seed(master: u64, a: u64, b: u64) -> u64 {
    mix64(master ^ mix64(a ^ mix64(b)))
}

fn error_slug(e: &Error) -> &'static str {
    match e {
        Error::SingularMarginal(_) => "singular_marginal",
        Error::SingularMatrix => "singular_matrix",
        Error::NonErgodic => "non_ergodic",
        Error::InsufficientData(_) => "insufficient_data",
        Error::DegenerateTotals { .. } => "degenerate_totals",
        Error::OptimizationFailed(_) => "optimization_failed",
        Error::DimensionMismatch(_) => "dimension_mismatch",
        _ => "error",
    }
}

struct CellOutcome {
    records: Vec<ExperimentRecord>,
}

fn run_estimator(
    kind: EstimatorKind,
    noisy: &Ensemble,
    model: &NoiseModel,
    n: f64,
    limle_seed: u64,
) -> Result<EstimatedTransition> {
    match kind {
        EstimatorKind::Mom => estimate_mom(noisy, model, n),
        EstimatorKind::Cls => estimate_cls(noisy),
        EstimatorKind::Limle => estimate_limle(noisy, model, limle_seed),
        EstimatorKind::Naive => estimate_naive(noisy, model),
        EstimatorKind::MomNonstationary => estimate_mom_nonstationary(noisy, model, n),
    }
}

fn run_cell(
    config: &ExperimentConfig,
    t_len: usize,
    k: usize,
    trial: usize,
    cell_index: u64,
    timing: bool,
) -> Result<CellOutcome> {
    let cell_seed = derive_seed(config.master_seed, cell_index, 0);
    let chain = generate_random_chain(
        config.s,
        config.d,
        &mut realization_rng(derive_seed(config.master_seed, cell_index, SEED_CHAIN), 0),
    )?;
    let init = config.initial_distribution.as_deref();
    let ens = simulate_ensemble(
        &chain,
        config.n,
        t_len,
        k,
        init,
        derive_seed(config.master_seed, cell_index, SEED_SIM),
    )?;
    let model = config.noise.build(config.s)?;
    let noisy = apply_noise_ensemble(
        &model,
        &ens,
        &mut realization_rng(derive_seed(config.master_seed, cell_index, SEED_NOISE), 0),
    )?;
    drop(ens);

    // optionally replace the known population/detection parameters with
    // moment-matched estimates from the observed totals
    let mut n_use = config.n as f64;
    let mut model_use = model;
    let mut n_hat = None;
    let mut alpha_hat = None;
    let mut param_failure: Option<String> = None;
    if config.estimate_params {
        match estimate_binomial_params(&ensemble_totals(&noisy)) {
            Ok(params) => {
                n_use = params.n;
                n_hat = Some(params.n);
                alpha_hat = Some(params.alpha);
                model_use = NoiseSpec {
                    kind: "binomial".into(),
                    params: vec![params.alpha],
                }
                .build(config.s)?;
            }
            Err(e) => {
                param_failure = Some(format!("failed:{}", error_slug(&e)));
            }
        }
    }

    let limle_seed = derive_seed(config.master_seed, cell_index, SEED_LIMLE);
    let mut records = Vec::with_capacity(config.estimators.len());
    for &kind in &config.estimators {
        let mut record = ExperimentRecord {
            s: config.s,
            d: config.d,
            n: config.n,
            t_len,
            k,
            noise_kind: config.noise.kind.clone(),
            noise_param: config.noise.param_field(),
            estimator: kind.as_str().to_string(),
            trial,
            seed: cell_seed,
            mse_raw: None,
            mse_projected: None,
            stat_err: None,
            wall_ms: 0,
            status: "ok".into(),
            n_hat,
            alpha_hat,
        };
        // least squares never touches the noise model or N, so a parameter
        // estimation failure does not invalidate it
        let param_blocked = param_failure.is_some() && kind != EstimatorKind::Cls;
        if param_blocked {
            record.status = param_failure.clone().unwrap();
        } else {
            let start = Instant::now();
            match run_estimator(kind, &noisy, &model_use, n_use, limle_seed) {
                Ok(est) => {
                    record.mse_raw = Some(error_metric(&est.p_raw, &chain)?);
                    record.mse_projected = Some(error_metric(est.p_projected.matrix(), &chain)?);
                    record.stat_err = stationary_error_metric(&est.p_projected, &chain)?;
                }
                Err(e) => {
                    record.status = format!("failed:{}", error_slug(&e));
                }
            }
            if timing {
                record.wall_ms = start.elapsed().as_millis() as u64;
            }
        }
        records.push(record);
    }
    Ok(CellOutcome { records })
}

/// Runs the full sweep. Cells execute in parallel on up to `jobs` workers
/// (thread-pool default when `None`); output order and content are
/// independent of the worker count. `timing` fills the `wall_ms` column with
/// measured times at the cost of byte-identical reruns.
pub fn run_sweep(
    config: &ExperimentConfig,
    jobs: Option<usize>,
    timing: bool,
) -> Result<Vec<ExperimentRecord>> {
    config.validate()?;
    let mut cells = Vec::new();
    let mut index = 0u64;
    for &t_len in &config.t_list {
        for &k in &config.k_list {
            for trial in 0..config.trials {
                cells.push((t_len, k, trial, index));
                index += 1;
            }
        }
    }

    let work = || -> Result<Vec<CellOutcome>> {
        cells
            .par_iter()
            .map(|&(t_len, k, trial, idx)| run_cell(config, t_len, k, trial, idx, timing))
            .collect()
    };
    let outcomes = match jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {}", e)))?
            .install(work),
        None => work(),
    }?;
    Ok(outcomes.into_iter().flat_map(|o| o.records).collect())
}

/// Aggregated statistics for one (T*K, estimator) group.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub tk: u64,
    pub estimator: String,
    pub count: usize,
    pub failed: usize,
    pub mean_mse_raw: Option<f64>,
    pub ci95_mse_raw: Option<f64>,
    pub mean_mse_projected: Option<f64>,
    pub ci95_mse_projected: Option<f64>,
    pub mean_stat_err: Option<f64>,
    pub ci95_stat_err: Option<f64>,
}

pub const AGGREGATE_HEADER: &str = "tk,estimator,count,failed,mean_mse_raw,ci95_mse_raw,mean_mse_projected,ci95_mse_projected,mean_stat_err,ci95_stat_err";

fn mean_ci(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (Some(mean), None);
    }
    let var = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (Some(mean), Some(1.96 * (var / n).sqrt()))
}

/// Groups records by the product `T*K` and estimator, pooling different
/// (T, K) splits with the same product. Failed records are counted but do
/// not contribute to means; 95% intervals are normal-approximation and
/// missing for singleton groups.
pub fn aggregate_by_tk(records: &[ExperimentRecord]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(u64, String), Vec<&ExperimentRecord>> = BTreeMap::new();
    for r in records {
        let tk = (r.t_len as u64) * (r.k as u64);
        groups.entry((tk, r.estimator.clone())).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((tk, estimator), rs)| {
            let ok: Vec<&&ExperimentRecord> = rs.iter().filter(|r| r.status == "ok").collect();
            let failed = rs.len() - ok.len();
            let raw: Vec<f64> = ok.iter().filter_map(|r| r.mse_raw).collect();
            let proj: Vec<f64> = ok.iter().filter_map(|r| r.mse_projected).collect();
            let stat: Vec<f64> = ok.iter().filter_map(|r| r.stat_err).collect();
            let (mean_mse_raw, ci95_mse_raw) = mean_ci(&raw);
            let (mean_mse_projected, ci95_mse_projected) = mean_ci(&proj);
            let (mean_stat_err, ci95_stat_err) = mean_ci(&stat);
            AggregateRow {
                tk,
                estimator,
                count: ok.len(),
                failed,
                mean_mse_raw,
                ci95_mse_raw,
                mean_mse_projected,
                ci95_mse_projected,
                mean_stat_err,
                ci95_stat_err,
            }
        })
        .collect()
}

pub fn aggregate_to_csv(rows: &[AggregateRow]) -> String {
    let mut out = String::from(AGGREGATE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.tk,
            r.estimator,
            r.count,
            r.failed,
            opt_field(r.mean_mse_raw),
            opt_field(r.ci95_mse_raw),
            opt_field(r.mean_mse_projected),
            opt_field(r.ci95_mse_projected),
            opt_field(r.mean_stat_err),
            opt_field(r.ci95_stat_err),
        ));
    }
    out
}

/// Least-squares fit of `log(mean mse_raw)` against `log(T*K)` for one
/// estimator. Returns `(slope, r_squared)`. Needs at least three distinct
/// `T*K` values with positive means.
pub fn fit_loglog_slope(rows: &[AggregateRow], estimator: &str) -> Result<(f64, f64)> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.estimator == estimator)
        .filter_map(|r| match r.mean_mse_raw {
            Some(m) if m > 0.0 => Some(((r.tk as f64).ln(), m.ln())),
            _ => None,
        })
        .collect();
    let mut xs: Vec<u64> = rows
        .iter()
        .filter(|r| r.estimator == estimator && r.mean_mse_raw.unwrap_or(0.0) > 0.0)
        .map(|r| r.tk)
        .collect();
    xs.sort_unstable();
    xs.dedup();
    if xs.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "slope fit needs at least 3 distinct T*K points, got {}",
            xs.len()
        )));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = pts
        .iter()
        .map(|p| {
            let e = p.1 - (intercept + slope * p.0);
            e * e
        })
        .sum();
    let ss_tot: f64 = pts.iter().map(|p| (p.1 - my) * (p.1 - my)).sum();
    let r2 = if ss_tot == 0.0 {
        1.0
    } else {
        1.0 - ss_res / ss_tot
    };
    Ok((slope, r2))
}

// ---------------------------------------------------------------------------
// CLI

#[derive(Parser)]
#[command(
    name = "aggmom",
    about = "Estimate Markov chain transition matrices from noisy aggregate counts",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct JobsArg {
    /// Worker threads for sweep cells (defaults to all cores)
    #[arg(long, env = "AGGMOM_JOBS")]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a sweep described by a config file and write a records CSV
    Run {
        /// Path to the experiment config
        #[arg(long)]
        config: PathBuf,
        /// Output records CSV path
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        jobs: JobsArg,
        /// Override the master seed from the config
        #[arg(long)]
        seed: Option<u64>,
        /// Measure per-estimator wall time (sacrifices byte-identical reruns)
        #[arg(long)]
        timing: bool,
    },
    /// Aggregate a records CSV by T*K and estimator
    Aggregate {
        /// Records CSV produced by `run`
        #[arg(long = "in")]
        input: PathBuf,
        /// Output CSV path (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit log-log convergence slopes from a records CSV
    Slope {
        /// Records CSV produced by `run`
        #[arg(long = "in")]
        input: PathBuf,
        /// Only fit this estimator (all present by default)
        #[arg(long)]
        estimator: Option<String>,
    },
    /// Simulate one ensemble from a random chain and dump it as CSVs
    Simulate {
        #[arg(long = "S")]
        s: usize,
        #[arg(long = "D")]
        d: f64,
        #[arg(long = "N")]
        n: u64,
        #[arg(long = "T")]
        t: usize,
        #[arg(long = "K", default_value_t = 1)]
        k: usize,
        /// Master seed for chain generation and simulation
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Observation noise to apply, e.g. binomial:0.5
        #[arg(long, default_value = "none")]
        noise: String,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one estimator on a dumped ensemble and print the estimate
    Estimate {
        /// Directory written by `simulate`
        #[arg(long = "in")]
        input: PathBuf,
        /// Estimator: mom, cls, limle, naive, mom_nonstationary
        #[arg(long)]
        method: String,
        /// Observation noise the data carries (defaults to the manifest)
        #[arg(long)]
        noise: Option<String>,
        /// Population size (defaults to the manifest)
        #[arg(long = "N")]
        n: Option<f64>,
        /// Estimate N and the detection rate from observed totals instead
        #[arg(long)]
        estimate_params: bool,
        /// Seed for estimators with internal randomness
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the projected estimate to this CSV file
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn cmd_run(
    config_path: &Path,
    out: &Path,
    jobs: Option<usize>,
    seed: Option<u64>,
    timing: bool,
) -> Result<()> {
    let text = fs::read_to_string(config_path)?;
    let mut config = ExperimentConfig::parse(&text)?;
    if let Some(seed) = seed {
        config.master_seed = seed;
    }
    let start = Instant::now();
    let records = run_sweep(&config, jobs, timing)?;
    write_records(out, &records)?;
    let failed = records.iter().filter(|r| r.status != "ok").count();
    eprintln!(
        "wrote {} records ({} failed) to {} in {:.1}s",
        records.len(),
        failed,
        out.display(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn cmd_aggregate(input: &Path, out: Option<&Path>) -> Result<()> {
    let records = read_records(input)?;
    let rows = aggregate_by_tk(&records);
    let csv = aggregate_to_csv(&rows);
    match out {
        Some(path) => fs::write(path, csv)?,
        None => print!("{}", csv),
    }
    Ok(())
}

fn cmd_slope(input: &Path, only: Option<&str>) -> Result<()> {
    let records = read_records(input)?;
    let rows = aggregate_by_tk(&records);
    let mut estimators: Vec<String> = match only {
        Some(e) => vec![e.to_string()],
        None => {
            let mut es: Vec<String> = rows.iter().map(|r| r.estimator.clone()).collect();
            es.sort();
            es.dedup();
            es
        }
    };
    estimators.sort();
    println!("estimator,slope,r2");
    for e in estimators {
        let (slope, r2) = fit_loglog_slope(&rows, &e)?;
        println!("{},{},{}", e, slope, r2);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    s: usize,
    d: f64,
    n: u64,
    t: usize,
    k: usize,
    seed: u64,
    noise: &str,
    out: &Path,
) -> Result<()> {
    let spec = NoiseSpec::parse(noise)?;
    let model = spec.build(s)?;
    let chain = generate_random_chain(
        s,
        d,
        &mut realization_rng(derive_seed(seed, 0, SEED_CHAIN), 0),
    )?;
    let ens = simulate_ensemble(&chain, n, t, k, None, derive_seed(seed, 0, SEED_SIM))?;
    let noisy = apply_noise_ensemble(
        &model,
        &ens,
        &mut realization_rng(derive_seed(seed, 0, SEED_NOISE), 0),
    )?;
    let manifest = crate::simulate::EnsembleManifest {
        k,
        s,
        t_len: t,
        n,
        seed,
        noise: spec.to_spec_string(),
        integral: noisy.series()[0].is_integral(),
    };
    crate::simulate::write_ensemble(out, &noisy, &manifest)?;
    // keep the generating chain next to the data for later comparison
    let mut chain_csv = String::new();
    for i in 0..s {
        let row: Vec<String> = chain.row(i).iter().map(|v| v.to_string()).collect();
        chain_csv.push_str(&row.join(","));
        chain_csv.push('\n');
    }
    fs::write(out.join("chain.csv"), chain_csv)?;
    eprintln!(
        "wrote {} realizations of {} steps to {}",
        k,
        t,
        out.display()
    );
    Ok(())
}

fn cmd_estimate(
    input: &Path,
    method: &str,
    noise: Option<&str>,
    n_arg: Option<f64>,
    estimate_params: bool,
    seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    let kind = EstimatorKind::parse(method)?;
    let (ens, manifest) = crate::simulate::read_ensemble(input)?;
    let spec = match noise {
        Some(text) => NoiseSpec::parse(text)?,
        None => NoiseSpec::parse(&manifest.noise)?,
    };
    let mut model = spec.build(ens.s())?;
    let mut n = n_arg.unwrap_or(manifest.n as f64);
    if estimate_params {
        let params = estimate_binomial_params(&ensemble_totals(&ens))?;
        eprintln!(
            "estimated population {:.3}, detection rate {:.4}",
            params.n, params.alpha
        );
        n = params.n;
        model = NoiseSpec {
            kind: "binomial".into(),
            params: vec![params.alpha],
        }
        .build(ens.s())?;
    }
    let est = run_estimator(kind, &ens, &model, n, seed)?;
    if let Some(w) = &est.warning {
        eprintln!("warning: {}", w);
    }
    let s = ens.s();
    let mut text = String::new();
    for i in 0..s {
        let row: Vec<String> = est
            .p_projected
            .row(i)
            .iter()
            .map(|v| v.to_string())
            .collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    print!("{}", text);
    if let Some(path) = out {
        let mut f = fs::File::create(path)?;
        f.write_all(text.as_bytes())?;
    }
    Ok(())
}

/// CLI entry point; returns the process exit code.
pub fn cli_main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run {
            config,
            out,
            jobs,
            seed,
            timing,
        } => cmd_run(config, out, jobs.jobs, *seed, *timing),
        Command::Aggregate { input, out } => cmd_aggregate(input, out.as_deref()),
        Command::Slope { input, estimator } => cmd_slope(input, estimator.as_deref()),
        Command::Simulate {
            s,
            d,
            n,
            t,
            k,
            seed,
            noise,
            out,
        } => cmd_simulate(*s, *d, *n, *t, *k, *seed, noise, out),
        Command::Estimate {
            input,
            method,
            noise,
            n,
            estimate_params,
            seed,
            out,
        } => cmd_estimate(
            input,
            method,
            noise.as_deref(),
            *n,
            *estimate_params,
            *seed,
            out.as_deref(),
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::FAILURE
        }
    }
}
