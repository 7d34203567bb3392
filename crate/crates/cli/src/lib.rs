//! Command-line front end: ingestion, model fitting, prediction, diagnostics,
//! and synthetic experiments, with plot-ready CSV outputs and a run manifest.
//!
//! Every invocation writes its outputs plus `run-manifest.txt` (config echo,
//! seed, versions, wall time per stage) into `--out`. Exit codes: 0 success,
//! 1 computation error, 2 usage error. Input files are never modified.

pub mod config;
pub mod io;

use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};

use rsl_core::data::{load_csv, write_csv, ColumnMap, Dataset, ObsKind};
use rsl_core::gp::{
    fit_et_gp, fit_nigp, rate_transform, FittedGp, GpModelSpec, MeanFn, PosteriorField,
};
use rsl_core::igp::{fit_eiv_igp, IgpSpec};
use rsl_core::kernels::{parse_kernel, Point};
use rsl_core::reductions::{
    eof_decompose, eof_regress, virtual_station_gmsl, GaugeSeries, Region,
};
use rsl_core::spacetime::{decompose, fit_est_gp, predict_field, rate_field, StGpSpec};
use rsl_core::statespace::{kalman_smooth, multi_model_smooth, StateSpaceModel, StepObs};
use rsl_core::trend::{
    fit_changepoint, fit_linear, select_changepoints, ChangePointPriors, FitMethod, McmcSettings,
};
use rsl_core::validation::{generate, residual_diagnostics, SyntheticTruth};

use config::{parse_grid, parse_latlon, Config};
use io::{chain_draws_csv, chain_summary_csv, field_csv, read_gauge_matrix, RunOutput, Z95};

/// A run failure, split by which exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    /// Bad invocation or configuration: exit 2.
    Usage(String),
    /// The computation itself failed: exit 1.
    Computation(String),
}

impl From<rsl_core::Error> for CliError {
    fn from(e: rsl_core::Error) -> Self {
        CliError::Computation(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "rsl",
    version,
    about = "Statistical models for relative sea-level reconstruction",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Input data file (observation CSV or gauge matrix, per subcommand)
    #[arg(long)]
    input: Option<PathBuf>,
    /// Key-value config file (`key = value` lines, `#` comments)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Prediction time grid, start:end:step
    #[arg(long)]
    grid: Option<String>,
    /// RNG seed; required for stochastic subcommands
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if absent)
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Worker-thread cap; results never depend on it
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand, Clone)]
enum Command {
    /// Validate an observation CSV and write it back in canonical form
    Ingest(CommonArgs),
    /// Least-squares linear trend fit
    FitLinear(CommonArgs),
    /// Bayesian errors-in-variables change-point regression
    FitChangepoint(CommonArgs),
    /// Empirical-Bayes temporal GP fit with level and rate curves
    FitGp(CommonArgs),
    /// Noisy-input GP fit (age uncertainty as inflated observation noise)
    FitNigp(CommonArgs),
    /// Fully Bayesian errors-in-variables integrated GP
    FitIgp(CommonArgs),
    /// Multi-scale spatio-temporal GP fit
    FitStgp(CommonArgs),
    /// Spatio-temporal fit with per-component posterior fields
    Decompose(CommonArgs),
    /// Kalman smoothing of a gauge matrix under a common-level model bank
    Kalman(CommonArgs),
    /// EOF decomposition and regression of a gauge matrix
    Eof(CommonArgs),
    /// Virtual-station regional averaging of a gauge matrix
    VirtualStation(CommonArgs),
    /// Generate a synthetic dataset from a truth spec
    Synth(CommonArgs),
    /// Residual and autocorrelation diagnostics of a fit
    Diagnose(CommonArgs),
    /// Leave-site-out cross-validation under the spatio-temporal model
    CrossValidate(CommonArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest(_) => "ingest",
            Command::FitLinear(_) => "fit-linear",
            Command::FitChangepoint(_) => "fit-changepoint",
            Command::FitGp(_) => "fit-gp",
            Command::FitNigp(_) => "fit-nigp",
            Command::FitIgp(_) => "fit-igp",
            Command::FitStgp(_) => "fit-stgp",
            Command::Decompose(_) => "decompose",
            Command::Kalman(_) => "kalman",
            Command::Eof(_) => "eof",
            Command::VirtualStation(_) => "virtual-station",
            Command::Synth(_) => "synth",
            Command::Diagnose(_) => "diagnose",
            Command::CrossValidate(_) => "cross-validate",
        }
    }

    fn args(&self) -> &CommonArgs {
        match self {
            Command::Ingest(a)
            | Command::FitLinear(a)
            | Command::FitChangepoint(a)
            | Command::FitGp(a)
            | Command::FitNigp(a)
            | Command::FitIgp(a)
            | Command::FitStgp(a)
            | Command::Decompose(a)
            | Command::Kalman(a)
            | Command::Eof(a)
            | Command::VirtualStation(a)
            | Command::Synth(a)
            | Command::Diagnose(a)
            | Command::CrossValidate(a) => a,
        }
    }

    fn is_stochastic(&self) -> bool {
        matches!(
            self,
            Command::FitChangepoint(_)
                | Command::FitGp(_)
                | Command::FitNigp(_)
                | Command::FitIgp(_)
                | Command::FitStgp(_)
                | Command::Decompose(_)
                | Command::Synth(_)
                | Command::CrossValidate(_)
        )
    }
}

/// Entry point shared by the binary and tests: parse `argv`, run the
/// subcommand, and return the process exit code.
pub fn run(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are successful exits
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            2
        }
        Err(CliError::Computation(msg)) => {
            eprintln!("error: {msg}");
            1
        }
    }
}

fn execute(cmd: &Command) -> Result<(), CliError> {
    let args = cmd.args();
    if args.threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    if cmd.is_stochastic() && args.seed.is_none() {
        return Err(CliError::Usage(format!(
            "{} is stochastic; --seed is required for reproducibility",
            cmd.name()
        )));
    }
    let cfg = match &args.config {
        Some(path) => Config::from_file(path)?,
        None => Config::default(),
    };
    let mut out = RunOutput::new(&args.out)?;

    match cmd {
        Command::Ingest(a) => cmd_ingest(a, &cfg, &mut out)?,
        Command::FitLinear(a) => cmd_fit_linear(a, &cfg, &mut out)?,
        Command::FitChangepoint(a) => cmd_fit_changepoint(a, &cfg, &mut out)?,
        Command::FitGp(a) => cmd_fit_gp(a, &cfg, &mut out, false)?,
        Command::FitNigp(a) => cmd_fit_gp(a, &cfg, &mut out, true)?,
        Command::FitIgp(a) => cmd_fit_igp(a, &cfg, &mut out)?,
        Command::FitStgp(a) => cmd_fit_stgp(a, &cfg, &mut out, false)?,
        Command::Decompose(a) => cmd_fit_stgp(a, &cfg, &mut out, true)?,
        Command::Kalman(a) => cmd_kalman(a, &cfg, &mut out)?,
        Command::Eof(a) => cmd_eof(a, &cfg, &mut out)?,
        Command::VirtualStation(a) => cmd_virtual_station(a, &cfg, &mut out)?,
        Command::Synth(a) => cmd_synth(a, &cfg, &mut out)?,
        Command::Diagnose(a) => cmd_diagnose(a, &cfg, &mut out)?,
        Command::CrossValidate(a) => cmd_cross_validate(a, &cfg, &mut out)?,
    }

    let mut header = vec![("subcommand".to_string(), cmd.name().to_string())];
    if let Some(input) = &args.input {
        header.push(("input".into(), input.display().to_string()));
    }
    if let Some(grid) = &args.grid {
        header.push(("grid".into(), grid.clone()));
    }
    if let Some(seed) = args.seed {
        header.push(("seed".into(), seed.to_string()));
    }
    header.push(("threads".into(), args.threads.to_string()));
    for (k, v) in cfg.entries() {
        header.push((format!("config.{k}"), v.clone()));
    }
    out.finish_manifest(&header)
}

// ---------------------------------------------------------------------------
// shared helpers
// ---------------------------------------------------------------------------

fn require_input(args: &CommonArgs) -> Result<&PathBuf, CliError> {
    args.input.as_ref().ok_or_else(|| CliError::Usage("--input is required".into()))
}

fn require_grid(args: &CommonArgs) -> Result<Vec<f64>, CliError> {
    let spec =
        args.grid.as_ref().ok_or_else(|| CliError::Usage("--grid is required".into()))?;
    parse_grid(spec)
}

fn grid_step(grid: &[f64]) -> f64 {
    if grid.len() > 1 {
        grid[1] - grid[0]
    } else {
        1.0
    }
}

fn load_dataset(args: &CommonArgs, cfg: &Config) -> Result<Dataset, CliError> {
    let path = require_input(args)?;
    let mut cols = ColumnMap::default();
    for (suffix, value) in cfg.with_prefix("col.") {
        match suffix.as_str() {
            "site_id" => cols.site_id = value,
            "lat" => cols.lat = value,
            "lon" => cols.lon = value,
            "age" => cols.age = value,
            "age_2sd" => cols.age_2sd = value,
            "rsl" => cols.rsl = value,
            "rsl_2sd" => cols.rsl_2sd = value,
            "kind" => cols.kind = value,
            "core_id" => cols.core_id = value,
            other => {
                return Err(CliError::Usage(format!("unknown column mapping 'col.{other}'")))
            }
        }
    }
    Ok(load_csv(path, &cols)?)
}

fn mcmc_settings(cfg: &Config, seed: u64) -> Result<McmcSettings, CliError> {
    let defaults = McmcSettings::default();
    Ok(McmcSettings {
        n_draws: cfg.usize_or("draws", defaults.n_draws)?,
        n_burn: cfg.usize_or("burn", defaults.n_burn)?,
        n_chains: cfg.usize_or("chains", defaults.n_chains)?,
        seed,
    })
}

fn gp_spec(cfg: &Config) -> Result<GpModelSpec, CliError> {
    let mean = match cfg.str_or("mean", "constant") {
        "zero" => MeanFn::Zero,
        "constant" => MeanFn::Constant,
        "linear" => MeanFn::Linear,
        other => return Err(CliError::Usage(format!("unknown mean function '{other}'"))),
    };
    match cfg.get("kernel") {
        // a fixed kernel: nothing left to optimize
        Some(expr) => {
            let kernel = parse_kernel(expr)?;
            Ok(GpModelSpec::new(mean, vec![], move |_| kernel.clone()))
        }
        None => {
            let mut spec = GpModelSpec::default_et();
            spec.mean = mean;
            Ok(spec)
        }
    }
}

/// Level field plus its rate transform (when the grid supports one).
fn write_level_and_rate(
    out: &mut RunOutput,
    level: &PosteriorField,
    window: f64,
) -> Result<(), CliError> {
    out.write("level.csv", &field_csv(level))?;
    if level.grid.len() >= 3 {
        let rate = rate_transform(level, window)?;
        out.write("rate.csv", &field_csv(&rate))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// subcommands
// ---------------------------------------------------------------------------

fn cmd_ingest(args: &CommonArgs, cfg: &Config, out: &mut RunOutput) -> Result<(), CliError> {
    out.stage("ingest");
    let d = load_dataset(args, cfg)?;
    out.stage("write");
    out.write("dataset.csv", &write_csv(&d))?;
    println!("ingested {} observations from {} sites", d.len(), d.site_ids().len());
    Ok(())
}

fn cmd_fit_linear(args: &CommonArgs, cfg: &Config, out: &mut RunOutput) -> Result<(), CliError> {
    out.stage("ingest");
    let d = load_dataset(args, cfg)?;
    let method = match cfg.str_or("method", "wls") {
        "ols" => FitMethod::Ols,
        "wls" => FitMethod::Wls,
        "gls" => FitMethod::Gls,
        other => return Err(CliError::Usage(format!("unknown fit method '{other}'"))),
    };
    out.stage("fit");
    let fit = fit_linear(&d, method, None)?;
    out.stage("write");
    let mut csv = String::from("parameter,estimate,se\n");
    let _ = writeln!(csv, "slope,{},{}", fit.slope, fit.slope_se);
    let _ = writeln!(csv, "intercept,{},{}", fit.intercept, fit.intercept_se);
    let _ = writeln!(csv, "rmse,{},", fit.rmse);
    out.write("linear.csv", &csv)
}

fn cmd_fit_changepoint(
    args: &CommonArgs,
    cfg: &Config,
    out: &mut RunOutput,
) -> Result<(), CliError> {
    out.stage("ingest");
    let d = load_dataset(args, cfg)?;
    let mcmc = mcmc_settings(cfg, args.seed.unwrap())?;
    let mut priors = ChangePointPriors::defaults(&d);
    priors.cp_lower = cfg.f64_or("cp_lower", priors.cp_lower)?;
    priors.cp_upper = cfg.f64_or("cp_upper", priors.cp_upper)?;
    priors.rate_sd = cfg.f64_or("rate_sd", priors.rate_sd)?;
    priors.level_sd = cfg.f64_or("level_sd", priors.level_sd)?;
    priors.sigma_extra_scale = cfg.f64_or("sigma_extra_scale", priors.sigma_extra_scale)?;

    out.stage("fit");
    let n_cp = match cfg.get("max_cp") {
        Some(_) => {
            let max_cp = cfg.usize_or("max_cp", 1)?;
            let selection = select_changepoints(&d, max_cp, &priors, &mcmc)?;
            let mut csv = String::from("n_cp,dic\n");
            for (n, dic) in &selection.dic_table {
                let _ = writeln!(csv, "{n},{dic}");
            }
            out.write("dic.csv", &csv)?;
            selection.best_n_cp
        }
        None => cfg.usize_or("n_cp", 1)?,
    };
    let fit = fit_changepoint(&d, n_cp, &priors, &mcmc)?;
    out.stage("write");
    out.write("summary.csv", &chain_summary_csv(&fit.chain))?;
    out.write("chain.csv", &chain_draws_csv(&fit.chain))?;
    if fit.empty_segment_warning {
        println!("warning: most draws leave at least one segment without data");
    }
    println!("fit {} change points, DIC {:.2}", n_cp, fit.dic);
    Ok(())
}

fn cmd_fit_gp(
    args: &CommonArgs,
    cfg: &Config,
    out: &mut RunOutput,
    noisy_input: bool,
) -> Result<(), CliError> {
    out.stage("ingest");
    let d = load_dataset(args, cfg)?;
    let grid = require_grid(args)?;
    let spec = gp_spec(cfg)?;
    let restarts = cfg.usize_or("restarts", 2)?;
    let seed = args.seed.unwrap();

    out.stage("fit");
    let fit: FittedGp = if noisy_input {
        let max_iters = cfg.usize_or("max_iters", 10)?;
        fit_nigp(&d, &spec, restarts, seed, max_iters)?
    } else {
        fit_et_gp(&d, &spec, restarts, seed)?
    };
    out.stage("predict");
    let level = fit.predict(&grid)?;
    out.stage("write");
    write_level_and_rate(out, &level, 2.0 * grid_step(&grid))?;
    let mut csv = String::from("parameter,estimate\n");
    for (p, v) in spec.bounds.iter().zip(&fit.theta) {
        let _ = writeln!(csv, "{},{v}", p.name);
    }
    let _ = writeln!(csv, "log_marginal_likelihood,{}", fit.lml);
    let _ = writeln!(csv, "nigp_iterations,{}", fit.iterations);
    out.write("hyperparameters.csv", &csv)
}

fn cmd_fit_igp(args: &CommonArgs, cfg: &Config, out: &mut RunOutput) -> Result<(), CliError> {
    out.stage("ingest");
    let d = load_dataset(args, cfg)?;
    let grid = require_grid(args)?;
    let mcmc = mcmc_settings(cfg, args.seed.unwrap())?;
    let mut spec = IgpSpec::default();
    spec.kappa = cfg.f64_or("kappa", spec.kappa)?;
    spec.nu_scale = cfg.f64_or("nu_scale", spec.nu_scale)?;
    spec.rho_lower = cfg.f64_or("rho_lower", spec.rho_lower)?;
    spec.rho_upper = cfg.f64_or("rho_upper", spec.rho_upper)?;
    spec.sigma_extra_scale = cfg.f64_or("sigma_extra_scale", spec.sigma_extra_scale)?;
    if let Some(t0) = cfg.get("t0") {
        spec.t0 =
            Some(t0.parse().map_err(|_| CliError::Usage("t0 must be a number".into()))?);
    }

    out.stage("fit");
    let fit = fit_eiv_igp(&d, &spec, &mcmc, &grid)?;
    out.stage("write");
    out.write("level.csv", &field_csv(&fit.level))?;
    out.write("rate.csv", &field_csv(&fit.rate))?;
    out.write("summary.csv", &chain_summary_csv(&fit.chain))?;
    out.write("chain.csv", &chain_draws_csv(&fit.chain))
}

fn cmd_fit_stgp(
    args: &CommonArgs,
    cfg: &Config,
    out: &mut RunOutput,
    with_components: bool,
) -> Result<(), CliError> {
    out.stage("ingest");
    let d = load_dataset(args, cfg)?;
    let times = require_grid(args)?;
    let restarts = cfg.usize_or("restarts", 1)?;
    let spec = StGpSpec::default();

    // predict at the dataset's sites, or on a lat/lon lattice when a box is
    // configured as box = lat0:lat1:lon0:lon1 with box_res points per axis
    let locations: Vec<(f64, f64)> = match cfg.get("box") {
        Some(boxspec) => {
            let parts: Vec<&str> = boxspec.split(':').collect();
            if parts.len() != 4 {
                return Err(CliError::Usage(
                    "box must have the form lat0:lat1:lon0:lon1".into(),
                ));
            }
            let v: Vec<f64> = parts
                .iter()
                .map(|p| {
                    p.trim().parse().map_err(|_| {
                        CliError::Usage(format!("box: non-numeric part '{p}'"))
                    })
                })
                .collect::<Result<_, _>>()?;
            let res = cfg.usize_or("box_res", 5)?.max(2);
            let mut locs = Vec::with_capacity(res * res);
            for i in 0..res {
                for j in 0..res {
                    let lat = v[0] + (v[1] - v[0]) * i as f64 / (res - 1) as f64;
                    let lon = v[2] + (v[3] - v[2]) * j as f64 / (res - 1) as f64;
                    locs.push((lat, lon));
                }
            }
            locs
        }
        None => d
            .split_by_site()
            .values()
            .map(|site| {
                let o = &site.observations[0];
                (o.latitude, o.longitude)
            })
            .collect(),
    };
    let grid: Vec<Point> = locations
        .iter()
        .flat_map(|&(lat, lon)| times.iter().map(move |&t| Point::spatial(t, lat, lon)))
        .collect();

    out.stage("fit");
    let fit = fit_est_gp(&d, &spec, restarts, args.seed.unwrap())?;
    out.stage("predict");
    let field = predict_field(&fit, &grid)?;
    out.stage("write");
    out.write("field.csv", &field_csv(&field))?;
    if times.len() >= 3 {
        let rate = rate_field(&field, 2.0 * grid_step(&times))?;
        out.write("rate.csv", &field_csv(&rate))?;
    }
    let mut csv = String::from("parameter,estimate\n");
    for (p, v) in spec.bounds.iter().zip(&fit.theta) {
        let _ = writeln!(csv, "{},{v}", p.name);
    }
    let _ = writeln!(csv, "log_marginal_likelihood,{}", fit.lml);
    out.write("hyperparameters.csv", &csv)?;

    if with_components {
        out.stage("decompose");
        for (name, component) in decompose(&fit, &grid)? {
            out.write(&format!("component_{name}.csv"), &field_csv(&component))?;
        }
    }
    Ok(())
}

fn cmd_kalman(args: &CommonArgs, cfg: &Config, out: &mut RunOutput) -> Result<(), CliError> {
    out.stage("ingest");
    let g = read_gauge_matrix(require_input(args)?)?;
    let n_sites = g.names.len();
    let obs: Vec<StepObs> =
        (0..g.times.len()).map(|t| g.series.iter().map(|s| s[t]).collect()).collect();

    // common-level random walk observed at every site; `q` may list several
    // candidate process variances to weight as a model bank
    let qs = cfg
        .f64_list("q")?
        .ok_or_else(|| CliError::Usage("config key 'q' (process variance) is required".into()))?;
    let r = cfg.f64_or("r", f64::NAN)?;
    if !r.is_finite() {
        return Err(CliError::Usage("config key 'r' (observation variance) is required".into()));
    }
    let p0 = cfg.f64_or("p0", 1e6)?;
    let build = |q: f64| StateSpaceModel {
        phi: DMatrix::identity(1, 1),
        b: DMatrix::zeros(1, 1),
        controls: Vec::new(),
        q: DMatrix::from_element(1, 1, q),
        h: DMatrix::from_element(n_sites, 1, 1.0),
        r: DMatrix::identity(n_sites, n_sites) * r,
        x0: DVector::zeros(1),
        p0: DMatrix::from_element(1, 1, p0),
    };

    out.stage("smooth");
    let smoothed = if qs.len() == 1 {
        kalman_smooth(&build(qs[0]), &obs)?
    } else {
        let models: Vec<StateSpaceModel> = qs.iter().map(|&q| build(q)).collect();
        multi_model_smooth(&models, &obs)?
    };

    out.stage("write");
    let mut csv = String::from("time,mean,sd,lower95,upper95\n");
    for (t, (x, p)) in smoothed.means.iter().zip(&smoothed.covs).enumerate() {
        let sd = p[(0, 0)].max(0.0).sqrt();
        let _ = writeln!(
            csv,
            "{},{},{sd},{},{}",
            g.times[t],
            x[0],
            x[0] - Z95 * sd,
            x[0] + Z95 * sd
        );
    }
    out.write("smoothed.csv", &csv)?;
    if qs.len() > 1 {
        let mut csv = String::from("q,weight\n");
        for (q, w) in qs.iter().zip(&smoothed.weights) {
            let _ = writeln!(csv, "{q},{w}");
        }
        out.write("weights.csv", &csv)?;
    }
    println!("log likelihood {:.4}", smoothed.loglik);
    Ok(())
}

fn cmd_eof(args: &CommonArgs, cfg: &Config, out: &mut RunOutput) -> Result<(), CliError> {
    out.stage("ingest");
    let g = read_gauge_matrix(require_input(args)?)?;
    let k = cfg.usize_or("k", 0)?;
    if k == 0 {
        return Err(CliError::Usage("config key 'k' (number of EOFs) is required".into()));
    }
    let (n_loc, n_time) = (g.names.len(), g.times.len());

    // the basis needs a complete field; regression then tolerates gaps
    let mut field = DMatrix::zeros(n_loc, n_time);
    for (i, series) in g.series.iter().enumerate() {
        for (t, v) in series.iter().enumerate() {
            field[(i, t)] = v.ok_or_else(|| {
                CliError::Computation(format!(
                    "EOF decomposition needs a complete field; gauge {} is missing step {t}",
                    g.names[i]
                ))
            })?;
        }
    }

    out.stage("decompose");
    let basis = eof_decompose(&field, &g.locations, k)?;
    out.stage("regress");
    let obs: Vec<Vec<Option<f64>>> =
        (0..n_time).map(|t| g.series.iter().map(|s| s[t]).collect()).collect();
    let regression = eof_regress(&basis, &obs, None)?;

    out.stage("write");
    let mut csv = String::from("site,lat,lon");
    for j in 1..=k {
        let _ = write!(csv, ",eof{j}");
    }
    csv.push('\n');
    for i in 0..n_loc {
        let _ = write!(csv, "{},{},{}", g.names[i], g.locations[i].0, g.locations[i].1);
        for j in 0..k {
            let _ = write!(csv, ",{}", basis.patterns[(i, j)]);
        }
        csv.push('\n');
    }
    out.write("patterns.csv", &csv)?;

    let mut csv = String::from("eof,variance_fraction\n");
    for (j, f) in basis.variance_fractions.iter().enumerate() {
        let _ = writeln!(csv, "{},{f}", j + 1);
    }
    out.write("fractions.csv", &csv)?;

    let mut csv = String::from("time,g");
    for j in 1..=k {
        let _ = write!(csv, ",alpha{j}");
    }
    csv.push('\n');
    for t in 0..n_time {
        let _ = write!(csv, "{},{}", g.times[t], regression.g[t]);
        for j in 0..k {
            let _ = write!(csv, ",{}", regression.alphas[(j, t)]);
        }
        csv.push('\n');
    }
    out.write("amplitudes.csv", &csv)?;

    let mut csv = String::from("site,time,value\n");
    for i in 0..n_loc {
        for t in 0..n_time {
            let _ = writeln!(csv, "{},{},{}", g.names[i], g.times[t], regression.field[(i, t)]);
        }
    }
    out.write("reconstruction.csv", &csv)
}

fn cmd_virtual_station(
    args: &CommonArgs,
    cfg: &Config,
    out: &mut RunOutput,
) -> Result<(), CliError> {
    out.stage("ingest");
    let g = read_gauge_matrix(require_input(args)?)?;
    let gauges: Vec<GaugeSeries> = (0..g.names.len())
        .map(|i| GaugeSeries {
            site_id: g.names[i].clone(),
            location: g.locations[i],
            values: g.series[i].clone(),
        })
        .collect();

    // regions come from the config: region.<name> = siteA,siteB and
    // weight.<name> = w
    let mut regions = Vec::new();
    for (name, sites) in cfg.with_prefix("region.") {
        let weight = cfg.f64_or(&format!("weight.{name}"), f64::NAN)?;
        if !weight.is_finite() {
            return Err(CliError::Usage(format!("region '{name}' needs a weight.{name} key")));
        }
        regions.push(Region {
            name,
            sites: sites.split(',').map(|s| s.trim().to_string()).collect(),
            weight,
        });
    }
    if regions.is_empty() {
        return Err(CliError::Usage(
            "at least one region.<name> = site,... config entry is required".into(),
        ));
    }

    out.stage("average");
    let result = virtual_station_gmsl(&gauges, &regions)?;
    out.stage("write");
    let mut csv = String::from("time,gmsl\n");
    for (t, v) in g.times.iter().zip(&result.gmsl) {
        let _ = writeln!(csv, "{t},{v}");
    }
    out.write("gmsl.csv", &csv)?;

    let mut csv = String::from("region,lat,lon,time,value\n");
    for (name, series, (lat, lon)) in &result.regional {
        for (t, v) in g.times.iter().zip(series) {
            let _ = writeln!(csv, "{name},{lat},{lon},{t},{v}");
        }
    }
    out.write("regional.csv", &csv)
}

fn cmd_synth(args: &CommonArgs, cfg: &Config, out: &mut RunOutput) -> Result<(), CliError> {
    let rates = cfg
        .f64_list("rates")?
        .ok_or_else(|| CliError::Usage("config key 'rates' is required".into()))?;
    let change_points = cfg.f64_list("change_points")?.unwrap_or_default();
    let kernel = match cfg.get("kernel") {
        Some(expr) => Some(parse_kernel(expr)?),
        None => None,
    };
    let sites: Vec<(f64, f64)> = cfg
        .str_or("sites", "0:0")
        .split(';')
        .map(parse_latlon)
        .collect::<Result<_, _>>()?;
    let spec = SyntheticTruth {
        intercept: cfg.f64_or("intercept", 0.0)?,
        rates,
        change_points,
        kernel,
        sites,
        t_range: (cfg.f64_or("t_start", 0.0)?, cfg.f64_or("t_end", 1000.0)?),
        seed: args.seed.unwrap(),
    };
    let n = cfg.usize_or("n", 100)?;
    let rsl_sd = cfg.f64_or("rsl_sd", 0.05)?;
    let age_sd = cfg.f64_or("age_sd", 0.0)?;
    let kind = match cfg.str_or("kind", "core") {
        "core" => ObsKind::CoreSample,
        "slip" => ObsKind::Slip,
        "gauge" => ObsKind::TideGauge,
        other => return Err(CliError::Usage(format!("unknown observation kind '{other}'"))),
    };

    out.stage("generate");
    let (d, truth) = generate(&spec, n, rsl_sd, age_sd, kind)?;
    out.stage("write");
    out.write("dataset.csv", &write_csv(&d))?;
    let mut csv = String::from("true_age,true_rsl,trend,gp\n");
    for i in 0..n {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            truth.true_ages[i], truth.true_rsl[i], truth.trend_part[i], truth.gp_part[i]
        );
    }
    out.write("truth.csv", &csv)
}

fn cmd_diagnose(args: &CommonArgs, cfg: &Config, out: &mut RunOutput) -> Result<(), CliError> {
    out.stage("ingest");
    let d = load_dataset(args, cfg)?;
    let model = cfg.str_or("model", "linear");

    out.stage("fit");
    let (predicted, predictive_sd): (Vec<f64>, Option<Vec<f64>>) = match model {
        "linear" => {
            let fit = fit_linear(&d, FitMethod::Wls, None)?;
            (
                d.observations.iter().map(|o| fit.intercept + fit.slope * o.age_mean).collect(),
                None,
            )
        }
        "gp" => {
            let seed = args.seed.ok_or_else(|| {
                CliError::Usage("diagnose with model=gp is stochastic; --seed is required".into())
            })?;
            let spec = gp_spec(cfg)?;
            let restarts = cfg.usize_or("restarts", 2)?;
            let fit = fit_et_gp(&d, &spec, restarts, seed)?;
            // predict on the sorted unique ages, then map back per datum
            let mut ages: Vec<f64> = d.ages();
            ages.sort_by(|a, b| a.partial_cmp(b).unwrap());
            ages.dedup();
            let field = fit.predict(&ages)?;
            let sd = field.sd();
            let idx = |t: f64| ages.iter().position(|&a| a == t).unwrap();
            let mean: Vec<f64> =
                d.observations.iter().map(|o| field.mean[idx(o.age_mean)]).collect();
            let sds: Vec<f64> = d.observations.iter().map(|o| sd[idx(o.age_mean)]).collect();
            (mean, Some(sds))
        }
        other => return Err(CliError::Usage(format!("unknown diagnose model '{other}'"))),
    };

    out.stage("diagnose");
    let diag = residual_diagnostics(&predicted, &d)?;
    out.stage("write");
    let mut csv = String::from("time,predicted,observed,residual\n");
    for (o, &p) in d.observations.iter().zip(&predicted) {
        let _ = writeln!(csv, "{},{p},{},{}", o.age_mean, o.rsl_mean, o.rsl_mean - p);
    }
    out.write("residuals.csv", &csv)?;

    let mut csv = String::from("lag,acf,band\n");
    for &(lag, r) in &diag.acf {
        let _ = writeln!(csv, "{lag},{r},{}", diag.band);
    }
    out.write("acf.csv", &csv)?;

    let n = d.len() as f64;
    let rmse = (diag.residuals.iter().map(|r| r * r).sum::<f64>() / n).sqrt();
    let mut report = String::new();
    let _ = writeln!(report, "model = {model}");
    let _ = writeln!(report, "n = {}", d.len());
    let _ = writeln!(report, "rmse = {rmse}");
    let _ = writeln!(report, "acf band = {}", diag.band);
    let _ = writeln!(report, "independence flag = {}", diag.independence_flag);
    if let Some(sds) = predictive_sd {
        let covered = d
            .observations
            .iter()
            .zip(&predicted)
            .zip(&sds)
            .filter(|((o, &p), &s)| {
                (o.rsl_mean - p).abs() <= Z95 * (s * s + o.rsl_sd * o.rsl_sd).sqrt()
            })
            .count();
        let _ = writeln!(report, "coverage 95% = {}", covered as f64 / n);
    }
    out.write("summary.txt", &report)
}

fn cmd_cross_validate(
    args: &CommonArgs,
    cfg: &Config,
    out: &mut RunOutput,
) -> Result<(), CliError> {
    out.stage("ingest");
    let d = load_dataset(args, cfg)?;
    let restarts = cfg.usize_or("restarts", 1)?;
    let spec = StGpSpec::default();
    let sites: Vec<String> = match cfg.get("site") {
        Some(s) => vec![s.to_string()],
        None => d.site_ids(),
    };

    out.stage("score");
    let mut csv = String::from("site,n,coverage95,rmse\n");
    for site in &sites {
        let score =
            rsl_core::validation::leave_site_out(&d, site, &spec, restarts, args.seed.unwrap())?;
        let _ = writeln!(csv, "{site},{},{},{}", score.n, score.coverage, score.rmse);
    }
    out.stage("write");
    out.write("scores.csv", &csv)
}
