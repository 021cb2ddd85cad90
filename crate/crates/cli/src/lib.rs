//! Command-line runner: pricing, Monte Carlo validation, correlation
//! expansion, Padé sweeps, vanilla pricing, calibration and reproduction of
//! the published tables.
//!
//! Every command except `repro-table` reads a TOML [`config::RunConfig`].
//! Results are written as CSV with ten significant digits, to `--out` or the
//! config's `output.path`, else to stdout. The config digest and seed are
//! logged to stderr. Exit codes: 0 success, 1 validation error, 2 numerical
//! failure. The worker-thread count is read from `CLOCKBARRIER_THREADS`.

pub mod config;
pub mod output;
pub mod tables;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use clockbarrier::barrier;
use clockbarrier::calibrate::{run_stage_pipeline, CalibrationDataset};
use clockbarrier::leverage::{evaluate_with_fallback, expansion_coefficients, pade_fit, taylor_eval};
use clockbarrier::mc::{price_barrier_mc_correlated, price_barrier_mc_rho0};
use clockbarrier::vanilla::{implied_vol, CosTable, QuoteValue, COS_N_DEFAULT};
use clockbarrier::BarrierContract;

use config::{FirstOrderRoute, RunConfig};
use output::Table;
use tables::Scale;

pub const THREADS_ENV: &str = "CLOCKBARRIER_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }
}

impl From<clockbarrier::Error> for CliError {
    fn from(e: clockbarrier::Error) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Numerical(e.to_string())
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "clockbarrier", version, about = "Barrier options under stochastic-clock volatility")]
pub struct Cli {
    /// Output file; defaults to the config's output.path, else stdout.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed override for Monte Carlo.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Independent-clock prices of the configured barrier contracts.
    Price { config: PathBuf },
    /// Analytic price against the Monte Carlo benchmark.
    McValidate { config: PathBuf },
    /// Correlation-expansion coefficients per contract.
    RhoExpand { config: PathBuf },
    /// Taylor and Padé values over a correlation grid.
    Pade {
        config: PathBuf,
        /// Report approximant poles instead of values.
        #[arg(long)]
        poles: bool,
    },
    /// COS prices and implied vols of the configured vanillas.
    Vanilla { config: PathBuf },
    /// Staged calibration to a vanilla and barrier dataset.
    Calibrate { config: PathBuf },
    /// Reproduce a published table (6.2 to 6.12).
    ReproTable {
        id: String,
        #[arg(long, value_enum, default_value = "desk")]
        scale: Scale,
    },
}

fn configure_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| CliError::Validation(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?;
        // A second call in the same process (tests) keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn label(c: &BarrierContract) -> String {
    let lvl = |v: Option<f64>| v.map_or("-".to_string(), output::sig10);
    format!("{}:{}:{}:{}:{}", c.kind.label(), output::sig10(c.maturity), output::sig10(c.strike), lvl(c.lower), lvl(c.upper))
}

fn price(cfg: &RunConfig) -> Result<Table, CliError> {
    let (m, spec, q) = (cfg.market()?, cfg.clock()?, cfg.quadrature.to_config());
    let mut t = Table::new(&["contract", "kind", "strike", "lower", "upper", "maturity", "price"]);
    for c in cfg.contracts()? {
        let p = barrier::price(c, &m, spec, &q)?;
        t.push(row![label(c), c.kind.label(), c.strike, c.lower, c.upper, c.maturity, p]);
    }
    Ok(t)
}

fn mc_validate(cfg: &RunConfig, seed: u64) -> Result<Table, CliError> {
    let (m, spec, q) = (cfg.market()?, cfg.clock()?, cfg.quadrature.to_config());
    let s = cfg.mc()?;
    let mc = s.to_config(seed);
    let exp = cfg.expansion.unwrap_or_default();
    let mut t = Table::new(&["contract", "rho", "analytic", "mc", "se", "z", "rel_err", "knockout_fraction", "within_3se"]);
    for c in cfg.contracts()? {
        let (a, e) = if s.rho == 0.0 {
            (barrier::price(c, &m, spec, &q)?, price_barrier_mc_rho0(c, &m, spec, &mc)?)
        } else {
            let (co, _) = expansion_coefficients(c, &m, spec, exp.order, None, exp.grid)?;
            let pade = cfg.pade.as_ref().map(|p| p.policy).unwrap_or_default();
            (evaluate_with_fallback(&co.values, s.rho, &pade).0, price_barrier_mc_correlated(c, &m, spec, s.rho, &mc)?)
        };
        let z = if e.standard_error > 0.0 { (e.price - a) / e.standard_error } else { 0.0 };
        let rel = if a != 0.0 { (e.price - a) / a } else { e.price - a };
        t.push(row![label(c), s.rho, a, e.price, e.standard_error, z, rel, e.knockout_fraction, z.abs() <= 3.0]);
    }
    Ok(t)
}

fn coefficients_for(cfg: &RunConfig, c: &BarrierContract, seed: u64) -> Result<clockbarrier::leverage::ExpansionCoefficients, CliError> {
    let (m, spec) = (cfg.market()?, cfg.clock()?);
    let exp = cfg.expansion.unwrap_or_default();
    let mc = match exp.first_order {
        FirstOrderRoute::Pde => None,
        FirstOrderRoute::Duhamel => Some(cfg.mc()?.to_config(seed)),
    };
    Ok(expansion_coefficients(c, &m, spec, exp.order, mc.as_ref(), exp.grid)?.0)
}

fn rho_expand(cfg: &RunConfig, seed: u64) -> Result<Table, CliError> {
    let mut t = Table::new(&["contract", "order", "coefficient", "standard_error", "route"]);
    for c in cfg.contracts()? {
        let e = coefficients_for(cfg, c, seed)?;
        for n in 0..e.values.len() {
            t.push(row![label(c), n, e.values[n], e.standard_errors[n], e.routes[n].label()]);
        }
    }
    Ok(t)
}

fn pade(cfg: &RunConfig, seed: u64, poles: bool) -> Result<Table, CliError> {
    let s = cfg.pade.clone().ok_or_else(|| CliError::Validation("config needs a [pade] table".into()))?;
    let coeffs = if s.coefficients.is_empty() {
        let c = cfg.contracts()?[0];
        coefficients_for(cfg, &c, seed)?.values
    } else {
        s.coefficients.clone()
    };
    if coeffs.len() < 2 {
        return Err(CliError::Validation("Padé needs at least two coefficients".into()));
    }
    let n = coeffs.len() - 1;
    let ladder: Vec<(usize, usize)> = [(1, 1), (2, 1), (2, 2), (3, 2)].into_iter().filter(|(l, m)| l + m <= n).collect();
    let fits: Vec<_> = ladder.iter().map(|(l, m)| pade_fit(&coeffs, *l, *m).ok()).collect();
    if poles {
        let mut t = Table::new(&["approximant", "re", "im", "distance_to_segment"]);
        for ((l, m), f) in ladder.iter().zip(&fits) {
            if let Some(f) = f {
                for p in &f.poles {
                    t.push(row![format!("{l}/{m}"), p.re, p.im, clockbarrier::leverage::distance_to_unit_segment(*p)]);
                }
            }
        }
        return Ok(t);
    }
    let mut t = Table::new(&["rho", "taylor", "pade_1_1", "pade_2_1", "pade_2_2", "pade_3_2", "selected", "route"]);
    for rho in &s.rhos {
        if !(-1.0..=1.0).contains(rho) {
            return Err(CliError::Validation(format!("rho must lie in [-1, 1], got {rho}")));
        }
        let value = |l: usize, m: usize| -> Option<f64> {
            ladder.iter().position(|x| *x == (l, m)).and_then(|i| fits[i].as_ref()).map(|f| f.eval(*rho))
        };
        let (v, r) = evaluate_with_fallback(&coeffs, *rho, &s.policy);
        t.push(row![*rho, taylor_eval(&coeffs, *rho), value(1, 1), value(2, 1), value(2, 2), value(3, 2), v, r.to_string()]);
    }
    Ok(t)
}

fn vanilla(cfg: &RunConfig) -> Result<Table, CliError> {
    let (m, spec) = (cfg.market()?, cfg.clock()?);
    if cfg.vanillas.is_empty() {
        return Err(CliError::Validation("config needs at least one [[vanillas]] entry".into()));
    }
    let mut t = Table::new(&["maturity", "strike", "kind", "price", "implied_vol", "quote_type", "quote", "residual"]);
    for q in &cfg.vanillas {
        q.validate()?;
        let p = CosTable::new(spec, &m, q.maturity, COS_N_DEFAULT)?.price(q.strike, q.kind);
        let iv = implied_vol(p, &m, q.maturity, q.strike, q.kind).ok();
        let kind = format!("{:?}", q.kind).to_lowercase();
        let (qt, qv, res) = match q.value {
            QuoteValue::Price(x) => ("price", x, Some(p - x)),
            QuoteValue::Vol(x) => ("vol", x, iv.map(|v| v - x)),
        };
        t.push(row![q.maturity, q.strike, kind, p, iv, qt, qv, res]);
    }
    Ok(t)
}

fn load_dataset(cfg: &RunConfig, base: &Path) -> Result<(CalibrationDataset, clockbarrier::calibrate::CalibrationConfig), CliError> {
    let s = cfg.calibration.clone().ok_or_else(|| CliError::Validation("config needs a [calibration] table".into()))?;
    let data = match (s.data, s.dataset) {
        (Some(d), None) => d,
        (None, Some(p)) => {
            let path = base.parent().unwrap_or(Path::new(".")).join(p);
            let text = std::fs::read_to_string(&path)
                .map_err(|e| CliError::Validation(format!("cannot read dataset {}: {e}", path.display())))?;
            eprintln!("dataset-digest={}", config::digest(&text));
            toml::from_str(&text).map_err(|e| CliError::Validation(format!("dataset: {}", e.message())))?
        }
        _ => return Err(CliError::Validation("calibration needs exactly one of `dataset` or `data`".into())),
    };
    Ok((data, s.settings))
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<(String, f64)>) {
    match v {
        toml::Value::Float(x) => out.push((prefix.to_string(), *x)),
        toml::Value::Integer(x) => out.push((prefix.to_string(), *x as f64)),
        toml::Value::Table(t) => {
            for (k, x) in t {
                flatten(&if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") }, x, out);
            }
        }
        toml::Value::Array(a) => {
            for (i, x) in a.iter().enumerate() {
                flatten(&format!("{prefix}[{i}]"), x, out);
            }
        }
        _ => {}
    }
}

fn calibrate(cfg: &RunConfig, path: &Path) -> Result<Table, CliError> {
    let (data, settings) = load_dataset(cfg, path)?;
    let res = run_stage_pipeline(&data, &settings)?;
    let mut t = Table::new(&["kind", "name", "value", "market", "weight"]);
    t.push(row!["family", res.spec.family(), Option::<f64>::None, Option::<f64>::None, Option::<f64>::None]);
    let v = toml::Value::try_from(&res.spec).map_err(|e| CliError::Numerical(e.to_string()))?;
    let mut params = Vec::new();
    flatten("", &v, &mut params);
    for (k, x) in params {
        t.push(row!["param", k, x, Option::<f64>::None, Option::<f64>::None]);
    }
    t.push(row!["param", "rho", res.rho, Option::<f64>::None, Option::<f64>::None]);
    t.push(row!["objective", "total", res.objective, Option::<f64>::None, Option::<f64>::None]);
    for s in &res.stages {
        let name = format!("{}:{}:{}", s.stage, if s.accepted { "accepted" } else { "rejected" }, s.note);
        t.push(row!["stage", name, s.objective, Option::<f64>::None, Option::<f64>::None]);
    }
    for f in &res.flags {
        t.push(row!["flag", f.as_str(), Option::<f64>::None, Option::<f64>::None, Option::<f64>::None]);
    }
    for r in &res.residuals {
        t.push(row!["residual", r.instrument.as_str(), r.model, r.market, r.weight]);
    }
    Ok(t)
}

fn write(table: &Table, out: Option<&Path>) -> Result<(), CliError> {
    let csv = table.to_csv();
    match out {
        Some(p) => std::fs::write(p, csv).map_err(|e| CliError::Validation(format!("cannot write {}: {e}", p.display()))),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    let load = |p: &Path| -> Result<RunConfig, CliError> {
        let (cfg, digest) = RunConfig::load(p)?;
        eprintln!("config-digest={digest} seed={}", cli.seed.unwrap_or(cfg.seed));
        Ok(cfg)
    };
    let (table, cfg_out) = match &cli.command {
        Command::ReproTable { id, scale } => {
            let seed = cli.seed.unwrap_or(1);
            let canonical = format!("repro-table {id} {scale:?} {seed}");
            eprintln!("config-digest={} seed={seed}", config::digest(&canonical));
            (tables::repro_table(id, *scale, seed)?, None)
        }
        Command::Price { config } => {
            let c = load(config)?;
            (price(&c)?, c.output.path.clone())
        }
        Command::McValidate { config } => {
            let c = load(config)?;
            (mc_validate(&c, cli.seed.unwrap_or(c.seed))?, c.output.path.clone())
        }
        Command::RhoExpand { config } => {
            let c = load(config)?;
            (rho_expand(&c, cli.seed.unwrap_or(c.seed))?, c.output.path.clone())
        }
        Command::Pade { config, poles } => {
            let c = load(config)?;
            (pade(&c, cli.seed.unwrap_or(c.seed), *poles)?, c.output.path.clone())
        }
        Command::Vanilla { config } => {
            let c = load(config)?;
            (vanilla(&c)?, c.output.path.clone())
        }
        Command::Calibrate { config } => {
            let c = load(config)?;
            (calibrate(&c, config)?, c.output.path.clone())
        }
    };
    let out = cli.out.clone().or(cfg_out.map(PathBuf::from));
    write(&table, out.as_deref())
}

/// Parses `argv` and runs the command; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
