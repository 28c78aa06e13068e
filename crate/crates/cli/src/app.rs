//! Subcommands and their exit codes.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Child, Command};
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use macgic::distributed::{run_threads, run_worker, RunOptions, RunReport, UnixTransport};
use macgic::engine::{spectrum_padded, Trajectory};
use macgic::oracle::direct_path_sum;
use macgic::{Engine, Error, SpectralDensity};

use crate::config::{Backend, ConfigError, ConfigFile, MaskConfig, ETA_CACHE_ENV};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "macgic", version, about = "Path-integral propagation of open quantum systems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Process,
    Thread,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    DkMax,
    DkEff,
    NVib,
    Theta,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Propagate and write trajectory.csv and telemetry.csv.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long, value_enum)]
        backend: Option<BackendArg>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the engine against the brute-force path sum at every step.
    Oracle {
        #[arg(long)]
        config: PathBuf,
    },
    /// Spectrum of P(t) from a trajectory CSV.
    Spectrum {
        #[arg(long)]
        traj: PathBuf,
        /// Diagonal of the observable, comma separated (default ±1 for two
        /// states).
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        observable: Option<Vec<f64>>,
        /// Zero-padding factor.
        #[arg(long, default_value_t = 1)]
        pad: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute the influence coefficient table and write it as a sidecar.
    Eta {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Vary one parameter and report each run's deviation from a reference.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Reference value (default: the last of `values`).
        #[arg(long)]
        reference: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One rank of a process-backend run (started by `run`).
    #[command(hide = true)]
    Worker {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        rank: usize,
        #[arg(long)]
        workers: usize,
        #[arg(long)]
        socket_dir: PathBuf,
    },
}

/// Failure of a subcommand, mapped onto an exit code.
#[derive(Debug)]
pub enum CliError {
    Config(ConfigError),
    Core(Error),
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Core(e) if e.is_numerical() => EXIT_NUMERICAL,
            CliError::Core(
                Error::Spec(_)
                | Error::Mask(_)
                | Error::Domain(_)
                | Error::Dimension(_)
                | Error::NotHermitian(_)
                | Error::Parse(_),
            ) => EXIT_CONFIG,
            CliError::Core(Error::OracleLimit(_)) => EXIT_CONFIG,
            _ => EXIT_FAILURE,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "config error: {e}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Other(s) => f.write_str(s),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `args` (program name first), runs the subcommand and returns the
/// exit code. Errors are reported on stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("macgic: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cmd: Cmd) -> CliResult<()> {
    match cmd {
        Cmd::Run { config, workers, backend, out } => {
            let mut cfg = ConfigFile::load(&config)?;
            if let Some(w) = workers {
                if w == 0 {
                    return Err(ConfigError { line: None, message: "--workers must be at least 1".into() }.into());
                }
                cfg.run.workers = w;
            }
            if let Some(b) = backend {
                cfg.run.backend = match b {
                    BackendArg::Process => Backend::Process,
                    BackendArg::Thread => Backend::Thread,
                };
            }
            let out = out.unwrap_or_else(|| cfg.base_dir.join(&cfg.run.output_dir));
            run_command(&config, &cfg, &out)
        }
        Cmd::Oracle { config } => {
            let cfg = ConfigFile::load(&config)?;
            let dev = oracle_deviation(&cfg)?;
            println!("max deviation {dev:e}");
            Ok(())
        }
        Cmd::Spectrum { traj, observable, pad, out } => {
            let text = std::fs::read_to_string(&traj)?;
            let t = Trajectory::from_csv(&text)?;
            let obs = match observable {
                Some(o) => o,
                None if t.states == 2 => vec![1.0, -1.0],
                None => {
                    return Err(CliError::Config(ConfigError {
                        line: None,
                        message: "--observable is required for more than two states".into(),
                    }))
                }
            };
            if obs.len() != t.states {
                return Err(CliError::Config(ConfigError {
                    line: None,
                    message: format!("observable has {} entries for {} states", obs.len(), t.states),
                }));
            }
            let csv = spectrum_csv(&t, &obs, pad)?;
            let out = out.unwrap_or_else(|| traj.with_file_name("spectrum.csv"));
            std::fs::write(&out, csv)?;
            Ok(())
        }
        Cmd::Eta { config, out } => {
            let cfg = ConfigFile::load(&config)?;
            let sd = cfg.spectral_density()?;
            let table = macgic::bath::compute_eta_table(&sd, cfg.kbt, cfg.dt, cfg.dk_max)?;
            let f = std::fs::File::create(&out)?;
            let mut w = std::io::BufWriter::new(f);
            table.write_sidecar(&mut w)?;
            std::io::Write::flush(&mut w)?;
            Ok(())
        }
        Cmd::Sweep { config, param, values, reference, out } => {
            let cfg = ConfigFile::load(&config)?;
            let out = out.unwrap_or_else(|| cfg.base_dir.join(&cfg.run.output_dir));
            let csv = sweep(&cfg, param, &values, reference.as_deref())?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("sweep.csv"), &csv)?;
            print!("{csv}");
            Ok(())
        }
        Cmd::Worker { config, rank, workers, socket_dir } => {
            let cfg = ConfigFile::load(&config)?;
            let engine = Engine::new(cfg.assemble()?.spec)?;
            let transport = UnixTransport::connect(rank, workers, &socket_dir, Duration::from_secs(60))?;
            run_worker(&engine, Box::new(transport), RunOptions::default())?;
            Ok(())
        }
    }
}

fn run_command(config_path: &Path, cfg: &ConfigFile, out: &Path) -> CliResult<()> {
    let assembly = cfg.assemble()?;
    let engine = Arc::new(Engine::new(assembly.spec)?);
    let report = match (cfg.run.workers, cfg.run.backend) {
        (1, _) | (_, Backend::Thread) => run_threads(engine, cfg.run.workers, RunOptions::default())?,
        (n, Backend::Process) => run_processes(config_path, cfg, &assembly.sd, &engine, n)?,
    };
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("trajectory.csv"), report.trajectory.to_csv())?;
    std::fs::write(out.join("telemetry.csv"), telemetry_csv(&report))?;
    if cfg.run.spectrum {
        std::fs::write(
            out.join("spectrum.csv"),
            spectrum_csv(&report.trajectory, &assembly.observable, cfg.run.spectrum_pad)?,
        )?;
    }
    Ok(())
}

/// Rank 0 in this process; ranks 1.. as `worker` child processes of the
/// same executable, meshed over Unix sockets in a private directory.
fn run_processes(
    config_path: &Path,
    cfg: &ConfigFile,
    sd: &SpectralDensity,
    engine: &Engine,
    n: usize,
) -> CliResult<RunReport> {
    let dir = tempfile::Builder::new().prefix("macgic-").tempdir()?;
    let exe = std::env::current_exe()?;
    // Hand the coefficient table to the workers instead of recomputing it.
    let cache = match std::env::var_os(ETA_CACHE_ENV) {
        Some(c) => PathBuf::from(c),
        None => {
            let eta = &engine.spec().eta;
            let path = macgic::bath::eta_cache_path(dir.path(), sd, cfg.kbt, cfg.dt, cfg.dk_max);
            let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
            eta.write_sidecar(&mut w)?;
            std::io::Write::flush(&mut w)?;
            dir.path().to_path_buf()
        }
    };
    let mut children: Vec<Child> = Vec::new();
    for rank in 1..n {
        let child = Command::new(&exe)
            .env(ETA_CACHE_ENV, &cache)
            .arg("worker")
            .arg("--config")
            .arg(config_path)
            .args(["--rank", &rank.to_string(), "--workers", &n.to_string()])
            .arg("--socket-dir")
            .arg(dir.path())
            .spawn();
        match child {
            Ok(c) => children.push(c),
            Err(e) => {
                for mut c in children {
                    let _ = c.kill();
                    let _ = c.wait();
                }
                return Err(e.into());
            }
        }
    }
    let result = UnixTransport::connect(0, n, dir.path(), Duration::from_secs(60))
        .and_then(|t| run_worker(engine, Box::new(t), RunOptions::default()));
    let mut failed = Vec::new();
    for (i, mut c) in children.into_iter().enumerate() {
        if result.is_err() {
            let _ = c.kill();
        }
        match c.wait() {
            Ok(s) if s.success() => {}
            Ok(s) => failed.push(format!("rank {} exited with {s}", i + 1)),
            Err(e) => failed.push(format!("rank {}: {e}", i + 1)),
        }
    }
    let report = result?;
    if !failed.is_empty() {
        return Err(CliError::Other(failed.join("; ")));
    }
    report.ok_or_else(|| CliError::Other("rank 0 produced no report".into()))
}

/// `t,n_paths,trace_drift,min_worker_paths,max_worker_paths`; worker counts
/// are taken after load balancing.
pub fn telemetry_csv(report: &RunReport) -> String {
    let t = &report.trajectory;
    let mut s = String::from("t,n_paths,trace_drift,min_worker_paths,max_worker_paths\n");
    for k in 0..t.len() {
        let (lo, hi) = match k.checked_sub(1).and_then(|i| report.worker_counts.get(i)) {
            Some(c) => (*c.iter().min().unwrap_or(&0), *c.iter().max().unwrap_or(&0)),
            None => (t.path_counts[k], t.path_counts[k]),
        };
        let _ = writeln!(s, "{:?},{},{:e},{lo},{hi}", t.times[k], t.path_counts[k], t.trace_drift[k]);
    }
    s
}

pub fn spectrum_csv(t: &Trajectory, observable: &[f64], pad: usize) -> CliResult<String> {
    if t.len() < 2 {
        return Err(CliError::Other("a spectrum needs at least two time points".into()));
    }
    let p = t.expectation(observable);
    let dt = t.times[1] - t.times[0];
    let spec = spectrum_padded(&p, dt, pad)?;
    let mut s = String::from("omega,S\n");
    for (w, v) in spec {
        let _ = writeln!(s, "{w:?},{v:e}");
    }
    Ok(s)
}

/// Largest elementwise deviation between the engine and the brute-force
/// path sum over steps `1..=n_steps`.
pub fn oracle_deviation(cfg: &ConfigFile) -> CliResult<f64> {
    let spec = cfg.assemble()?.spec;
    macgic::oracle::OracleLimits::default().check(spec.states(), spec.n_steps)?;
    let traj = Engine::new(spec.clone())?.run()?;
    let mut worst = 0.0f64;
    for n in 1..=spec.n_steps {
        let want = direct_path_sum(&spec.system, &spec.eta, &spec.rho0, n)?;
        let d = (&traj.rho[n] - want).iter().map(|z| z.norm()).fold(0.0, f64::max);
        worst = worst.max(d);
    }
    Ok(worst)
}

/// Runs the configuration once per value of `param` and once for the
/// reference, writing `value,max_dev,final_paths` rows; `max_dev` is the
/// largest `|ΔP(t)|` against the reference.
pub fn sweep(cfg: &ConfigFile, param: SweepParam, values: &[String], reference: Option<&str>) -> CliResult<String> {
    let reference = reference.map(str::to_string).or_else(|| values.last().cloned()).expect("values is non-empty");
    let run_at = |v: &str| -> CliResult<(Vec<f64>, usize)> {
        let c = with_param(cfg, param, v)?;
        let a = c.assemble()?;
        let engine = Arc::new(Engine::new(a.spec)?);
        let report = run_threads(engine, c.run.workers, RunOptions::default())?;
        let t = report.trajectory;
        Ok((t.expectation(&a.observable), *t.path_counts.last().unwrap_or(&0)))
    };
    let (p_ref, _) = run_at(&reference)?;
    let mut s = String::from("value,max_dev,final_paths\n");
    for v in values {
        let (p, paths) = run_at(v)?;
        if p.len() != p_ref.len() {
            return Err(CliError::Other(format!("run at {v} has {} points, the reference {}", p.len(), p_ref.len())));
        }
        let dev = p.iter().zip(&p_ref).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let _ = writeln!(s, "{v},{dev:e},{paths}");
    }
    Ok(s)
}

fn with_param(cfg: &ConfigFile, param: SweepParam, value: &str) -> CliResult<ConfigFile> {
    let bad = |what: &str| CliError::Config(ConfigError { line: None, message: format!("invalid {what} `{value}`") });
    let mut c = cfg.clone();
    match param {
        SweepParam::DkMax => {
            c.dk_max = value.parse().map_err(|_| bad("dk_max"))?;
        }
        SweepParam::DkEff => c.mask = MaskConfig::Dense(value.parse().map_err(|_| bad("Δk_eff"))?),
        SweepParam::NVib => match &mut c.system {
            crate::config::SystemConfig::ReactionCoordinate { n_vib, .. } => {
                *n_vib = value.parse().map_err(|_| bad("n_vib"))?
            }
            _ => return Err(bad("n_vib sweep without rc_model:")),
        },
        SweepParam::Theta => c.theta = value.parse().map_err(|_| bad("theta"))?,
    }
    crate::config::build_mask(&c.mask, c.dk_max)
        .map_err(|e| CliError::Config(ConfigError { line: None, message: e }))?;
    Ok(c)
}
