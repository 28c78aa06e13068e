//! Run configuration files: flat INI-style sections of `key = value` lines.
//!
//! ```text
//! [system]
//! hamiltonian = 0, 0.5; 0.5, 0
//! coordinates = 0.5, -0.5
//!
//! [bath]
//! variant = ohmic
//! coupling = 0.0625
//! cutoff = 10
//! kbt = 0.2
//!
//! [propagation]
//! dt = 0.3
//! n_steps = 100
//! dk_max = 8
//! mask = dense:6
//! theta = 1e-8
//! mode = premerge
//! ```
//!
//! Matrices are rows separated by `;` with comma-separated entries, each a
//! real or complex number (`0.5`, `0.1-0.2i`). Lines starting with `#` or
//! `;` are comments.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use macgic::bath::{load_or_compute_eta, TabulatedSd};
use macgic::system::{build_reaction_coordinate_model, map_structured_to_rc};
use macgic::{CMatrix, Mask, Mode, Propagated, RCModelSpec, RunSpec, SpectralDensity, SystemModel};
use num_complex::Complex64;

/// Environment variable naming the coefficient-table cache directory.
pub const ETA_CACHE_ENV: &str = "QUAPI_ETA_CACHE";

/// A configuration problem, with the offending line when known.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl ConfigError {
    fn at(line: usize, message: impl Into<String>) -> Self {
        Self { line: Some(line), message: message.into() }
    }

    fn general(message: impl Into<String>) -> Self {
        Self { line: None, message: message.into() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

type CResult<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq)]
pub enum SystemConfig {
    Explicit { hamiltonian: CMatrix, coordinates: Vec<f64> },
    ReactionCoordinate { delta: f64, omega: f64, coupling: RcCoupling, kappa: f64, n_vib: usize, bias: f64 },
}

/// The mode coupling, given directly or through the structured-peak
/// strength it maps to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RcCoupling {
    G(f64),
    Alpha(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialState {
    /// `|s⟩⟨s|` for explicit systems; for reaction-coordinate models the
    /// TLS state `s` with the mode thermal at the bath temperature.
    State(usize),
    Matrix(CMatrix),
}

#[derive(Debug, Clone, PartialEq)]
pub enum BathConfig {
    None,
    Ohmic { coupling: f64, cutoff: f64 },
    OhmicKappa { kappa: f64, cutoff: f64 },
    Structured { alpha: f64, omega: f64, kappa: f64 },
    Tabulated { file: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub enum MaskConfig {
    Full,
    Dense(usize),
    Lags(Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Process,
    Thread,
}

impl FromStr for Backend {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "process" => Ok(Backend::Process),
            "thread" => Ok(Backend::Thread),
            _ => Err(format!("unknown backend `{s}` (expected process or thread)")),
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backend::Process => "process",
            Backend::Thread => "thread",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub workers: usize,
    pub backend: Backend,
    pub output_dir: PathBuf,
    pub deterministic: bool,
    pub spectrum: bool,
    pub spectrum_pad: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            workers: 1,
            backend: Backend::Process,
            output_dir: PathBuf::from("."),
            deterministic: true,
            spectrum: false,
            spectrum_pad: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigFile {
    pub system: SystemConfig,
    pub initial: InitialState,
    /// Diagonal of the observable reported as `P(t)`.
    pub observable: Option<Vec<f64>>,
    pub bath: BathConfig,
    pub kbt: f64,
    pub dt: f64,
    pub n_steps: usize,
    pub dk_max: usize,
    pub mask: MaskConfig,
    pub theta: f64,
    pub mode: Mode,
    pub propagated: Propagated,
    pub path_cap: Option<usize>,
    pub run: RunConfig,
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
}

/// Everything a run needs, assembled from a configuration.
#[derive(Debug, Clone)]
pub struct Assembly {
    pub spec: RunSpec,
    pub sd: SpectralDensity,
    pub observable: Vec<f64>,
}

// Raw `key = value` pairs per section, with line numbers.
struct Sections {
    map: BTreeMap<String, BTreeMap<String, (usize, String)>>,
}

const KNOWN: &[(&str, &[&str])] = &[
    (
        "system",
        &[
            "hamiltonian",
            "coordinates",
            "rc_model",
            "delta",
            "omega",
            "g",
            "alpha",
            "kappa",
            "n_vib",
            "bias",
            "initial_state",
            "rho0",
            "observable",
        ],
    ),
    ("bath", &["variant", "coupling", "cutoff", "kappa", "alpha", "omega", "file", "kbt"]),
    ("propagation", &["dt", "n_steps", "t_max", "dk_max", "mask", "theta", "mode", "propagated", "path_cap"]),
    ("run", &["workers", "backend", "output_dir", "deterministic", "spectrum", "spectrum_pad"]),
];

impl Sections {
    fn parse(text: &str) -> CResult<Self> {
        let mut map: BTreeMap<String, BTreeMap<String, (usize, String)>> = BTreeMap::new();
        let mut current: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| ConfigError::at(n, format!("malformed section header `{line}`")))?
                    .trim()
                    .to_ascii_lowercase();
                if !KNOWN.iter().any(|(s, _)| *s == name) {
                    return Err(ConfigError::at(n, format!("unknown section [{name}]")));
                }
                if map.contains_key(&name) {
                    return Err(ConfigError::at(n, format!("section [{name}] appears twice")));
                }
                map.insert(name.clone(), BTreeMap::new());
                current = Some(name);
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::at(n, format!("expected `key = value`, found `{line}`")))?;
            let key = key.trim().to_ascii_lowercase();
            let section = current.as_ref().ok_or_else(|| ConfigError::at(n, "key outside of any section"))?;
            let allowed = KNOWN.iter().find(|(s, _)| s == section).map(|(_, k)| *k).unwrap_or(&[]);
            if !allowed.contains(&key.as_str()) {
                return Err(ConfigError::at(n, format!("unknown key `{key}` in [{section}]")));
            }
            let entries = map.get_mut(section).expect("section exists");
            if entries.insert(key.clone(), (n, value.trim().to_string())).is_some() {
                return Err(ConfigError::at(n, format!("key `{key}` given twice in [{section}]")));
            }
        }
        Ok(Self { map })
    }

    fn section(&self, name: &str) -> Option<&BTreeMap<String, (usize, String)>> {
        self.map.get(name)
    }

    fn raw(&self, section: &str, key: &str) -> Option<(usize, &str)> {
        self.section(section).and_then(|s| s.get(key)).map(|(n, v)| (*n, v.as_str()))
    }

    fn has(&self, section: &str, key: &str) -> bool {
        self.raw(section, key).is_some()
    }

    fn get<T: FromStr>(&self, section: &str, key: &str) -> CResult<Option<T>>
    where
        T::Err: fmt::Display,
    {
        match self.raw(section, key) {
            None => Ok(None),
            Some((n, v)) => {
                v.parse::<T>().map(Some).map_err(|e| ConfigError::at(n, format!("invalid value `{v}` for {key}: {e}")))
            }
        }
    }

    fn require<T: FromStr>(&self, section: &str, key: &str) -> CResult<T>
    where
        T::Err: fmt::Display,
    {
        self.get(section, key)?.ok_or_else(|| self.missing(section, key))
    }

    fn finite(&self, section: &str, key: &str) -> CResult<Option<f64>> {
        let v: Option<f64> = self.get(section, key)?;
        match v {
            Some(x) if !x.is_finite() => {
                Err(ConfigError::at(self.raw(section, key).unwrap().0, format!("{key} must be finite")))
            }
            _ => Ok(v),
        }
    }

    fn require_finite(&self, section: &str, key: &str) -> CResult<f64> {
        self.finite(section, key)?.ok_or_else(|| self.missing(section, key))
    }

    fn missing(&self, section: &str, key: &str) -> ConfigError {
        ConfigError::general(format!("missing `{key}` in [{section}]"))
    }

    fn list<T: FromStr>(&self, section: &str, key: &str) -> CResult<Option<Vec<T>>>
    where
        T::Err: fmt::Display,
    {
        let Some((n, v)) = self.raw(section, key) else { return Ok(None) };
        v.split(',')
            .map(|x| {
                x.trim()
                    .parse::<T>()
                    .map_err(|e| ConfigError::at(n, format!("invalid entry `{}` in {key}: {e}", x.trim())))
            })
            .collect::<CResult<Vec<T>>>()
            .map(Some)
    }

    fn matrix(&self, section: &str, key: &str) -> CResult<Option<CMatrix>> {
        let Some((n, v)) = self.raw(section, key) else { return Ok(None) };
        parse_matrix(v).map(Some).map_err(|e| ConfigError::at(n, format!("{key}: {e}")))
    }

    fn line_of(&self, section: &str, key: &str) -> Option<usize> {
        self.raw(section, key).map(|(n, _)| n)
    }
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(format!("`{s}` is not a boolean")),
    }
}

/// Parses `a, b; c, d` into a square complex matrix.
pub fn parse_matrix(text: &str) -> Result<CMatrix, String> {
    let rows: Vec<Vec<Complex64>> = text
        .split(';')
        .map(|row| {
            row.split(',')
                .map(|x| {
                    let x = x.trim();
                    Complex64::from_str(x).map_err(|_| format!("`{x}` is not a number"))
                })
                .collect()
        })
        .collect::<Result<_, _>>()?;
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(format!(
            "expected a square matrix, found {n} rows of lengths {:?}",
            rows.iter().map(Vec::len).collect::<Vec<_>>()
        ));
    }
    if rows.iter().flatten().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err("entries must be finite".into());
    }
    Ok(CMatrix::from_fn(n, n, |r, c| rows[r][c]))
}

fn fmt_complex(z: Complex64) -> String {
    if z.im == 0.0 {
        format!("{:?}", z.re)
    } else {
        format!("{:?}{}{:?}i", z.re, if z.im < 0.0 || z.im.is_sign_negative() { "-" } else { "+" }, z.im.abs())
    }
}

pub fn format_matrix(m: &CMatrix) -> String {
    (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| fmt_complex(m[(r, c)])).collect::<Vec<_>>().join(", "))
        .collect::<Vec<_>>()
        .join("; ")
}

fn fmt_list<T: fmt::Debug>(v: &[T]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ")
}

impl ConfigFile {
    pub fn parse(text: &str) -> CResult<Self> {
        Self::parse_with_base(text, Path::new("."))
    }

    pub fn load(path: &Path) -> CResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::general(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        Self::parse_with_base(&text, &base)
    }

    pub fn parse_with_base(text: &str, base: &Path) -> CResult<Self> {
        let s = Sections::parse(text)?;
        for section in ["system", "bath", "propagation"] {
            if s.section(section).is_none() {
                return Err(ConfigError::general(format!("missing section [{section}]")));
            }
        }
        let rc = s
            .get::<String>("system", "rc_model")?
            .map(|v| parse_bool(&v))
            .transpose()
            .map_err(|e| ConfigError::at(s.line_of("system", "rc_model").unwrap(), e))?;
        let rc = rc.unwrap_or(false);
        let explicit = s.has("system", "hamiltonian");
        if rc == explicit {
            return Err(ConfigError::general("[system] needs exactly one of `hamiltonian` or `rc_model = true`"));
        }
        let system = if rc {
            for key in ["hamiltonian", "coordinates"] {
                if let Some(n) = s.line_of("system", key) {
                    return Err(ConfigError::at(n, format!("`{key}` cannot be combined with rc_model")));
                }
            }
            let coupling = match (s.finite("system", "g")?, s.finite("system", "alpha")?) {
                (Some(g), None) => RcCoupling::G(g),
                (None, Some(a)) => RcCoupling::Alpha(a),
                _ => return Err(ConfigError::general("rc_model needs exactly one of `g` or `alpha`")),
            };
            let n_vib: usize = s.require("system", "n_vib")?;
            if n_vib < 1 {
                return Err(ConfigError::at(s.line_of("system", "n_vib").unwrap(), "n_vib must be at least 1"));
            }
            SystemConfig::ReactionCoordinate {
                delta: s.require_finite("system", "delta")?,
                omega: s.require_finite("system", "omega")?,
                coupling,
                kappa: s.require_finite("system", "kappa")?,
                n_vib,
                bias: s.finite("system", "bias")?.unwrap_or(0.0),
            }
        } else {
            for key in ["delta", "omega", "g", "alpha", "n_vib", "bias"] {
                if let Some(n) = s.line_of("system", key) {
                    return Err(ConfigError::at(n, format!("`{key}` only applies to rc_model")));
                }
            }
            let hamiltonian = s.matrix("system", "hamiltonian")?.expect("checked above");
            let coordinates: Vec<f64> =
                s.list("system", "coordinates")?.ok_or_else(|| s.missing("system", "coordinates"))?;
            let n = s.line_of("system", "coordinates").unwrap();
            if coordinates.len() != hamiltonian.nrows() {
                return Err(ConfigError::at(
                    n,
                    format!("{} coordinates for a {}-state Hamiltonian", coordinates.len(), hamiltonian.nrows()),
                ));
            }
            if coordinates.iter().any(|q| !q.is_finite()) {
                return Err(ConfigError::at(n, "coordinates must be finite"));
            }
            SystemConfig::Explicit { hamiltonian, coordinates }
        };
        let initial = match (s.get::<usize>("system", "initial_state")?, s.matrix("system", "rho0")?) {
            (Some(_), Some(_)) => return Err(ConfigError::general("give at most one of `initial_state` and `rho0`")),
            (_, Some(m)) => InitialState::Matrix(m),
            (k, None) => InitialState::State(k.unwrap_or(0)),
        };
        let observable = s.list::<f64>("system", "observable")?;

        let variant: String =
            s.get("bath", "variant")?.unwrap_or_else(|| if rc { "ohmic_kappa".into() } else { String::new() });
        let bath_line = s.line_of("bath", "variant");
        let allowed: &[&str] = match variant.as_str() {
            "none" => &[],
            "ohmic" => &["coupling", "cutoff"],
            "ohmic_kappa" => &["kappa", "cutoff"],
            "structured" => &["alpha", "omega", "kappa"],
            "tabulated" => &["file"],
            "" => return Err(s.missing("bath", "variant")),
            other => {
                return Err(ConfigError::at(
                    bath_line.unwrap_or(0),
                    format!("unknown bath variant `{other}` (none, ohmic, ohmic_kappa, structured, tabulated)"),
                ))
            }
        };
        for key in ["coupling", "cutoff", "kappa", "alpha", "omega", "file"] {
            if let Some(n) = s.line_of("bath", key) {
                if !allowed.contains(&key) {
                    return Err(ConfigError::at(n, format!("`{key}` does not apply to the {variant} bath")));
                }
            }
        }
        let bath = match variant.as_str() {
            "none" => BathConfig::None,
            "ohmic" => BathConfig::Ohmic {
                coupling: s.require_finite("bath", "coupling")?,
                cutoff: s.require_finite("bath", "cutoff")?,
            },
            "ohmic_kappa" => {
                let kappa = match (s.finite("bath", "kappa")?, &system) {
                    (Some(k), _) => k,
                    (None, SystemConfig::ReactionCoordinate { kappa, .. }) => *kappa,
                    (None, _) => return Err(s.missing("bath", "kappa")),
                };
                BathConfig::OhmicKappa { kappa, cutoff: s.require_finite("bath", "cutoff")? }
            }
            "structured" => BathConfig::Structured {
                alpha: s.require_finite("bath", "alpha")?,
                omega: s.require_finite("bath", "omega")?,
                kappa: s.require_finite("bath", "kappa")?,
            },
            _ => BathConfig::Tabulated { file: PathBuf::from(s.require::<String>("bath", "file")?) },
        };
        let kbt = s.require_finite("bath", "kbt")?;
        if kbt <= 0.0 {
            return Err(ConfigError::at(s.line_of("bath", "kbt").unwrap(), "kbt must be positive"));
        }

        let dt = s.require_finite("propagation", "dt")?;
        if dt <= 0.0 {
            return Err(ConfigError::at(s.line_of("propagation", "dt").unwrap(), "dt must be positive"));
        }
        let n_steps = match (s.get::<usize>("propagation", "n_steps")?, s.finite("propagation", "t_max")?) {
            (Some(n), None) => n,
            (None, Some(t)) if t >= 0.0 => (t / dt).round() as usize,
            (None, Some(_)) => {
                return Err(ConfigError::at(s.line_of("propagation", "t_max").unwrap(), "t_max must be non-negative"))
            }
            _ => return Err(ConfigError::general("[propagation] needs exactly one of `n_steps` or `t_max`")),
        };
        let dk_max: usize = s.require("propagation", "dk_max")?;
        let mask = match s.raw("propagation", "mask") {
            None => MaskConfig::Full,
            Some((_, "full")) => MaskConfig::Full,
            Some((n, v)) => {
                let cfg = if let Some(k) = v.strip_prefix("dense:") {
                    MaskConfig::Dense(k.trim().parse().map_err(|e| ConfigError::at(n, format!("mask `{v}`: {e}")))?)
                } else {
                    MaskConfig::Lags(s.list("propagation", "mask")?.expect("present"))
                };
                build_mask(&cfg, dk_max).map_err(|e| ConfigError::at(n, e))?;
                cfg
            }
        };
        let theta = s.finite("propagation", "theta")?.unwrap_or(0.0);
        if theta < 0.0 {
            return Err(ConfigError::at(s.line_of("propagation", "theta").unwrap(), "theta must be non-negative"));
        }
        let mode = match s.raw("propagation", "mode") {
            None => Mode::Premerge,
            Some((n, v)) => v.parse::<Mode>().map_err(|e| ConfigError::at(n, e.to_string()))?,
        };
        let propagated = match s.raw("propagation", "propagated") {
            None | Some((_, "sum")) => Propagated::Sum,
            Some((_, "weight")) => Propagated::Weight,
            Some((n, v)) => return Err(ConfigError::at(n, format!("propagated must be sum or weight, not `{v}`"))),
        };
        let path_cap = s.get::<usize>("propagation", "path_cap")?;

        let mut run = RunConfig::default();
        if let Some(w) = s.get::<usize>("run", "workers")? {
            if w == 0 {
                return Err(ConfigError::at(s.line_of("run", "workers").unwrap(), "workers must be at least 1"));
            }
            run.workers = w;
        }
        if let Some(b) = s.get::<Backend>("run", "backend")? {
            run.backend = b;
        }
        if let Some(d) = s.get::<String>("run", "output_dir")? {
            run.output_dir = PathBuf::from(d);
        }
        for (key, slot) in [("deterministic", &mut run.deterministic), ("spectrum", &mut run.spectrum)] {
            if let Some((n, v)) = s.raw("run", key) {
                *slot = parse_bool(v).map_err(|e| ConfigError::at(n, e))?;
            }
        }
        if let Some(p) = s.get::<usize>("run", "spectrum_pad")? {
            if p == 0 {
                return Err(ConfigError::at(
                    s.line_of("run", "spectrum_pad").unwrap(),
                    "spectrum_pad must be at least 1",
                ));
            }
            run.spectrum_pad = p;
        }
        let cfg = Self {
            system,
            initial,
            observable,
            bath,
            kbt,
            dt,
            n_steps,
            dk_max,
            mask,
            theta,
            mode,
            propagated,
            path_cap,
            run,
            base_dir: base.to_path_buf(),
        };
        cfg.check_dimensions()?;
        Ok(cfg)
    }

    fn check_dimensions(&self) -> CResult<()> {
        let m = self.states();
        match &self.initial {
            InitialState::State(k) if *k >= self.initial_range() => {
                return Err(ConfigError::general(format!("initial_state {k} out of range")))
            }
            InitialState::Matrix(r) if r.nrows() != m => {
                return Err(ConfigError::general(format!("rho0 is {}×{} for a {m}-state system", r.nrows(), r.ncols())))
            }
            _ => {}
        }
        if let Some(o) = &self.observable {
            if o.len() != m {
                return Err(ConfigError::general(format!("observable has {} entries for a {m}-state system", o.len())));
            }
        }
        Ok(())
    }

    fn initial_range(&self) -> usize {
        match self.system {
            SystemConfig::ReactionCoordinate { .. } => 2,
            _ => self.states(),
        }
    }

    /// Number of DVR states of the system.
    pub fn states(&self) -> usize {
        match &self.system {
            SystemConfig::Explicit { hamiltonian, .. } => hamiltonian.nrows(),
            SystemConfig::ReactionCoordinate { n_vib, .. } => 2 * n_vib,
        }
    }

    pub fn spectral_density(&self) -> macgic::Result<SpectralDensity> {
        Ok(match &self.bath {
            BathConfig::None => SpectralDensity::zero(),
            BathConfig::Ohmic { coupling, cutoff } => SpectralDensity::ohmic(*coupling, *cutoff),
            BathConfig::OhmicKappa { kappa, cutoff } => SpectralDensity::ohmic_kappa(*kappa, *cutoff),
            BathConfig::Structured { alpha, omega, kappa } => SpectralDensity::structured_peak(*alpha, *omega, *kappa),
            BathConfig::Tabulated { file } => {
                let path = self.base_dir.join(file);
                let text = std::fs::read_to_string(&path)?;
                SpectralDensity::Tabulated(TabulatedSd::from_csv(&text)?)
            }
        })
    }

    pub fn rc_spec(&self) -> macgic::Result<Option<RCModelSpec>> {
        let SystemConfig::ReactionCoordinate { delta, omega, coupling, kappa, n_vib, bias } = self.system else {
            return Ok(None);
        };
        let g = match coupling {
            RcCoupling::G(g) => g,
            RcCoupling::Alpha(a) => map_structured_to_rc(a, omega, kappa)?,
        };
        Ok(Some(RCModelSpec { delta, omega, g, n_vib, bias }))
    }

    /// Builds the run specification. Coefficient tables are cached in the
    /// directory named by `QUAPI_ETA_CACHE` when it is set.
    pub fn assemble(&self) -> macgic::Result<Assembly> {
        let sd = self.spectral_density()?;
        let (system, rho0, default_obs) = match &self.system {
            SystemConfig::Explicit { hamiltonian, coordinates } => {
                let system = SystemModel::new(hamiltonian.clone(), coordinates.clone(), &sd, self.dt)?;
                let m = hamiltonian.nrows();
                let rho0 = match &self.initial {
                    InitialState::State(k) => {
                        let mut r = CMatrix::zeros(m, m);
                        r[(*k, *k)] = Complex64::new(1.0, 0.0);
                        r
                    }
                    InitialState::Matrix(r) => r.clone(),
                };
                let obs =
                    if m == 2 { vec![1.0, -1.0] } else { (0..m).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect() };
                (system, rho0, obs)
            }
            SystemConfig::ReactionCoordinate { .. } => {
                let model = build_reaction_coordinate_model(&self.rc_spec()?.expect("rc system"))?;
                let system = model.system_model(&sd, self.dt)?;
                let rho0 = match &self.initial {
                    InitialState::State(k) => model.initial_state(*k, self.kbt),
                    InitialState::Matrix(r) => r.clone(),
                };
                (system, rho0, model.sigma_z_diagonal())
            }
        };
        let cache = std::env::var_os(ETA_CACHE_ENV).map(PathBuf::from);
        let eta = load_or_compute_eta(&sd, self.kbt, self.dt, self.dk_max, cache.as_deref())?;
        let mask = build_mask(&self.mask, self.dk_max).map_err(macgic::Error::Mask)?;
        let mut spec = RunSpec::new(system, eta, rho0, self.n_steps, mask, self.theta, self.mode)?;
        spec.propagated = self.propagated;
        if let Some(cap) = self.path_cap {
            spec.path_cap = cap;
        }
        Ok(Assembly { spec, sd, observable: self.observable.clone().unwrap_or(default_obs) })
    }

    /// Writes the configuration back as text that parses to an equal value.
    pub fn emit(&self) -> String {
        let mut o = String::from("[system]\n");
        match &self.system {
            SystemConfig::Explicit { hamiltonian, coordinates } => {
                let _ = writeln!(o, "hamiltonian = {}", format_matrix(hamiltonian));
                let _ = writeln!(o, "coordinates = {}", fmt_list(coordinates));
            }
            SystemConfig::ReactionCoordinate { delta, omega, coupling, kappa, n_vib, bias } => {
                let _ = writeln!(o, "rc_model = true\ndelta = {delta:?}\nomega = {omega:?}");
                let _ = match coupling {
                    RcCoupling::G(g) => writeln!(o, "g = {g:?}"),
                    RcCoupling::Alpha(a) => writeln!(o, "alpha = {a:?}"),
                };
                let _ = writeln!(o, "kappa = {kappa:?}\nn_vib = {n_vib}\nbias = {bias:?}");
            }
        }
        let _ = match &self.initial {
            InitialState::State(k) => writeln!(o, "initial_state = {k}"),
            InitialState::Matrix(r) => writeln!(o, "rho0 = {}", format_matrix(r)),
        };
        if let Some(obs) = &self.observable {
            let _ = writeln!(o, "observable = {}", fmt_list(obs));
        }
        o.push_str("\n[bath]\n");
        let _ = match &self.bath {
            BathConfig::None => writeln!(o, "variant = none"),
            BathConfig::Ohmic { coupling, cutoff } => {
                writeln!(o, "variant = ohmic\ncoupling = {coupling:?}\ncutoff = {cutoff:?}")
            }
            BathConfig::OhmicKappa { kappa, cutoff } => {
                writeln!(o, "variant = ohmic_kappa\nkappa = {kappa:?}\ncutoff = {cutoff:?}")
            }
            BathConfig::Structured { alpha, omega, kappa } => {
                writeln!(o, "variant = structured\nalpha = {alpha:?}\nomega = {omega:?}\nkappa = {kappa:?}")
            }
            BathConfig::Tabulated { file } => writeln!(o, "variant = tabulated\nfile = {}", file.display()),
        };
        let _ = writeln!(o, "kbt = {:?}", self.kbt);
        o.push_str("\n[propagation]\n");
        let _ = writeln!(o, "dt = {:?}\nn_steps = {}\ndk_max = {}", self.dt, self.n_steps, self.dk_max);
        let _ = match &self.mask {
            MaskConfig::Full => writeln!(o, "mask = full"),
            MaskConfig::Dense(k) => writeln!(o, "mask = dense:{k}"),
            MaskConfig::Lags(l) => writeln!(o, "mask = {}", fmt_list(l)),
        };
        let _ = writeln!(o, "theta = {:?}\nmode = {}", self.theta, self.mode.name());
        let _ = writeln!(
            o,
            "propagated = {}",
            match self.propagated {
                Propagated::Sum => "sum",
                Propagated::Weight => "weight",
            }
        );
        if let Some(cap) = self.path_cap {
            let _ = writeln!(o, "path_cap = {cap}");
        }
        let r = &self.run;
        let _ = writeln!(
            o,
            "\n[run]\nworkers = {}\nbackend = {}\noutput_dir = {}\ndeterministic = {}\nspectrum = {}\nspectrum_pad = {}",
            r.workers,
            r.backend,
            r.output_dir.display(),
            r.deterministic,
            r.spectrum,
            r.spectrum_pad
        );
        o
    }
}

/// The mask a configuration describes, checked against `dk_max`.
pub fn build_mask(cfg: &MaskConfig, dk_max: usize) -> Result<Mask, String> {
    let mask = match cfg {
        MaskConfig::Full => Mask::full(dk_max),
        MaskConfig::Dense(k) => Mask::dense(*k, dk_max).map_err(|e| e.to_string())?,
        MaskConfig::Lags(l) => Mask::new(l.clone()).map_err(|e| e.to_string())?,
    };
    mask.validate(dk_max).map_err(|e| e.to_string())?;
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TLS: &str = "
[system]
hamiltonian = 0, 0.5; 0.5, 0
coordinates = 0.5, -0.5

[bath]
variant = ohmic
coupling = 0.0625
cutoff = 10
kbt = 0.2

[propagation]
dt = 0.3
n_steps = 4
dk_max = 3
";

    #[test]
    fn minimal_tls_config() {
        let cfg = ConfigFile::parse(TLS).unwrap();
        assert_eq!(cfg.states(), 2);
        assert_eq!(cfg.mask, MaskConfig::Full);
        assert_eq!(cfg.mode, Mode::Premerge);
        let a = cfg.assemble().unwrap();
        assert_eq!(a.spec.mask, Mask::full(3));
        assert_eq!(a.spec.rho0[(0, 0)], Complex64::new(1.0, 0.0));
        assert_eq!(a.observable, vec![1.0, -1.0]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let bad = TLS.replace("cutoff = 10", "cutof = 10");
        let e = ConfigFile::parse(&bad).unwrap_err();
        assert_eq!(e.line, Some(9), "{e}");
        let bad = TLS.replace("dt = 0.3", "dt = fast");
        assert_eq!(ConfigFile::parse(&bad).unwrap_err().line, Some(13));
        let bad = TLS.replace("dk_max = 3", "dk_max = 3\nmask = 0, 5");
        assert_eq!(ConfigFile::parse(&bad).unwrap_err().line, Some(16));
        let bad = TLS.replace("[bath]", "[bath\n");
        assert_eq!(ConfigFile::parse(&bad).unwrap_err().line, Some(6));
        assert!(ConfigFile::parse(&TLS.replace("coordinates = 0.5, -0.5", "coordinates = 0.5")).is_err());
        assert!(ConfigFile::parse("[system]\nrc_model = true\n").is_err());
        let both = TLS.replace("coordinates = 0.5, -0.5", "coordinates = 0.5, -0.5\nrc_model = true");
        assert!(ConfigFile::parse(&both).is_err());
        assert!(ConfigFile::parse(&TLS.replace("kbt = 0.2", "kbt = inf")).is_err());
    }

    #[test]
    fn matrices_parse_complex_entries() {
        let m = parse_matrix("1, 0.5-0.25i; 0.5+0.25i, -2e-3").unwrap();
        assert_eq!(m[(0, 1)], Complex64::new(0.5, -0.25));
        assert_eq!(m[(1, 1)], Complex64::new(-2e-3, 0.0));
        assert_eq!(parse_matrix(&format_matrix(&m)).unwrap(), m);
        assert!(parse_matrix("1, 2; 3").is_err());
    }

    #[test]
    fn alpha_maps_to_g() {
        let text = "[system]\nrc_model = true\ndelta = 1\nomega = 1\nalpha = 0.1\nkappa = 0.056\nn_vib = 2\n\
                    [bath]\ncutoff = 10\nkbt = 1\n[propagation]\ndt = 0.06\nn_steps = 2\ndk_max = 2\n";
        let cfg = ConfigFile::parse(text).unwrap();
        let g = cfg.rc_spec().unwrap().unwrap().g;
        assert_eq!(g, map_structured_to_rc(0.1, 1.0, 0.056).unwrap());
        assert_eq!(cfg.bath, BathConfig::OhmicKappa { kappa: 0.056, cutoff: 10.0 });
    }

    #[test]
    fn emit_round_trips() {
        let mut cfg = ConfigFile::parse(TLS).unwrap();
        cfg.mask = MaskConfig::Lags(vec![0, 1, 3]);
        cfg.theta = 1e-8;
        cfg.initial = InitialState::Matrix(parse_matrix("0.5, 0.1-0.2i; 0.1+0.2i, 0.5").unwrap());
        cfg.observable = Some(vec![0.25, -1.0 / 3.0]);
        cfg.run.backend = Backend::Thread;
        cfg.run.workers = 3;
        let back = ConfigFile::parse(&cfg.emit()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.assemble().unwrap().spec, cfg.assemble().unwrap().spec);
    }
}
