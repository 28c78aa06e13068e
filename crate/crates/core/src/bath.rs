//! Harmonic bath: spectral densities, the bath correlation function and the
//! discretized influence coefficients η.
//!
//! Units throughout are ħ = k_B = 1: energies and frequencies share one base
//! unit and times are measured in its inverse.
//!
//! The coefficients are double integrals of the correlation function
//! `C(t) = (1/π)∫ J(ω)[coth(ω/2T) cos ωt − i sin ωt] dω` over the step
//! windows `[t_k − dt/2, t_k + dt/2]`; the windows of the first and the last
//! time point are halved. Each window combination reduces analytically to a
//! single frequency integral, which is evaluated with adaptive quadrature.

use std::f64::consts::PI;
use std::fs;
use std::hash::{Hash, Hasher};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rayon::prelude::*;
use rustc_hash::FxHasher;

use crate::error::{Error, Result};
use crate::quad::{integrate_panels, integrate_to_infinity, QuadOptions};

/// Linearly interpolated spectral density, zero outside its grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TabulatedSd {
    omega: Vec<f64>,
    j: Vec<f64>,
}

impl TabulatedSd {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Domain("tabulated spectral density needs at least two points".into()));
        }
        let mut omega = Vec::with_capacity(points.len());
        let mut j = Vec::with_capacity(points.len());
        for (k, &(w, jw)) in points.iter().enumerate() {
            if !w.is_finite() || !jw.is_finite() || w < 0.0 || jw < 0.0 {
                return Err(Error::Domain(format!(
                    "tabulated point {k} ({w}, {jw}) is not a finite non-negative pair"
                )));
            }
            if let Some(&prev) = omega.last() {
                if w <= prev {
                    return Err(Error::Domain(format!("tabulated grid not strictly increasing at point {k}")));
                }
            }
            omega.push(w);
            j.push(jw);
        }
        Ok(Self { omega, j })
    }

    /// Parses a two-column `omega,J` CSV with a header line.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| Error::Parse("empty spectral density file".into()))?;
        let cols: Vec<_> = header.split(',').map(|c| c.trim()).collect();
        if cols.len() != 2 || !cols[0].eq_ignore_ascii_case("omega") || !cols[1].eq_ignore_ascii_case("j") {
            return Err(Error::Parse(format!("line 1: expected header `omega,J`, found `{header}`")));
        }
        let mut points = Vec::new();
        for (n, line) in lines {
            let mut it = line.split(',').map(|c| c.trim().parse::<f64>());
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(w)), Some(Ok(jw)), None) => points.push((w, jw)),
                _ => return Err(Error::Parse(format!("line {}: expected two numbers, found `{line}`", n + 1))),
            }
        }
        Self::new(points)
    }

    pub fn points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.omega.iter().copied().zip(self.j.iter().copied())
    }

    fn eval(&self, w: f64) -> f64 {
        let n = self.omega.len();
        if w < self.omega[0] || w > self.omega[n - 1] {
            return 0.0;
        }
        let k = self.omega.partition_point(|&x| x <= w);
        if k == n {
            return self.j[n - 1];
        }
        let (w0, w1) = (self.omega[k - 1], self.omega[k]);
        let (j0, j1) = (self.j[k - 1], self.j[k]);
        j0 + (j1 - j0) * (w - w0) / (w1 - w0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SpectralDensity {
    /// `J(ω) = (γ/π) ω e^{−ω/ω_c}`.
    Ohmic {
        coupling: f64,
        cutoff: f64,
    },
    /// `J(ω) = 2αωΩ⁴ / ((Ω² − ω²)² + (2πκωΩ)²)`, a resonance of width 2πκΩ
    /// on an Ohmic background.
    StructuredPeak {
        alpha: f64,
        omega: f64,
        kappa: f64,
    },
    Tabulated(TabulatedSd),
}

impl SpectralDensity {
    pub fn ohmic(coupling: f64, cutoff: f64) -> Self {
        SpectralDensity::Ohmic { coupling, cutoff }
    }

    /// Ohmic bath written as `J(ω) = κ ω e^{−ω/ω_c}`, the residual-bath form
    /// used with reaction-coordinate models.
    pub fn ohmic_kappa(kappa: f64, cutoff: f64) -> Self {
        SpectralDensity::Ohmic { coupling: PI * kappa, cutoff }
    }

    pub fn structured_peak(alpha: f64, omega: f64, kappa: f64) -> Self {
        SpectralDensity::StructuredPeak { alpha, omega, kappa }
    }

    /// A bath that does not couple at all.
    pub fn zero() -> Self {
        SpectralDensity::Ohmic { coupling: 0.0, cutoff: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            SpectralDensity::Ohmic { coupling, cutoff } => {
                if !(coupling.is_finite() && coupling >= 0.0 && cutoff.is_finite() && cutoff > 0.0) {
                    return Err(Error::Domain(format!("ohmic parameters γ={coupling}, ω_c={cutoff} invalid")));
                }
            }
            SpectralDensity::StructuredPeak { alpha, omega, kappa } => {
                if !(alpha.is_finite()
                    && alpha >= 0.0
                    && omega.is_finite()
                    && omega > 0.0
                    && kappa.is_finite()
                    && kappa > 0.0)
                {
                    return Err(Error::Domain(format!(
                        "structured peak parameters α={alpha}, Ω={omega}, κ={kappa} invalid"
                    )));
                }
            }
            SpectralDensity::Tabulated(_) => {}
        }
        Ok(())
    }

    /// True when `J ≡ 0`.
    pub fn is_zero(&self) -> bool {
        match self {
            SpectralDensity::Ohmic { coupling, .. } => *coupling == 0.0,
            SpectralDensity::StructuredPeak { alpha, .. } => *alpha == 0.0,
            SpectralDensity::Tabulated(t) => t.j.iter().all(|&j| j == 0.0),
        }
    }

    /// Evaluates `J(ω)`.
    pub fn evaluate(&self, w: f64) -> Result<f64> {
        if !(w >= 0.0) {
            return Err(Error::Domain(format!("spectral density evaluated at ω = {w}")));
        }
        Ok(self.eval_unchecked(w))
    }

    pub(crate) fn eval_unchecked(&self, w: f64) -> f64 {
        match *self {
            SpectralDensity::Ohmic { coupling, cutoff } => coupling / PI * w * (-w / cutoff).exp(),
            SpectralDensity::StructuredPeak { alpha, omega, kappa } => {
                let o2 = omega * omega;
                let detune = o2 - w * w;
                let width = 2.0 * PI * kappa * w * omega;
                2.0 * alpha * w * o2 * o2 / (detune * detune + width * width)
            }
            SpectralDensity::Tabulated(ref t) => t.eval(w),
        }
    }

    /// Stable content hash of the variant and its parameters.
    pub fn content_hash(&self) -> u64 {
        let mut h = FxHasher::default();
        self.hash_into(&mut h);
        h.finish()
    }

    fn hash_into<H: Hasher>(&self, h: &mut H) {
        match self {
            SpectralDensity::Ohmic { coupling, cutoff } => {
                0u8.hash(h);
                coupling.to_bits().hash(h);
                cutoff.to_bits().hash(h);
            }
            SpectralDensity::StructuredPeak { alpha, omega, kappa } => {
                1u8.hash(h);
                alpha.to_bits().hash(h);
                omega.to_bits().hash(h);
                kappa.to_bits().hash(h);
            }
            SpectralDensity::Tabulated(t) => {
                2u8.hash(h);
                for (w, j) in t.points() {
                    w.to_bits().hash(h);
                    j.to_bits().hash(h);
                }
            }
        }
    }

    /// Frequency breakpoints for quadrature, and whether a tail beyond the
    /// last one must be added. `tau` is the largest time appearing in an
    /// oscillatory factor; panels are refined to at most one period.
    fn quad_breaks(&self, tau: f64) -> (Vec<f64>, bool) {
        let (mut pts, tail) = match *self {
            SpectralDensity::Ohmic { cutoff, .. } => {
                (vec![0.0, 0.1 * cutoff, cutoff, 3.0 * cutoff, 10.0 * cutoff, 25.0 * cutoff, 50.0 * cutoff], true)
            }
            SpectralDensity::StructuredPeak { omega, kappa, .. } => {
                let gamma = 2.0 * PI * kappa * omega;
                let mut v = vec![0.0, 2.0 * omega, 5.0 * omega, 20.0 * omega];
                for s in [0.25, 0.5, 1.0, 2.0, 4.0, 10.0] {
                    v.push(omega - s * gamma);
                    v.push(omega + s * gamma);
                }
                v.push(omega);
                (v, true)
            }
            SpectralDensity::Tabulated(ref t) => (t.omega.clone(), false),
        };
        let hi = match *self {
            SpectralDensity::Ohmic { cutoff, .. } => 50.0 * cutoff,
            SpectralDensity::StructuredPeak { omega, .. } => 20.0 * omega,
            SpectralDensity::Tabulated(ref t) => *t.omega.last().unwrap(),
        };
        let lo = match *self {
            SpectralDensity::Tabulated(ref t) => t.omega[0],
            _ => 0.0,
        };
        pts.retain(|&p| p >= lo && p <= hi);
        pts.sort_by(f64::total_cmp);
        pts.dedup();
        if tau > 0.0 {
            let max_gap = (2.0 * PI / tau).max((hi - lo) / 200_000.0);
            let mut refined = Vec::with_capacity(pts.len());
            for w in pts.windows(2) {
                refined.push(w[0]);
                let n = ((w[1] - w[0]) / max_gap).ceil() as usize;
                for k in 1..n {
                    refined.push(w[0] + (w[1] - w[0]) * k as f64 / n as f64);
                }
            }
            refined.push(*pts.last().unwrap());
            pts = refined;
        }
        (pts, tail)
    }

    pub(crate) fn integrate<F>(&self, tau: f64, opts: QuadOptions, f: F) -> std::result::Result<Complex64, (f64, f64)>
    where
        F: Fn(f64) -> Complex64 + Sync,
    {
        let (breaks, tail) = self.quad_breaks(tau);
        let r = if tail { integrate_to_infinity(&f, &breaks, opts) } else { integrate_panels(&f, &breaks, opts) };
        r.map(|q| q.value).map_err(|e| (e.value.norm(), e.error))
    }
}

/// Reorganization energy `λ = ∫₀^∞ J(ω)/ω dω`.
pub fn reorganization_energy(sd: &SpectralDensity) -> Result<f64> {
    sd.validate()?;
    if sd.is_zero() {
        return Ok(0.0);
    }
    if let SpectralDensity::Tabulated(t) = sd {
        if t.omega[0] == 0.0 && t.j[0] > 0.0 {
            return Err(Error::Quadrature {
                what: "reorganization energy (J(0) > 0 makes ∫J/ω diverge)".into(),
                estimate: f64::INFINITY,
                error: f64::INFINITY,
            });
        }
    }
    let opts = QuadOptions { rel_tol: 1e-12, ..QuadOptions::default() };
    sd.integrate(0.0, opts, |w| Complex64::new(sd.eval_unchecked(w) / w, 0.0))
        .map(|v| v.re)
        .map_err(|(estimate, error)| Error::Quadrature { what: "reorganization energy".into(), estimate, error })
}

fn check_temperature(kbt: f64) -> Result<()> {
    if !(kbt > 0.0 && kbt.is_finite()) {
        return Err(Error::Domain(format!("temperature k_BT = {kbt} must be positive")));
    }
    Ok(())
}

#[inline]
fn coth_half(w: f64, kbt: f64) -> f64 {
    1.0 / (0.5 * w / kbt).tanh()
}

/// `sin y − y`, accurate for small `y`.
#[inline]
fn sin_minus_arg(y: f64) -> f64 {
    if y.abs() < 0.1 {
        let y2 = y * y;
        -y * y2 / 6.0 * (1.0 - y2 / 20.0 * (1.0 - y2 / 42.0 * (1.0 - y2 / 72.0 * (1.0 - y2 / 110.0))))
    } else {
        y.sin() - y
    }
}

/// Bath correlation function `C(t)`.
pub fn bath_correlation(sd: &SpectralDensity, kbt: f64, t: f64) -> Result<Complex64> {
    sd.validate()?;
    check_temperature(kbt)?;
    if !(t >= 0.0) {
        return Err(Error::Domain(format!("correlation time t = {t} must be non-negative")));
    }
    if sd.is_zero() {
        return Ok(Complex64::new(0.0, 0.0));
    }
    let opts = QuadOptions { rel_tol: 1e-11, ..QuadOptions::default() };
    sd.integrate(t, opts, |w| {
        let j = sd.eval_unchecked(w) / PI;
        let (s, c) = (w * t).sin_cos();
        Complex64::new(j * coth_half(w, kbt) * c, -j * s)
    })
    .map_err(|(estimate, error)| Error::Quadrature {
        what: format!("bath correlation at t = {t}"),
        estimate,
        error,
    })
}

/// Coefficient classes of the discretized influence functional.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EtaClass {
    /// Both points interior (full windows).
    Mid,
    /// Column `j = 0`: the earlier point is the initial time.
    Initial,
    /// Row `i = N`: the later point is the measurement time.
    Terminal,
    /// Row `i = N` and column `j = 0`.
    TerminalInitial,
}

impl EtaClass {
    pub const ALL: [EtaClass; 4] = [EtaClass::Mid, EtaClass::Initial, EtaClass::Terminal, EtaClass::TerminalInitial];

    fn name(self) -> &'static str {
        match self {
            EtaClass::Mid => "mid",
            EtaClass::Initial => "initial",
            EtaClass::Terminal => "terminal",
            EtaClass::TerminalInitial => "terminal-initial",
        }
    }
}

/// Influence coefficients `η_{ij}` for a uniform time grid, truncated beyond
/// lag `dk_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct EtaTable {
    dt: f64,
    dk_max: usize,
    kbt: f64,
    sd_hash: u64,
    mid: Vec<Complex64>,
    initial: Vec<Complex64>,
    terminal: Vec<Complex64>,
    terminal_initial: Vec<Complex64>,
}

const SIDECAR_MAGIC: &[u8; 4] = b"ETA1";

impl EtaTable {
    /// Table of a non-coupling bath.
    pub fn zero(dt: f64, dk_max: usize, kbt: f64) -> Self {
        let z = vec![Complex64::new(0.0, 0.0); dk_max + 1];
        Self {
            dt,
            dk_max,
            kbt,
            sd_hash: SpectralDensity::zero().content_hash(),
            mid: z.clone(),
            initial: z.clone(),
            terminal: z.clone(),
            terminal_initial: z,
        }
    }

    /// Builds a table directly from coefficient arrays (each `dk_max + 1`
    /// long). Intended for tests and synthetic baths.
    pub fn from_parts(
        dt: f64,
        kbt: f64,
        mid: Vec<Complex64>,
        initial: Vec<Complex64>,
        terminal: Vec<Complex64>,
        terminal_initial: Vec<Complex64>,
    ) -> Result<Self> {
        let n = mid.len();
        if n == 0 || initial.len() != n || terminal.len() != n || terminal_initial.len() != n {
            return Err(Error::Dimension("coefficient classes must have equal non-zero length".into()));
        }
        Ok(Self { dt, dk_max: n - 1, kbt, sd_hash: 0, mid, initial, terminal, terminal_initial })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }
    pub fn dk_max(&self) -> usize {
        self.dk_max
    }
    pub fn kbt(&self) -> f64 {
        self.kbt
    }
    pub fn sd_hash(&self) -> u64 {
        self.sd_hash
    }

    pub fn class(&self, class: EtaClass) -> &[Complex64] {
        match class {
            EtaClass::Mid => &self.mid,
            EtaClass::Initial => &self.initial,
            EtaClass::Terminal => &self.terminal,
            EtaClass::TerminalInitial => &self.terminal_initial,
        }
    }

    /// Bulk coefficient at lag `d` (zero beyond `dk_max`).
    pub fn mid(&self, d: usize) -> Complex64 {
        self.mid.get(d).copied().unwrap_or_default()
    }

    fn lookup(&self, class: EtaClass, d: usize) -> Complex64 {
        self.class(class).get(d).copied().unwrap_or_default()
    }

    /// `η_{ij}` for a trajectory whose last point is `last`.
    pub fn coefficient(&self, i: usize, j: usize, last: usize) -> Complex64 {
        assert!(j <= i && i <= last);
        let d = i - j;
        let class = match (i == last && last > 0, j == 0) {
            (true, true) => EtaClass::TerminalInitial,
            (true, false) => EtaClass::Terminal,
            (false, true) => EtaClass::Initial,
            (false, false) => EtaClass::Mid,
        };
        self.lookup(class, d)
    }

    /// Coefficient used while propagating, when point `i` is not (yet)
    /// the measurement point.
    pub fn propagating(&self, i: usize, j: usize) -> Complex64 {
        assert!(j <= i);
        let d = i - j;
        if j == 0 {
            self.lookup(EtaClass::Initial, d)
        } else {
            self.lookup(EtaClass::Mid, d)
        }
    }

    /// Coefficient for row `i` as the measurement point (`i ≥ 1`).
    pub fn terminal(&self, i: usize, j: usize) -> Complex64 {
        assert!(j <= i && i >= 1);
        let d = i - j;
        if j == 0 {
            self.lookup(EtaClass::TerminalInitial, d)
        } else {
            self.lookup(EtaClass::Terminal, d)
        }
    }

    /// First lag at which `|η_mid(d)| / |η_mid(0)|` drops below `fraction`.
    pub fn memory_length(&self, fraction: f64) -> Option<usize> {
        let base = self.mid[0].norm();
        if base == 0.0 {
            return Some(0);
        }
        (1..=self.dk_max).find(|&d| self.mid[d].norm() < fraction * base)
    }

    pub fn write_sidecar<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(SIDECAR_MAGIC)?;
        let dk = u32::try_from(self.dk_max).map_err(|_| Error::Sidecar("dk_max exceeds u32".into()))?;
        w.write_all(&dk.to_le_bytes())?;
        w.write_all(&self.dt.to_le_bytes())?;
        w.write_all(&self.kbt.to_le_bytes())?;
        w.write_all(&self.sd_hash.to_le_bytes())?;
        for class in EtaClass::ALL {
            for z in self.class(class) {
                w.write_all(&z.re.to_le_bytes())?;
                w.write_all(&z.im.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_sidecar<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let mut cur = buf.as_slice();
        let mut take = |n: usize| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(Error::Sidecar("truncated file".into()));
            }
            let (head, rest) = cur.split_at(n);
            cur = rest;
            Ok(head)
        };
        if take(4)? != SIDECAR_MAGIC {
            return Err(Error::Sidecar("bad magic".into()));
        }
        let dk_max = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let dt = f64::from_le_bytes(take(8)?.try_into().unwrap());
        let kbt = f64::from_le_bytes(take(8)?.try_into().unwrap());
        let sd_hash = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let mut classes: Vec<Vec<Complex64>> = Vec::with_capacity(4);
        for _ in 0..4 {
            let mut v = Vec::with_capacity(dk_max + 1);
            for _ in 0..=dk_max {
                let re = f64::from_le_bytes(take(8)?.try_into().unwrap());
                let im = f64::from_le_bytes(take(8)?.try_into().unwrap());
                v.push(Complex64::new(re, im));
            }
            classes.push(v);
        }
        if !take(0)?.is_empty() || !cur.is_empty() {
            return Err(Error::Sidecar("trailing bytes".into()));
        }
        let terminal_initial = classes.pop().unwrap();
        let terminal = classes.pop().unwrap();
        let initial = classes.pop().unwrap();
        let mid = classes.pop().unwrap();
        Ok(Self { dt, dk_max, kbt, sd_hash, mid, initial, terminal, terminal_initial })
    }
}

/// Key under which a table is cached: a hash of the spectral density,
/// temperature, step and memory length.
pub fn eta_cache_key(sd: &SpectralDensity, kbt: f64, dt: f64, dk_max: usize) -> u64 {
    let mut h = FxHasher::default();
    sd.hash_into(&mut h);
    kbt.to_bits().hash(&mut h);
    dt.to_bits().hash(&mut h);
    dk_max.hash(&mut h);
    h.finish()
}

pub fn eta_cache_path(dir: &Path, sd: &SpectralDensity, kbt: f64, dt: f64, dk_max: usize) -> PathBuf {
    dir.join(format!("eta-{:016x}.eta", eta_cache_key(sd, kbt, dt, dk_max)))
}

/// Loads the table from `cache_dir` if a matching sidecar exists, otherwise
/// computes it and writes the sidecar.
pub fn load_or_compute_eta(
    sd: &SpectralDensity,
    kbt: f64,
    dt: f64,
    dk_max: usize,
    cache_dir: Option<&Path>,
) -> Result<EtaTable> {
    let Some(dir) = cache_dir else {
        return compute_eta_table(sd, kbt, dt, dk_max);
    };
    let path = eta_cache_path(dir, sd, kbt, dt, dk_max);
    if let Ok(bytes) = fs::read(&path) {
        if let Ok(table) = EtaTable::read_sidecar(bytes.as_slice()) {
            if table.dk_max == dk_max
                && table.dt.to_bits() == dt.to_bits()
                && table.kbt.to_bits() == kbt.to_bits()
                && table.sd_hash == sd.content_hash()
            {
                return Ok(table);
            }
        }
    }
    let table = compute_eta_table(sd, kbt, dt, dk_max)?;
    fs::create_dir_all(dir)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
        table.write_sidecar(&mut f)?;
        f.flush()?;
    }
    fs::rename(&tmp, &path)?;
    Ok(table)
}

/// Frequency integral `(1/π)∫ J(ω)/ω² · a(ω) · [coth(ω/2T) cos ωτ − i sin ωτ] dω`.
fn windowed_kernel(
    sd: &SpectralDensity,
    kbt: f64,
    tau: f64,
    amp: impl Fn(f64) -> f64 + Sync,
) -> std::result::Result<Complex64, (f64, f64)> {
    let opts = QuadOptions { rel_tol: 1e-12, ..QuadOptions::default() };
    sd.integrate(tau, opts, |w| {
        let k = sd.eval_unchecked(w) / (PI * w * w) * amp(w);
        let (s, c) = (w * tau).sin_cos();
        Complex64::new(k * coth_half(w, kbt) * c, -k * s)
    })
}

/// `G(τ) = ∫₀^τ ds ∫₀^s du C(u)`, the self-interaction of a window of
/// length τ.
fn self_window(sd: &SpectralDensity, kbt: f64, tau: f64) -> std::result::Result<Complex64, (f64, f64)> {
    let opts = QuadOptions { rel_tol: 1e-12, ..QuadOptions::default() };
    sd.integrate(tau, opts, |w| {
        let k = sd.eval_unchecked(w) / (PI * w * w);
        let y = w * tau;
        let s = (0.5 * y).sin();
        Complex64::new(k * coth_half(w, kbt) * 2.0 * s * s, k * sin_minus_arg(y))
    })
}

fn eta_entry(sd: &SpectralDensity, kbt: f64, dt: f64, class: EtaClass, d: usize) -> Result<Complex64> {
    let r = if d == 0 {
        let len = if class == EtaClass::Mid { dt } else { 0.5 * dt };
        self_window(sd, kbt, len)
    } else {
        let df = d as f64;
        match class {
            EtaClass::Mid => windowed_kernel(sd, kbt, df * dt, |w| {
                let s = (0.5 * w * dt).sin();
                4.0 * s * s
            }),
            EtaClass::Initial | EtaClass::Terminal => {
                windowed_kernel(sd, kbt, (df - 0.25) * dt, |w| 4.0 * (0.5 * w * dt).sin() * (0.25 * w * dt).sin())
            }
            EtaClass::TerminalInitial => windowed_kernel(sd, kbt, (df - 0.5) * dt, |w| {
                let s = (0.25 * w * dt).sin();
                4.0 * s * s
            }),
        }
    };
    r.map_err(|_| Error::EtaLag { lag: d, class: class.name() })
}

/// Computes all coefficient classes for lags `0..=dk_max`.
pub fn compute_eta_table(sd: &SpectralDensity, kbt: f64, dt: f64, dk_max: usize) -> Result<EtaTable> {
    sd.validate()?;
    check_temperature(kbt)?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Domain(format!("time step dt = {dt} must be positive")));
    }
    if dk_max < 1 {
        return Err(Error::Domain("memory length dk_max must be at least 1".into()));
    }
    if sd.is_zero() {
        let mut t = EtaTable::zero(dt, dk_max, kbt);
        t.sd_hash = sd.content_hash();
        return Ok(t);
    }
    let jobs: Vec<(EtaClass, usize)> = EtaClass::ALL.iter().flat_map(|&c| (0..=dk_max).map(move |d| (c, d))).collect();
    let values = jobs
        .par_iter()
        .map(|&(c, d)| {
            // Terminal coefficients coincide with the initial ones by the
            // window symmetry; they are computed separately anyway so the
            // table does not rely on that.
            eta_entry(sd, kbt, dt, c, d)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = dk_max + 1;
    let mut chunks = values.chunks_exact(n).map(|c| c.to_vec());
    Ok(EtaTable {
        dt,
        dk_max,
        kbt,
        sd_hash: sd.content_hash(),
        mid: chunks.next().unwrap(),
        initial: chunks.next().unwrap(),
        terminal: chunks.next().unwrap(),
        terminal_initial: chunks.next().unwrap(),
    })
}

/// Multiplicative influence factor contributed by the newest point of
/// `window` (coordinate pairs `(q⁺, q⁻)`, oldest first, newest last; the
/// newest point has time index `i`), using propagation coefficients.
pub fn influence_increment(eta: &EtaTable, window: &[(f64, f64)], i: usize) -> Complex64 {
    row_factor(window, i, |j| eta.propagating(i, j))
}

/// Same as [`influence_increment`] but with the newest point treated as the
/// measurement point.
pub fn terminal_increment(eta: &EtaTable, window: &[(f64, f64)], i: usize) -> Complex64 {
    if i == 0 {
        return influence_increment(eta, window, 0);
    }
    row_factor(window, i, |j| eta.terminal(i, j))
}

fn row_factor(window: &[(f64, f64)], i: usize, coeff: impl Fn(usize) -> Complex64) -> Complex64 {
    let Some(&(qp, qm)) = window.last() else {
        return Complex64::new(1.0, 0.0);
    };
    assert!(window.len() <= i + 1, "window longer than the elapsed time");
    let dq = qp - qm;
    if dq == 0.0 {
        return Complex64::new(1.0, 0.0);
    }
    let first = i + 1 - window.len();
    let mut s = Complex64::new(0.0, 0.0);
    for (k, &(jp, jm)) in window.iter().enumerate() {
        let eta = coeff(first + k);
        s += eta * jp - eta.conj() * jm;
    }
    (-dq * s).exp()
}
