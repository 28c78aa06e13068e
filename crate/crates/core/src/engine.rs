//! Single-worker iterative propagation: initialization, pre-merging,
//! expansion by one time step, measurement and filtering.

use std::fmt::Write as _;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::bath::{EtaClass, EtaTable};
use crate::error::{Error, Result};
use crate::pathstore::{Configuration, Mask, OmegaStore, MAX_STATES};
use crate::system::{hermitian_eigenvalues, hermiticity_error, CMatrix, SystemModel};

/// Default cap on the number of configurations produced by one expansion.
pub const DEFAULT_PATH_CAP: usize = 1 << 32;

/// Parents per parallel expansion task.
const EXPAND_CHUNK: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Merge on the reduced mask before each expansion.
    Premerge,
    /// Expand everything, then merge on the full mask.
    PostmergeReference,
    /// No coarse graining: all lags resolved and no filtering.
    FullQuapi,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Premerge => "premerge",
            Mode::PostmergeReference => "postmerge_reference",
            Mode::FullQuapi => "full_quapi",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "premerge" => Ok(Mode::Premerge),
            "postmerge_reference" | "postmerge" => Ok(Mode::PostmergeReference),
            "full_quapi" | "full" => Ok(Mode::FullQuapi),
            other => Err(Error::Spec(format!("unknown mode '{other}'"))),
        }
    }
}

/// Which amplitude of a merged configuration drives its children.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Propagated {
    /// The accumulated amplitude of every merged path.
    #[default]
    Sum,
    /// The representative path's own amplitude.
    Weight,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub system: SystemModel,
    pub eta: EtaTable,
    pub rho0: CMatrix,
    pub n_steps: usize,
    pub mask: Mask,
    pub theta: f64,
    pub mode: Mode,
    pub propagated: Propagated,
    pub path_cap: usize,
}

impl RunSpec {
    pub fn new(
        system: SystemModel,
        eta: EtaTable,
        rho0: CMatrix,
        n_steps: usize,
        mask: Mask,
        theta: f64,
        mode: Mode,
    ) -> Result<Self> {
        let spec = Self {
            system,
            eta,
            rho0,
            n_steps,
            mask,
            theta,
            mode,
            propagated: Propagated::Sum,
            path_cap: DEFAULT_PATH_CAP,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.system.states();
        if m > MAX_STATES {
            return Err(Error::Dimension(format!("{m} states exceed the supported {MAX_STATES}")));
        }
        if self.rho0.nrows() != m || self.rho0.ncols() != m {
            return Err(Error::Dimension(format!(
                "initial density matrix is {}×{} for a {m}-state system",
                self.rho0.nrows(),
                self.rho0.ncols()
            )));
        }
        let dt_mismatch = (self.system.dt() - self.eta.dt()).abs() > 1e-12 * self.system.dt();
        if dt_mismatch {
            return Err(Error::Spec(format!(
                "system dt = {} differs from coefficient table dt = {}",
                self.system.dt(),
                self.eta.dt()
            )));
        }
        let tr = self.rho0.trace();
        if (tr - Complex64::new(1.0, 0.0)).norm() > 1e-12 {
            return Err(Error::Spec(format!("initial density matrix has trace {tr}")));
        }
        if hermiticity_error(&self.rho0) > 1e-10 {
            return Err(Error::Spec("initial density matrix is not Hermitian".into()));
        }
        let lowest = hermitian_eigenvalues(&self.rho0)?.first().copied().unwrap_or(0.0);
        if lowest < -1e-10 {
            return Err(Error::Spec(format!("initial density matrix has negative eigenvalue {lowest:e}")));
        }
        self.mask.validate(self.eta.dk_max())?;
        if !(self.theta >= 0.0 && self.theta.is_finite()) {
            return Err(Error::Spec(format!("filter threshold θ = {} must be non-negative", self.theta)));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.system.dt()
    }

    pub fn states(&self) -> usize {
        self.system.states()
    }

    /// Mask actually used by the mode.
    pub fn effective_mask(&self) -> Mask {
        match self.mode {
            Mode::FullQuapi => Mask::full(self.eta.dk_max()),
            _ => self.mask.clone(),
        }
    }

    /// Threshold actually used by the mode.
    pub fn effective_theta(&self) -> f64 {
        match self.mode {
            Mode::FullQuapi => 0.0,
            _ => self.theta,
        }
    }
}

/// Propagation kernel: dense copies of the propagators and coefficient
/// classes, arranged for the inner loops.
#[derive(Debug, Clone)]
pub struct Engine {
    spec: RunSpec,
    m: usize,
    q: Vec<f64>,
    uf: Vec<Complex64>,
    ub: Vec<Complex64>,
    eta_mid: Vec<Complex64>,
    eta_init: Vec<Complex64>,
    corr_mid: Vec<Complex64>,
    corr_init: Vec<Complex64>,
    max_len: usize,
    // Per endpoint pair: index into `dq_values`, or `None` for Δq = 0.
    pair_class: Vec<Option<usize>>,
    dq_values: Vec<f64>,
    // exp(−Δq (η₀ q⁺ − η₀* q⁻)) for the new point's self term, and the
    // same with the measurement correction of the self term.
    pair_self: Vec<Complex64>,
    pair_meas: Vec<Complex64>,
    mask: Mask,
    reduced: Mask,
}

impl Engine {
    pub fn new(spec: RunSpec) -> Result<Self> {
        spec.validate()?;
        let m = spec.states();
        let q = spec.system.coordinates().to_vec();
        let mut uf = Vec::with_capacity(m * m);
        let mut ub = Vec::with_capacity(m * m);
        for r in 0..m {
            for c in 0..m {
                uf.push(spec.system.forward()[(r, c)]);
                ub.push(spec.system.backward()[(r, c)]);
            }
        }
        let eta = &spec.eta;
        let eta_mid = eta.class(EtaClass::Mid).to_vec();
        let eta_init = eta.class(EtaClass::Initial).to_vec();
        let corr_mid: Vec<Complex64> = eta.class(EtaClass::Terminal).iter().zip(&eta_mid).map(|(t, p)| t - p).collect();
        let corr_init: Vec<Complex64> =
            eta.class(EtaClass::TerminalInitial).iter().zip(&eta_init).map(|(t, p)| t - p).collect();
        let mut dq_values: Vec<f64> = Vec::new();
        let mut pair_class = Vec::with_capacity(m * m);
        let mut pair_self = Vec::with_capacity(m * m);
        let mut pair_meas = Vec::with_capacity(m * m);
        let eta0 = eta_mid[0];
        let corr0 = corr_mid[0];
        for a in 0..m {
            for b in 0..m {
                let dq = q[a] - q[b];
                if dq == 0.0 {
                    pair_class.push(None);
                    pair_self.push(Complex64::new(1.0, 0.0));
                    pair_meas.push(Complex64::new(1.0, 0.0));
                    continue;
                }
                let idx = match dq_values.iter().position(|&v| v == dq) {
                    Some(i) => i,
                    None => {
                        dq_values.push(dq);
                        dq_values.len() - 1
                    }
                };
                pair_class.push(Some(idx));
                pair_self.push((-dq * (eta0 * q[a] - eta0.conj() * q[b])).exp());
                pair_meas.push((-dq * (corr0 * q[a] - corr0.conj() * q[b])).exp());
            }
        }
        let mask = spec.effective_mask();
        let reduced = mask.reduce()?;
        Ok(Self {
            max_len: eta.dk_max() + 1,
            spec,
            m,
            q,
            uf,
            ub,
            eta_mid,
            eta_init,
            corr_mid,
            corr_init,
            pair_class,
            dq_values,
            pair_self,
            pair_meas,
            mask,
            reduced,
        })
    }

    pub fn spec(&self) -> &RunSpec {
        &self.spec
    }

    pub fn states(&self) -> usize {
        self.m
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn reduced_mask(&self) -> &Mask {
        &self.reduced
    }

    /// One configuration per nonzero entry of ρ0, carrying the self factor
    /// of the initial point.
    pub fn initialize(&self) -> Result<OmegaStore> {
        let rho0 = &self.spec.rho0;
        let eta0 = self.eta_init[0];
        let mut configs = Vec::new();
        for a in 0..self.m {
            for b in 0..self.m {
                let r = rho0[(a, b)];
                if r == Complex64::new(0.0, 0.0) {
                    continue;
                }
                let dq = self.q[a] - self.q[b];
                let f = if dq == 0.0 {
                    Complex64::new(1.0, 0.0)
                } else {
                    (-dq * (eta0 * self.q[a] - eta0.conj() * self.q[b])).exp()
                };
                configs.push(Configuration::start(a, b, r * f));
            }
        }
        if configs.is_empty() {
            return Err(Error::Spec("initial density matrix is zero".into()));
        }
        Ok(OmegaStore::from_configs(self.m, 0, configs))
    }

    /// Merge on the reduced mask (pre-merging modes only).
    pub fn premerge(&self, store: OmegaStore) -> OmegaStore {
        match self.spec.mode {
            Mode::Premerge | Mode::FullQuapi => store.premerge(&self.reduced),
            Mode::PostmergeReference => store,
        }
    }

    /// Merge on the full mask after expansion (post-merging mode only).
    pub fn postmerge(&self, store: OmegaStore) -> OmegaStore {
        match self.spec.mode {
            Mode::PostmergeReference => store.premerge(&self.mask).into_sequential(),
            _ => store,
        }
    }

    /// Checks that expanding `parents` configurations stays below the cap.
    pub fn check_capacity(&self, parents: usize) -> Result<()> {
        let children = parents.saturating_mul(self.m * self.m);
        if children > self.spec.path_cap {
            return Err(Error::PathOverflow { count: children, cap: self.spec.path_cap });
        }
        Ok(())
    }

    /// Extends every configuration of a store at step `t − 1` by all `M²`
    /// endpoint pairs.
    pub fn expand(&self, store: OmegaStore, t: usize) -> Result<OmegaStore> {
        if t == 0 || store.step() + 1 != t {
            return Err(Error::StepMismatch { expected: t.saturating_sub(1), found: store.step() });
        }
        self.check_capacity(store.len())?;
        let parents = store.into_configs();
        let m2 = self.m * self.m;
        let chunks: Vec<Vec<Configuration>> = parents
            .par_chunks(EXPAND_CHUNK)
            .map(|chunk| {
                let mut out = Vec::with_capacity(chunk.len() * m2);
                let mut scratch = vec![Complex64::new(0.0, 0.0); self.dq_values.len()];
                for p in chunk {
                    self.expand_one(p, t, &mut scratch, &mut out);
                }
                out
            })
            .collect();
        drop(parents);
        let total = chunks.iter().map(Vec::len).sum();
        let mut children = Vec::with_capacity(total);
        for mut c in chunks {
            children.append(&mut c);
        }
        Ok(OmegaStore::from_configs(self.m, t, children))
    }

    fn expand_one(&self, parent: &Configuration, t: usize, scratch: &mut [Complex64], out: &mut Vec<Configuration>) {
        self.visit_children(parent, t, scratch, None, |a, b, amp, _| {
            out.push(parent.extended(a, b, self.max_len, amp));
        });
    }

    /// Calls `f(a, b, amplitude, measured)` for every child of `parent`,
    /// where `measured` is the amplitude with the measurement correction
    /// applied (only computed when `meas` scratch space is given).
    #[inline]
    fn visit_children(
        &self,
        parent: &Configuration,
        t: usize,
        scratch: &mut [Complex64],
        mut meas: Option<&mut [Complex64]>,
        mut f: impl FnMut(usize, usize, Complex64, Complex64),
    ) {
        let len = parent.len();
        let dk_max = self.max_len - 1;
        let mut s = Complex64::new(0.0, 0.0);
        let mut c = Complex64::new(0.0, 0.0);
        for k in len.saturating_sub(dk_max)..len {
            let d = len - k;
            let initial = t == d;
            let (f, b) = parent.slot(k);
            let (qf, qb) = (self.q[f], self.q[b]);
            let eta = if initial { self.eta_init[d] } else { self.eta_mid[d] };
            s += eta * qf - eta.conj() * qb;
            if meas.is_some() {
                let e = if initial { self.corr_init[d] } else { self.corr_mid[d] };
                c += e * qf - e.conj() * qb;
            }
        }
        for (e, &dq) in scratch.iter_mut().zip(&self.dq_values) {
            *e = (-dq * s).exp();
        }
        if let Some(mm) = meas.as_deref_mut() {
            for (e, &dq) in mm.iter_mut().zip(&self.dq_values) {
                *e = (-dq * c).exp();
            }
        }
        let source = match self.spec.propagated {
            Propagated::Sum => parent.sum,
            Propagated::Weight => parent.weight,
        };
        let (pf, pb) = parent.newest();
        let m = self.m;
        for a in 0..m {
            let fa = source * self.uf[a * m + pf];
            for b in 0..m {
                let pair = a * m + b;
                let mut amp = fa * self.ub[pb * m + b];
                let mut measured = amp;
                if let Some(cls) = self.pair_class[pair] {
                    amp *= scratch[cls] * self.pair_self[pair];
                    measured = match meas.as_deref() {
                        Some(mm) => amp * mm[cls] * self.pair_meas[pair],
                        None => amp,
                    };
                }
                f(a, b, amp, measured);
            }
        }
    }

    /// First pass over the children of `parents` (at step `t − 1`) without
    /// storing them: the measured density matrix at `t` as row-major
    /// entries, and the largest child `|amplitude|`.
    pub fn scan(&self, parents: &[Configuration], t: usize) -> (Vec<Complex64>, f64) {
        let m = self.m;
        let k = self.dq_values.len();
        let part = |chunk: &[Configuration]| {
            let mut rho = vec![Complex64::new(0.0, 0.0); m * m];
            let mut max = 0.0f64;
            let mut s1 = vec![Complex64::new(0.0, 0.0); k];
            let mut s2 = vec![Complex64::new(0.0, 0.0); k];
            for p in chunk {
                self.visit_children(p, t, &mut s1, Some(&mut s2), |a, b, amp, measured| {
                    rho[a * m + b] += measured;
                    max = max.max(amp.norm());
                });
            }
            (rho, max)
        };
        if parents.len() < 4 * EXPAND_CHUNK {
            return part(parents);
        }
        let parts: Vec<(Vec<Complex64>, f64)> = parents.par_chunks(EXPAND_CHUNK).map(part).collect();
        let mut rho = vec![Complex64::new(0.0, 0.0); m * m];
        let mut max = 0.0f64;
        for (r, x) in parts {
            for (acc, v) in rho.iter_mut().zip(r) {
                *acc += v;
            }
            max = max.max(x);
        }
        (rho, max)
    }

    /// Second pass: the children of `parents` whose `|amplitude|` is at
    /// least `cut`, as a store at step `t`, and the total of those dropped.
    pub fn materialize(&self, parents: Vec<Configuration>, t: usize, cut: f64) -> (OmegaStore, Complex64) {
        let k = self.dq_values.len();
        let part = |chunk: &[Configuration]| {
            let mut out = Vec::with_capacity(if cut > 0.0 { chunk.len() } else { chunk.len() * self.m * self.m });
            let mut lost = Complex64::new(0.0, 0.0);
            let mut s1 = vec![Complex64::new(0.0, 0.0); k];
            for p in chunk {
                self.visit_children(p, t, &mut s1, None, |a, b, amp, _| {
                    // Exact zeros never contribute again; dropping them is lossless.
                    if amp.norm() >= cut && amp != Complex64::new(0.0, 0.0) {
                        out.push(p.extended(a, b, self.max_len, amp));
                    } else {
                        lost += amp;
                    }
                });
            }
            (out, lost)
        };
        let parts: Vec<(Vec<Configuration>, Complex64)> = parents.par_chunks(EXPAND_CHUNK).map(part).collect();
        drop(parents);
        let total = parts.iter().map(|p| p.0.len()).sum();
        let mut children = Vec::with_capacity(total);
        let mut lost = Complex64::new(0.0, 0.0);
        for (mut c, l) in parts {
            children.append(&mut c);
            lost += l;
        }
        (OmegaStore::from_configs(self.m, t, children), lost)
    }

    /// Correction turning the stored amplitude of a configuration whose
    /// newest point is at step `t` into its measured amplitude.
    pub fn measurement_factor(&self, cfg: &Configuration, t: usize) -> Complex64 {
        let (a, b) = cfg.newest();
        let dq = self.q[a] - self.q[b];
        if dq == 0.0 {
            return Complex64::new(1.0, 0.0);
        }
        let mut s = Complex64::new(0.0, 0.0);
        if t == 0 {
            // A measurement at the initial time sees no bath at all.
            let e = -self.eta_init[0];
            s = e * self.q[a] - e.conj() * self.q[b];
        } else {
            let len = cfg.len();
            for k in 0..len {
                let d = len - 1 - k;
                let e = if d == t { self.corr_init[d] } else { self.corr_mid[d] };
                let (f, bb) = cfg.slot(k);
                s += e * self.q[f] - e.conj() * self.q[bb];
            }
        }
        (-dq * s).exp()
    }

    /// Reduced density matrix at the store's step, with the measurement
    /// correction applied.
    pub fn measure(&self, store: &OmegaStore) -> CMatrix {
        let t = store.step();
        let m = self.m;
        let partial = |cfgs: &[Configuration]| {
            let mut acc = vec![Complex64::new(0.0, 0.0); m * m];
            for c in cfgs {
                let (a, b) = c.newest();
                acc[a * m + b] += c.sum * self.measurement_factor(c, t);
            }
            acc
        };
        let acc = if store.len() >= 4 * EXPAND_CHUNK {
            let parts: Vec<Vec<Complex64>> = store.configs().par_chunks(EXPAND_CHUNK).map(partial).collect();
            let mut acc = vec![Complex64::new(0.0, 0.0); m * m];
            for p in parts {
                for (x, y) in acc.iter_mut().zip(p) {
                    *x += y;
                }
            }
            acc
        } else {
            partial(store.configs())
        };
        CMatrix::from_row_slice(m, m, &acc)
    }

    /// Pre-merge, expand and filter: one full step from `t − 1` to `t`.
    pub fn propagate_step(&self, store: OmegaStore, t: usize) -> Result<OmegaStore> {
        let store = self.premerge(store);
        let store = self.expand(store, t)?;
        let mut store = self.postmerge(store);
        store.filter(self.spec.effective_theta());
        Ok(store)
    }

    /// Full trajectory over `n_steps`.
    pub fn run(&self) -> Result<Trajectory> {
        let mut traj = Trajectory::new(self.m);
        let mut store = self.initialize()?;
        traj.push(0.0, self.spec.rho0.clone(), store.len());
        let theta = self.spec.effective_theta();
        for t in 1..=self.spec.n_steps {
            let rho;
            if self.spec.mode == Mode::PostmergeReference {
                let expanded = self.expand(store, t)?;
                rho = self.measure(&expanded);
                store = self.postmerge(expanded);
                store.filter(theta);
            } else {
                let parents = self.premerge(store).into_configs();
                self.check_capacity(parents.len())?;
                let (entries, max) = self.scan(&parents, t);
                rho = CMatrix::from_row_slice(self.m, self.m, &entries);
                store = self.materialize(parents, t, theta * max).0;
            }
            traj.push(t as f64 * self.spec.dt(), rho, store.len());
        }
        Ok(traj)
    }
}

/// Runs `spec` on a single worker.
pub fn run(spec: RunSpec) -> Result<Trajectory> {
    Engine::new(spec)?.run()
}

/// Plain endpoint sum `ρ[a,b] = Σ sum` over configurations ending in
/// `(a, b)`, without measurement correction.
pub fn extract_density_matrix(store: &OmegaStore) -> CMatrix {
    let m = store.states();
    let mut rho = CMatrix::zeros(m, m);
    for c in store.configs() {
        let (a, b) = c.newest();
        rho[(a, b)] += c.sum;
    }
    rho
}

/// Time series of reduced density matrices and run telemetry.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: usize,
    pub times: Vec<f64>,
    pub rho: Vec<CMatrix>,
    pub trace_drift: Vec<f64>,
    pub path_counts: Vec<usize>,
}

impl Trajectory {
    pub fn new(states: usize) -> Self {
        Self { states, times: Vec::new(), rho: Vec::new(), trace_drift: Vec::new(), path_counts: Vec::new() }
    }

    pub fn push(&mut self, t: f64, rho: CMatrix, paths: usize) {
        self.trace_drift.push(1.0 - rho.trace().norm());
        self.times.push(t);
        self.rho.push(rho);
        self.path_counts.push(paths);
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// `Σ_i d_i Re ρ_ii(t)` for a diagonal observable `d`.
    pub fn expectation(&self, diagonal: &[f64]) -> Vec<f64> {
        self.rho.iter().map(|r| diagonal.iter().enumerate().map(|(i, d)| d * r[(i, i)].re).sum()).collect()
    }

    pub fn population(&self, state: usize) -> Vec<f64> {
        self.rho.iter().map(|r| r[(state, state)].re).collect()
    }

    /// Largest elementwise deviation between two trajectories.
    pub fn max_deviation(&self, other: &Trajectory) -> f64 {
        self.rho
            .iter()
            .zip(&other.rho)
            .map(|(a, b)| (a - b).iter().map(|z| z.norm()).fold(0.0, f64::max))
            .fold(0.0, f64::max)
    }

    fn column_names(&self) -> Vec<String> {
        let m = self.states;
        let idx = |a: usize, b: usize| if m <= 10 { format!("{a}{b}") } else { format!("{a}_{b}") };
        let mut cols = vec!["t".to_string()];
        for part in ["re", "im"] {
            for a in 0..m {
                for b in 0..m {
                    cols.push(format!("{part}_rho_{}", idx(a, b)));
                }
            }
        }
        cols.push("trace_drift".into());
        cols.push("n_paths".into());
        cols
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.column_names().join(",");
        out.push('\n');
        for (k, rho) in self.rho.iter().enumerate() {
            let _ = write!(out, "{:e}", self.times[k]);
            for z in rho.transpose().iter() {
                let _ = write!(out, ",{:e}", z.re);
            }
            for z in rho.transpose().iter() {
                let _ = write!(out, ",{:e}", z.im);
            }
            let _ = writeln!(out, ",{:e},{}", self.trace_drift[k], self.path_counts[k]);
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| Error::Parse("empty trajectory file".into()))?;
        let ncols = header.split(',').count();
        if ncols < 5 || (ncols - 3) % 2 != 0 {
            return Err(Error::Parse(format!("unexpected trajectory header with {ncols} columns")));
        }
        let m2 = (ncols - 3) / 2;
        let m = (m2 as f64).sqrt().round() as usize;
        if m * m != m2 {
            return Err(Error::Parse(format!("{m2} matrix columns is not a square count")));
        }
        let mut traj = Trajectory::new(m);
        if header.split(',').map(str::trim).collect::<Vec<_>>() != traj.column_names() {
            return Err(Error::Parse("trajectory header does not match the expected columns".into()));
        }
        for (ln, line) in lines {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != ncols {
                return Err(Error::Parse(format!("line {}: expected {ncols} fields, found {}", ln + 1, fields.len())));
            }
            let num =
                |s: &str| s.parse::<f64>().map_err(|_| Error::Parse(format!("line {}: '{s}' is not a number", ln + 1)));
            let t = num(fields[0])?;
            let mut data = Vec::with_capacity(m2);
            for k in 0..m2 {
                data.push(Complex64::new(num(fields[1 + k])?, num(fields[1 + m2 + k])?));
            }
            let drift = num(fields[1 + 2 * m2])?;
            let paths = fields[2 + 2 * m2]
                .parse::<usize>()
                .map_err(|_| Error::Parse(format!("line {}: bad path count", ln + 1)))?;
            traj.times.push(t);
            traj.rho.push(CMatrix::from_row_slice(m, m, &data));
            traj.trace_drift.push(drift);
            traj.path_counts.push(paths);
        }
        Ok(traj)
    }
}

/// `S(ω_k) = Re{DFT[P](ω_k)} / (2π N_t)` on the non-negative DFT
/// frequencies `ω_k = 2πk / (N_t dt)`.
pub fn spectrum(p: &[f64], dt: f64) -> Result<Vec<(f64, f64)>> {
    spectrum_padded(p, dt, 1)
}

/// As [`spectrum`], with the series zero-padded to `pad · N_t` samples so
/// that the transform is sampled on a finer frequency grid.
pub fn spectrum_padded(p: &[f64], dt: f64, pad: usize) -> Result<Vec<(f64, f64)>> {
    if p.len() < 2 {
        return Err(Error::Domain("spectrum needs at least two samples".into()));
    }
    if !(dt > 0.0) || pad == 0 {
        return Err(Error::Domain("spectrum needs dt > 0 and a padding factor ≥ 1".into()));
    }
    let n_t = p.len();
    let n = n_t * pad;
    let mut buf: Vec<Complex64> = p.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    buf.resize(n, Complex64::new(0.0, 0.0));
    rustfft::FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let norm = 1.0 / (2.0 * std::f64::consts::PI * n_t as f64);
    let dw = 2.0 * std::f64::consts::PI / (n as f64 * dt);
    Ok((0..=n / 2).map(|k| (k as f64 * dw, buf[k].re * norm)).collect())
}
