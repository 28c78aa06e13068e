//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Pass criterion numbers as arguments to
//! run a subset, e.g. `cargo test -p macgic-core --test acceptance -- 1 10`.

use std::f64::consts::PI;
use std::sync::Arc;
use std::time::Instant;

use gauss_quad::legendre::GaussLegendre;
use num_complex::Complex64;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use macgic::bath::compute_eta_table;
use macgic::distributed::run_threads;
use macgic::oracle::{analytic_dephasing, direct_path_sum};
use macgic::system::{build_reaction_coordinate_model, hermitian_eigenvalues, spin_boson_hamiltonian, unitary_exp};
use macgic::*;

struct Outcome {
    pass: bool,
    detail: String,
}

type Check = fn() -> Result<Outcome>;

// Spin-boson benchmark: H = (Δ/2)σx, q = ±1/2, Ohmic γ = 1/16, ω_c = 10, k_BT = 0.2.
const GAMMA: f64 = 1.0 / 16.0;
const CUTOFF: f64 = 10.0;
const KBT: f64 = 0.2;
const DT: f64 = 0.3;
const SIGMA_Z: [f64; 2] = [1.0, -1.0];

fn up() -> CMatrix {
    let mut r = CMatrix::zeros(2, 2);
    r[(0, 0)] = Complex64::new(1.0, 0.0);
    r
}

fn benchmark(dk_max: usize, mask: Mask, theta: f64, mode: Mode, n_steps: usize) -> Result<RunSpec> {
    let sd = SpectralDensity::ohmic(GAMMA, CUTOFF);
    let eta = compute_eta_table(&sd, KBT, DT, dk_max)?;
    let sys = SystemModel::new(spin_boson_hamiltonian(1.0, 0.0), vec![0.5, -0.5], &sd, DT)?;
    let mut spec = RunSpec::new(sys, eta, up(), n_steps, mask, theta, mode)?;
    spec.path_cap = 1 << 26;
    Ok(spec)
}

// t_max = 35 at dt = 0.3.
const BENCH_STEPS: usize = 117;

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn c1_oracle() -> Result<Outcome> {
    let start = Instant::now();
    let n = 6;
    let spec = benchmark(6, Mask::dense(6, 6)?, 0.0, Mode::Premerge, n)?;
    let want = direct_path_sum(&spec.system, &spec.eta, &spec.rho0, n)?;
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for mode in [Mode::Premerge, Mode::PostmergeReference, Mode::FullQuapi] {
        let mut s = spec.clone();
        s.mode = mode;
        let got = engine::run(s)?;
        let dev = (&got.rho[n] - &want).iter().map(|z| z.norm()).fold(0.0, f64::max);
        worst = worst.max(dev);
        parts.push(format!("{}={dev:.1e}", mode.name()));
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(Outcome { pass: worst < 1e-12 && secs < 60.0, detail: format!("{} ({secs:.1} s)", parts.join(" ")) })
}

fn c2_trace() -> Result<Outcome> {
    let tr = engine::run(benchmark(8, Mask::dense(6, 8)?, 0.0, Mode::Premerge, 100)?)?;
    let worst = tr.trace_drift.iter().fold(0.0f64, |a, d| a.max(d.abs()));
    Ok(Outcome { pass: tr.len() == 101 && worst < 1e-10, detail: format!("max |Tr ρ − 1| = {worst:.1e}") })
}

fn c3_bath_free() -> Result<Outcome> {
    let dt = 0.1;
    let h = spin_boson_hamiltonian(1.0, 0.3);
    let sys = SystemModel::bare(h.clone(), vec![0.5, -0.5], dt)?;
    let mut rho0 = CMatrix::zeros(2, 2);
    rho0[(0, 0)] = Complex64::new(0.8, 0.0);
    rho0[(1, 1)] = Complex64::new(0.2, 0.0);
    rho0[(0, 1)] = Complex64::new(0.1, 0.3);
    rho0[(1, 0)] = Complex64::new(0.1, -0.3);
    let n = 200;
    let mut worst = 0.0f64;
    for mode in [Mode::Premerge, Mode::PostmergeReference, Mode::FullQuapi] {
        let spec = RunSpec::new(sys.clone(), EtaTable::zero(dt, 4, 1.0), rho0.clone(), n, Mask::full(4), 0.0, mode)?;
        let tr = engine::run(spec)?;
        for (k, rho) in tr.rho.iter().enumerate() {
            let u = unitary_exp(&h, k as f64 * dt)?;
            let want = &u * &rho0 * u.adjoint();
            worst = worst.max((rho - want).iter().map(|z| z.norm()).fold(0.0, f64::max));
        }
    }
    Ok(Outcome { pass: worst < 1e-10, detail: format!("max deviation from exp(−iHt) over {n} steps = {worst:.1e}") })
}

fn dephasing_error(n: usize) -> Result<f64> {
    let t = 10.0;
    let dt = t / n as f64;
    let sd = SpectralDensity::ohmic(GAMMA, CUTOFF);
    let mut h = CMatrix::zeros(2, 2);
    h[(0, 0)] = Complex64::new(0.5, 0.0);
    h[(1, 1)] = Complex64::new(-0.5, 0.0);
    let sys = SystemModel::new(h, vec![0.5, -0.5], &sd, dt)?;
    let eta = compute_eta_table(&sd, KBT, dt, n)?;
    let rho0 = CMatrix::from_element(2, 2, Complex64::new(0.5, 0.0));
    let tr = engine::run(RunSpec::new(sys, eta, rho0, n, Mask::full(n), 0.0, Mode::FullQuapi)?)?;
    let got = tr.rho[n][(0, 1)].norm();
    let want = 0.5 * analytic_dephasing(&sd, KBT, 0.5, -0.5, 1.0, t)?.norm();
    Ok((got - want).abs())
}

fn c4_dephasing_order() -> Result<Outcome> {
    let coarse = dephasing_error(20)?;
    let fine = dephasing_error(40)?;
    let ratio = coarse / fine;
    Ok(Outcome {
        pass: ratio >= 3.5,
        detail: format!("err(dt=0.5) = {coarse:.2e}, err(dt=0.25) = {fine:.2e}, ratio = {ratio:.2}"),
    })
}

fn c5_pre_vs_post() -> Result<Outcome> {
    let pre = engine::run(benchmark(8, Mask::dense(6, 8)?, 1e-8, Mode::Premerge, BENCH_STEPS)?)?;
    let post = engine::run(benchmark(8, Mask::dense(6, 8)?, 1e-8, Mode::PostmergeReference, BENCH_STEPS)?)?;
    let dev = max_abs_diff(&pre.expectation(&SIGMA_Z), &post.expectation(&SIGMA_Z));
    Ok(Outcome { pass: dev < 0.002, detail: format!("max |ΔP| = {dev:.2e}") })
}

fn c6_self_convergence() -> Result<Outcome> {
    let mut p = Vec::new();
    for eff in [6, 8, 10] {
        p.push(
            engine::run(benchmark(10, Mask::dense(eff, 10)?, 0.0, Mode::Premerge, BENCH_STEPS)?)?.expectation(&SIGMA_Z),
        );
    }
    let d6 = max_abs_diff(&p[0], &p[2]);
    let d8 = max_abs_diff(&p[1], &p[2]);
    Ok(Outcome { pass: d6 > d8 && d8 < 0.01, detail: format!("|P6 − P10| = {d6:.2e}, |P8 − P10| = {d8:.2e}") })
}

fn c7_workers() -> Result<Outcome> {
    let engine = Arc::new(Engine::new(benchmark(8, Mask::dense(6, 8)?, 1e-8, Mode::Premerge, BENCH_STEPS)?)?);
    let serial = run_threads(engine.clone(), 1, RunOptions { check_keys: true })?;
    let mut dev = 0.0f64;
    let mut balanced = true;
    let mut duplicates = serial.duplicate_keys;
    for n in [2, 4] {
        let rep = run_threads(engine.clone(), n, RunOptions { check_keys: true })?;
        dev = dev.max(rep.trajectory.max_deviation(&serial.trajectory));
        duplicates += rep.duplicate_keys;
        for counts in &rep.worker_counts {
            let avg = counts.iter().sum::<usize>() as f64 / n as f64;
            balanced &= counts.iter().all(|&c| (c as f64 - avg).abs() <= 1.0);
        }
    }
    Ok(Outcome {
        pass: dev < 1e-10 && balanced && duplicates == 0,
        detail: format!("max deviation = {dev:.1e}, balanced = {balanced}, duplicate keys = {duplicates}"),
    })
}

fn c8_rc_spectrum() -> Result<Outcome> {
    let dt = 0.06;
    let rc = build_reaction_coordinate_model(&RCModelSpec { delta: 1.0, omega: 1.0, g: 0.18, n_vib: 2, bias: 0.0 })?;
    let sd = SpectralDensity::ohmic_kappa(0.056, CUTOFF);
    let eta = compute_eta_table(&sd, 1.0, dt, 8)?;
    let sys = rc.system_model(&sd, dt)?;
    // t_max = 35
    let spec = RunSpec::new(sys, eta, rc.initial_state(0, 1.0), 584, Mask::full(8), 1e-8, Mode::Premerge)?;
    let p = engine::run(spec)?.expectation(&rc.sigma_z_diagonal());
    let s = engine::spectrum_padded(&p, dt, 8)?;
    // Local maxima away from the zero-frequency lobe.
    let mut peaks: Vec<(f64, f64)> =
        s.windows(3).filter(|w| w[1].1 > w[0].1 && w[1].1 > w[2].1 && w[1].0 > 0.3).map(|w| w[1]).collect();
    peaks.sort_by(|a, b| b.1.total_cmp(&a.1));
    peaks.truncate(2);
    peaks.sort_by(|a, b| a.0.total_cmp(&b.0));
    let pass = peaks.len() == 2 && peaks[0].0 < 1.0 && peaks[1].0 > 1.0 && peaks[1].0 - peaks[0].0 >= 0.2;
    let shown: Vec<String> = peaks.iter().map(|(w, v)| format!("ω = {w:.3} (S = {v:.3e})")).collect();
    Ok(Outcome { pass, detail: format!("dominant peaks: {}", shown.join(", ")) })
}

fn c9_rc_eigenvalues() -> Result<Outcome> {
    let start = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for n_vib in [4, 6, 8] {
        let rc = build_reaction_coordinate_model(&RCModelSpec { delta: 1.0, omega: 1.0, g: 0.18, n_vib, bias: 0.0 })?;
        let e = hermitian_eigenvalues(&rc.hamiltonian)?;
        let (e1, e2) = (e[1] - e[0], e[2] - e[0]);
        pass &= (e1 - 0.82).abs() <= 0.005 && (e2 - 1.18).abs() <= 0.005;
        parts.push(format!("N={n_vib}: {e1:.4}/{e2:.4}"));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 1.0;
    Ok(Outcome { pass, detail: format!("E1−E0/E2−E0 {} ({secs:.2} s)", parts.join(", ")) })
}

/// Bath correlation C(t) of the benchmark bath, by direct Gauss-Legendre
/// panels over frequency.
fn correlation(gl: &GaussLegendre, t: f64) -> Complex64 {
    let width = 0.5;
    let panels = (60.0 * CUTOFF / width) as usize;
    let mut acc = Complex64::new(0.0, 0.0);
    for k in 0..panels {
        let (a, b) = (k as f64 * width, (k + 1) as f64 * width);
        for &(x, wt) in gl.as_node_weight_pairs() {
            let w = 0.5 * ((b - a) * x + a + b);
            let j = GAMMA / PI * w * (-w / CUTOFF).exp();
            let coth = 1.0 / (0.5 * w / KBT).tanh();
            acc += Complex64::new(j * coth * (w * t).cos(), -j * (w * t).sin()) * (0.5 * width * wt);
        }
    }
    acc / PI
}

/// ∫_{a0}^{a1} ds ∫_{b0}^{b1} du C(s − u) on a tensor grid.
fn square(freq: &GaussLegendre, grid: &GaussLegendre, (a0, a1): (f64, f64), (b0, b1): (f64, f64)) -> Complex64 {
    let mut acc = Complex64::new(0.0, 0.0);
    for &(x, wx) in grid.as_node_weight_pairs() {
        let s = 0.5 * ((a1 - a0) * x + a0 + a1);
        for &(y, wy) in grid.as_node_weight_pairs() {
            let u = 0.5 * ((b1 - b0) * y + b0 + b1);
            acc += correlation(freq, s - u) * (wx * wy);
        }
    }
    acc * (0.25 * (a1 - a0) * (b1 - b0))
}

/// ∫_0^L ds ∫_0^s du C(s − u), with u = s·v.
fn triangle(freq: &GaussLegendre, grid: &GaussLegendre, len: f64) -> Complex64 {
    let mut acc = Complex64::new(0.0, 0.0);
    for &(x, wx) in grid.as_node_weight_pairs() {
        let s = 0.5 * len * (x + 1.0);
        for &(y, wy) in grid.as_node_weight_pairs() {
            let v = 0.5 * (y + 1.0);
            acc += correlation(freq, s * (1.0 - v)) * (s * wx * wy);
        }
    }
    acc * (0.25 * len)
}

fn eta_oracle(freq: &GaussLegendre, grid: &GaussLegendre, class: EtaClass, d: usize) -> Complex64 {
    let h = 0.5 * DT;
    let t = d as f64 * DT;
    if d == 0 {
        return triangle(freq, grid, if class == EtaClass::Mid { DT } else { h });
    }
    let (later, earlier) = match class {
        EtaClass::Mid => ((t - h, t + h), (-h, h)),
        EtaClass::Initial => ((t - h, t + h), (0.0, h)),
        EtaClass::Terminal => ((t - h, t), (-h, h)),
        EtaClass::TerminalInitial => ((t - h, t), (0.0, h)),
    };
    square(freq, grid, later, earlier)
}

fn c10_eta() -> Result<Outcome> {
    let dk_max = 10;
    let sd = SpectralDensity::ohmic(GAMMA, CUTOFF);
    let table = compute_eta_table(&sd, KBT, DT, dk_max)?;
    let freq = GaussLegendre::new(16.try_into().unwrap());
    let grid = GaussLegendre::new(32.try_into().unwrap());
    let mut rng = StdRng::seed_from_u64(0x5eed);
    let mut entries = vec![(EtaClass::Initial, 0), (EtaClass::Mid, 0)];
    for _ in 0..3 {
        entries.push((EtaClass::ALL[rng.gen_range(0..4)], rng.gen_range(1..=dk_max)));
    }
    let mut worst = 0.0f64;
    for &(class, d) in &entries {
        let want = eta_oracle(&freq, &grid, class, d);
        worst = worst.max((table.class(class)[d] - want).norm() / want.norm());
    }
    // η_{ij} depends on i − j only, apart from the endpoint classes.
    let last = 40;
    let mut invariant = true;
    for i in 1..last {
        for j in 1..=i {
            let base = table.coefficient(i - j + 1, 1, last);
            invariant &= table.coefficient(i, j, last) == base && table.propagating(i, j) == base;
        }
        invariant &= table.coefficient(i, 0, last) == table.coefficient(i, 0, last + 7);
        invariant &= table.coefficient(i, 0, last) == table.propagating(i, 0);
        invariant &= table.coefficient(last, i, last) == table.coefficient(last + 1, i + 1, last + 1);
    }
    let names: Vec<String> = entries.iter().map(|(c, d)| format!("{c:?}({d})")).collect();
    Ok(Outcome {
        pass: worst < 1e-8 && invariant,
        detail: format!("max rel. error {worst:.1e} over {}; translation invariant = {invariant}", names.join(" ")),
    })
}

fn main() {
    let checks: [(u32, &str, Check); 10] = [
        (1, "oracle equivalence", c1_oracle),
        (2, "trace preservation", c2_trace),
        (3, "bath-free unitarity", c3_bath_free),
        (4, "pure-dephasing convergence order", c4_dephasing_order),
        (5, "pre- vs post-merging", c5_pre_vs_post),
        (6, "mask self-convergence", c6_self_convergence),
        (7, "worker invariance and balance", c7_workers),
        (8, "RC-model spectrum", c8_rc_spectrum),
        (9, "RC eigenvalues", c9_rc_eigenvalues),
        (10, "eta table", c10_eta),
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (n, name, check) in checks {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = match check() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} {name:<34} {verdict}  {detail} [{:.1} s]", start.elapsed().as_secs_f64());
        if !pass {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
