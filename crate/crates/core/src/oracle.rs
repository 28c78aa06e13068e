//! Brute-force references: the full path sum over every forward/backward
//! path pair, and the closed-form coherence decay of a system whose
//! Hamiltonian commutes with the bath coupling.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::bath::{reorganization_energy, EtaTable, SpectralDensity};
use crate::error::{Error, Result};
use crate::quad::QuadOptions;
use crate::system::{CMatrix, SystemModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleLimits {
    pub max_states: usize,
    pub max_steps: usize,
    pub max_paths: u64,
}

impl Default for OracleLimits {
    fn default() -> Self {
        Self { max_states: 3, max_steps: 7, max_paths: 5_000_000 }
    }
}

impl OracleLimits {
    pub fn check(&self, states: usize, steps: usize) -> Result<()> {
        if states > self.max_states {
            return Err(Error::OracleLimit(format!("{states} states exceed the limit of {}", self.max_states)));
        }
        if steps > self.max_steps {
            return Err(Error::OracleLimit(format!("{steps} steps exceed the limit of {}", self.max_steps)));
        }
        let paths = (states as u64).checked_pow(2 * steps as u32).unwrap_or(u64::MAX);
        if paths > self.max_paths {
            return Err(Error::OracleLimit(format!("{paths} path pairs exceed the limit of {}", self.max_paths)));
        }
        Ok(())
    }
}

/// Reduced density matrix after `n` steps by explicit enumeration of all
/// path pairs, each weighted by the initial density matrix, every step
/// factor, and the complete influence double sum.
pub fn direct_path_sum(system: &SystemModel, eta: &EtaTable, rho0: &CMatrix, n: usize) -> Result<CMatrix> {
    direct_path_sum_with(system, eta, rho0, n, OracleLimits::default())
}

pub fn direct_path_sum_with(
    system: &SystemModel,
    eta: &EtaTable,
    rho0: &CMatrix,
    n: usize,
    limits: OracleLimits,
) -> Result<CMatrix> {
    let m = system.states();
    limits.check(m, n)?;
    if rho0.nrows() != m || rho0.ncols() != m {
        return Err(Error::Dimension("initial density matrix does not match the system".into()));
    }
    let q = system.coordinates();
    let points = n + 1;
    // Every coefficient the double sum needs, looked up once.
    let mut coeff = vec![Complex64::new(0.0, 0.0); points * points];
    for i in 0..points {
        for j in 0..=i {
            coeff[i * points + j] = eta.coefficient(i, j, n);
        }
    }
    let per_pair = (m * m) as u64;
    let total = per_pair.pow(points as u32);
    let accumulate = |start: u64, end: u64| {
        let mut rho = vec![Complex64::new(0.0, 0.0); m * m];
        let mut fwd = vec![0usize; points];
        let mut bwd = vec![0usize; points];
        for code in start..end {
            let mut c = code;
            for k in 0..points {
                let pair = (c % per_pair) as usize;
                c /= per_pair;
                fwd[k] = pair / m;
                bwd[k] = pair % m;
            }
            let r0 = rho0[(fwd[0], bwd[0])];
            if r0 == Complex64::new(0.0, 0.0) {
                continue;
            }
            let mut amp = r0;
            for k in 1..points {
                amp *= system.forward()[(fwd[k], fwd[k - 1])] * system.backward()[(bwd[k - 1], bwd[k])];
            }
            let mut phase = Complex64::new(0.0, 0.0);
            for i in 0..points {
                let dq = q[fwd[i]] - q[bwd[i]];
                for j in 0..=i {
                    let e = coeff[i * points + j];
                    phase += dq * (e * q[fwd[j]] - e.conj() * q[bwd[j]]);
                }
            }
            rho[fwd[n] * m + bwd[n]] += amp * (-phase).exp();
        }
        rho
    };
    let chunk = 1u64 << 14;
    let starts: Vec<u64> = (0..total).step_by(chunk as usize).collect();
    let parts: Vec<Vec<Complex64>> = starts.par_iter().map(|&s| accumulate(s, (s + chunk).min(total))).collect();
    let mut out = CMatrix::zeros(m, m);
    for p in parts {
        for (k, z) in p.into_iter().enumerate() {
            out[(k / m, k % m)] += z;
        }
    }
    Ok(out)
}

/// Closed-form coherence factor `ρ₀₁(t)/ρ₀₁(0)` for a system Hamiltonian
/// diagonal in the coupling basis, with coordinates `q_plus`, `q_minus` on
/// the two branches and bare frequency `omega01`:
///
/// `e^{−iω₀₁t} · exp(−(q⁺−q⁻)² Γ(t) − i (q⁺² − q⁻²) Φ(t))` with
/// `Γ = (1/π)∫ J coth(ω/2T)(1 − cos ωt)/ω²` and
/// `Φ = (1/π)∫ J (sin ωt − ωt)/ω²`.
pub fn analytic_dephasing(
    sd: &SpectralDensity,
    kbt: f64,
    q_plus: f64,
    q_minus: f64,
    omega01: f64,
    t: f64,
) -> Result<Complex64> {
    sd.validate()?;
    if !(kbt > 0.0) {
        return Err(Error::Domain(format!("temperature k_BT = {kbt} must be positive")));
    }
    if !(t >= 0.0) {
        return Err(Error::Domain(format!("time t = {t} must be non-negative")));
    }
    let bare = Complex64::from_polar(1.0, -omega01 * t);
    if sd.is_zero() || t == 0.0 {
        return Ok(bare);
    }
    let (gamma, phi_osc) = dephasing_integrals(sd, kbt, t)?;
    // The −ωt part of Φ integrates to −λt/π in closed form.
    let phi = phi_osc - reorganization_energy(sd)? * t / std::f64::consts::PI;
    let dq = q_plus - q_minus;
    let exponent = Complex64::new(-dq * dq * gamma, -(q_plus * q_plus - q_minus * q_minus) * phi);
    Ok(bare * exponent.exp())
}

// Returns (Γ, (1/π)∫ J sin ωt / ω²).
fn dephasing_integrals(sd: &SpectralDensity, kbt: f64, t: f64) -> Result<(f64, f64)> {
    let f = |w: f64| {
        if w == 0.0 {
            return Complex64::new(0.0, 0.0);
        }
        let j = sd.eval_unchecked(w);
        let x = w * t;
        let half = (0.5 * x).sin();
        let coth = 1.0 / (0.5 * w / kbt).tanh();
        Complex64::new(j * coth * 2.0 * half * half / (w * w), j * x.sin() / (w * w))
    };
    let opts = QuadOptions { rel_tol: 1e-12, ..QuadOptions::default() };
    let r = sd.integrate(t, opts, f).map_err(|(estimate, error)| Error::Quadrature {
        what: format!("dephasing integrals at t = {t}"),
        estimate,
        error,
    })?;
    let inv_pi = 1.0 / std::f64::consts::PI;
    Ok((r.re * inv_pi, r.im * inv_pi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bath::compute_eta_table;
    use crate::system::{spin_boson_hamiltonian, unitary_exp};

    #[test]
    fn limits_are_enforced() {
        let sys = SystemModel::bare(CMatrix::zeros(4, 4), vec![0.0; 4], 0.1).unwrap();
        let eta = EtaTable::zero(0.1, 2, 1.0);
        let rho = CMatrix::identity(4, 4) * Complex64::new(0.25, 0.0);
        assert!(matches!(direct_path_sum(&sys, &eta, &rho, 1), Err(Error::OracleLimit(_))));
        let sys = SystemModel::bare(spin_boson_hamiltonian(1.0, 0.0), vec![0.5, -0.5], 0.1).unwrap();
        let rho = CMatrix::identity(2, 2) * Complex64::new(0.5, 0.0);
        assert!(matches!(direct_path_sum(&sys, &eta, &rho, 8), Err(Error::OracleLimit(_))));
    }

    #[test]
    fn one_bath_free_step_is_unitary() {
        let dt = 0.4;
        let h = spin_boson_hamiltonian(1.0, 0.2);
        let sys = SystemModel::bare(h.clone(), vec![0.5, -0.5], dt).unwrap();
        let mut rho = CMatrix::zeros(2, 2);
        rho[(0, 0)] = Complex64::new(0.7, 0.0);
        rho[(1, 1)] = Complex64::new(0.3, 0.0);
        rho[(0, 1)] = Complex64::new(0.1, 0.2);
        rho[(1, 0)] = Complex64::new(0.1, -0.2);
        let got = direct_path_sum(&sys, &EtaTable::zero(dt, 2, 1.0), &rho, 1).unwrap();
        let u = unitary_exp(&h, dt).unwrap();
        let want = &u * &rho * u.adjoint();
        assert!((got - want).iter().all(|z| z.norm() < 1e-15));
    }

    #[test]
    fn zero_steps_applies_self_factors() {
        let dt = 0.3;
        let sd = SpectralDensity::ohmic(1.0 / 16.0, 10.0);
        let eta = compute_eta_table(&sd, 0.2, dt, 2).unwrap();
        let sys = SystemModel::new(spin_boson_hamiltonian(1.0, 0.0), vec![0.5, -0.5], &sd, dt).unwrap();
        let rho = CMatrix::from_element(2, 2, Complex64::new(0.5, 0.0));
        let got = direct_path_sum(&sys, &eta, &rho, 0).unwrap();
        assert_eq!(got[(0, 0)], rho[(0, 0)]);
        let e = eta.coefficient(0, 0, 0);
        let want = rho[(0, 1)] * (-(e * 0.5 + e.conj() * 0.5)).exp();
        assert!((got[(0, 1)] - want).norm() < 1e-16);
    }

    #[test]
    fn dephasing_trivial_cases() {
        let sd = SpectralDensity::ohmic(1.0 / 16.0, 10.0);
        assert_eq!(analytic_dephasing(&sd, 0.2, 0.5, -0.5, 1.3, 0.0).unwrap(), Complex64::new(1.0, 0.0));
        let z = analytic_dephasing(&SpectralDensity::zero(), 0.2, 0.5, -0.5, 1.3, 2.0).unwrap();
        assert!((z - Complex64::from_polar(1.0, -2.6)).norm() < 1e-15);
        assert!(analytic_dephasing(&sd, 0.0, 0.5, -0.5, 1.0, 1.0).is_err());
    }

    #[test]
    fn dephasing_decays_monotonically() {
        let sd = SpectralDensity::ohmic(1.0 / 16.0, 10.0);
        let mut prev = 1.0;
        for k in 1..30 {
            let a = analytic_dephasing(&sd, 0.2, 0.5, -0.5, 0.0, 0.5 * k as f64).unwrap().norm();
            assert!(a <= prev + 1e-15, "t = {}", 0.5 * k as f64);
            prev = a;
        }
    }
}
