//! System Hamiltonians in the discrete variable representation, their
//! renormalized (counter-term shifted) form and short-time propagators.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;

use crate::bath::{reorganization_energy, SpectralDensity};
use crate::error::{Error, Result};

pub type CMatrix = DMatrix<Complex64>;

const HERMITIAN_TOL: f64 = 1e-10;

fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

/// Largest elementwise deviation of `m` from its conjugate transpose.
pub fn hermiticity_error(m: &CMatrix) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    worst
}

fn check_hermitian(m: &CMatrix) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Dimension(format!("matrix is {}×{}, expected square", m.nrows(), m.ncols())));
    }
    let dev = hermiticity_error(m);
    if dev > HERMITIAN_TOL || !dev.is_finite() {
        return Err(Error::NotHermitian(dev));
    }
    Ok(())
}

/// `H_a = H − (λ/π) diag(q²)`, the system Hamiltonian along the adiabatic
/// path, with λ the reorganization energy of `sd`.
pub fn build_renormalized_hamiltonian(h: &CMatrix, q: &[f64], sd: &SpectralDensity) -> Result<CMatrix> {
    if h.nrows() != q.len() || h.ncols() != q.len() {
        return Err(Error::Dimension(format!(
            "Hamiltonian is {}×{} but {} coordinates were given",
            h.nrows(),
            h.ncols(),
            q.len()
        )));
    }
    let shift = reorganization_energy(sd)? / std::f64::consts::PI;
    Ok(counter_term(h, q, shift))
}

fn counter_term(h: &CMatrix, q: &[f64], shift: f64) -> CMatrix {
    let mut out = h.clone();
    for (i, &qi) in q.iter().enumerate() {
        out[(i, i)] -= c(shift * qi * qi);
    }
    out
}

/// `exp(−i H t)` for Hermitian `H`, by eigendecomposition.
pub fn unitary_exp(h: &CMatrix, t: f64) -> Result<CMatrix> {
    check_hermitian(h)?;
    // Symmetrize so that the eigensolver sees an exactly Hermitian input.
    let sym = (h + h.adjoint()) * c(0.5);
    let eig = SymmetricEigen::new(sym);
    let phases = CMatrix::from_diagonal(&eig.eigenvalues.map(|e| Complex64::from_polar(1.0, -e * t)));
    Ok(&eig.eigenvectors * phases * eig.eigenvectors.adjoint())
}

/// Real eigenvalues of a Hermitian matrix, ascending.
pub fn hermitian_eigenvalues(h: &CMatrix) -> Result<Vec<f64>> {
    check_hermitian(h)?;
    let sym = (h + h.adjoint()) * c(0.5);
    let mut ev: Vec<f64> = SymmetricEigen::new(sym).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    Ok(ev)
}

/// Forward and backward short-time propagators `exp(∓i H_a dt)`.
pub fn short_time_propagators(h_a: &CMatrix, dt: f64) -> Result<(CMatrix, CMatrix)> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Domain(format!("time step dt = {dt} must be positive")));
    }
    let fwd = unitary_exp(h_a, dt)?;
    let bwd = fwd.adjoint();
    Ok((fwd, bwd))
}

/// A finite system coupled diagonally to the bath through coordinates `q`.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemModel {
    q: Vec<f64>,
    h: CMatrix,
    h_a: CMatrix,
    dt: f64,
    u_fwd: CMatrix,
    u_bwd: CMatrix,
}

impl SystemModel {
    /// Model with the counter term of `sd` applied.
    pub fn new(h: CMatrix, q: Vec<f64>, sd: &SpectralDensity, dt: f64) -> Result<Self> {
        check_hermitian(&h)?;
        if q.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain("coupling coordinates must be finite".into()));
        }
        let h_a = build_renormalized_hamiltonian(&h, &q, sd)?;
        Self::assemble(h, h_a, q, dt)
    }

    /// Model without counter term (`H_a = H`).
    pub fn bare(h: CMatrix, q: Vec<f64>, dt: f64) -> Result<Self> {
        check_hermitian(&h)?;
        if h.nrows() != q.len() {
            return Err(Error::Dimension(format!("{} coordinates for a {}-state Hamiltonian", q.len(), h.nrows())));
        }
        if q.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain("coupling coordinates must be finite".into()));
        }
        let h_a = h.clone();
        Self::assemble(h, h_a, q, dt)
    }

    fn assemble(h: CMatrix, h_a: CMatrix, q: Vec<f64>, dt: f64) -> Result<Self> {
        let (u_fwd, u_bwd) = short_time_propagators(&h_a, dt)?;
        Ok(Self { q, h, h_a, dt, u_fwd, u_bwd })
    }

    /// Re-derives `H_a` and the propagators for the bath `sd`.
    pub fn renormalized(&self, sd: &SpectralDensity) -> Result<Self> {
        Self::new(self.h.clone(), self.q.clone(), sd, self.dt)
    }

    /// Same Hamiltonian with a different time step.
    pub fn with_dt(&self, dt: f64) -> Result<Self> {
        Self::assemble(self.h.clone(), self.h_a.clone(), self.q.clone(), dt)
    }

    pub fn states(&self) -> usize {
        self.q.len()
    }
    pub fn coordinates(&self) -> &[f64] {
        &self.q
    }
    pub fn hamiltonian(&self) -> &CMatrix {
        &self.h
    }
    pub fn renormalized_hamiltonian(&self) -> &CMatrix {
        &self.h_a
    }
    pub fn dt(&self) -> f64 {
        self.dt
    }
    pub fn forward(&self) -> &CMatrix {
        &self.u_fwd
    }
    pub fn backward(&self) -> &CMatrix {
        &self.u_bwd
    }

    /// Step factor `⟨s⁺|U|a⁺⟩⟨a⁻|U†|s⁻⟩` from `(a⁺, a⁻)` to `(s⁺, s⁻)`.
    #[inline]
    pub fn step_factor(&self, from: (usize, usize), to: (usize, usize)) -> Complex64 {
        self.u_fwd[(to.0, from.0)] * self.u_bwd[(from.1, to.1)]
    }
}

/// Two-level system with Pauli-x tunnelling `(Δ/2)σ_x` and bias `(ε/2)σ_z`,
/// coupled through `σ_z` scaled by `q_scale` (so `q = ±q_scale`).
pub fn spin_boson_hamiltonian(delta: f64, bias: f64) -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[c(0.5 * bias), c(0.5 * delta), c(0.5 * delta), c(-0.5 * bias)])
}

/// Primary-mode (reaction coordinate) model: a two-level system coupled to
/// one harmonic mode, which in turn couples to a residual Ohmic bath.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RCModelSpec {
    /// Tunnelling splitting Δ.
    pub delta: f64,
    /// Mode frequency Ω.
    pub omega: f64,
    /// TLS–mode coupling g.
    pub g: f64,
    /// Oscillator levels kept.
    pub n_vib: usize,
    /// Bias ε.
    pub bias: f64,
}

impl RCModelSpec {
    pub fn dimension(&self) -> usize {
        2 * self.n_vib
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_vib < 1 {
            return Err(Error::Domain("n_vib must be at least 1".into()));
        }
        if !(self.delta > 0.0 && self.omega > 0.0) {
            return Err(Error::Domain(format!("Δ = {} and Ω = {} must be positive", self.delta, self.omega)));
        }
        if !(self.g.is_finite() && self.bias.is_finite()) {
            return Err(Error::Domain("g and ε must be finite".into()));
        }
        Ok(())
    }

    /// `H_{TLS+HO} = (Δ/2)σ_x + (ε/2)σ_z + g σ_z (B† + B) + Ω B†B` in the
    /// product basis `|σ⟩ ⊗ |n⟩` (index `σ·n_vib + n`).
    pub fn product_hamiltonian(&self) -> CMatrix {
        let n = self.n_vib;
        let dim = 2 * n;
        let x = truncated_position(n);
        let mut h = CMatrix::zeros(dim, dim);
        for s in 0..2 {
            let sz = if s == 0 { 1.0 } else { -1.0 };
            for a in 0..n {
                h[(s * n + a, (1 - s) * n + a)] += c(0.5 * self.delta);
                h[(s * n + a, s * n + a)] += c(0.5 * self.bias * sz + self.omega * a as f64);
                for b in 0..n {
                    h[(s * n + a, s * n + b)] += c(self.g * sz * x[(a, b)]);
                }
            }
        }
        h
    }
}

/// Truncated `B + B†` on `n` oscillator levels.
fn truncated_position(n: usize) -> DMatrix<f64> {
    let mut x = DMatrix::zeros(n, n);
    for k in 1..n {
        let v = (k as f64).sqrt();
        x[(k - 1, k)] = v;
        x[(k, k - 1)] = v;
    }
    x
}

/// The primary-mode model rotated into the eigenbasis of its bath coupling
/// operator `I₂ ⊗ (B + B†)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReactionCoordinateModel {
    pub spec: RCModelSpec,
    /// Hamiltonian in the DVR basis (index `σ·n_vib + k`).
    pub hamiltonian: CMatrix,
    /// Coupling-operator eigenvalue per DVR state.
    pub coordinates: Vec<f64>,
    /// Columns are the oscillator DVR states in the Fock basis.
    pub dvr_vectors: DMatrix<f64>,
}

impl ReactionCoordinateModel {
    /// `σ_z ⊗ I`, diagonal in the DVR basis.
    pub fn sigma_z_diagonal(&self) -> Vec<f64> {
        let n = self.spec.n_vib;
        (0..2 * n).map(|i| if i < n { 1.0 } else { -1.0 }).collect()
    }

    /// Density matrix `|σ⟩⟨σ| ⊗ ρ_vib` in the DVR basis, with the mode in
    /// its thermal state at `kbt` (or the ground state for `kbt == 0`).
    pub fn initial_state(&self, tls_state: usize, kbt: f64) -> CMatrix {
        let n = self.spec.n_vib;
        let mut pops: Vec<f64> = (0..n)
            .map(|k| {
                if kbt > 0.0 {
                    (-(self.spec.omega * k as f64) / kbt).exp()
                } else if k == 0 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let z: f64 = pops.iter().sum();
        pops.iter_mut().for_each(|p| *p /= z);
        let v = &self.dvr_vectors;
        let mut rho = CMatrix::zeros(2 * n, 2 * n);
        for a in 0..n {
            for b in 0..n {
                let val: f64 = (0..n).map(|k| v[(k, a)] * pops[k] * v[(k, b)]).sum();
                rho[(tls_state * n + a, tls_state * n + b)] = c(val);
            }
        }
        rho
    }

    /// System model for the residual bath `sd` (counter term included).
    pub fn system_model(&self, sd: &SpectralDensity, dt: f64) -> Result<SystemModel> {
        SystemModel::new(self.hamiltonian.clone(), self.coordinates.clone(), sd, dt)
    }
}

/// Builds the primary-mode model in the DVR basis of `B + B†` truncated to
/// `n_vib` levels.
pub fn build_reaction_coordinate_model(spec: &RCModelSpec) -> Result<ReactionCoordinateModel> {
    spec.validate()?;
    let n = spec.n_vib;
    let eig = SymmetricEigen::new(truncated_position(n));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let x_vals: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut vecs = DMatrix::<f64>::zeros(n, n);
    for (col, &k) in order.iter().enumerate() {
        let mut v = eig.eigenvectors.column(k).into_owned();
        // Fix the sign so that the first non-negligible entry is positive.
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                v = -v;
            }
        }
        vecs.set_column(col, &v);
    }
    let mut rot = CMatrix::zeros(2 * n, 2 * n);
    for s in 0..2 {
        for a in 0..n {
            for b in 0..n {
                rot[(s * n + a, s * n + b)] = c(vecs[(a, b)]);
            }
        }
    }
    let h = rot.adjoint() * spec.product_hamiltonian() * &rot;
    let h = (&h + h.adjoint()) * c(0.5);
    let coordinates = (0..2 * n).map(|i| x_vals[i % n]).collect();
    Ok(ReactionCoordinateModel { spec: *spec, hamiltonian: h, coordinates, dvr_vectors: vecs })
}

/// Mode coupling `g = Ω √(α / 8κ)` that reproduces a structured peak of
/// strength α and width parameter κ.
pub fn map_structured_to_rc(alpha: f64, omega: f64, kappa: f64) -> Result<f64> {
    if !(kappa > 0.0) {
        return Err(Error::Domain(format!("κ = {kappa} must be positive")));
    }
    if !(alpha >= 0.0) {
        return Err(Error::Domain(format!("α = {alpha} must be non-negative")));
    }
    Ok(omega * (alpha / (8.0 * kappa)).sqrt())
}

/// Inverse of [`map_structured_to_rc`]: `α = 8κg² / Ω²`.
pub fn map_rc_to_structured(g: f64, omega: f64, kappa: f64) -> Result<f64> {
    if !(kappa > 0.0) {
        return Err(Error::Domain(format!("κ = {kappa} must be positive")));
    }
    Ok(8.0 * kappa * g * g / (omega * omega))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn max_abs(m: &CMatrix) -> f64 {
        m.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    fn sigma_x() -> CMatrix {
        CMatrix::from_row_slice(2, 2, &[c(0.0), c(1.0), c(1.0), c(0.0)])
    }

    #[test]
    fn no_bath_no_shift() {
        let h = spin_boson_hamiltonian(1.0, 0.3);
        let ha = build_renormalized_hamiltonian(&h, &[0.5, -0.5], &SpectralDensity::zero()).unwrap();
        assert_eq!(ha, h);
    }

    #[test]
    fn symmetric_coordinates_shift_uniformly() {
        let sd = SpectralDensity::ohmic(0.25, 5.0);
        let h = spin_boson_hamiltonian(1.0, 0.0);
        let ha = build_renormalized_hamiltonian(&h, &[0.5, -0.5], &sd).unwrap();
        let shift = reorganization_energy(&sd).unwrap() / PI;
        assert!((ha[(0, 0)].re + shift / 4.0).abs() < 1e-14);
        assert!((ha[(1, 1)].re + shift / 4.0).abs() < 1e-14);
        let (e, ea) = (hermitian_eigenvalues(&h).unwrap(), hermitian_eigenvalues(&ha).unwrap());
        assert!(((e[1] - e[0]) - (ea[1] - ea[0])).abs() < 1e-12);
    }

    #[test]
    fn counter_term_on_single_state() {
        let sd = SpectralDensity::ohmic(1.0 / 16.0, 2000.0);
        let lam = reorganization_energy(&sd).unwrap();
        let h = spin_boson_hamiltonian(1.0, 0.0);
        let ha = build_renormalized_hamiltonian(&h, &[1.0, 0.0], &sd).unwrap();
        assert!((ha[(0, 0)].re - (-lam / PI)).abs() < 1e-10);
        assert_eq!(ha[(1, 1)], h[(1, 1)]);
    }

    #[test]
    fn dimension_mismatch() {
        let h = spin_boson_hamiltonian(1.0, 0.0);
        assert!(matches!(
            build_renormalized_hamiltonian(&h, &[1.0], &SpectralDensity::zero()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn zero_hamiltonian_gives_identity() {
        let (f, b) = short_time_propagators(&CMatrix::zeros(3, 3), 0.7).unwrap();
        assert!(max_abs(&(f - CMatrix::identity(3, 3))) < 1e-15);
        assert!(max_abs(&(b - CMatrix::identity(3, 3))) < 1e-15);
    }

    #[test]
    fn half_pi_rotation_of_sigma_x() {
        // exp(−i (Δ/2) σ_x dt) with Δ dt = π equals −i σ_x.
        let delta = 2.0;
        let h = sigma_x() * c(delta / 2.0);
        let (f, b) = short_time_propagators(&h, PI / delta).unwrap();
        let expected = sigma_x() * Complex64::new(0.0, -1.0);
        assert!(max_abs(&(&f - expected)) < 1e-14);
        assert!(max_abs(&(b - f.adjoint())) < 1e-15);
    }

    #[test]
    fn non_hermitian_is_rejected() {
        let h = CMatrix::from_row_slice(2, 2, &[c(0.0), c(1.0), c(0.0), c(0.0)]);
        assert!(matches!(short_time_propagators(&h, 0.1), Err(Error::NotHermitian(_))));
        assert!(short_time_propagators(&sigma_x(), 0.0).is_err());
    }

    #[test]
    fn rc_model_single_level_is_bare_tls() {
        let spec = RCModelSpec { delta: 1.0, omega: 1.0, g: 0.18, n_vib: 1, bias: 0.0 };
        let m = build_reaction_coordinate_model(&spec).unwrap();
        assert_eq!(m.coordinates, vec![0.0, 0.0]);
        assert!(max_abs(&(&m.hamiltonian - sigma_x() * c(0.5))) < 1e-15);
    }

    #[test]
    fn rc_model_two_levels_has_pauli_coordinates() {
        let spec = RCModelSpec { delta: 1.0, omega: 1.0, g: 0.18, n_vib: 2, bias: 0.0 };
        let m = build_reaction_coordinate_model(&spec).unwrap();
        for (got, want) in m.coordinates.iter().zip([-1.0, 1.0, -1.0, 1.0]) {
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn rc_dvr_rotation_preserves_spectrum() {
        let spec = RCModelSpec { delta: 1.0, omega: 0.9, g: 0.2, n_vib: 5, bias: 0.1 };
        let m = build_reaction_coordinate_model(&spec).unwrap();
        let a = hermitian_eigenvalues(&spec.product_hamiltonian()).unwrap();
        let b = hermitian_eigenvalues(&m.hamiltonian).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn rc_initial_state_is_normalized() {
        let spec = RCModelSpec { delta: 1.0, omega: 1.0, g: 0.18, n_vib: 4, bias: 0.0 };
        let m = build_reaction_coordinate_model(&spec).unwrap();
        let rho = m.initial_state(0, 1.0);
        assert!((rho.trace().re - 1.0).abs() < 1e-14);
        assert!(hermiticity_error(&rho) < 1e-15);
        let pz: f64 = m.sigma_z_diagonal().iter().enumerate().map(|(i, s)| s * rho[(i, i)].re).sum();
        assert!((pz - 1.0).abs() < 1e-14);
    }

    #[test]
    fn structured_mapping() {
        assert_eq!(map_structured_to_rc(0.0, 1.0, 0.056).unwrap(), 0.0);
        assert!(map_structured_to_rc(0.1, 1.0, 0.0).is_err());
        let alpha = map_rc_to_structured(0.18, 1.0, 0.056).unwrap();
        assert!((alpha - 8.0 * 0.056 * 0.18 * 0.18).abs() < 1e-16);
        assert!((alpha - 0.014_515_2).abs() < 1e-9);
        let g = map_structured_to_rc(alpha, 1.0, 0.056).unwrap();
        let back = map_rc_to_structured(g, 1.0, 0.056).unwrap();
        assert!((back - alpha).abs() < 1e-14 * alpha);
    }
}
