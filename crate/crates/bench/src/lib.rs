//! Fixtures shared by the benchmarks.

use macgic::bath::compute_eta_table;
use macgic::system::spin_boson_hamiltonian;
use macgic::{CMatrix, Mask, Mode, RunSpec, SpectralDensity, SystemModel};
use num_complex::Complex64;

/// Symmetric spin-boson model with an Ohmic bath (γ = 1/16, ω_c = 10,
/// k_BT = 0.2, dt = 0.3), starting in the up state.
pub fn spin_boson(dk_max: usize, dk_eff: usize, theta: f64, mode: Mode, n_steps: usize) -> RunSpec {
    let dt = 0.3;
    let sd = SpectralDensity::ohmic(1.0 / 16.0, 10.0);
    let eta = compute_eta_table(&sd, 0.2, dt, dk_max).expect("eta table");
    let sys = SystemModel::new(spin_boson_hamiltonian(1.0, 0.0), vec![0.5, -0.5], &sd, dt).expect("system");
    let mut rho0 = CMatrix::zeros(2, 2);
    rho0[(0, 0)] = Complex64::new(1.0, 0.0);
    let mask = Mask::dense(dk_eff, dk_max).expect("mask");
    RunSpec::new(sys, eta, rho0, n_steps, mask, theta, mode).expect("run spec")
}
