use std::path::{Path, PathBuf};
use std::process::Command;

use macgic::engine::Trajectory;
use macgic::system::{spin_boson_hamiltonian, unitary_exp};
use macgic::{CMatrix, Mask, Mode};
use macgic_cli::config::{ConfigFile, MaskConfig, SystemConfig};
use num_complex::Complex64;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn macgic(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_macgic")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

const SPIN_BOSON: &str = "
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
n_steps = 40
dk_max = 6
mask = dense:4
theta = 1e-8
";

#[test]
fn bath_free_run_matches_matrix_exponential() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("free_tls.ini");
    let out = macgic(&["run", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let traj = Trajectory::from_csv(&std::fs::read_to_string(dir.path().join("trajectory.csv")).unwrap()).unwrap();
    assert_eq!(traj.len(), 201);
    let u = unitary_exp(&spin_boson_hamiltonian(1.0, 0.0), 0.1).unwrap();
    let mut rho = CMatrix::zeros(2, 2);
    rho[(0, 0)] = Complex64::new(1.0, 0.0);
    for r in &traj.rho {
        assert!((r - &rho).iter().all(|z| z.norm() < 1e-10));
        rho = &u * rho * u.adjoint();
    }
    let tele = std::fs::read_to_string(dir.path().join("telemetry.csv")).unwrap();
    assert!(tele.starts_with("t,n_paths,trace_drift,min_worker_paths,max_worker_paths\n"));
    assert_eq!(tele.lines().count(), 202);
}

#[test]
fn trajectory_csv_has_expected_columns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "sb.ini", SPIN_BOSON);
    let out = macgic(&["run", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    for line in text.lines() {
        assert_eq!(line.split(',').count(), 2 * 4 + 3);
    }
    for line in text.lines().skip(1) {
        assert!(line.split(',').all(|v| v.parse::<f64>().unwrap().is_finite()));
    }
}

#[test]
fn oracle_subcommand_reports_tiny_deviation() {
    let out = macgic(&["oracle", "--config", configs().join("oracle_check.ini").to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let dev: f64 = text.trim().strip_prefix("max deviation ").unwrap().parse().unwrap();
    assert!(dev < 1e-12, "{dev}");
}

#[test]
fn worker_counts_and_backends_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "sb.ini", SPIN_BOSON);
    let run = |workers: &str, backend: &str| {
        let out_dir = dir.path().join(format!("{workers}-{backend}"));
        let out = macgic(&[
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--workers",
            workers,
            "--backend",
            backend,
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        Trajectory::from_csv(&std::fs::read_to_string(out_dir.join("trajectory.csv")).unwrap()).unwrap()
    };
    let one = run("1", "thread");
    for (w, b) in [("4", "process"), ("4", "thread"), ("2", "process")] {
        let other = run(w, b);
        assert!(other.max_deviation(&one) < 1e-10, "{w} {b}");
        assert_eq!(other.path_counts, one.path_counts);
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "bad.ini", &SPIN_BOSON.replace("cutoff = 10", "cutoff = ten"));
    let out = macgic(&["run", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 9"));
    let missing = macgic(&["run", "--config", dir.path().join("nope.ini").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(2));
    assert_eq!(macgic(&["run"]).status.code(), Some(2));
    let capped = write_config(dir.path(), "cap.ini", &format!("{SPIN_BOSON}path_cap = 100\n"));
    let out = macgic(&["run", "--config", capped.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let big = write_config(dir.path(), "big.ini", &SPIN_BOSON.replace("n_steps = 40", "n_steps = 9"));
    assert_eq!(macgic(&["oracle", "--config", big.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn spectrum_and_eta_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "sb.ini", SPIN_BOSON);
    assert!(macgic(&["run", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()])
        .status
        .success());
    let traj = dir.path().join("trajectory.csv");
    let out = macgic(&["spectrum", "--traj", traj.to_str().unwrap(), "--pad", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let spec = std::fs::read_to_string(dir.path().join("spectrum.csv")).unwrap();
    assert!(spec.starts_with("omega,S\n"));
    assert_eq!(spec.lines().count(), 1 + 4 * 41 / 2 + 1);
    let bad = macgic(&["spectrum", "--traj", traj.to_str().unwrap(), "--observable", "1,0,0"]);
    assert_eq!(bad.status.code(), Some(2));

    let eta = dir.path().join("t.eta");
    let out = macgic(&["eta", "--config", cfg.to_str().unwrap(), "--out", eta.to_str().unwrap()]);
    assert!(out.status.success());
    let table = macgic::EtaTable::read_sidecar(std::fs::File::open(&eta).unwrap()).unwrap();
    assert_eq!(table.dk_max(), 6);
    let direct = ConfigFile::load(&cfg).unwrap().assemble().unwrap().spec.eta;
    assert_eq!(table, direct);
}

#[test]
fn eta_cache_is_reused() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    let cfg = write_config(dir.path(), "sb.ini", &SPIN_BOSON.replace("n_steps = 40", "n_steps = 3"));
    for _ in 0..2 {
        let out = Command::new(env!("CARGO_BIN_EXE_macgic"))
            .env("QUAPI_ETA_CACHE", &cache)
            .args(["run", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()])
            .output()
            .unwrap();
        assert!(out.status.success());
    }
    let files: Vec<_> = std::fs::read_dir(&cache).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(files.len(), 1);
    let name = files[0].to_string_lossy().to_string();
    assert!(name.starts_with("eta-") && name.ends_with(".eta"), "{name}");
}

#[test]
fn sweep_reports_deviation_per_setting() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "sb.ini", &SPIN_BOSON.replace("n_steps = 40", "n_steps = 20"));
    let out = macgic(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--param",
        "dk-eff",
        "--values",
        "2,4,6",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[2][1].parse::<f64>().unwrap(), 0.0);
    assert!(rows[0][1].parse::<f64>().unwrap() > 0.0);
}

#[test]
fn converged_rc_config_parses() {
    let cfg = ConfigFile::load(&configs().join("rc_converged.ini")).unwrap();
    let SystemConfig::ReactionCoordinate { delta, omega, n_vib, kappa, .. } = cfg.system else { panic!("rc model") };
    assert_eq!((delta, omega, n_vib, kappa), (1.0, 1.0, 4, 0.056));
    assert_eq!(cfg.rc_spec().unwrap().unwrap().g, 0.18);
    assert_eq!((cfg.dk_max, cfg.mask.clone(), cfg.theta), (12, MaskConfig::Dense(10), 1e-9));
    assert_eq!((cfg.kbt, cfg.dt, cfg.mode), (1.0, 0.06, Mode::Premerge));
    let a = cfg.assemble().unwrap();
    assert_eq!(a.spec.states(), 8);
    assert_eq!(a.spec.mask, Mask::dense(10, 12).unwrap());
    assert_eq!(a.spec.mask.effective_size(), 10);
}

#[test]
fn shipped_configs_parse_and_round_trip() {
    for entry in std::fs::read_dir(configs()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "ini") {
            let cfg = ConfigFile::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            let mut back = ConfigFile::parse(&cfg.emit()).unwrap();
            back.base_dir = cfg.base_dir.clone();
            assert_eq!(back, cfg, "{}", path.display());
        }
    }
}
