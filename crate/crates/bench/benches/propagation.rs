use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};

use macgic::bath::compute_eta_table;
use macgic::distributed::message::{decode_configs, encode_configs};
use macgic::{engine, Engine, Mode, OmegaStore, SpectralDensity};
use macgic_bench::spin_boson;

fn eta(c: &mut Criterion) {
    let sd = SpectralDensity::ohmic(1.0 / 16.0, 10.0);
    c.bench_function("eta_table_dk10", |b| b.iter(|| compute_eta_table(black_box(&sd), 0.2, 0.3, 10).unwrap()));
}

// A store grown to its steady-state size, used as the input to one step.
fn warm_store(engine: &Engine, steps: usize) -> OmegaStore {
    let mut store = engine.initialize().unwrap();
    for t in 1..=steps {
        store = engine.propagate_step(store, t).unwrap();
    }
    store
}

fn step(c: &mut Criterion) {
    let engine = Engine::new(spin_boson(8, 6, 1e-8, Mode::Premerge, 40)).unwrap();
    let store = warm_store(&engine, 20);
    let mut g = c.benchmark_group("step_dk8_eff6");
    g.sample_size(20);
    g.bench_function("premerge", |b| b.iter_batched(|| store.clone(), |s| engine.premerge(s), BatchSize::LargeInput));
    g.bench_function("propagate", |b| {
        b.iter_batched(|| store.clone(), |s| engine.propagate_step(s, 21).unwrap(), BatchSize::LargeInput)
    });
    g.finish();
}

fn run(c: &mut Criterion) {
    let mut g = c.benchmark_group("run_30_steps");
    g.sample_size(10);
    for mode in [Mode::Premerge, Mode::PostmergeReference] {
        let spec = spin_boson(8, 6, 1e-8, mode, 30);
        g.bench_function(mode.name(), |b| b.iter(|| engine::run(spec.clone()).unwrap()));
    }
    g.finish();
}

fn wire(c: &mut Criterion) {
    let engine = Engine::new(spin_boson(8, 6, 1e-8, Mode::Premerge, 40)).unwrap();
    let store = warm_store(&engine, 20);
    let configs = store.configs();
    let bytes = encode_configs(configs, Some(engine.mask()), 2);
    let mut g = c.benchmark_group("wire");
    g.bench_function("encode", |b| b.iter(|| encode_configs(black_box(configs), Some(engine.mask()), 2)));
    g.bench_function("decode", |b| b.iter(|| decode_configs(black_box(&bytes)).unwrap()));
    g.finish();
}

criterion_group!(benches, eta, step, run, wire);
criterion_main!(benches);
