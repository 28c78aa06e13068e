//! Multi-worker execution: partitioning, the sequential-broadcast merge of
//! keyed stores, pairwise load balancing and reductions.
//!
//! Workers share nothing; every exchange goes through a [`Transport`].

pub mod message;
pub mod transport;

use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustc_hash::{FxHashMap, FxHashSet};

use crate::engine::{Engine, Mode, Trajectory};
use crate::error::{Error, Result};
use crate::pathstore::{OmegaStore, PathKey};
use crate::system::CMatrix;

pub use message::{MergeEntry, MergeMessage};
pub use transport::{Tag, ThreadTransport, Transport, UnixTransport};

/// Splits a store into `n` contiguous chunks in store order, sizes
/// differing by at most one (larger chunks first). Keyed stores stay keyed.
pub fn partition(store: OmegaStore, n: usize) -> Result<Vec<OmegaStore>> {
    if n == 0 {
        return Err(Error::Spec("worker count must be at least 1".into()));
    }
    let (states, step) = (store.states(), store.step());
    let mask = store.key_mask().cloned();
    let mut configs = store.into_configs();
    let sizes = balanced_counts(configs.len(), n);
    let mut chunks = Vec::with_capacity(n);
    for &size in sizes.iter().rev() {
        let tail = configs.split_off(configs.len() - size);
        chunks.push(tail);
    }
    chunks.reverse();
    chunks
        .into_iter()
        .map(|c| match &mask {
            Some(m) => OmegaStore::from_keyed(states, step, m, c),
            None => Ok(OmegaStore::from_configs(states, step, c)),
        })
        .collect()
}

/// Per-rank targets: `⌊total/n⌋`, plus one for the first `total mod n`.
pub fn balanced_counts(total: usize, n: usize) -> Vec<usize> {
    (0..n).map(|r| total / n + usize::from(r < total % n)).collect()
}

/// One transfer of `count` configurations from `from` to `to`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Route {
    pub from: usize,
    pub to: usize,
    pub count: usize,
}

/// Transfers that bring every worker to its balanced count.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RouteMap {
    pub routes: Vec<Route>,
}

impl RouteMap {
    /// Greedy pairing of surplus and deficit lists, both in rank order.
    pub fn plan(counts: &[usize]) -> Self {
        let total: usize = counts.iter().sum();
        let target = balanced_counts(total, counts.len());
        let mut surplus: Vec<(usize, usize)> =
            counts.iter().zip(&target).enumerate().filter(|(_, (c, t))| c > t).map(|(r, (c, t))| (r, c - t)).collect();
        let mut deficit: Vec<(usize, usize)> =
            counts.iter().zip(&target).enumerate().filter(|(_, (c, t))| c < t).map(|(r, (c, t))| (r, t - c)).collect();
        let mut routes = Vec::new();
        let (mut i, mut j) = (0, 0);
        while i < surplus.len() && j < deficit.len() {
            let count = surplus[i].1.min(deficit[j].1);
            routes.push(Route { from: surplus[i].0, to: deficit[j].0, count });
            surplus[i].1 -= count;
            deficit[j].1 -= count;
            if surplus[i].1 == 0 {
                i += 1;
            }
            if deficit[j].1 == 0 {
                j += 1;
            }
        }
        Self { routes }
    }

    pub fn is_empty(&self) -> bool {
        self.routes.is_empty()
    }

    /// Counts after applying the routes.
    pub fn apply_counts(&self, counts: &[usize]) -> Vec<usize> {
        let mut out = counts.to_vec();
        for r in &self.routes {
            out[r.from] -= r.count;
            out[r.to] += r.count;
        }
        out
    }
}

/// Sum of per-worker partial density matrices, in rank order.
pub fn reduce_density(partials: &[CMatrix]) -> Result<CMatrix> {
    let first = partials.first().ok_or_else(|| Error::Dimension("no partial density matrices".into()))?;
    let mut out = first.clone();
    for p in &partials[1..] {
        if p.shape() != first.shape() {
            return Err(Error::Dimension(format!("partial of shape {:?} vs {:?}", p.shape(), first.shape())));
        }
        out += p;
    }
    Ok(out)
}

/// One worker: its rank, its share of the store and its link to the rest.
pub struct WorkerCtx {
    pub store: OmegaStore,
    transport: Box<dyn Transport>,
}

/// Counters from one merge round on one worker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MergeStats {
    /// Entries received from other workers.
    pub received: usize,
    /// Local keys handed over to another worker.
    pub released: usize,
    /// Largest number of keys held in the auxiliary accumulator.
    pub aux_peak: usize,
}

// Outcome of matching one remote entry against the local store.
enum Hit {
    Miss,
    Local { slot: usize, remote_wins: bool },
}

impl WorkerCtx {
    pub fn new(store: OmegaStore, transport: Box<dyn Transport>) -> Self {
        Self { store, transport }
    }

    pub fn rank(&self) -> usize {
        self.transport.rank()
    }

    pub fn size(&self) -> usize {
        self.transport.size()
    }

    pub fn transport(&mut self) -> &mut dyn Transport {
        self.transport.as_mut()
    }

    /// Merges keyed stores across workers so that every key ends on exactly
    /// one worker, holding the global representative and the global sum.
    ///
    /// Senders take turns in rank order, each sending its unmodified local
    /// store to every other rank. A receiver above the sender only records
    /// matches in an auxiliary accumulator (its own store is still to be
    /// sent); a receiver below the sender has already sent, so it either
    /// absorbs the remote sum or, if the remote path wins, drops the key.
    /// After sending, a worker folds its accumulator: keys it lost are
    /// dropped, the rest collect the accumulated sums.
    pub fn inter_worker_merge(&mut self) -> Result<MergeStats> {
        let (rank, n) = (self.rank(), self.size());
        let mut stats = MergeStats::default();
        if n == 1 {
            return Ok(stats);
        }
        if !self.store.is_keyed() {
            return Err(Error::Spec("inter-worker merge needs a keyed store".into()));
        }
        let states = self.store.states();
        let mut dropped = vec![false; self.store.len()];
        let mut aux: FxHashMap<u32, (Complex64, bool)> = FxHashMap::default();
        for sender in 0..n {
            if sender == rank {
                let bytes = message::encode_configs(self.store.configs(), self.store.key_mask(), states);
                for to in (0..n).filter(|&r| r != rank) {
                    self.transport.send(to, Tag::Merge, &bytes)?;
                }
                drop(bytes);
                stats.aux_peak = aux.len();
                let configs = self.store.configs_mut();
                for (slot, (acc, lost)) in aux.drain() {
                    let slot = slot as usize;
                    if lost {
                        dropped[slot] = true;
                    } else {
                        configs[slot].sum += acc;
                    }
                }
                continue;
            }
            let bytes = self.transport.recv(sender, Tag::Merge)?;
            let remote = MergeMessage::deserialize(&bytes)?.entries;
            drop(bytes);
            stats.received += remote.len();
            let store = &self.store;
            let hits: Vec<Hit> = remote
                .par_iter()
                .map(|e| match store.find(&e.key) {
                    Some(slot) if !dropped[slot] => {
                        let local = &store.configs()[slot];
                        // Equal |weight| and path: the lower rank keeps it.
                        let remote_wins = e.config.beats(local) || (!local.beats(&e.config) && sender < rank);
                        Hit::Local { slot, remote_wins }
                    }
                    _ => Hit::Miss,
                })
                .collect();
            let configs = self.store.configs_mut();
            for (e, hit) in remote.iter().zip(hits) {
                let Hit::Local { slot, remote_wins } = hit else { continue };
                if sender < rank {
                    let a = aux.entry(slot as u32).or_insert((Complex64::new(0.0, 0.0), false));
                    a.0 += e.config.sum;
                    a.1 |= remote_wins;
                } else if remote_wins {
                    dropped[slot] = true;
                } else {
                    configs[slot].sum += e.config.sum;
                }
            }
        }
        stats.released = dropped.iter().filter(|&&d| d).count();
        self.store.retain_indexed(|i, _| !dropped[i]);
        Ok(stats)
    }

    /// Plans balancing from all workers' counts and moves configurations
    /// (taken from the sender's tail) along the routes. Returns the plan.
    pub fn balance_load(&mut self) -> Result<RouteMap> {
        let (rank, n) = (self.rank(), self.size());
        if n == 1 {
            return Ok(RouteMap::default());
        }
        let counts: Vec<usize> =
            self.allgather_f64(&[self.store.len() as f64])?.into_iter().map(|v| v[0] as usize).collect();
        let plan = RouteMap::plan(&counts);
        let states = self.store.states();
        for route in &plan.routes {
            if route.from == rank {
                let tail = self.store.split_off_tail(route.count);
                let bytes = message::encode_configs(&tail, None, states);
                drop(tail);
                self.transport.send(route.to, Tag::Balance, &bytes)?;
            } else if route.to == rank {
                let bytes = self.transport.recv(route.from, Tag::Balance)?;
                let incoming = message::decode_configs(&bytes)?;
                if incoming.len() != route.count {
                    return Err(Error::Transport {
                        rank,
                        phase: Tag::Balance.phase(),
                        detail: format!(
                            "expected {} configurations from {}, got {}",
                            route.count,
                            route.from,
                            incoming.len()
                        ),
                    });
                }
                for c in incoming {
                    self.store.push(c)?;
                }
            }
        }
        Ok(plan)
    }

    /// Every rank's `values`, in rank order, on every rank.
    pub fn allgather_f64(&mut self, values: &[f64]) -> Result<Vec<Vec<f64>>> {
        let (rank, n) = (self.rank(), self.size());
        if n == 1 {
            return Ok(vec![values.to_vec()]);
        }
        let bytes = message::encode_f64s(values);
        if rank == 0 {
            let mut all = vec![values.to_vec()];
            for from in 1..n {
                all.push(message::decode_f64s(&self.transport.recv(from, Tag::Reduce)?)?);
            }
            let flat: Vec<f64> = all.iter().flat_map(|v| v.iter().copied()).collect();
            let mut out = message::encode_f64s(&[values.len() as f64]);
            out.extend(message::encode_f64s(&all.iter().map(|v| v.len() as f64).collect::<Vec<_>>()));
            out.extend(message::encode_f64s(&flat));
            for to in 1..n {
                self.transport.send(to, Tag::Reduce, &out)?;
            }
            Ok(all)
        } else {
            self.transport.send(0, Tag::Reduce, &bytes)?;
            let flat = message::decode_f64s(&self.transport.recv(0, Tag::Reduce)?)?;
            let lens: Vec<usize> = flat[1..1 + n].iter().map(|&l| l as usize).collect();
            let mut pos = 1 + n;
            Ok(lens
                .into_iter()
                .map(|l| {
                    let v = flat[pos..pos + l].to_vec();
                    pos += l;
                    v
                })
                .collect())
        }
    }

    /// Elementwise sum over ranks (accumulated in rank order).
    pub fn allreduce_sum(&mut self, values: &[f64]) -> Result<Vec<f64>> {
        let all = self.allgather_f64(values)?;
        let mut out = vec![0.0; values.len()];
        for v in all {
            if v.len() != out.len() {
                return Err(Error::Dimension("reduction vectors differ in length".into()));
            }
            for (o, x) in out.iter_mut().zip(v) {
                *o += x;
            }
        }
        Ok(out)
    }

    /// Every rank's keyed configurations on rank 0 (empty elsewhere).
    pub fn gather_store(&mut self) -> Result<Vec<MergeEntry>> {
        let (rank, n) = (self.rank(), self.size());
        let bytes = message::encode_configs(self.store.configs(), self.store.key_mask(), self.store.states());
        if rank != 0 {
            self.transport.send(0, Tag::Gather, &bytes)?;
            return Ok(Vec::new());
        }
        let mut all = MergeMessage::deserialize(&bytes)?.entries;
        for from in 1..n {
            all.extend(MergeMessage::deserialize(&self.transport.recv(from, Tag::Gather)?)?.entries);
        }
        Ok(all)
    }
}

/// Per-step record of a distributed run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub trajectory: Trajectory,
    /// Configurations per worker after balancing, one row per step.
    pub worker_counts: Vec<Vec<usize>>,
    /// Keys found on more than one worker (only counted when checking).
    pub duplicate_keys: usize,
    /// Total sum before and after each merge round, for the largest drift.
    pub merge_mass_drift: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunOptions {
    /// Gather all keys on rank 0 after each merge and count duplicates.
    pub check_keys: bool,
}

fn complex_to_f64s(z: &[Complex64], out: &mut Vec<f64>) {
    for v in z {
        out.push(v.re);
        out.push(v.im);
    }
}

/// Runs the full trajectory as one worker of a group. Rank 0 returns the
/// report; the other ranks return `None`.
pub fn run_worker(engine: &Engine, transport: Box<dyn Transport>, opts: RunOptions) -> Result<Option<RunReport>> {
    let m = engine.states();
    let spec = engine.spec();
    let n = transport.size();
    let rank = transport.rank();
    let initial = partition(engine.initialize()?, n)?.swap_remove(rank);
    let mut ctx = WorkerCtx::new(initial, transport);
    let mut report = RunReport {
        trajectory: Trajectory::new(m),
        worker_counts: Vec::new(),
        duplicate_keys: 0,
        merge_mass_drift: 0.0,
    };
    let total0 = ctx.allreduce_sum(&[ctx.store.len() as f64])?[0] as usize;
    report.trajectory.push(0.0, spec.rho0.clone(), total0);
    let theta = spec.effective_theta();
    let postmerge = spec.mode == Mode::PostmergeReference;
    for t in 1..=spec.n_steps {
        // Merge on the mask of this mode, keyed across all workers.
        let (store, rho_part) = if postmerge {
            let total = ctx.allreduce_sum(&[ctx.store.len() as f64])?[0] as usize;
            engine.check_capacity(total)?;
            let expanded = engine.expand(std::mem::replace(&mut ctx.store, OmegaStore::new(m, t)), t)?;
            let rho = engine.measure(&expanded);
            (expanded.premerge(engine.mask()), Some(rho))
        } else {
            (engine.premerge(std::mem::replace(&mut ctx.store, OmegaStore::new(m, t - 1))), None)
        };
        ctx.store = store;
        let before = ctx.store.total_sum();
        ctx.inter_worker_merge()?;
        if opts.check_keys {
            let all = ctx.gather_store()?;
            if rank == 0 {
                let mut seen: FxHashSet<PathKey> = FxHashSet::default();
                report.duplicate_keys += all.iter().filter(|e| !seen.insert(e.key.clone())).count();
            }
        }
        let after = ctx.store.total_sum();
        ctx.balance_load()?;
        let mut local = vec![ctx.store.len() as f64, before.re, before.im, after.re, after.im];
        let rho = if let Some(rho_part) = rho_part {
            local.push(ctx.store.max_abs_sum());
            complex_to_f64s(rho_part.as_slice(), &mut local);
            let all = ctx.allgather_f64(&local)?;
            let max = all.iter().map(|v| v[5]).fold(0.0, f64::max);
            ctx.store = std::mem::replace(&mut ctx.store, OmegaStore::new(m, t)).into_sequential();
            ctx.store.filter_against(theta, max);
            // nalgebra is column-major; both sides use the same layout.
            let rho = sum_complex(&all, 6, m);
            record(&mut report, &all);
            CMatrix::from_column_slice(m, m, &rho)
        } else {
            let parents = std::mem::replace(&mut ctx.store, OmegaStore::new(m, t)).into_configs();
            let total = ctx.allreduce_sum(&[parents.len() as f64])?[0] as usize;
            engine.check_capacity(total)?;
            let (entries, max) = engine.scan(&parents, t);
            local.push(max);
            complex_to_f64s(&entries, &mut local);
            let all = ctx.allgather_f64(&local)?;
            let max = all.iter().map(|v| v[5]).fold(0.0, f64::max);
            ctx.store = engine.materialize(parents, t, theta * max).0;
            let rho = sum_complex(&all, 6, m);
            record(&mut report, &all);
            CMatrix::from_row_slice(m, m, &rho)
        };
        let live = ctx.allreduce_sum(&[ctx.store.len() as f64])?[0] as usize;
        report.trajectory.push(t as f64 * spec.dt(), rho, live);
    }
    Ok((rank == 0).then_some(report))
}

fn sum_complex(all: &[Vec<f64>], offset: usize, m: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); m * m];
    for v in all {
        for (k, o) in out.iter_mut().enumerate() {
            *o += Complex64::new(v[offset + 2 * k], v[offset + 2 * k + 1]);
        }
    }
    out
}

// Stores the post-balance counts and the merge mass drift of one step.
fn record(report: &mut RunReport, all: &[Vec<f64>]) {
    let counts: Vec<usize> = all.iter().map(|v| v[0] as usize).collect();
    let before: Complex64 = all.iter().map(|v| Complex64::new(v[1], v[2])).sum();
    let after: Complex64 = all.iter().map(|v| Complex64::new(v[3], v[4])).sum();
    let scale = before.norm().max(f64::MIN_POSITIVE);
    report.merge_mass_drift = report.merge_mass_drift.max((after - before).norm() / scale);
    report.worker_counts.push(counts);
}

/// Runs `n` workers as threads of this process over channels.
pub fn run_threads(engine: Arc<Engine>, n: usize, opts: RunOptions) -> Result<RunReport> {
    if n == 0 {
        return Err(Error::Spec("worker count must be at least 1".into()));
    }
    let results: Vec<Result<Option<RunReport>>> = std::thread::scope(|s| {
        let handles: Vec<_> = ThreadTransport::mesh(n)
            .into_iter()
            .map(|t| {
                let engine = engine.clone();
                s.spawn(move || run_worker(&engine, Box::new(t), opts))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Spec("worker thread panicked".into()))))
            .collect()
    });
    // Report the root cause: the first failure that is not a hang-up.
    let mut report = None;
    let mut first_err = None;
    for r in results {
        match r {
            Ok(Some(rep)) => report = Some(rep),
            Ok(None) => {}
            Err(e) => {
                let hangup = matches!(&e, Error::Transport { detail, .. } if detail.contains("hung up"));
                if first_err.is_none() || (!hangup && matches!(first_err, Some((true, _)))) {
                    first_err = Some((hangup, e));
                }
            }
        }
    }
    if let Some((_, e)) = first_err {
        return Err(e);
    }
    report.ok_or_else(|| Error::Spec("rank 0 produced no report".into()))
}
