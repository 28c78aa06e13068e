//! Path configurations, masked keys, pre-merging and filtering.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::hash::BuildHasherDefault;

use num_complex::Complex64;
use rayon::prelude::*;
use rustc_hash::{FxHashMap, FxHasher};
use smallvec::SmallVec;

use crate::error::{Error, Result};

/// Largest supported number of DVR states (indices are stored as bytes).
pub const MAX_STATES: usize = 255;

/// Inputs smaller than this are merged sequentially.
const PARALLEL_THRESHOLD: usize = 1 << 15;

/// Relative tolerance under which two `|weight|` values tie.
pub const WEIGHT_TIE_TOL: f64 = 1e-9;

pub type PathKey = SmallVec<[u8; 24]>;

/// A forward/backward path window with its representative amplitude and the
/// accumulated amplitude of every path merged into it.
#[derive(Debug, Clone, PartialEq)]
pub struct Configuration {
    // Interleaved (fwd, bwd) state indices, oldest first.
    states: SmallVec<[u8; 32]>,
    pub weight: Complex64,
    pub sum: Complex64,
}

impl Configuration {
    pub fn new(fwd: &[usize], bwd: &[usize], weight: Complex64, sum: Complex64) -> Result<Self> {
        if fwd.len() != bwd.len() || fwd.is_empty() {
            return Err(Error::Dimension(format!(
                "forward and backward windows must be non-empty and of equal length ({} vs {})",
                fwd.len(),
                bwd.len()
            )));
        }
        let mut states = SmallVec::with_capacity(2 * fwd.len());
        for (&f, &b) in fwd.iter().zip(bwd) {
            if f >= MAX_STATES || b >= MAX_STATES {
                return Err(Error::Dimension(format!("state index {} exceeds {}", f.max(b), MAX_STATES - 1)));
            }
            states.push(f as u8);
            states.push(b as u8);
        }
        Ok(Self { states, weight, sum })
    }

    /// Single-point configuration with `weight = sum = amplitude`.
    pub fn start(fwd: usize, bwd: usize, amplitude: Complex64) -> Self {
        assert!(fwd < MAX_STATES && bwd < MAX_STATES);
        let mut states = SmallVec::new();
        states.push(fwd as u8);
        states.push(bwd as u8);
        Self { states, weight: amplitude, sum: amplitude }
    }

    /// Window length (number of time points held).
    #[inline]
    pub fn len(&self) -> usize {
        self.states.len() / 2
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// `(fwd, bwd)` at window slot `k` (0 is the oldest).
    #[inline]
    pub fn slot(&self, k: usize) -> (usize, usize) {
        (self.states[2 * k] as usize, self.states[2 * k + 1] as usize)
    }

    /// `(fwd, bwd)` at lag `d` behind the newest point.
    #[inline]
    pub fn lag(&self, d: usize) -> Option<(usize, usize)> {
        let n = self.len();
        (d < n).then(|| self.slot(n - 1 - d))
    }

    #[inline]
    pub fn newest(&self) -> (usize, usize) {
        self.slot(self.len() - 1)
    }

    pub fn fwd(&self) -> Vec<usize> {
        self.states.iter().step_by(2).map(|&s| s as usize).collect()
    }

    pub fn bwd(&self) -> Vec<usize> {
        self.states.iter().skip(1).step_by(2).map(|&s| s as usize).collect()
    }

    pub(crate) fn raw_states(&self) -> &[u8] {
        &self.states
    }

    pub(crate) fn from_raw(states: &[u8], weight: Complex64, sum: Complex64) -> Self {
        Self { states: SmallVec::from_slice(states), weight, sum }
    }

    /// Lexicographic order on the full path, forward branch first.
    pub fn path_cmp(&self, other: &Self) -> Ordering {
        let fa = self.states.iter().step_by(2);
        let fb = other.states.iter().step_by(2);
        fa.cmp(fb).then_with(|| {
            let ba = self.states.iter().skip(1).step_by(2);
            let bb = other.states.iter().skip(1).step_by(2);
            ba.cmp(bb)
        })
    }

    /// Whether `self` wins over `other` as representative: larger
    /// `|weight|`, then the lexicographically smaller path.
    ///
    /// Weights within [`WEIGHT_TIE_TOL`] (relative) count as equal: symmetric
    /// paths have exactly equal weights, and rounding in the merged sums must
    /// not decide between them.
    pub fn beats(&self, other: &Self) -> bool {
        let (a, b) = (self.weight.norm(), other.weight.norm());
        if (a - b).abs() <= WEIGHT_TIE_TOL * a.max(b) {
            return self.path_cmp(other) == Ordering::Less;
        }
        a > b
    }

    /// Window extended by `(fwd, bwd)`, keeping at most `max_len` points.
    pub fn extended(&self, fwd: usize, bwd: usize, max_len: usize, amplitude: Complex64) -> Self {
        let drop = if self.len() >= max_len { self.len() + 1 - max_len } else { 0 };
        let mut states = SmallVec::with_capacity(self.states.len() + 2 - 2 * drop);
        states.extend_from_slice(&self.states[2 * drop..]);
        states.push(fwd as u8);
        states.push(bwd as u8);
        Self { states, weight: amplitude, sum: amplitude }
    }
}

/// Sorted, distinct set of window lags on which paths are compared.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    lags: Vec<usize>,
}

impl Mask {
    pub fn new(mut lags: Vec<usize>) -> Result<Self> {
        lags.sort_unstable();
        let before = lags.len();
        lags.dedup();
        if lags.len() != before {
            return Err(Error::Mask("lags must be distinct".into()));
        }
        Ok(Self { lags })
    }

    /// All lags `0..=dk_max`.
    pub fn full(dk_max: usize) -> Self {
        Self { lags: (0..=dk_max).collect() }
    }

    /// Heuristic mask with `dk_eff` lags besides lag 0: the `⌈dk_eff/2⌉`
    /// most recent ones, then the remainder spread evenly up to `dk_max`.
    /// `dk_eff = dk_max` gives the full mask.
    pub fn dense(dk_eff: usize, dk_max: usize) -> Result<Self> {
        if dk_eff > dk_max {
            return Err(Error::Mask(format!("Δk_eff = {dk_eff} exceeds dk_max = {dk_max}")));
        }
        let head = dk_eff.div_ceil(2);
        let rest = dk_eff - head;
        let mut lags: Vec<usize> = (0..=head).collect();
        for k in 1..=rest {
            let span = (dk_max - head) as f64;
            let lag = head + ((k as f64) * span / rest as f64).round() as usize;
            lags.push(lag.clamp(head + 1, dk_max));
        }
        lags.sort_unstable();
        lags.dedup();
        // Rounding can collide for narrow spans; fill from the top.
        let mut fill = dk_max;
        while lags.len() < dk_eff + 1 {
            if !lags.contains(&fill) {
                lags.push(fill);
            }
            fill -= 1;
        }
        lags.sort_unstable();
        Ok(Self { lags })
    }

    pub fn lags(&self) -> &[usize] {
        &self.lags
    }

    pub fn len(&self) -> usize {
        self.lags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lags.is_empty()
    }

    /// Number of resolved lags besides the current time point.
    pub fn effective_size(&self) -> usize {
        self.lags.iter().filter(|&&l| l > 0).count()
    }

    pub fn contains(&self, lag: usize) -> bool {
        self.lags.binary_search(&lag).is_ok()
    }

    pub fn max_lag(&self) -> Option<usize> {
        self.lags.last().copied()
    }

    /// Checks that the mask resolves the current point and fits `dk_max`.
    pub fn validate(&self, dk_max: usize) -> Result<()> {
        if !self.contains(0) {
            return Err(Error::Mask("lag 0 must be part of the mask".into()));
        }
        if let Some(m) = self.max_lag() {
            if m > dk_max {
                return Err(Error::Mask(format!("lag {m} exceeds dk_max = {dk_max}")));
            }
        }
        Ok(())
    }

    /// The mask shifted back by one step, `{m − 1 : m ∈ mask, m ≥ 1}`.
    pub fn reduce(&self) -> Result<Self> {
        if !self.contains(0) {
            return Err(Error::Mask("cannot reduce a mask without lag 0".into()));
        }
        Ok(Self { lags: self.lags.iter().filter(|&&m| m >= 1).map(|m| m - 1).collect() })
    }
}

impl std::fmt::Display for Mask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.lags.iter().map(|l| l.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

/// Key over the masked `(fwd, bwd)` pairs, most recent first.
pub fn masked_key(cfg: &Configuration, mask: &Mask, states: usize) -> PathKey {
    let mut key = PathKey::new();
    let wide = states * states > 256;
    for &lag in &mask.lags {
        let Some((f, b)) = cfg.lag(lag) else { break };
        let digit = f * states + b;
        if wide {
            key.extend_from_slice(&(digit as u16).to_le_bytes());
        } else {
            key.push(digit as u8);
        }
    }
    key
}

/// Masked key packed into an integer: key bytes little-endian, length in
/// the top byte. Used when every key of a mask fits in 15 bytes.
fn packed_key(cfg: &Configuration, mask: &Mask, states: usize) -> u128 {
    let wide = states * states > 256;
    let mut acc = 0u128;
    let mut len = 0u32;
    for &lag in &mask.lags {
        let Some((f, b)) = cfg.lag(lag) else { break };
        let digit = (f * states + b) as u128;
        acc |= digit << (8 * len);
        len += if wide { 2 } else { 1 };
    }
    acc | ((len as u128) << 120)
}

fn pack_bytes(key: &[u8]) -> Option<u128> {
    if key.len() > 15 {
        return None;
    }
    let mut b = [0u8; 16];
    b[..key.len()].copy_from_slice(key);
    b[15] = key.len() as u8;
    Some(u128::from_le_bytes(b))
}

fn fits_packed(mask: &Mask, states: usize) -> bool {
    let width = if states * states > 256 { 2 } else { 1 };
    mask.len() * width <= 15
}

trait KeyKind: std::hash::Hash + Eq + Clone + Send + Sync {
    fn make(cfg: &Configuration, mask: &Mask, states: usize) -> Self;
}

impl KeyKind for u128 {
    #[inline]
    fn make(cfg: &Configuration, mask: &Mask, states: usize) -> Self {
        packed_key(cfg, mask, states)
    }
}

impl KeyKind for PathKey {
    #[inline]
    fn make(cfg: &Configuration, mask: &Mask, states: usize) -> Self {
        masked_key(cfg, mask, states)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum KeyIndex {
    Packed(FxHashMap<u128, u32>),
    Bytes(FxHashMap<PathKey, u32>),
}

impl KeyIndex {
    fn build(configs: &[Configuration], mask: &Mask, states: usize) -> Result<Self> {
        fn fill<K: KeyKind>(configs: &[Configuration], mask: &Mask, states: usize) -> Result<FxHashMap<K, u32>> {
            let mut map = FxHashMap::with_capacity_and_hasher(configs.len(), Default::default());
            for (i, c) in configs.iter().enumerate() {
                if map.insert(K::make(c, mask, states), i as u32).is_some() {
                    return Err(Error::Dimension("duplicate key in keyed store".into()));
                }
            }
            Ok(map)
        }
        Ok(if fits_packed(mask, states) {
            KeyIndex::Packed(fill(configs, mask, states)?)
        } else {
            KeyIndex::Bytes(fill(configs, mask, states)?)
        })
    }

    fn get(&self, key: &[u8]) -> Option<usize> {
        match self {
            KeyIndex::Packed(m) => pack_bytes(key).and_then(|k| m.get(&k)).map(|&i| i as usize),
            KeyIndex::Bytes(m) => m.get(key).map(|&i| i as usize),
        }
    }

    fn get_cfg(&self, cfg: &Configuration, mask: &Mask, states: usize) -> Option<usize> {
        match self {
            KeyIndex::Packed(m) => m.get(&packed_key(cfg, mask, states)).map(|&i| i as usize),
            KeyIndex::Bytes(m) => m.get(&masked_key(cfg, mask, states)).map(|&i| i as usize),
        }
    }

    fn insert(&mut self, cfg: &Configuration, mask: &Mask, states: usize, slot: usize) -> bool {
        match self {
            KeyIndex::Packed(m) => m.insert(packed_key(cfg, mask, states), slot as u32).is_none(),
            KeyIndex::Bytes(m) => m.insert(masked_key(cfg, mask, states), slot as u32).is_none(),
        }
    }

    fn remove(&mut self, cfg: &Configuration, mask: &Mask, states: usize) {
        match self {
            KeyIndex::Packed(m) => m.remove(&packed_key(cfg, mask, states)),
            KeyIndex::Bytes(m) => m.remove(&masked_key(cfg, mask, states)),
        };
    }
}

/// Phase of an [`OmegaStore`].
#[derive(Debug, Clone, PartialEq)]
enum Phase {
    Sequential,
    Keyed { mask: Mask, index: KeyIndex },
}

/// The collection of live configurations at one time step.
///
/// A store is either sequential (a plain list, as produced by propagation)
/// or keyed on a mask (one entry per masked key, as produced by merging).
#[derive(Debug, Clone, PartialEq)]
pub struct OmegaStore {
    states: usize,
    step: usize,
    configs: Vec<Configuration>,
    phase: Phase,
}

impl OmegaStore {
    pub fn new(states: usize, step: usize) -> Self {
        Self { states, step, configs: Vec::new(), phase: Phase::Sequential }
    }

    pub fn from_configs(states: usize, step: usize, configs: Vec<Configuration>) -> Self {
        Self { states, step, configs, phase: Phase::Sequential }
    }

    /// Keyed store from configurations whose masked keys are distinct.
    pub fn from_keyed(states: usize, step: usize, mask: &Mask, configs: Vec<Configuration>) -> Result<Self> {
        let index = KeyIndex::build(&configs, mask, states)?;
        Ok(Self { states, step, configs, phase: Phase::Keyed { mask: mask.clone(), index } })
    }

    pub fn states(&self) -> usize {
        self.states
    }
    pub fn step(&self) -> usize {
        self.step
    }
    pub fn set_step(&mut self, step: usize) {
        self.step = step;
    }
    pub fn len(&self) -> usize {
        self.configs.len()
    }
    pub fn is_empty(&self) -> bool {
        self.configs.is_empty()
    }
    pub fn configs(&self) -> &[Configuration] {
        &self.configs
    }
    pub fn is_keyed(&self) -> bool {
        matches!(self.phase, Phase::Keyed { .. })
    }

    /// Mask of a keyed store.
    pub fn key_mask(&self) -> Option<&Mask> {
        match &self.phase {
            Phase::Keyed { mask, .. } => Some(mask),
            Phase::Sequential => None,
        }
    }

    /// Masked key of entry `i` of a keyed store.
    pub fn key_of(&self, i: usize) -> Option<PathKey> {
        self.key_mask().map(|m| masked_key(&self.configs[i], m, self.states))
    }

    /// Index of the entry with the given key bytes.
    pub fn find(&self, key: &[u8]) -> Option<usize> {
        match &self.phase {
            Phase::Keyed { index, .. } => index.get(key),
            Phase::Sequential => None,
        }
    }

    /// Index of the entry sharing `cfg`'s masked key.
    pub fn find_matching(&self, cfg: &Configuration) -> Option<usize> {
        match &self.phase {
            Phase::Keyed { mask, index } => index.get_cfg(cfg, mask, self.states),
            Phase::Sequential => None,
        }
    }

    pub fn into_configs(self) -> Vec<Configuration> {
        self.configs
    }

    /// Drops the key index, returning to the sequential phase.
    pub fn into_sequential(mut self) -> Self {
        self.phase = Phase::Sequential;
        self
    }

    pub(crate) fn configs_mut(&mut self) -> &mut [Configuration] {
        &mut self.configs
    }

    /// Removes entries for which `keep` is false, preserving order and the
    /// key index.
    pub fn retain_indexed(&mut self, mut keep: impl FnMut(usize, &Configuration) -> bool) {
        let flags: Vec<bool> = self.configs.iter().enumerate().map(|(i, c)| keep(i, c)).collect();
        if flags.iter().all(|&f| f) {
            return;
        }
        let mut it = flags.iter();
        self.configs.retain(|_| *it.next().unwrap());
        if let Phase::Keyed { mask, index } = &mut self.phase {
            *index = KeyIndex::build(&self.configs, mask, self.states).expect("keys stay distinct");
        }
    }

    /// Appends a configuration. For keyed stores its key must be new.
    pub fn push(&mut self, cfg: Configuration) -> Result<()> {
        if let Phase::Keyed { mask, index } = &mut self.phase {
            if !index.insert(&cfg, mask, self.states, self.configs.len()) {
                return Err(Error::Dimension("duplicate key pushed into keyed store".into()));
            }
        }
        self.configs.push(cfg);
        Ok(())
    }

    /// Removes and returns the last `n` entries.
    pub fn split_off_tail(&mut self, n: usize) -> Vec<Configuration> {
        let at = self.configs.len().saturating_sub(n);
        let tail = self.configs.split_off(at);
        if let Phase::Keyed { mask, index } = &mut self.phase {
            for c in &tail {
                index.remove(c, mask, self.states);
            }
        }
        tail
    }

    /// Σ of `sum` over all configurations.
    pub fn total_sum(&self) -> Complex64 {
        self.configs.iter().map(|c| c.sum).sum()
    }

    /// Largest `|sum|` in the store (0 when empty).
    pub fn max_abs_sum(&self) -> f64 {
        self.configs.iter().map(|c| c.sum.norm()).fold(0.0, f64::max)
    }

    /// Merges configurations sharing a masked key. Each key keeps the
    /// configuration with the largest `|weight|` as representative (ties go
    /// to the lexicographically smaller path) and accumulates every `sum`.
    pub fn premerge(self, mask: &Mask) -> Self {
        let threads = rayon::current_num_threads();
        if threads < 2 || self.configs.len() < PARALLEL_THRESHOLD {
            return self.premerge_sequential(mask);
        }
        let (states, step) = (self.states, self.step);
        let phase = if fits_packed(mask, states) {
            let (configs, keys) = group_by_key::<u128>(self.configs, mask, states, threads);
            let map = keys.into_iter().enumerate().map(|(i, k)| (k, i as u32)).collect();
            (configs, KeyIndex::Packed(map))
        } else {
            let (configs, keys) = group_by_key::<PathKey>(self.configs, mask, states, threads);
            let map = keys.into_iter().enumerate().map(|(i, k)| (k, i as u32)).collect();
            (configs, KeyIndex::Bytes(map))
        };
        Self { states, step, configs: phase.0, phase: Phase::Keyed { mask: mask.clone(), index: phase.1 } }
    }

    /// [`premerge`](Self::premerge) on a single thread.
    pub fn premerge_sequential(self, mask: &Mask) -> Self {
        let (states, step) = (self.states, self.step);
        let (configs, index) = if fits_packed(mask, states) {
            let (c, m) = group_by_key_sequential::<u128>(self.configs, mask, states);
            (c, KeyIndex::Packed(m))
        } else {
            let (c, m) = group_by_key_sequential::<PathKey>(self.configs, mask, states);
            (c, KeyIndex::Bytes(m))
        };
        Self { states, step, configs, phase: Phase::Keyed { mask: mask.clone(), index } }
    }

    /// Removes configurations with `|sum| < θ · reference` and returns the
    /// total of the discarded sums.
    pub fn filter_against(&mut self, theta: f64, reference: f64) -> Complex64 {
        if theta <= 0.0 {
            return Complex64::new(0.0, 0.0);
        }
        let cut = theta * reference;
        let mut lost = Complex64::new(0.0, 0.0);
        self.retain_indexed(|_, c| {
            if c.sum.norm() < cut {
                lost += c.sum;
                false
            } else {
                true
            }
        });
        lost
    }

    /// Filter relative to this store's own largest `|sum|`.
    pub fn filter(&mut self, theta: f64) -> Complex64 {
        let reference = self.max_abs_sum();
        self.filter_against(theta, reference)
    }

    /// CSV dump `key_hex,fwd,bwd,re_weight,im_weight,re_sum,im_sum`; paths
    /// are space-separated state indices, oldest first. Keys are taken on
    /// `mask` if given, else on the store's own mask (empty when
    /// sequential).
    pub fn dump_csv(&self, mask: Option<&Mask>) -> String {
        let mut out = String::from("key_hex,fwd,bwd,re_weight,im_weight,re_sum,im_sum\n");
        let mask = mask.or(self.key_mask());
        for c in &self.configs {
            let key = mask.map(|m| masked_key(c, m, self.states)).unwrap_or_default();
            for b in &key {
                let _ = write!(out, "{b:02x}");
            }
            let join = |v: Vec<usize>| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
            let _ = writeln!(
                out,
                ",{},{},{:e},{:e},{:e},{:e}",
                join(c.fwd()),
                join(c.bwd()),
                c.weight.re,
                c.weight.im,
                c.sum.re,
                c.sum.im
            );
        }
        out
    }
}

fn absorb(resident: &mut Configuration, incoming: &Configuration) {
    resident.sum += incoming.sum;
    if incoming.beats(resident) {
        resident.states.clone_from(&incoming.states);
        resident.weight = incoming.weight;
    }
}

fn group_by_key_sequential<K: KeyKind>(
    configs: Vec<Configuration>,
    mask: &Mask,
    states: usize,
) -> (Vec<Configuration>, FxHashMap<K, u32>) {
    let mut index: FxHashMap<K, u32> = FxHashMap::with_capacity_and_hasher(configs.len() / 2, Default::default());
    let mut out: Vec<Configuration> = Vec::with_capacity(configs.len() / 2);
    for cfg in configs {
        let key = K::make(&cfg, mask, states);
        match index.entry(key) {
            std::collections::hash_map::Entry::Occupied(e) => absorb(&mut out[*e.get() as usize], &cfg),
            std::collections::hash_map::Entry::Vacant(e) => {
                e.insert(out.len() as u32);
                out.push(cfg);
            }
        }
    }
    out.shrink_to_fit();
    (out, index)
}

/// Hash-sharded group-by. Each shard visits its inputs in input order, so
/// representatives and sums are bitwise identical to the sequential pass,
/// and outputs are reassembled in first-occurrence order.
fn group_by_key<K: KeyKind>(
    configs: Vec<Configuration>,
    mask: &Mask,
    states: usize,
    threads: usize,
) -> (Vec<Configuration>, Vec<K>) {
    let shards = (threads * 4).next_power_of_two();
    let hasher = BuildHasherDefault::<FxHasher>::default();
    let keyed: Vec<(usize, K)> = configs
        .par_iter()
        .map(|c| {
            let k = K::make(c, mask, states);
            let h = std::hash::BuildHasher::hash_one(&hasher, &k);
            ((h >> 32) as usize & (shards - 1), k)
        })
        .collect();
    let mut members: Vec<Vec<u32>> = vec![Vec::new(); shards];
    for (i, (s, _)) in keyed.iter().enumerate() {
        members[*s].push(i as u32);
    }
    let partial: Vec<Vec<(u32, Configuration)>> = members
        .par_iter()
        .map(|idx| {
            let mut index: FxHashMap<&K, usize> = FxHashMap::default();
            let mut out: Vec<(u32, Configuration)> = Vec::new();
            for &i in idx {
                let key = &keyed[i as usize].1;
                let cfg = &configs[i as usize];
                match index.get(key) {
                    Some(&slot) => absorb(&mut out[slot].1, cfg),
                    None => {
                        index.insert(key, out.len());
                        out.push((i, cfg.clone()));
                    }
                }
            }
            out
        })
        .collect();
    let mut ordered: Vec<Option<Configuration>> = vec![None; configs.len()];
    for shard in partial {
        for (first, cfg) in shard {
            ordered[first as usize] = Some(cfg);
        }
    }
    let mut keys = Vec::new();
    let mut out = Vec::new();
    for (slot, (_, k)) in ordered.into_iter().zip(keyed) {
        if let Some(cfg) = slot {
            keys.push(k);
            out.push(cfg);
        }
    }
    (out, keys)
}
