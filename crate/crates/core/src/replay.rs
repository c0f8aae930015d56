//! Episode buffering, discounted returns and the prioritized replay buffer
//! used by self-imitation learning.
//!
//! Entries are prioritized by their clipped advantage `max(R - V(s), 0)`; a
//! small epsilon keeps every stored entry reachable. The sum-tree stores
//! `priority^exponent` so sampling is proportional to it.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub observation: Vec<f64>,
    pub action: usize,
    pub reward: f64,
}

/// Transitions of the episode currently in progress.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpisodeBuffer {
    steps: Vec<Transition>,
}

impl EpisodeBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, observation: Vec<f64>, action: usize, reward: f64) {
        self.steps.push(Transition {
            observation,
            action,
            reward,
        });
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn steps(&self) -> &[Transition] {
        &self.steps
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|t| t.reward).collect()
    }

    pub fn clear(&mut self) {
        self.steps.clear();
    }

    /// Takes the finished episode out, leaving the buffer empty.
    pub fn take(&mut self) -> EpisodeBuffer {
        std::mem::take(self)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayEntry {
    pub observation: Vec<f64>,
    pub action: usize,
    /// Discounted return from this step to the end of the episode.
    pub ret: f64,
}

/// `R_t = r_t + gamma * R_{t+1}` with `R_{T} = 0` past the last step.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (o, &r) in out.iter_mut().zip(rewards).rev() {
        acc = r + gamma * acc;
        *o = acc;
    }
    out
}

pub fn compute_returns(episode: &EpisodeBuffer, gamma: f64) -> Vec<ReplayEntry> {
    let returns = discounted_returns(&episode.rewards(), gamma);
    episode
        .steps
        .iter()
        .zip(returns)
        .map(|(t, ret)| ReplayEntry {
            observation: t.observation.clone(),
            action: t.action,
            ret,
        })
        .collect()
}

/// Binary tree of partial sums over a fixed number of leaves.
///
/// Internal nodes are always recomputed as `left + right` (never patched with
/// deltas), so the sum invariant holds exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct SumTree {
    leaves: usize,
    /// 1-based heap layout; `nodes[1]` is the root, leaves start at `base`.
    nodes: Vec<f64>,
    base: usize,
}

impl SumTree {
    pub fn new(leaves: usize) -> Self {
        let base = leaves.max(1).next_power_of_two();
        Self {
            leaves,
            nodes: vec![0.0; 2 * base],
            base,
        }
    }

    pub fn len(&self) -> usize {
        self.leaves
    }

    pub fn is_empty(&self) -> bool {
        self.leaves == 0
    }

    pub fn total(&self) -> f64 {
        self.nodes[1]
    }

    pub fn get(&self, i: usize) -> f64 {
        self.nodes[self.base + i]
    }

    pub fn set(&mut self, i: usize, value: f64) {
        assert!(i < self.leaves, "leaf {i} out of range");
        debug_assert!(value >= 0.0 && value.is_finite());
        let mut node = self.base + i;
        self.nodes[node] = value;
        while node > 1 {
            node /= 2;
            self.nodes[node] = self.nodes[2 * node] + self.nodes[2 * node + 1];
        }
    }

    /// Leaf whose cumulative-sum interval contains `mass`.
    pub fn find(&self, mass: f64) -> usize {
        let mut mass = mass.clamp(0.0, self.total());
        let mut node = 1;
        while node < self.base {
            let left = self.nodes[2 * node];
            let right = self.nodes[2 * node + 1];
            if mass < left || right == 0.0 {
                node *= 2;
            } else {
                mass -= left;
                node = 2 * node + 1;
            }
        }
        (node - self.base).min(self.leaves.saturating_sub(1))
    }

    /// Largest relative mismatch between an internal node and its children.
    pub fn max_invariant_error(&self) -> f64 {
        (1..self.base)
            .map(|n| {
                let s = self.nodes[2 * n] + self.nodes[2 * n + 1];
                (self.nodes[n] - s).abs() / s.abs().max(1e-300)
            })
            .filter(|e| e.is_finite())
            .fold(0.0, f64::max)
    }

    pub fn leaf_sum(&self) -> f64 {
        self.nodes[self.base..self.base + self.leaves].iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrioritizedConfig {
    pub capacity: usize,
    /// Priorities are raised to this power before entering the tree.
    pub exponent: f64,
    /// Importance-sampling exponent for the weight correction.
    pub bias_correction: f64,
    /// Added to the clipped advantage so no stored entry has zero mass.
    pub epsilon: f64,
}

impl Default for PrioritizedConfig {
    fn default() -> Self {
        Self {
            capacity: 100_000,
            exponent: 0.6,
            bias_correction: 0.1,
            epsilon: 1e-6,
        }
    }
}

/// Identifies a sampled slot; the serial detects entries evicted since.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleHandle {
    pub slot: usize,
    pub serial: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampledBatch {
    pub handles: Vec<SampleHandle>,
    /// Sampling probability of each drawn slot.
    pub probabilities: Vec<f64>,
    /// `(N * P(i))^-bias_correction`, normalized by the batch maximum.
    pub weights: Vec<f64>,
}

impl SampledBatch {
    pub fn len(&self) -> usize {
        self.handles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.handles.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct PrioritizedBuffer {
    config: PrioritizedConfig,
    entries: Vec<ReplayEntry>,
    serials: Vec<u64>,
    tree: SumTree,
    next: usize,
    inserted: u64,
    stale_updates: u64,
}

impl PrioritizedBuffer {
    pub fn new(config: PrioritizedConfig) -> Result<Self> {
        if config.capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        if !(config.exponent >= 0.0) || !(config.epsilon >= 0.0) || !(config.bias_correction >= 0.0) {
            return Err(Error::Config(
                "replay exponent, epsilon and bias correction must be non-negative".into(),
            ));
        }
        Ok(Self {
            tree: SumTree::new(config.capacity),
            entries: Vec::new(),
            serials: Vec::new(),
            next: 0,
            inserted: 0,
            stale_updates: 0,
            config,
        })
    }

    pub fn config(&self) -> &PrioritizedConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.config.capacity
    }

    /// Number of priority updates dropped because their slot was overwritten.
    pub fn stale_updates(&self) -> u64 {
        self.stale_updates
    }

    pub fn tree(&self) -> &SumTree {
        &self.tree
    }

    pub fn entry(&self, slot: usize) -> &ReplayEntry {
        &self.entries[slot]
    }

    pub fn entries(&self) -> impl Iterator<Item = &ReplayEntry> {
        self.entries.iter()
    }

    fn tree_value(&self, clipped_advantage: f64) -> f64 {
        (clipped_advantage.max(0.0) + self.config.epsilon).powf(self.config.exponent)
    }

    /// Priority before exponentiation, `max(R - V, 0) + epsilon`.
    pub fn priority(&self, slot: usize) -> f64 {
        if self.config.exponent == 0.0 {
            return 1.0;
        }
        self.tree.get(slot).powf(1.0 / self.config.exponent)
    }

    pub fn probability(&self, slot: usize) -> f64 {
        self.tree.get(slot) / self.tree.total()
    }

    /// Stores one entry with priority from the value estimate at push time,
    /// overwriting the oldest entry when full.
    pub fn push(&mut self, entry: ReplayEntry, value_estimate: f64) {
        let mass = self.tree_value(entry.ret - value_estimate);
        let slot = self.next;
        if slot == self.entries.len() {
            self.entries.push(entry);
            self.serials.push(self.inserted);
        } else {
            self.entries[slot] = entry;
            self.serials[slot] = self.inserted;
        }
        self.tree.set(slot, mass);
        self.inserted += 1;
        self.next = (self.next + 1) % self.config.capacity;
    }

    pub fn push_episode(&mut self, entries: Vec<ReplayEntry>, value_estimates: &[f64]) -> Result<()> {
        if entries.len() != value_estimates.len() {
            return Err(Error::shape("push_episode value estimates", entries.len(), value_estimates.len()));
        }
        for (e, &v) in entries.into_iter().zip(value_estimates) {
            self.push(e, v);
        }
        Ok(())
    }

    /// Stratified proportional sampling: the total mass is cut into
    /// `batch_size` equal segments and one draw is made inside each.
    pub fn sample_batch<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<SampledBatch> {
        if self.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let total = self.tree.total();
        let segment = total / batch_size as f64;
        let n = self.len() as f64;
        let mut handles = Vec::with_capacity(batch_size);
        let mut probabilities = Vec::with_capacity(batch_size);
        let mut weights = Vec::with_capacity(batch_size);
        for i in 0..batch_size {
            let mass = (i as f64 + rng.random::<f64>()) * segment;
            let slot = self.tree.find(mass).min(self.len() - 1);
            let p = self.tree.get(slot) / total;
            handles.push(SampleHandle {
                slot,
                serial: self.serials[slot],
            });
            probabilities.push(p);
            weights.push((n * p).powf(-self.config.bias_correction));
        }
        let max_w = weights.iter().copied().fold(0.0, f64::max);
        weights.iter_mut().for_each(|w| *w /= max_w);
        Ok(SampledBatch {
            handles,
            probabilities,
            weights,
        })
    }

    /// Replaces priorities of previously sampled slots. Handles whose slot has
    /// since been overwritten are skipped and counted.
    pub fn update_priorities(&mut self, handles: &[SampleHandle], clipped_advantages: &[f64]) -> Result<usize> {
        if handles.len() != clipped_advantages.len() {
            return Err(Error::shape("update_priorities", handles.len(), clipped_advantages.len()));
        }
        let mut applied = 0;
        for (h, &adv) in handles.iter().zip(clipped_advantages) {
            if h.slot >= self.len() || self.serials[h.slot] != h.serial {
                self.stale_updates += 1;
                continue;
            }
            let mass = self.tree_value(adv);
            self.tree.set(h.slot, mass);
            applied += 1;
        }
        Ok(applied)
    }

    /// Writes a debugging snapshot (see the README for the layout).
    pub fn write_snapshot(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        let obs_dim = self.entries.first().map_or(0, |e| e.observation.len());
        buf.extend_from_slice(SNAPSHOT_MAGIC);
        buf.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        for v in [self.config.capacity as u64, obs_dim as u64, self.len() as u64, self.next as u64, self.inserted] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in [self.config.exponent, self.config.bias_correction, self.config.epsilon] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for (slot, e) in self.entries.iter().enumerate() {
            buf.extend_from_slice(&self.serials[slot].to_le_bytes());
            buf.extend_from_slice(&(e.action as u64).to_le_bytes());
            buf.extend_from_slice(&e.ret.to_le_bytes());
            buf.extend_from_slice(&self.tree.get(slot).to_le_bytes());
            for x in &e.observation {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_snapshot(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut r = ByteReader::new(&bytes);
        if r.take(SNAPSHOT_MAGIC.len()).ok_or_else(|| bad("truncated header"))? != SNAPSHOT_MAGIC {
            return Err(bad("not a replay snapshot"));
        }
        let version = u32::from_le_bytes(r.array().ok_or_else(|| bad("truncated header"))?);
        if version != SNAPSHOT_VERSION {
            return Err(bad(&format!("unsupported snapshot version {version}")));
        }
        let mut header = [0u64; 5];
        for h in &mut header {
            *h = r.u64().ok_or_else(|| bad("truncated header"))?;
        }
        let [capacity, obs_dim, len, next, inserted] = header.map(|v| v as usize);
        let exponent = r.f64().ok_or_else(|| bad("truncated header"))?;
        let bias_correction = r.f64().ok_or_else(|| bad("truncated header"))?;
        let epsilon = r.f64().ok_or_else(|| bad("truncated header"))?;
        let mut buffer = Self::new(PrioritizedConfig {
            capacity,
            exponent,
            bias_correction,
            epsilon,
        })?;
        if len > capacity || next >= capacity.max(1) {
            return Err(bad("inconsistent sizes"));
        }
        for slot in 0..len {
            let serial = r.u64().ok_or_else(|| bad("truncated entry"))?;
            let action = r.u64().ok_or_else(|| bad("truncated entry"))? as usize;
            let ret = r.f64().ok_or_else(|| bad("truncated entry"))?;
            let mass = r.f64().ok_or_else(|| bad("truncated entry"))?;
            let observation = (0..obs_dim)
                .map(|_| r.f64())
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| bad("truncated entry"))?;
            buffer.entries.push(ReplayEntry {
                observation,
                action,
                ret,
            });
            buffer.serials.push(serial);
            buffer.tree.set(slot, mass);
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes"));
        }
        buffer.next = next;
        buffer.inserted = inserted as u64;
        Ok(buffer)
    }
}

const SNAPSHOT_MAGIC: &[u8; 8] = b"SILRPLY\0";
const SNAPSHOT_VERSION: u32 = 1;

struct ByteReader<'a> {
    bytes: &'a [u8],
}

impl<'a> ByteReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes }
    }

    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.bytes.len() < n {
            return None;
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Some(head)
    }

    fn array<const N: usize>(&mut self) -> Option<[u8; N]> {
        self.take(N).map(|b| b.try_into().unwrap())
    }

    fn u64(&mut self) -> Option<u64> {
        self.array().map(u64::from_le_bytes)
    }

    fn f64(&mut self) -> Option<f64> {
        self.array().map(f64::from_le_bytes)
    }

    fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }
}
