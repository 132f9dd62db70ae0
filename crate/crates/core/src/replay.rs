//! Uniform and prioritized replay of action-labelled transition sequences.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modifiers::{NormalizationMode, PriorityWeights, TerminalMask};
use crate::tensor::Tensor;

/// One environment step taken from `obs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    /// The step from `obs` ended the episode.
    pub done: bool,
}

/// Binary sum tree over `capacity` (a power of two) non-negative leaves.
/// Internal nodes are recomputed as `left + right` on every write, so each
/// node is bit-exactly the sum of its children.
#[derive(Debug, Clone)]
pub struct SumTree {
    capacity: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    /// `capacity` is rounded up to a power of two.
    pub fn new(capacity: usize) -> Self {
        let capacity = capacity.max(1).next_power_of_two();
        Self {
            capacity,
            nodes: vec![0.0; 2 * capacity],
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn total(&self) -> f64 {
        self.nodes[1]
    }

    pub fn get(&self, leaf: usize) -> f64 {
        self.nodes[self.capacity + leaf]
    }

    pub fn leaves(&self) -> &[f64] {
        &self.nodes[self.capacity..]
    }

    pub fn set(&mut self, leaf: usize, priority: f64) -> Result<()> {
        if leaf >= self.capacity {
            return Err(Error::Domain(format!("leaf {leaf} out of range for capacity {}", self.capacity)));
        }
        if !(priority >= 0.0) || !priority.is_finite() {
            return Err(Error::Domain(format!("priority must be finite and >= 0, got {priority}")));
        }
        let mut j = self.capacity + leaf;
        self.nodes[j] = priority;
        while j > 1 {
            j /= 2;
            self.nodes[j] = self.nodes[2 * j] + self.nodes[2 * j + 1];
        }
        Ok(())
    }

    /// Leaf whose prefix interval `[Σ_{j<i} p_j, Σ_{j≤i} p_j)` contains
    /// `mass`. Never returns a zero-priority leaf while the total is positive.
    pub fn find(&self, mass: f64) -> usize {
        let mut u = mass.max(0.0);
        let mut j = 1;
        while j < self.capacity {
            let left = 2 * j;
            let go_left = (u < self.nodes[left] || self.nodes[left + 1] <= 0.0) && self.nodes[left] > 0.0;
            if go_left {
                j = left;
            } else {
                u -= self.nodes[left];
                j = left + 1;
            }
        }
        j - self.capacity
    }

    /// Checks the parent-equals-sum-of-children invariant exactly.
    pub fn is_consistent(&self) -> bool {
        (1..self.capacity).all(|j| self.nodes[j] == self.nodes[2 * j] + self.nodes[2 * j + 1])
    }
}

/// `(|td| + eps)^alpha`.
pub fn priority_from_td(td: f64, eps: f64, alpha: f64) -> f64 {
    (td.abs() + eps).powf(alpha)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReplayMode {
    #[default]
    Prioritized,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReplayConfig {
    pub capacity: usize,
    pub alpha: f64,
    pub beta: f64,
    pub priority_eps: f64,
    pub mode: ReplayMode,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            capacity: 1 << 15,
            alpha: 0.5,
            beta: 0.4,
            priority_eps: 1e-2,
            mode: ReplayMode::Prioritized,
        }
    }
}

/// `B` contiguous sequences of `T+1` states, where `T` is the larger of the
/// SSL horizon `K` and the TD horizon `n`.
#[derive(Debug, Clone)]
pub struct SequenceBatch {
    /// `B×(T+1)×d_obs`.
    pub obs: Tensor,
    /// `B×T` action ids.
    pub actions: Vec<Vec<usize>>,
    /// `B×T` rewards, zero after the first done.
    pub rewards: Vec<Vec<f64>>,
    /// `B×(T+1)`, absorbing: once set, stays set.
    pub done_flags: Vec<Vec<bool>>,
    pub sample_indices: Vec<usize>,
    /// Sampling probability of each start index.
    pub probabilities: Vec<f64>,
    /// Unnormalized importance weights `(size·P(i))^{−β}`.
    pub importance: Vec<f64>,
    pub horizon: usize,
}

impl SequenceBatch {
    pub fn batch_size(&self) -> usize {
        self.actions.len()
    }

    /// Actions `0..k` of every row.
    pub fn actions_prefix(&self, k: usize) -> Vec<Vec<usize>> {
        self.actions.iter().map(|row| row[..k].to_vec()).collect()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs.shape()[2]
    }
}

/// Mask over the first `K+1` states: entry `(i,k)` is 0 iff a done flag is
/// set at some step `< k`, i.e. state `k` comes after the episode ended.
/// The terminal transition's own start state stays unmasked.
pub fn build_terminal_mask(batch: &SequenceBatch, k: usize) -> Result<TerminalMask> {
    let b = batch.batch_size();
    let mut m = Tensor::full(&[b, k + 1], 1.0);
    for (i, flags) in batch.done_flags.iter().enumerate() {
        if flags.len() < k + 1 {
            return Err(Error::Contract(format!("row {i} has {} flags, need {}", flags.len(), k + 1)));
        }
        if flags.windows(2).any(|w| w[0] && !w[1]) {
            return Err(Error::Contract(format!("done flags of row {i} are not absorbing")));
        }
        for step in 1..=k {
            if flags[step - 1] {
                m.set(&[i, step], 0.0);
            }
        }
    }
    TerminalMask::new(m)
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    config: ReplayConfig,
    capacity: usize,
    storage: Vec<Transition>,
    cursor: usize,
    size: usize,
    tree: SumTree,
    max_priority: f64,
}

impl ReplayBuffer {
    pub fn new(config: ReplayConfig) -> Result<Self> {
        if config.capacity < 2 {
            return Err(Error::Config("replay capacity must be at least 2".into()));
        }
        if !(config.alpha >= 0.0 && config.beta >= 0.0 && config.priority_eps > 0.0) {
            return Err(Error::Config("replay alpha/beta must be >= 0 and priority_eps > 0".into()));
        }
        let tree = SumTree::new(config.capacity);
        let capacity = tree.capacity();
        Ok(Self {
            config,
            capacity,
            storage: Vec::with_capacity(capacity.min(1 << 16)),
            cursor: 0,
            size: 0,
            tree,
            max_priority: 1.0,
        })
    }

    pub fn config(&self) -> &ReplayConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn tree(&self) -> &SumTree {
        &self.tree
    }

    pub fn max_priority(&self) -> f64 {
        self.max_priority
    }

    /// Slot of the `pos`-th oldest transition.
    fn slot(&self, pos: usize) -> usize {
        (self.cursor + self.capacity - self.size + pos) % self.capacity
    }

    fn age_position(&self, slot: usize) -> usize {
        (slot + self.capacity - self.slot(0)) % self.capacity
    }

    pub fn get(&self, slot: usize) -> Option<&Transition> {
        (slot < self.storage.len()).then(|| &self.storage[slot])
    }

    /// Stores `t` with the current maximum priority, overwriting the oldest
    /// entry when full.
    pub fn push(&mut self, t: Transition) {
        if self.storage.len() < self.capacity {
            self.storage.push(t);
        } else {
            self.storage[self.cursor] = t;
        }
        self.tree
            .set(self.cursor, self.max_priority)
            .expect("cursor within capacity and max priority finite");
        self.cursor = (self.cursor + 1) % self.capacity;
        self.size = (self.size + 1).min(self.capacity);
    }

    /// Sets `leaf ← (|td| + ε_p)^α` for each sampled slot.
    pub fn update_priorities(&mut self, slots: &[usize], td_errors: &[f64]) -> Result<()> {
        if slots.len() != td_errors.len() {
            return Err(Error::Shape(format!("{} slots, {} td errors", slots.len(), td_errors.len())));
        }
        for (&s, &td) in slots.iter().zip(td_errors) {
            if s >= self.storage.len() {
                return Err(Error::Domain(format!("slot {s} holds no transition")));
            }
            if !td.is_finite() {
                return Err(Error::Numeric(format!("td error {td} for slot {s}")));
            }
            let p = priority_from_td(td, self.config.priority_eps, self.config.alpha);
            self.tree.set(s, p)?;
            self.max_priority = self.max_priority.max(p);
        }
        Ok(())
    }

    fn valid_start(&self, slot: usize, horizon: usize) -> bool {
        slot < self.storage.len() && self.age_position(slot) + horizon < self.size
    }

    /// Draws `batch` sequences of `horizon+1` states. Prioritized mode uses
    /// stratified prefix-sum sampling; uniform mode draws start positions
    /// uniformly. Weights are normalized per `normalization`.
    pub fn sample_sequences(
        &self,
        batch: usize,
        horizon: usize,
        normalization: NormalizationMode,
        rng: &mut impl Rng,
    ) -> Result<(SequenceBatch, PriorityWeights)> {
        let needed = batch + horizon + 1;
        if self.size < needed {
            return Err(Error::Underflow {
                needed,
                available: self.size,
            });
        }
        let valid_count = self.size - horizon;
        let mut slots = Vec::with_capacity(batch);
        let mut probabilities = Vec::with_capacity(batch);
        match self.config.mode {
            ReplayMode::Uniform => {
                for _ in 0..batch {
                    slots.push(self.slot(rng.gen_range(0..valid_count)));
                    probabilities.push(1.0 / self.size as f64);
                }
            }
            ReplayMode::Prioritized => {
                let total = self.tree.total();
                let segment = total / batch as f64;
                for i in 0..batch {
                    let mut slot = self.tree.find((i as f64 + rng.gen::<f64>()) * segment);
                    let mut tries = 0;
                    while !self.valid_start(slot, horizon) {
                        tries += 1;
                        if tries > 10_000 {
                            return Err(Error::Underflow {
                                needed,
                                available: self.size,
                            });
                        }
                        slot = self.tree.find(rng.gen::<f64>() * total);
                    }
                    slots.push(slot);
                    probabilities.push(self.tree.get(slot) / total);
                }
            }
        }
        let importance: Vec<f64> = probabilities
            .iter()
            .map(|&p| match self.config.mode {
                ReplayMode::Uniform => 1.0,
                ReplayMode::Prioritized => (self.size as f64 * p).powf(-self.config.beta),
            })
            .collect();

        let d_obs = self.storage[slots[0]].obs.len();
        let mut obs = Vec::with_capacity(batch * (horizon + 1) * d_obs);
        let mut actions = Vec::with_capacity(batch);
        let mut rewards = Vec::with_capacity(batch);
        let mut done_flags = Vec::with_capacity(batch);
        for &slot in &slots {
            let pos = self.age_position(slot);
            let mut a_row = Vec::with_capacity(horizon);
            let mut r_row = Vec::with_capacity(horizon);
            let mut d_row = Vec::with_capacity(horizon + 1);
            let mut ended = false;
            for k in 0..=horizon {
                let t = &self.storage[self.slot(pos + k)];
                obs.extend_from_slice(&t.obs);
                if k < horizon {
                    a_row.push(t.action);
                    r_row.push(if ended { 0.0 } else { t.reward });
                }
                ended |= t.done;
                d_row.push(ended);
            }
            actions.push(a_row);
            rewards.push(r_row);
            done_flags.push(d_row);
        }
        let weights = PriorityWeights::from_importance(&importance, normalization)?;
        let batch = SequenceBatch {
            obs: Tensor::new(vec![batch, horizon + 1, d_obs], obs)?,
            actions,
            rewards,
            done_flags,
            sample_indices: slots,
            probabilities,
            importance,
            horizon,
        };
        Ok((batch, weights))
    }
}
