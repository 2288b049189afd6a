//! Bounded, label-balanced episodic memory.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::{Example, Input};

/// Label used to balance memory: the class for sequence examples, the first
/// non-`O` tag (or `O`) for token examples.
pub fn balance_key(example: &Example) -> usize {
    match &example.input {
        Input::Sequence { label, .. } => *label,
        Input::Tokens { labels, .. } => labels.iter().copied().find(|&l| l != 0).unwrap_or(0),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub example: Example,
    pub key: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodicMemory {
    entries: Vec<MemoryEntry>,
    /// `None` means unbounded.
    capacity: Option<usize>,
    admission_prob: f64,
    counts: BTreeMap<usize, usize>,
}

impl EpisodicMemory {
    pub fn new(capacity: Option<usize>, admission_prob: f64) -> Self {
        Self {
            entries: Vec::new(),
            capacity,
            admission_prob,
            counts: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    /// Number of stored entries per balance key.
    pub fn counts(&self) -> &BTreeMap<usize, usize> {
        &self.counts
    }

    /// Offers an example; it is admitted with probability `admission_prob`.
    ///
    /// When the memory is full, one entry is evicted first: the oldest entry
    /// of the label that would be most represented once the newcomer is
    /// counted. Among tied labels the one holding the oldest entry loses.
    pub fn observe<R: Rng + ?Sized>(&mut self, example: Example, rng: &mut R) -> bool {
        if rng.random::<f64>() >= self.admission_prob {
            return false;
        }
        if self.capacity == Some(0) {
            return false;
        }
        let key = balance_key(&example);
        if self.capacity.is_some_and(|c| self.entries.len() >= c) {
            self.evict_for(key);
        }
        self.entries.push(MemoryEntry { example, key });
        *self.counts.entry(key).or_default() += 1;
        true
    }

    fn evict_for(&mut self, incoming: usize) {
        let tentative = |k: usize, n: usize| if k == incoming { n + 1 } else { n };
        let max = self
            .counts
            .iter()
            .map(|(&k, &n)| tentative(k, n))
            .max()
            .unwrap_or(0);
        // entries are in arrival order, so the first hit is the oldest
        let pos = self
            .entries
            .iter()
            .position(|e| tentative(e.key, self.counts[&e.key]) == max)
            .expect("full memory has entries");
        let victim = self.entries.remove(pos);
        let n = self.counts.get_mut(&victim.key).unwrap();
        *n -= 1;
        if *n == 0 {
            self.counts.remove(&victim.key);
        }
    }

    /// Up to `k` entries uniformly without replacement; everything (in
    /// storage order) when fewer than `k` are stored.
    pub fn sample<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Vec<&Example> {
        self.sample_where(k, rng, |_| true)
    }

    /// As [`sample`](Self::sample), restricted to entries matching `keep`.
    pub fn sample_where<R, F>(&self, k: usize, rng: &mut R, keep: F) -> Vec<&Example>
    where
        R: Rng + ?Sized,
        F: Fn(&Example) -> bool,
    {
        let eligible: Vec<&Example> = self
            .entries
            .iter()
            .map(|e| &e.example)
            .filter(|e| keep(e))
            .collect();
        if k == 0 || eligible.is_empty() {
            return Vec::new();
        }
        if eligible.len() <= k {
            return eligible;
        }
        rand::seq::index::sample(rng, eligible.len(), k)
            .into_iter()
            .map(|i| eligible[i])
            .collect()
    }
}
