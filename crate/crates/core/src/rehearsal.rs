//! Bounded per-class store of past samples for replay.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::rng::{self, purpose};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RehearsalBuffer {
    per_class: usize,
    by_label: BTreeMap<usize, Vec<Sample>>,
}

impl RehearsalBuffer {
    pub fn new(per_class: usize) -> Self {
        RehearsalBuffer { per_class, by_label: BTreeMap::new() }
    }

    pub fn per_class(&self) -> usize {
        self.per_class
    }

    pub fn len(&self) -> usize {
        self.by_label.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        self.by_label.iter().map(|(&l, v)| (l, v.len())).collect()
    }

    pub fn samples(&self) -> impl Iterator<Item = &Sample> {
        self.by_label.values().flatten()
    }

    /// Uniform draw of up to `n` stored samples without replacement.
    pub fn draw(&self, n: usize, seed: u64, path: &[u64]) -> Vec<&Sample> {
        let all: Vec<&Sample> = self.samples().collect();
        let mut rng = rng::rng_for(seed, &[&[purpose::REPLAY], path].concat());
        all.choose_multiple(&mut rng, n.min(all.len())).copied().collect()
    }

    /// Folds `seen` into the buffer, keeping a uniform random subset of at
    /// most `per_class` samples for every label.
    pub fn retain(&mut self, seen: &[Sample], seed: u64, task: u64) {
        let mut incoming: BTreeMap<usize, Vec<&Sample>> = BTreeMap::new();
        for s in seen {
            incoming.entry(s.label).or_default().push(s);
        }
        for (label, new) in incoming {
            let slot = self.by_label.entry(label).or_default();
            let mut pool: Vec<Sample> = std::mem::take(slot);
            pool.extend(new.into_iter().cloned());
            pool.shuffle(&mut rng::rng_for(seed, &[purpose::RETAIN, task, label as u64]));
            pool.truncate(self.per_class);
            pool.sort_by_key(|s| s.id);
            *slot = pool;
        }
    }
}
