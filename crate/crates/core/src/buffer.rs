//! Reservoir-sampled replay memory.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{LabeledBatch, Sample};

/// Bounded uniform sample of every item ever offered.
///
/// Invariant: `items.len() == min(seen, capacity)`.
#[derive(Debug, Clone)]
pub struct ReservoirBuffer {
    capacity: usize,
    items: Vec<Sample>,
    seen: u64,
    rng: ChaCha8Rng,
}

impl ReservoirBuffer {
    pub fn new(capacity: usize, rng: ChaCha8Rng) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("buffer capacity must be at least 1"));
        }
        Ok(ReservoirBuffer {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            seen: 0,
            rng,
        })
    }

    pub fn with_seed(capacity: usize, seed: u64) -> Result<Self> {
        Self::new(capacity, ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Sample] {
        &self.items
    }

    /// Single-pass reservoir update: the `n`-th offered item takes a free
    /// slot while the buffer is filling, afterwards it replaces a uniformly
    /// chosen slot with probability `capacity / n`.
    pub fn memory_update(&mut self, task_data: &[Sample]) {
        for s in task_data {
            self.seen += 1;
            if self.items.len() < self.capacity {
                self.items.push(s.clone());
            } else {
                let j = self.rng.random_range(0..self.seen);
                if j < self.capacity as u64 {
                    self.items[j as usize] = s.clone();
                }
            }
        }
    }

    /// `b` items drawn uniformly with replacement.
    pub fn sample_batch(&mut self, b: usize) -> Result<LabeledBatch> {
        if b == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if self.items.is_empty() {
            return Err(Error::state("cannot sample from an empty buffer"));
        }
        let batch = crate::stream::draw_with_replacement(&self.items, b, &mut self.rng);
        LabeledBatch::new(batch)
    }

    /// Snapshot of the stored items.
    pub fn enumerate_all(&self) -> Vec<Sample> {
        self.items.clone()
    }
}
