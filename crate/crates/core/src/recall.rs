//! Delayed feature recall: a bounded FIFO of recent trunk representations.
//!
//! The queue is what makes forgetting measurable. Each meta-step pushes the
//! representations it just computed (detached — they never re-enter a
//! gradient graph) and the outer loss samples older entries to check the
//! updated head still classifies them. A label is alive exactly as long as
//! one of its entries sits in the queue; eviction frees the label and its
//! head row for reassignment.

use std::collections::{BTreeSet, VecDeque};

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::sample_without_replacement;

/// One stored representation with its pseudo-label and the meta-step that
/// produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct QueueEntry {
    pub z: Vec<f64>,
    pub label: usize,
    pub birth_step: u64,
}

/// Bounded FIFO of [`QueueEntry`] values.
#[derive(Debug, Clone, PartialEq)]
pub struct RecallQueue {
    capacity: usize,
    buf: VecDeque<QueueEntry>,
}

impl RecallQueue {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, buf: VecDeque::with_capacity(capacity + 1) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    /// Labels currently alive, ascending.
    pub fn active_labels(&self) -> BTreeSet<usize> {
        self.buf.iter().map(|e| e.label).collect()
    }

    /// Oldest-first view of the stored entries.
    pub fn entries(&self) -> impl Iterator<Item = &QueueEntry> {
        self.buf.iter()
    }

    /// Rebuild a queue from checkpointed entries (oldest first).
    pub fn from_entries(capacity: usize, entries: Vec<QueueEntry>) -> Result<Self> {
        if entries.len() > capacity {
            return Err(Error::Checkpoint(format!(
                "{} queue entries exceed capacity {capacity}",
                entries.len()
            )));
        }
        let mut seen = BTreeSet::new();
        let mut queue = Self::new(capacity);
        for e in entries {
            if !seen.insert(e.label) {
                return Err(Error::DuplicateActiveLabel { label: e.label });
            }
            queue.buf.push_back(e);
        }
        Ok(queue)
    }

    /// Append one meta-step's representations, oldest evicted beyond
    /// capacity. Returns the evicted entries in eviction (FIFO) order; their
    /// labels are free for reassignment from now on.
    pub fn push_trajectory(
        &mut self,
        reps: Vec<(Vec<f64>, usize)>,
        step: u64,
    ) -> Result<Vec<QueueEntry>> {
        // Labels must be fresh relative to everything currently alive,
        // including earlier entries of this same push.
        let mut alive = self.active_labels();
        for (z, label) in &reps {
            if !alive.insert(*label) {
                return Err(Error::DuplicateActiveLabel { label: *label });
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!(
                    "non-finite representation pushed for label {label}"
                )));
            }
        }
        for (z, label) in reps {
            self.buf.push_back(QueueEntry { z, label, birth_step: step });
        }
        let mut evicted = Vec::new();
        while self.buf.len() > self.capacity {
            evicted.push(self.buf.pop_front().expect("len > capacity ≥ 0"));
        }
        Ok(evicted)
    }

    /// Up to `q` entries, uniformly without replacement, in draw order.
    pub fn sample_query(&self, rng: &mut ChaCha8Rng, q: usize) -> Vec<&QueueEntry> {
        let take = q.min(self.buf.len());
        sample_without_replacement(rng, self.buf.len(), take)
            .into_iter()
            .map(|i| &self.buf[i])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngKey;

    fn entry(label: usize) -> (Vec<f64>, usize) {
        (vec![label as f64, 1.0], label)
    }

    #[test]
    fn fifo_eviction_order() {
        let mut q = RecallQueue::new(4);
        let evicted = q
            .push_trajectory((0..6).map(entry).collect(), 0)
            .unwrap();
        assert_eq!(evicted.iter().map(|e| e.label).collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(q.len(), 4);
        assert_eq!(q.active_labels().into_iter().collect::<Vec<_>>(), vec![2, 3, 4, 5]);
    }

    #[test]
    fn zero_capacity_evicts_everything() {
        let mut q = RecallQueue::new(0);
        let evicted = q.push_trajectory(vec![entry(1), entry(2)], 3).unwrap();
        assert_eq!(evicted.len(), 2);
        assert!(q.is_empty());
        assert_eq!(evicted[0].birth_step, 3);
    }

    #[test]
    fn duplicate_active_label_rejected() {
        let mut q = RecallQueue::new(8);
        q.push_trajectory(vec![entry(3), entry(7)], 0).unwrap();
        let err = q.push_trajectory(vec![entry(3)], 1);
        assert!(matches!(err, Err(Error::DuplicateActiveLabel { label: 3 })));
        // Duplicates within one push are equally invalid.
        let err = q.push_trajectory(vec![entry(9), entry(9)], 1);
        assert!(matches!(err, Err(Error::DuplicateActiveLabel { label: 9 })));
    }

    #[test]
    fn eviction_frees_the_label() {
        let mut q = RecallQueue::new(2);
        q.push_trajectory(vec![entry(3), entry(7)], 0).unwrap();
        q.push_trajectory(vec![entry(1)], 1).unwrap(); // evicts label 3
        assert_eq!(q.active_labels().into_iter().collect::<Vec<_>>(), vec![1, 7]);
        q.push_trajectory(vec![entry(3)], 2).unwrap(); // 3 is free again
        assert_eq!(q.active_labels().into_iter().collect::<Vec<_>>(), vec![1, 3]);
    }

    #[test]
    fn sample_query_bounds() {
        let mut q = RecallQueue::new(8);
        q.push_trajectory((0..5).map(entry).collect(), 0).unwrap();
        let mut rng = RngKey::from_seed(1).rng();
        assert!(q.sample_query(&mut rng, 0).is_empty());
        let all = q.sample_query(&mut rng, 99);
        assert_eq!(all.len(), 5);
        let mut labels: Vec<usize> = all.iter().map(|e| e.label).collect();
        labels.sort_unstable();
        assert_eq!(labels, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn sample_query_is_uniform() {
        // Inclusion frequency over 100k draws of 3-of-10 should be 0.3 each.
        let mut q = RecallQueue::new(16);
        q.push_trajectory((0..10).map(entry).collect(), 0).unwrap();
        let mut rng = RngKey::from_seed(5).rng();
        let mut counts = [0u32; 10];
        let draws = 100_000;
        for _ in 0..draws {
            for e in q.sample_query(&mut rng, 3) {
                counts[e.label] += 1;
            }
        }
        for (label, &c) in counts.iter().enumerate() {
            let freq = c as f64 / draws as f64;
            assert!(
                (freq - 0.3).abs() < 0.01,
                "label {label} inclusion frequency {freq}, expected 0.3 ± 0.01"
            );
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut q = RecallQueue::new(4);
        q.push_trajectory(vec![entry(2), entry(5), entry(8)], 7).unwrap();
        let entries: Vec<QueueEntry> = q.entries().cloned().collect();
        let rebuilt = RecallQueue::from_entries(4, entries).unwrap();
        assert_eq!(rebuilt, q);
        assert!(RecallQueue::from_entries(2, q.entries().cloned().collect()).is_err());
    }
}
