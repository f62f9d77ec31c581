//! Failure replay buffer and curriculum sampling.
//!
//! Tasks enter on failure. A member graduates after `n_grad` consecutive
//! passes (the playbook durably handles it) and is evicted after `n_evict`
//! consecutive failures (likely intractable under the current playbook).
//! Sampling mixes `floor(rho * B)` buffer draws with fresh pool draws.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::execution::TaskSpec;
use crate::rng::draw_without_replacement;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub consecutive_passes: u32,
    pub consecutive_fails: u32,
    pub added_iteration: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferEvent {
    Entered,
    Graduated,
    Evicted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    pub records: BTreeMap<String, ReplayRecord>,
    pub n_grad: u32,
    pub n_evict: u32,
}

impl ReplayBuffer {
    pub fn new(n_grad: u32, n_evict: u32) -> Self {
        assert!(n_grad >= 1 && n_evict >= 1);
        ReplayBuffer {
            records: BTreeMap::new(),
            n_grad,
            n_evict,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn contains(&self, task_id: &str) -> bool {
        self.records.contains_key(task_id)
    }

    /// Member ids in deterministic (sorted) order.
    pub fn member_ids(&self) -> Vec<String> {
        self.records.keys().cloned().collect()
    }

    /// Fold one task-level outcome into the buffer. A pass on a non-member
    /// changes nothing; a failure inserts the task. Reaching either streak
    /// threshold removes the record and reports why.
    pub fn record_outcome(
        &mut self,
        task_id: &str,
        passed: bool,
        iteration: u64,
    ) -> Option<BufferEvent> {
        if passed {
            let record = self.records.get_mut(task_id)?;
            record.consecutive_passes += 1;
            record.consecutive_fails = 0;
            if record.consecutive_passes >= self.n_grad {
                self.records.remove(task_id);
                return Some(BufferEvent::Graduated);
            }
            None
        } else {
            let newly_entered = !self.records.contains_key(task_id);
            let record = self
                .records
                .entry(task_id.to_string())
                .or_insert(ReplayRecord {
                    consecutive_passes: 0,
                    consecutive_fails: 0,
                    added_iteration: iteration,
                });
            record.consecutive_fails += 1;
            record.consecutive_passes = 0;
            if record.consecutive_fails >= self.n_evict {
                self.records.remove(task_id);
                return Some(BufferEvent::Evicted);
            }
            if newly_entered {
                Some(BufferEvent::Entered)
            } else {
                None
            }
        }
    }
}

/// Compose a batch of `b` tasks: `floor(rho * b)` drawn uniformly without
/// replacement from buffer membership (shortfall backfilled from the pool),
/// the rest drawn uniformly without replacement from the remaining pool.
/// Returns exactly `min(b, pool size)` distinct tasks.
pub fn sample_batch<R: Rng>(
    pool: &[TaskSpec],
    buffer: &ReplayBuffer,
    b: usize,
    rho: f64,
    rng: &mut R,
) -> Vec<TaskSpec> {
    assert!(!pool.is_empty(), "sample_batch requires a non-empty pool");
    assert!((0.0..=1.0).contains(&rho), "rho must be in [0, 1]");
    let by_id: BTreeMap<&str, &TaskSpec> =
        pool.iter().map(|t| (t.task_id.as_str(), t)).collect();

    let replay_target = ((rho * b as f64).floor() as usize).min(b);
    let members: Vec<&TaskSpec> = buffer
        .member_ids()
        .into_iter()
        .filter_map(|id| by_id.get(id.as_str()).copied())
        .collect();
    let mut batch: Vec<TaskSpec> = draw_without_replacement(rng, &members, replay_target)
        .into_iter()
        .cloned()
        .collect();

    let chosen: std::collections::BTreeSet<&str> =
        batch.iter().map(|t| t.task_id.as_str()).collect();
    let fresh_pool: Vec<&TaskSpec> = pool
        .iter()
        .filter(|t| !chosen.contains(t.task_id.as_str()))
        .collect();
    let fresh = draw_without_replacement(rng, &fresh_pool, b - batch.len());
    batch.extend(fresh.into_iter().cloned());
    batch
}
