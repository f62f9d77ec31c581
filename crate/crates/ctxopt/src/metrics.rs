//! Training-dynamics instrumentation over per-example solve matrices.
//!
//! We track whether each evaluation task was solved at each checkpoint, then
//! derive the current solve rate, a trailing-window "recently solved" rate,
//! the all-time best-so-far envelope, and the decomposition of the gap
//! between demonstrated and current capability into active instability
//! (recent regressions) and stale regressions (older, unrecovered ones).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Boolean tasks x checkpoints grid, row-major by task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolveMatrix {
    task_ids: Vec<String>,
    /// solved[task][checkpoint]
    solved: Vec<Vec<bool>>,
}

impl SolveMatrix {
    pub fn new(task_ids: Vec<String>) -> Self {
        let rows = task_ids.len();
        SolveMatrix {
            task_ids,
            solved: vec![Vec::new(); rows],
        }
    }

    /// Build from explicit rows (each row one task, columns are checkpoints).
    pub fn from_rows(task_ids: Vec<String>, rows: Vec<Vec<bool>>) -> Self {
        assert_eq!(task_ids.len(), rows.len());
        let width = rows.first().map(|r| r.len()).unwrap_or(0);
        assert!(rows.iter().all(|r| r.len() == width), "matrix must be rectangular");
        SolveMatrix {
            task_ids,
            solved: rows,
        }
    }

    /// Append one checkpoint column. Missing tasks count as unsolved.
    pub fn push_checkpoint(&mut self, solved_by_task: &BTreeMap<String, bool>) {
        for (row, task_id) in self.task_ids.iter().enumerate() {
            self.solved[row].push(*solved_by_task.get(task_id).unwrap_or(&false));
        }
    }

    pub fn task_ids(&self) -> &[String] {
        &self.task_ids
    }

    pub fn n_tasks(&self) -> usize {
        self.task_ids.len()
    }

    pub fn n_checkpoints(&self) -> usize {
        self.solved.first().map(|r| r.len()).unwrap_or(0)
    }

    pub fn solved(&self, task: usize, checkpoint: usize) -> bool {
        self.solved[task][checkpoint]
    }

    /// Fraction of tasks solved at checkpoint `t`.
    pub fn current_rate(&self, t: usize) -> f64 {
        self.rate_by(|row| row[t])
    }

    /// Fraction of tasks solved at least once in the trailing window of `w`
    /// checkpoints ending at `t` (inclusive). Always >= `current_rate`.
    pub fn recently_solved_rate(&self, t: usize, w: usize) -> f64 {
        assert!(w >= 1, "window must be positive");
        let start = (t + 1).saturating_sub(w);
        self.rate_by(|row| row[start..=t].iter().any(|s| *s))
    }

    /// Fraction of tasks solved at least once up to checkpoint `t`.
    pub fn alltime_envelope(&self, t: usize) -> f64 {
        self.recently_solved_rate(t, t + 1)
    }

    /// (active, stale): active instability is the recently-solved rate minus
    /// the current rate; stale regressions are the envelope minus the
    /// recently-solved rate. Both are non-negative and sum to
    /// envelope - current exactly.
    pub fn instability_decomposition(&self, t: usize, w: usize) -> (f64, f64) {
        let n = self.n_tasks();
        if n == 0 {
            return (0.0, 0.0);
        }
        let current = self.count_by(|row| row[t]);
        let start = (t + 1).saturating_sub(w);
        let recent = self.count_by(|row| row[start..=t].iter().any(|s| *s));
        let envelope = self.count_by(|row| row[..=t].iter().any(|s| *s));
        let active = (recent - current) as f64 / n as f64;
        let stale = (envelope - recent) as f64 / n as f64;
        (active, stale)
    }

    /// Summary over the whole run; active instability is averaged over all
    /// checkpoints at window `w`.
    pub fn summary_stats(&self, w: usize) -> SummaryStats {
        let t_max = self.n_checkpoints();
        let mut max_rate: f64 = 0.0;
        let mut active_sum = 0.0;
        let mut first_all_solved = None;
        for t in 0..t_max {
            max_rate = max_rate.max(self.current_rate(t));
            active_sum += self.instability_decomposition(t, w).0;
            if first_all_solved.is_none()
                && self.n_tasks() > 0
                && (0..self.n_tasks()).all(|row| self.solved[row][..=t].iter().any(|s| *s))
            {
                first_all_solved = Some(t);
            }
        }
        let (unlearns, recoveries) = self.unlearn_events();
        SummaryStats {
            first_all_solved,
            max_rate,
            mean_active_instability: if t_max == 0 { 0.0 } else { active_sum / t_max as f64 },
            pct_relearned: if unlearns == 0 {
                1.0
            } else {
                recoveries as f64 / unlearns as f64
            },
        }
    }

    /// (total unlearn events, recovered ones). An unlearn event is a
    /// solved -> unsolved flip between consecutive checkpoints; it is
    /// recovered if the task is solved again at any later checkpoint.
    fn unlearn_events(&self) -> (usize, usize) {
        let mut unlearns = 0;
        let mut recoveries = 0;
        let t_max = self.n_checkpoints();
        for row in &self.solved {
            for t in 0..t_max.saturating_sub(1) {
                if row[t] && !row[t + 1] {
                    unlearns += 1;
                    if row[t + 2..].iter().any(|s| *s) {
                        recoveries += 1;
                    }
                }
            }
        }
        (unlearns, recoveries)
    }

    fn rate_by<F: Fn(&[bool]) -> bool>(&self, f: F) -> f64 {
        if self.n_tasks() == 0 {
            return 0.0;
        }
        self.count_by(f) as f64 / self.n_tasks() as f64
    }

    fn count_by<F: Fn(&[bool]) -> bool>(&self, f: F) -> usize {
        self.solved.iter().filter(|row| f(row)).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    /// First checkpoint by which every task has been solved at least once.
    pub first_all_solved: Option<usize>,
    /// Highest current rate at any single checkpoint.
    pub max_rate: f64,
    pub mean_active_instability: f64,
    /// Fraction of unlearn events later recovered; 1.0 when none occurred.
    pub pct_relearned: f64,
}

/// One metrics-stream record per checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub checkpoint: usize,
    pub current: f64,
    pub recent_w5: f64,
    pub recent_w10: f64,
    pub envelope: f64,
    pub active_w5: f64,
    pub stale_w5: f64,
    pub active_w10: f64,
    pub stale_w10: f64,
}

pub fn metrics_record(m: &SolveMatrix, t: usize) -> MetricsRecord {
    let (active_w5, stale_w5) = m.instability_decomposition(t, 5);
    let (active_w10, stale_w10) = m.instability_decomposition(t, 10);
    MetricsRecord {
        checkpoint: t,
        current: m.current_rate(t),
        recent_w5: m.recently_solved_rate(t, 5),
        recent_w10: m.recently_solved_rate(t, 10),
        envelope: m.alltime_envelope(t),
        active_w5,
        stale_w5,
        active_w10,
        stale_w10,
    }
}
