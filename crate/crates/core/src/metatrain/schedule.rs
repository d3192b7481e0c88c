use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fine-tuning length: at least `min_epochs`; whenever the budget runs out
/// and the best dev score was reached within the last `extension` epochs,
/// the budget grows by `extension`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FineTuneSchedule {
    pub min_epochs: usize,
    pub extension: usize,
}

impl FineTuneSchedule {
    pub fn new(min_epochs: usize, extension: usize) -> Self {
        Self { min_epochs, extension }
    }

    /// Budget after `epochs_done` completed epochs, given the current budget
    /// and the epoch of the best dev score so far.
    pub fn next_budget(&self, budget: usize, epochs_done: usize, best_epoch: Option<usize>) -> usize {
        let budget = budget.max(self.min_epochs);
        if epochs_done < budget || self.extension == 0 {
            return budget;
        }
        match best_epoch {
            Some(b) if b + self.extension > epochs_done => budget + self.extension,
            _ => budget,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScheduleTrace {
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub extensions: usize,
}

/// Runs the schedule against scripted dev scores (`scores[e - 1]` for epoch
/// `e`), with the same strict-improvement rule as training.
pub fn simulate_schedule(schedule: &FineTuneSchedule, scores: &[f64]) -> Result<ScheduleTrace> {
    let mut budget = schedule.min_epochs;
    let mut best: Option<(usize, f64)> = None;
    let mut epoch = 0;
    let mut extensions = 0;
    loop {
        let next = schedule.next_budget(budget, epoch, best.map(|b| b.0));
        if next > budget {
            extensions += 1;
        }
        budget = next;
        if epoch >= budget {
            break;
        }
        let score = *scores
            .get(epoch)
            .ok_or_else(|| Error::invalid(format!("score trace ends before epoch {}", epoch + 1)))?;
        epoch += 1;
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((epoch, score));
        }
    }
    Ok(ScheduleTrace {
        epochs_run: epoch,
        best_epoch: best.map(|b| b.0),
        extensions,
    })
}
