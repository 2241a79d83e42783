/// Patience-based early stopping on a monitored loss.
///
/// An epoch improves when its loss is strictly below the best seen so far.
/// Training stops once `patience` consecutive epochs fail to improve.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    stale: usize,
    seen: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        assert!(patience >= 1, "patience must be at least 1");
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            stale: 0,
            seen: 0,
        }
    }

    /// Records the next epoch's loss (epochs are numbered from 1).
    pub fn observe(&mut self, loss: f64) -> StopDecision {
        self.seen += 1;
        let improved = loss < self.best;
        if improved {
            self.best = loss;
            self.best_epoch = Some(self.seen);
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        StopDecision {
            improved,
            stop: self.stale >= self.patience,
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }

    pub fn epochs_seen(&self) -> usize {
        self.seen
    }
}

/// Runs a loss sequence through [`EarlyStopping`] with an epoch cap.
/// Returns `(epochs run, best epoch, stopped early)`; a stop that coincides
/// with the cap does not count as early.
pub fn simulate(
    losses: &[f64],
    patience: usize,
    max_epochs: usize,
) -> (usize, Option<usize>, bool) {
    let mut es = EarlyStopping::new(patience);
    for &l in losses.iter().take(max_epochs) {
        if es.observe(l).stop && es.epochs_seen() < max_epochs {
            return (es.epochs_seen(), es.best_epoch(), true);
        }
    }
    (es.epochs_seen(), es.best_epoch(), false)
}
