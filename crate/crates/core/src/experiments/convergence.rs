use std::collections::VecDeque;

/// Rolling-median stopping rule: converged once the median of the last
/// `window` losses has not reached a new low for `patience` batches.
/// Batches are counted from 1; the first median exists at batch `window`.
#[derive(Clone, Debug)]
pub struct ConvergenceDetector {
    window: usize,
    patience: usize,
    recent: VecDeque<f64>,
    seen: usize,
    best: f64,
    best_at: usize,
}

impl ConvergenceDetector {
    pub fn new(window: usize, patience: usize) -> Self {
        assert!(window > 0, "window must be positive");
        Self {
            window,
            patience,
            recent: VecDeque::with_capacity(window),
            seen: 0,
            best: f64::INFINITY,
            best_at: 0,
        }
    }

    /// Batches pushed so far.
    pub fn seen(&self) -> usize {
        self.seen
    }

    /// Feeds the next loss; returns the batch index once converged.
    pub fn push(&mut self, loss: f64) -> Option<usize> {
        self.seen += 1;
        if self.recent.len() == self.window {
            self.recent.pop_front();
        }
        self.recent.push_back(loss);
        if self.recent.len() < self.window {
            return None;
        }
        let m = median(self.recent.iter().copied());
        if m < self.best {
            self.best = m;
            self.best_at = self.seen;
        }
        (self.seen - self.best_at >= self.patience).then_some(self.seen)
    }
}

fn median(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// First batch at which `losses` satisfies the stopping rule.
pub fn detect_convergence(losses: &[f64], window: usize, patience: usize) -> Option<usize> {
    let mut d = ConvergenceDetector::new(window, patience);
    losses.iter().find_map(|&l| d.push(l))
}
