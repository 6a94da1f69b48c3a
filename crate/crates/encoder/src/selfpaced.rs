//! Easy-to-hard instance selection with a growing loss threshold λ.

/// Indices whose loss is strictly below `lambda`.
pub fn self_paced_select(losses: &[f64], lambda: f64) -> Vec<usize> {
    losses
        .iter()
        .enumerate()
        .filter(|(_, &l)| l < lambda)
        .map(|(i, _)| i)
        .collect()
}

/// Linear pace from `start` to `end` over `epochs`, with every instance admitted in the last epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PaceSchedule {
    pub start: f64,
    pub end: f64,
    pub epochs: usize,
}

impl PaceSchedule {
    /// Starts at the `quantile` of `initial_losses` and ends just above their maximum.
    pub fn from_losses(initial_losses: &[f64], quantile: f64, epochs: usize) -> Self {
        let mut sorted = initial_losses.to_vec();
        sorted.sort_by(f64::total_cmp);
        let (start, end) = match (sorted.first(), sorted.last()) {
            (Some(_), Some(&max)) => {
                let k = ((sorted.len() - 1) as f64 * quantile.clamp(0.0, 1.0)).round() as usize;
                (sorted[k].next_up(), max.next_up())
            }
            _ => (f64::INFINITY, f64::INFINITY),
        };
        Self { start, end, epochs }
    }

    pub fn lambda(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 || epoch + 1 >= self.epochs {
            return f64::INFINITY;
        }
        let t = epoch as f64 / (self.epochs - 1) as f64;
        self.start + t * (self.end - self.start)
    }
}
