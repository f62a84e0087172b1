use serde::{Deserialize, Serialize};

/// Exponentially weighted mean and variance. The first observation seeds the
/// mean with zero variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub decay: f64,
    pub count: u64,
    pub mean: f64,
    pub var: f64,
}

impl RunningStats {
    pub fn new(decay: f64) -> Self {
        RunningStats {
            decay,
            count: 0,
            mean: 0.0,
            var: 0.0,
        }
    }

    pub fn std(&self) -> f64 {
        self.var.max(0.0).sqrt()
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn push(&mut self, value: f64) {
        if self.count == 0 {
            self.mean = value;
            self.var = 0.0;
        } else {
            let diff = value - self.mean;
            let w = 1.0 - self.decay;
            self.mean += w * diff;
            self.var = self.decay * (self.var + w * diff * diff);
        }
        self.count += 1;
    }
}
