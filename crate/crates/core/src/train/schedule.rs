use serde::{Deserialize, Serialize};

/// Linear warm-up from `lr_min` to `lr_max`, then cosine decay back to `lr_min`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_epochs: f64,
    pub total_epochs: f64,
}

impl LrSchedule {
    /// Learning rate at progress `t` epochs (fractional).
    pub fn at(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, self.total_epochs);
        if t < self.warmup_epochs {
            return self.lr_min + (self.lr_max - self.lr_min) * t / self.warmup_epochs;
        }
        let span = self.total_epochs - self.warmup_epochs;
        let s = if span > 0.0 { (t - self.warmup_epochs) / span } else { 1.0 };
        self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (std::f64::consts::PI * s).cos())
    }
}
