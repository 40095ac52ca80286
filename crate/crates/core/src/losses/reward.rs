use serde::{Deserialize, Serialize};

const STD_FLOOR: f64 = 1e-8;
/// Updates folded in before the running statistics are trusted.
pub const REWARD_WARMUP: u64 = 100;
/// Bound on normalised magnitudes; guards against a first rare reward
/// arriving while the running variance is still (near) zero.
pub const REWARD_CLIP: f64 = 10.0;

/// Standardises rewards with bias-corrected exponential moving moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardNormalizer {
    rate: f64,
    first: f64,
    second: f64,
    updates: u64,
}

impl RewardNormalizer {
    pub fn new(rate: f64) -> Self {
        assert!(rate > 0.0 && rate <= 1.0, "rate must lie in (0, 1]");
        Self { rate, first: 0.0, second: 0.0, updates: 0 }
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Running `(mean, std)`; `(0, 1)` until the warm-up has passed.
    pub fn stats(&self) -> (f64, f64) {
        if self.updates < REWARD_WARMUP {
            return (0.0, 1.0);
        }
        let bc = 1.0 - (1.0 - self.rate).powf(self.updates as f64);
        let mean = self.first / bc;
        let var = (self.second / bc - mean * mean).max(0.0);
        (mean, var.sqrt())
    }

    /// Standardises `r` with the current statistics, then folds it in.
    pub fn normalize(&mut self, r: f64) -> f64 {
        let (mean, std) = self.stats();
        let out = ((r - mean) / std.max(STD_FLOOR)).clamp(-REWARD_CLIP, REWARD_CLIP);
        self.update(r);
        out
    }

    /// `[rate, first moment, second moment, updates]`, for checkpoints.
    pub fn to_state(&self) -> [f64; 4] {
        [self.rate, self.first, self.second, self.updates as f64]
    }

    pub fn from_state(s: [f64; 4]) -> Self {
        Self { rate: s[0], first: s[1], second: s[2], updates: s[3] as u64 }
    }

    pub fn update(&mut self, r: f64) {
        self.first += self.rate * (r - self.first);
        self.second += self.rate * (r * r - self.second);
        self.updates += 1;
    }
}
