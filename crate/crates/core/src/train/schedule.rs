//! Cosine learning-rate decay.

use std::f64::consts::PI;

pub const FINAL_LR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub final_lr: f64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn new(base_lr: f64, total_steps: u64) -> Self {
        Self { base_lr, final_lr: FINAL_LR, total_steps }
    }

    /// `final + (base - final) (1 + cos(pi step / total)) / 2` for
    /// `0 <= step <= total`.
    pub fn lr(&self, step: u64) -> Result<f64, String> {
        if step > self.total_steps {
            return Err(format!("step {step} is past the schedule end {}", self.total_steps));
        }
        if step == self.total_steps {
            return Ok(self.final_lr);
        }
        if step == 0 {
            return Ok(self.base_lr);
        }
        let frac = step as f64 / self.total_steps as f64;
        Ok(self.final_lr + 0.5 * (self.base_lr - self.final_lr) * (1.0 + (PI * frac).cos()))
    }
}

/// Shorthand for [`Schedule::lr`].
pub fn cosine_lr(step: u64, schedule: &Schedule) -> Result<f64, String> {
    schedule.lr(step)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        let s = Schedule::new(1e-4, 1000);
        assert_eq!(s.lr(0).unwrap(), 1e-4);
        assert_eq!(s.lr(1000).unwrap(), 1e-6);
        assert!((s.lr(500).unwrap() - 5.05e-5).abs() < 1e-15);
        assert!(s.lr(1001).is_err());
        assert_eq!(Schedule::new(5e-5, 10).lr(0).unwrap(), 5e-5);
    }

    #[test]
    fn monotone() {
        let s = Schedule::new(1e-4, 777);
        let lrs: Vec<f64> = (0..=777).map(|k| s.lr(k).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
