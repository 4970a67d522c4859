use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warm-up followed by cosine annealing to zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_epochs: usize,
    pub max_epochs: usize,
}

impl LrSchedule {
    pub fn new(base: f64, warmup_epochs: usize, max_epochs: usize) -> Result<Self> {
        if !(base > 0.0) || max_epochs <= warmup_epochs {
            return Err(Error::invalid(
                "lr_schedule",
                format!("need base > 0 and max_epochs > warmup_epochs (base {base}, warmup {warmup_epochs}, max {max_epochs})"),
            ));
        }
        Ok(Self {
            base,
            warmup_epochs,
            max_epochs,
        })
    }

    /// Multiplier in `[0, 1]` applied to the base rate of every group.
    pub fn factor(&self, epoch: usize) -> Result<f64> {
        if epoch > self.max_epochs {
            return Err(Error::invalid(
                "lr_at",
                format!("epoch {epoch} beyond max_epochs {}", self.max_epochs),
            ));
        }
        if epoch <= self.warmup_epochs {
            if self.warmup_epochs == 0 {
                return Ok(1.0);
            }
            return Ok(epoch as f64 / self.warmup_epochs as f64);
        }
        let t = (epoch - self.warmup_epochs) as f64;
        let span = (self.max_epochs - self.warmup_epochs) as f64;
        Ok(0.5 * (1.0 + (std::f64::consts::PI * t / span).cos()))
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        Ok(self.base * self.factor(epoch)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_endpoint_is_base() {
        let s = LrSchedule::new(1e-3, 5, 25).unwrap();
        assert_eq!(s.lr_at(5).unwrap(), 1e-3);
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
    }

    #[test]
    fn cosine_endpoint_is_zero() {
        let s = LrSchedule::new(1e-3, 5, 25).unwrap();
        assert!(s.lr_at(25).unwrap().abs() < 1e-18);
        assert!(s.lr_at(26).is_err());
    }

    #[test]
    fn cosine_midpoint_is_half_base() {
        let s = LrSchedule::new(2e-4, 4, 24).unwrap();
        assert!((s.lr_at(14).unwrap() - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn invalid_configs() {
        assert!(LrSchedule::new(1e-3, 5, 5).is_err());
        assert!(LrSchedule::new(0.0, 0, 5).is_err());
    }
}
