use crate::error::{Error, Result};

/// Learning-rate policy. Exponential decay advances once per epoch; the
/// cyclical policy advances once per optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LRSchedule {
    Constant { lr: f32 },
    ExponentialDecay { lr: f32, rate_per_epoch: f32 },
    Cyclical { base_lr: f32, max_lr: f32, step_size: usize },
}

impl LRSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LRSchedule::Constant { lr } => lr > 0.0 && lr.is_finite(),
            LRSchedule::ExponentialDecay { lr, rate_per_epoch } => {
                lr > 0.0 && lr.is_finite() && rate_per_epoch > 0.0 && rate_per_epoch.is_finite()
            }
            LRSchedule::Cyclical { base_lr, max_lr, step_size } => {
                base_lr > 0.0 && base_lr <= max_lr && max_lr.is_finite() && step_size >= 1
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::contract(format!("invalid learning-rate schedule {self:?}")))
        }
    }

    /// Learning rate for optimizer step `step` taken during `epoch`.
    pub fn lr(&self, epoch: usize, step: usize) -> f32 {
        match *self {
            LRSchedule::Constant { lr } => lr,
            LRSchedule::ExponentialDecay { lr, rate_per_epoch } => (lr as f64 * (rate_per_epoch as f64).powi(epoch as i32)) as f32,
            LRSchedule::Cyclical { .. } => lr_at(self, step),
        }
    }

    /// Parses `constant:LR`, `exp:LR:RATE` or `cyclical:BASE:MAX:STEP`.
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.split(':').collect();
        let num = |s: &str| s.trim().parse::<f32>().map_err(|_| Error::contract(format!("bad number {s:?} in {text:?}")));
        let schedule = match parts.as_slice() {
            ["constant", lr] => LRSchedule::Constant { lr: num(lr)? },
            ["exp", lr, rate] => LRSchedule::ExponentialDecay { lr: num(lr)?, rate_per_epoch: num(rate)? },
            ["cyclical", base, max, step] => LRSchedule::Cyclical {
                base_lr: num(base)?,
                max_lr: num(max)?,
                step_size: step.trim().parse().map_err(|_| Error::contract(format!("bad step size in {text:?}")))?,
            },
            _ => return Err(Error::contract(format!("unknown learning-rate policy {text:?}"))),
        };
        schedule.validate()?;
        Ok(schedule)
    }
}

/// Learning rate at global step `step`. For the triangular cyclical policy:
/// `cycle = ⌊1 + step/(2s)⌋`, `x = |step/s − 2·cycle + 1|`,
/// `lr = base + (max − base)·max(0, 1 − x)`.
pub fn lr_at(schedule: &LRSchedule, step: usize) -> f32 {
    match *schedule {
        LRSchedule::Constant { lr } => lr,
        LRSchedule::ExponentialDecay { lr, .. } => lr,
        LRSchedule::Cyclical { base_lr, max_lr, step_size } => {
            let s = step_size as f64;
            let t = step as f64;
            let cycle = (1.0 + t / (2.0 * s)).floor();
            let x = (t / s - 2.0 * cycle + 1.0).abs();
            (base_lr as f64 + (max_lr as f64 - base_lr as f64) * (1.0 - x).max(0.0)) as f32
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clr() -> LRSchedule {
        LRSchedule::Cyclical { base_lr: 0.001, max_lr: 0.006, step_size: 4 }
    }

    #[test]
    fn triangular_examples() {
        assert!((lr_at(&clr(), 0) - 0.001).abs() < 1e-9);
        assert!((lr_at(&clr(), 4) - 0.006).abs() < 1e-9);
        assert!((lr_at(&clr(), 8) - 0.001).abs() < 1e-9);
        assert!((lr_at(&clr(), 2) - 0.0035).abs() < 1e-7);
    }

    #[test]
    fn parse_round_trips() {
        assert_eq!(LRSchedule::parse("cyclical:0.001:0.006:4").unwrap(), clr());
        assert_eq!(LRSchedule::parse("constant:0.01").unwrap(), LRSchedule::Constant { lr: 0.01 });
        assert!(LRSchedule::parse("cyclical:0.01:0.001:4").is_err());
        assert!(LRSchedule::parse("cosine:1").is_err());
    }

    #[test]
    fn decay_is_per_epoch() {
        let s = LRSchedule::ExponentialDecay { lr: 0.01, rate_per_epoch: 0.5 };
        assert_eq!(s.lr(0, 99), 0.01);
        assert!((s.lr(2, 0) - 0.0025).abs() < 1e-9);
    }
}
