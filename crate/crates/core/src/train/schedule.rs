use super::{TrainConfig, TrainError};
use std::f64::consts::PI;

/// Linear warmup from `warmup_lr` to `init_lr`, then a half cosine from
/// `init_lr` to `min_lr` at `total_steps`.
///
/// The formula does not assume `min_lr < init_lr`; with the stock values
/// (1e-7 initial, 8e-7 minimum) the cosine phase rises.
pub fn lr_at(step: u64, total_steps: u64, cfg: &TrainConfig) -> Result<f64, TrainError> {
    let warmup = cfg.warmup_steps;
    if total_steps <= warmup {
        return Err(TrainError::Config(format!(
            "total steps {total_steps} must exceed warmup steps {warmup}"
        )));
    }
    if step > total_steps {
        return Err(TrainError::StepOutOfRange {
            step,
            total: total_steps,
        });
    }
    if step < warmup {
        let frac = step as f64 / warmup as f64;
        return Ok(lerp(cfg.warmup_lr, cfg.init_lr, frac));
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    let w = 0.5 * (1.0 + (PI * progress).cos());
    Ok(lerp(cfg.min_lr, cfg.init_lr, w))
}

/// `a (1 - t) + b t`, exact at both ends so the phase boundaries hit the
/// configured rates bit for bit.
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a * (1.0 - t) + b * t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stock_boundary_values() {
        let c = TrainConfig::paper();
        let total = c.total_steps();
        assert_eq!(total, 10_000);
        assert!((lr_at(0, total, &c).unwrap() - 1e-8).abs() <= 1e-18);
        assert!((lr_at(5000, total, &c).unwrap() - 1e-7).abs() <= 1e-18);
        assert!((lr_at(10_000, total, &c).unwrap() - 8e-7).abs() <= 1e-18);
        assert!((lr_at(7500, total, &c).unwrap() - 4.5e-7).abs() <= 1e-18);
    }

    #[test]
    fn out_of_range_step() {
        let c = TrainConfig::paper();
        assert!(matches!(
            lr_at(10_001, 10_000, &c),
            Err(TrainError::StepOutOfRange { step: 10_001, .. })
        ));
        assert!(lr_at(0, 5000, &c).is_err());
    }

    #[test]
    fn phase_boundaries_are_exact() {
        let c = TrainConfig::paper();
        assert_eq!(lr_at(0, 10_000, &c).unwrap(), c.warmup_lr);
        assert_eq!(lr_at(5000, 10_000, &c).unwrap(), c.init_lr);
        assert_eq!(lr_at(10_000, 10_000, &c).unwrap(), c.min_lr);
        assert_eq!(lerp(c.warmup_lr, c.init_lr, 1.0), c.init_lr);
    }

    #[test]
    fn warmup_is_linear() {
        let c = TrainConfig::paper();
        let a = lr_at(1000, 10_000, &c).unwrap();
        let b = lr_at(2000, 10_000, &c).unwrap();
        let z = lr_at(0, 10_000, &c).unwrap();
        assert!(((b - z) - 2.0 * (a - z)).abs() < 1e-20);
    }
}
