//! Linear warm-up from zero followed by cosine decay.

use std::f64::consts::PI;

/// Learning rate at `step` (0-based) of `total_steps`.
///
/// Steps `0..=warmup_steps` ramp linearly from 0 to `lr_max`; the remaining
/// steps follow `lr_max * 0.5 * (1 + cos(pi * progress))` with progress
/// running from 0 at `warmup_steps` towards 1 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, lr_max: f64) -> f64 {
    if step < warmup_steps {
        return lr_max * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps).max(1);
    let progress = (step - warmup_steps) as f64 / span as f64;
    lr_max * 0.5 * (1.0 + (PI * progress.min(1.0)).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        assert_eq!(lr_at(0, 100, 10, 0.05), 0.0);
        assert!((lr_at(10, 100, 10, 0.05) - 0.05).abs() < 1e-15);
        let last = lr_at(99, 100, 10, 0.05);
        // 90 cosine steps; the last one sits at progress 89/90.
        let bound = 0.05 * 0.5 * (1.0 + (PI * 89.0 / 90.0).cos());
        assert!(last <= bound + 1e-15 && last < 1e-3);
    }

    #[test]
    fn cosine_midpoint() {
        assert!((lr_at(55, 100, 10, 0.05) - 0.025).abs() < 1e-12);
    }

    #[test]
    fn continuous_at_joint() {
        for (w, t) in [(8, 32), (5, 640), (1, 2)] {
            let jump = (lr_at(w, t, w, 1.0) - lr_at(w - 1, t, w, 1.0)).abs();
            assert!(jump <= 1.0 / w as f64 + 1e-12);
        }
    }

    #[test]
    fn no_warmup() {
        assert_eq!(lr_at(0, 10, 0, 0.1), 0.1);
    }
}
