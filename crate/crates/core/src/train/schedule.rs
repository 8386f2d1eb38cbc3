//! Learning-rate schedule: linear warmup, then cosine decay to zero.

/// LR for 0-based `step` in a run of `total` steps with `warmup` warmup
/// steps: ramps linearly to `base_lr` over the warmup, then follows a half
/// cosine that reaches ~0 at the final step.
pub fn lr_at(step: u64, total: u64, warmup: u64, base_lr: f64) -> f64 {
    assert!(total > 0 && warmup < total, "schedule must cover the run");
    if step >= total {
        return 0.0;
    }
    if step < warmup {
        return base_lr * (step + 1) as f64 / warmup as f64;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_ramps_and_cosine_decays() {
        let (total, warmup, base) = (100, 10, 8e-4);
        assert!((lr_at(0, total, warmup, base) - base / 10.0).abs() < 1e-15);
        assert!((lr_at(9, total, warmup, base) - base).abs() < 1e-15);
        assert!((lr_at(10, total, warmup, base) - base).abs() < 1e-12);
        // strictly decreasing after warmup
        let mut prev = lr_at(10, total, warmup, base);
        for s in 11..total {
            let lr = lr_at(s, total, warmup, base);
            assert!(lr < prev);
            prev = lr;
        }
        // final step is near zero but the schedule never goes negative
        let last = lr_at(total - 1, total, warmup, base);
        assert!(last > 0.0 && last < 0.01 * base);
    }

    #[test]
    fn zero_warmup_starts_at_base() {
        assert_eq!(lr_at(0, 50, 0, 1e-3), 1e-3);
    }
}
