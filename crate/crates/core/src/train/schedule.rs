use std::f64::consts::PI;

/// Linear warmup from 0 to `base_lr` over `warmup` steps, then cosine decay
/// to 0 at `total` steps.
pub fn cosine_lr(step: usize, total: usize, warmup: usize, base_lr: f64) -> f64 {
    if step < warmup {
        return base_lr * step as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    base_lr * (1.0 + (PI * progress).cos()) / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_endpoints() {
        assert_eq!(cosine_lr(0, 100, 10, 0.4), 0.0);
        assert!((cosine_lr(10, 100, 10, 0.4) - 0.4).abs() < 1e-15);
        assert!((cosine_lr(5, 100, 10, 0.4) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn cosine_midpoint_and_tail() {
        assert!((cosine_lr(55, 100, 10, 0.4) - 0.2).abs() < 1e-12);
        assert!(cosine_lr(99, 100, 10, 0.4) <= 1e-3 * 0.4);
        assert_eq!(cosine_lr(100, 100, 10, 0.4), 0.0);
    }

    #[test]
    fn no_warmup_starts_at_base() {
        assert_eq!(cosine_lr(0, 10, 0, 1.0), 1.0);
    }
}
