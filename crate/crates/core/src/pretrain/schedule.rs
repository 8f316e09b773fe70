/// Linear warm-up from 0 to `peak_lr` at `peak_fraction * total_steps`,
/// then linear decay to 0 at `total_steps`.
pub fn triangular_lr(step: usize, total_steps: usize, peak_lr: f64, peak_fraction: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return 0.0;
    }
    let total = total_steps as f64;
    let peak = peak_fraction * total;
    let s = step as f64;
    if s <= peak {
        if peak == 0.0 {
            peak_lr
        } else {
            peak_lr * (s / peak)
        }
    } else {
        peak_lr * ((total - s) / (total - peak))
    }
}

/// Half-cosine decay from `initial_lr` to 0 over `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, initial_lr: f64) -> f64 {
    if total_steps == 0 {
        return initial_lr;
    }
    let t = (step.min(total_steps) as f64) / total_steps as f64;
    initial_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triangular_endpoints() {
        assert_eq!(triangular_lr(0, 1000, 25e-5, 0.5), 0.0);
        assert_eq!(triangular_lr(500, 1000, 25e-5, 0.5), 25e-5);
        assert_eq!(triangular_lr(1000, 1000, 25e-5, 0.5), 0.0);
        assert!((triangular_lr(250, 1000, 25e-5, 0.5) - 12.5e-5).abs() < 1e-18);
        assert!((triangular_lr(900, 1000, 1.0, 0.2) - 0.125).abs() < 1e-12);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 10, 1e-4), 1e-4);
        assert!(cosine_lr(10, 10, 1e-4).abs() < 1e-20);
        assert!((cosine_lr(5, 10, 1e-4) - 5e-5).abs() < 1e-18);
    }
}
