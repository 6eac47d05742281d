//! Learning-rate schedules.

/// Cosine decay from `lr0` at step 0 to `lr_min` at step `total`; constant afterwards.
pub fn cosine_lr(step: usize, total: usize, lr0: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let t = step.min(total) as f64 / total as f64;
    lr_min + (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}
