//! Training schedules: the orthogonality-pressure ramp, the learning-rate
//! shape, and per-sequence focal loss scaling.

/// Linear 0 -> 1 ramp over Step 1; exactly 0 at the first step and exactly 1
/// at the last Step-1 step.
pub fn beta_ramp(step: u64, step1_steps: u64) -> f64 {
    if step1_steps <= 1 {
        return 1.0;
    }
    (step as f64 / (step1_steps - 1) as f64).min(1.0)
}

/// Linear warmup over the first 10% of steps, hold at the peak until 60%,
/// then linear decay to 5% of the peak.
pub fn lr_schedule(step: u64, total_steps: u64, peak: f64) -> f64 {
    if total_steps == 0 {
        return peak;
    }
    let warmup_end = (total_steps / 10).max(1);
    let hold_end = ((total_steps as f64) * 0.6) as u64;
    if step < warmup_end {
        return peak * (step + 1) as f64 / warmup_end as f64;
    }
    if step < hold_end || total_steps <= hold_end {
        return peak;
    }
    let span = (total_steps - hold_end) as f64;
    let frac = (step - hold_end) as f64 / span;
    peak * (1.0 - 0.95 * frac.min(1.0))
}

/// Focal scale from the sequence posterior: (1 − p)^beta_focal. Exact at
/// beta_focal = 1 (no powf round trip).
pub fn focal_lambda(posterior: f64, beta_focal: f64) -> f64 {
    let margin = (1.0 - posterior).clamp(0.0, 1.0);
    if beta_focal == 1.0 {
        margin
    } else {
        margin.powf(beta_focal)
    }
}

/// Focal scale from a per-sequence nonnegative loss: p = exp(−loss).
pub fn focal_from_loss(loss: f64, beta_focal: f64) -> f64 {
    focal_lambda((-loss).exp(), beta_focal)
}
