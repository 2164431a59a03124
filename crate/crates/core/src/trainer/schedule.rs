use std::f64::consts::PI;

/// Learning rate at `step` (0-based) of a `total_steps` run: linear warmup
/// from 0 to `peak` over `warmup_steps`, then cosine annealing from `peak`
/// at step `warmup_steps` down to `min` at the final step `total_steps - 1`.
pub fn cosine_lr(step: usize, total_steps: usize, peak: f64, min: f64, warmup_steps: usize) -> f64 {
    if step < warmup_steps {
        return peak * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(1).saturating_sub(warmup_steps);
    if span == 0 {
        return peak;
    }
    let progress = ((step - warmup_steps) as f64 / span as f64).min(1.0);
    min + 0.5 * (peak - min) * (1.0 + (PI * progress).cos())
}

/// Warmup length for a run: `round(fraction * total_steps)`, kept below
/// `total_steps`.
pub fn warmup_steps(total_steps: usize, fraction: f64) -> usize {
    let w = (fraction * total_steps as f64).round() as usize;
    w.min(total_steps.saturating_sub(1))
}
