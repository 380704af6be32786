use std::f64::consts::PI;

pub const DEFAULT_WARMUP_FRACTION: f64 = 0.05;

/// Linear warmup to `base` over `warmup` steps, then cosine decay to 0 at `total`.
pub fn cosine_lr(step: usize, total: usize, base: f64, warmup: usize) -> f64 {
    if step >= total {
        return 0.0;
    }
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    base * 0.5 * (1.0 + (PI * progress).cos())
}

/// Warmup length for a fraction of the run, rounded down.
pub fn warmup_steps(total: usize, fraction: f64) -> usize {
    (total as f64 * fraction).floor() as usize
}
