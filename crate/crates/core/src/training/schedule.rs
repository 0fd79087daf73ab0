use crate::{Error, Result};

/// Cosine decay from `lr_max` at step 0 to `lr_min` at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::arg("cosine schedule needs total_steps > 0"));
    }
    if step > total_steps {
        return Err(Error::arg(format!("step {step} beyond schedule of {total_steps}")));
    }
    let t = step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t).cos()))
}
