//! Generation procedures: multi-step Euler over an instantaneous velocity
//! field, and k-step sampling over an average-velocity field. Integration
//! runs from t = 1 (prior) down to t = 0 (data) on a uniform grid.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::flow::AverageVelocityField;

fn check_prior(field: &dyn AverageVelocityField, eps: &Tensor) -> Result<()> {
    if eps.shape().len() != 2 || eps.shape()[1] != field.field_dim() {
        return Err(Error::InvalidShape {
            op: "sample",
            shape: eps.shape().to_vec(),
            reason: format!("expected (n, {})", field.field_dim()),
        });
    }
    Ok(())
}

fn step_rows(z: &Tensor, v: &Tensor, h: f64) -> Result<Tensor> {
    // z <- z - h * v
    z.sub(&v.scale(h))
}

/// Euler integration of `dz/dt = v(z, t)` with `n_steps` uniform steps.
/// With `cfg_scale = Some(w)` each velocity evaluation is the guided
/// combination `v_null + w (v_cond - v_null)` (two evaluations per step).
pub fn euler_sample(
    field: &dyn AverageVelocityField,
    n_steps: usize,
    eps: &Tensor,
    cond: Option<&[usize]>,
    cfg_scale: Option<f64>,
) -> Result<Tensor> {
    if n_steps == 0 {
        return Err(Error::Config("euler_sample needs n_steps >= 1".into()));
    }
    check_prior(field, eps)?;
    let h = 1.0 / n_steps as f64;
    let mut z = eps.stop_gradient();
    for i in 0..n_steps {
        let t = 1.0 - i as f64 * h;
        let v = match (cfg_scale, cond) {
            (Some(w), Some(ids)) => {
                let v_null = field.instantaneous_velocity(&z, t, None)?;
                let v_cond = field.instantaneous_velocity(&z, t, Some(ids))?;
                v_null.add(&v_cond.sub(&v_null)?.scale(w))?
            }
            _ => field.instantaneous_velocity(&z, t, cond)?,
        };
        z = step_rows(&z, &v, h)?;
        if !z.all_finite() {
            return Err(Error::Poisoned {
                context: format!("euler state at t={t}"),
            });
        }
    }
    Ok(z)
}

/// k-step average-velocity sampling on the uniform grid
/// `1 = t_0 > t_1 > ... > t_k = 0`:
/// `z_{t_{i+1}} = z_{t_i} - (t_i - t_{i+1}) u(z_{t_i}, t_{i+1}, t_i)`.
/// Exactly k field evaluations; no guidance at sampling time.
pub fn few_step_sample(
    field: &dyn AverageVelocityField,
    k: usize,
    eps: &Tensor,
    cond: Option<&[usize]>,
) -> Result<Tensor> {
    if k == 0 {
        return Err(Error::Config("few_step_sample needs k >= 1".into()));
    }
    check_prior(field, eps)?;
    let mut z = eps.stop_gradient();
    for i in 0..k {
        let t_hi = 1.0 - i as f64 / k as f64;
        let t_lo = 1.0 - (i + 1) as f64 / k as f64;
        let u = field.average_velocity(&z, t_lo, t_hi, cond)?;
        z = step_rows(&z, &u, t_hi - t_lo)?;
        if !z.all_finite() {
            return Err(Error::Poisoned {
                context: format!("sampler state at t={t_lo}"),
            });
        }
    }
    Ok(z)
}
