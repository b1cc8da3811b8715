//! Differential-identity baseline trainer.
//!
//! Regresses the field onto `u_tgt = v - (t - r) du/dt`, where `du/dt` is the
//! total derivative of `u_theta` along the trajectory direction — the JVP of
//! the network at `(z_t, r, t)` with tangent `(v, 0, 1)`. Shares every
//! hyperparameter, the branch structure and the boundary branch with the
//! interval-splitting trainer, isolating the objective as the only variable.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{kernels, Tape, Tensor};
use crate::data::ToyDataset;
use crate::error::{Error, Result};
use crate::flow::{conditional_velocity, AnalyticField, FlowSample};
use crate::model::VelocityNet;
use crate::smf::{
    self, assign_branches, Objective, StepStats, TeacherHandle, TrainMode, TrainOutcome,
    TrainPlan,
};

/// A field that can report `(u, du/dt)` with `du/dt` taken along `(v, 0, 1)`
/// in `(z, r, t)` space. Learned nets use a dual-tensor forward; the analytic
/// oracles use their closed forms.
pub trait TotalDerivativeField {
    fn u_and_dudt(
        &self,
        z: &Tensor,
        r_col: &Tensor,
        t_col: &Tensor,
        v: &Tensor,
        cond: Option<&[usize]>,
    ) -> Result<(Tensor, Tensor)>;
}

impl TotalDerivativeField for VelocityNet {
    fn u_and_dudt(
        &self,
        z: &Tensor,
        r_col: &Tensor,
        t_col: &Tensor,
        v: &Tensor,
        cond: Option<&[usize]>,
    ) -> Result<(Tensor, Tensor)> {
        self.forward_jvp(z, r_col, t_col, cond, v, 0.0, 1.0)
    }
}

impl TotalDerivativeField for AnalyticField {
    fn u_and_dudt(
        &self,
        z: &Tensor,
        r_col: &Tensor,
        t_col: &Tensor,
        _v: &Tensor,
        _cond: Option<&[usize]>,
    ) -> Result<(Tensor, Tensor)> {
        let n = z.rows();
        let mut u_rows = Vec::with_capacity(n);
        let mut d_rows = Vec::with_capacity(n);
        for i in 0..n {
            let (u, d) =
                self.average_and_total_derivative(z.row(i), r_col.data()[i], t_col.data()[i]);
            u_rows.push(u);
            d_rows.push(d);
        }
        Ok((Tensor::from_rows(&u_rows)?, Tensor::from_rows(&d_rows)?))
    }
}

/// `u_tgt = v - (t - r) * du/dt`, gradient-detached. Rows align with `samples`.
pub fn meanflow_targets(
    field: &impl TotalDerivativeField,
    samples: &[&FlowSample],
    v_rows: &Tensor,
    cond: Option<&[usize]>,
) -> Result<Vec<Vec<f64>>> {
    let n = samples.len();
    let z = Tensor::from_rows(&samples.iter().map(|s| s.z_t.clone()).collect::<Vec<_>>())?;
    let r_col = Tensor::matrix(n, 1, samples.iter().map(|s| s.r).collect())?;
    let t_col = Tensor::matrix(n, 1, samples.iter().map(|s| s.t).collect())?;
    let (_, dudt) = field.u_and_dudt(&z, &r_col, &t_col, v_rows, cond)?;

    let mut targets = Vec::with_capacity(n);
    for (i, s) in samples.iter().enumerate() {
        let gap = s.t - s.r;
        let row: Vec<f64> = v_rows
            .row(i)
            .iter()
            .zip(dudt.row(i))
            .map(|(vv, dv)| vv - gap * dv)
            .collect();
        if !kernels::all_finite(&row) {
            return Err(Error::Poisoned {
                context: "differential-identity target".into(),
            });
        }
        targets.push(row);
    }
    Ok(targets)
}

/// Single-sample form of the target, with `v` supplied by the caller.
pub fn meanflow_target(net: &VelocityNet, sample: &FlowSample, v: &[f64]) -> Result<Vec<f64>> {
    let cond = sample.cond.map(|c| vec![c]);
    let v_rows = Tensor::from_rows(&[v.to_vec()])?;
    Ok(meanflow_targets(net, &[sample], &v_rows, cond.as_deref())?.remove(0))
}

/// Consistency-branch targets for the shared branch loss: `v` comes from the
/// conditional velocity from scratch, or from the teacher's guided velocity
/// in distill mode.
pub(crate) fn meanflow_targets_for_branch(
    student: &VelocityNet,
    samples: &[&FlowSample],
    cond: Option<&[usize]>,
    plan: &TrainPlan,
    teacher: Option<&TeacherHandle>,
) -> Result<Vec<Vec<f64>>> {
    let n = samples.len();
    let v_rows = match plan.mode {
        TrainMode::FromScratch => {
            Tensor::from_rows(&samples.iter().map(|s| conditional_velocity(s)).collect::<Vec<_>>())?
        }
        TrainMode::Distill => {
            let teacher = teacher.ok_or(Error::MissingTeacher)?;
            let z = Tensor::from_rows(&samples.iter().map(|s| s.z_t.clone()).collect::<Vec<_>>())?;
            let t_col = Tensor::matrix(n, 1, samples.iter().map(|s| s.t).collect())?;
            teacher.cfg_velocity(&z, &t_col, cond)?
        }
    };
    meanflow_targets(student, samples, &v_rows, cond)
}

/// Baseline loss: same branch machinery, differential-identity targets.
pub fn meanflow_loss(
    student: &VelocityNet,
    tape: &Tape,
    samples: &mut [FlowSample],
    plan: &TrainPlan,
    teacher: Option<&TeacherHandle>,
    branch_rng: &mut ChaCha8Rng,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<(Tensor, StepStats)> {
    let tracked = student.track(tape);
    let branches = assign_branches(samples, plan.flow_ratio_p, branch_rng);
    smf::loss_with_branches(
        &tracked,
        samples,
        &branches,
        plan,
        Objective::MeanFlow,
        teacher,
        dropout_rng,
    )
}

/// Train the baseline with the shared loop.
pub fn train(
    plan: &TrainPlan,
    dataset: &ToyDataset,
    teacher: Option<&TeacherHandle>,
    init: Option<&VelocityNet>,
) -> Result<TrainOutcome> {
    smf::train(plan, dataset, teacher, Objective::MeanFlow, init)
}

/// Residual of the differential identity on a closed-form field:
/// `|| u - (v - (t - r) du/dt) ||` at one probe point.
pub fn identity_residual_at(field: &AnalyticField, z: &[f64], r: f64, t: f64) -> f64 {
    let v = field.velocity_at(z, t);
    let (u, dudt) = field.average_and_total_derivative(z, r, t);
    let gap = t - r;
    let res: Vec<f64> = (0..z.len())
        .map(|j| u[j] - (v[j] - gap * dudt[j]))
        .collect();
    kernels::l2_norm(&res)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundary_time_makes_target_equal_v() {
        // (t - r) = 0 wipes out the derivative term
        let f = AnalyticField::TimePoly { dim: 2 };
        let z = vec![0.3, -0.8];
        let v = f.velocity_at(&z, 0.6);
        let (u, _) = f.average_and_total_derivative(&z, 0.6, 0.6);
        assert_eq!(u, v);
        assert!(identity_residual_at(&f, &z, 0.6, 0.6) < 1e-15);
    }

    #[test]
    fn time_poly_closed_form_is_a_fixed_point() {
        // u = (t + r) / 2, v = t, du/dt = 1/2  =>  v - (t-r)/2 = (t+r)/2 = u
        let f = AnalyticField::TimePoly { dim: 1 };
        let (u, dudt) = f.average_and_total_derivative(&[9.0], 0.2, 0.8);
        assert!((dudt[0] - 0.5).abs() < 1e-15);
        let target = 0.8 - (0.8 - 0.2) * dudt[0];
        assert!((target - u[0]).abs() < 1e-15);
        assert!((u[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn constant_field_has_zero_derivative_term() {
        let f = AnalyticField::Constant(vec![1.5, -2.5]);
        let (u, dudt) = f.average_and_total_derivative(&[0.0, 0.0], 0.1, 0.9);
        assert_eq!(u, vec![1.5, -2.5]);
        assert_eq!(dudt, vec![0.0, 0.0]);
    }
}
