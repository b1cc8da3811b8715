//! Flow paths, conditional velocity, the flow matching pretraining loss, and
//! closed-form reference fields used as oracles throughout the test suites.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::VelocityNet;
use crate::smf::{self, TrainMode, TrainPlan};

/// Interpolation schedule `z_t = a(t) x + b(t) eps`. Only the linear schedule
/// is implemented; a second schedule is a data change, not a redesign.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Schedule {
    pub kind: ScheduleKind,
}

impl Schedule {
    pub fn a(&self, t: f64) -> f64 {
        1.0 - t
    }
    pub fn b(&self, t: f64) -> f64 {
        t
    }
    pub fn a_dot(&self, _t: f64) -> f64 {
        -1.0
    }
    pub fn b_dot(&self, _t: f64) -> f64 {
        1.0
    }

    pub fn interpolate(&self, x: &[f64], eps: &[f64], t: f64) -> Vec<f64> {
        x.iter()
            .zip(eps)
            .map(|(xv, ev)| self.a(t) * xv + self.b(t) * ev)
            .collect()
    }
}

/// How the ordered pair (r, t) is drawn.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TimeDist {
    /// Two independent U(0,1) draws, sorted so r <= t. The default.
    SortedUniform,
    /// Two normal draws pushed through a sigmoid (heavier mid-range mass),
    /// then sorted.
    Lognormal { mu: f64, sigma: f64 },
}

impl Default for TimeDist {
    fn default() -> Self {
        TimeDist::SortedUniform
    }
}

impl TimeDist {
    pub fn draw_pair(&self, rng: &mut ChaCha8Rng) -> (f64, f64) {
        let mut one = || match self {
            TimeDist::SortedUniform => rng.random::<f64>(),
            TimeDist::Lognormal { mu, sigma } => {
                let n: f64 = rng.sample(StandardNormal);
                kernels::sigmoid(mu + sigma * n)
            }
        };
        let (a, b) = (one(), one());
        if a <= b {
            (a, b)
        } else {
            (b, a)
        }
    }
}

/// One training tuple realizing the path construction: times `r <= s <= t`,
/// split weight `lambda` with `s = (1-lambda) t + lambda r`, and the path
/// point `z_t = (1-t) x + t eps` under the linear schedule.
#[derive(Clone, Debug)]
pub struct FlowSample {
    pub x: Vec<f64>,
    pub eps: Vec<f64>,
    pub t: f64,
    pub r: f64,
    pub lambda: f64,
    pub s: f64,
    pub z_t: Vec<f64>,
    pub cond: Option<usize>,
}

impl FlowSample {
    pub fn new(
        x: Vec<f64>,
        eps: Vec<f64>,
        t: f64,
        r: f64,
        lambda: f64,
        cond: Option<usize>,
    ) -> Result<FlowSample> {
        if x.len() != eps.len() {
            return Err(Error::ShapeMismatch {
                op: "flow_sample",
                lhs: vec![x.len()],
                rhs: vec![eps.len()],
            });
        }
        if !(0.0..=1.0).contains(&r) || !(0.0..=1.0).contains(&t) || r > t {
            return Err(Error::Config(format!("times must satisfy 0 <= r <= t <= 1, got r={r} t={t}")));
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {lambda}")));
        }
        // rounding in the convex combination must not escape [r, t]
        let s = ((1.0 - lambda) * t + lambda * r).clamp(r, t);
        let z_t = Schedule::default().interpolate(&x, &eps, t);
        Ok(FlowSample {
            x,
            eps,
            t,
            r,
            lambda,
            s,
            z_t,
            cond,
        })
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    /// Collapse to the boundary branch: r := t (and therefore s = t).
    pub fn set_boundary(&mut self) {
        self.r = self.t;
        self.s = self.t;
    }

    pub fn is_boundary(&self) -> bool {
        self.r == self.t
    }
}

/// Draw times per `time_dist`, lambda ~ U(0,1), and assemble the sample.
pub fn make_flow_sample(
    x: Vec<f64>,
    eps: Vec<f64>,
    rng: &mut ChaCha8Rng,
    time_dist: TimeDist,
) -> Result<FlowSample> {
    let (r, t) = time_dist.draw_pair(rng);
    let lambda = rng.random::<f64>();
    FlowSample::new(x, eps, t, r, lambda, None)
}

/// Under the linear schedule the conditional velocity is `eps - x`.
pub fn conditional_velocity(sample: &FlowSample) -> Vec<f64> {
    kernels::ew_sub(&sample.eps, &sample.x)
}

/// Flow matching pretraining loss: mean over the batch of
/// `|| v_theta(z_t, t) - (eps - x) ||^2`, with per-sample condition dropout.
///
/// This is literally the boundary-only (`p = 1`), from-scratch path of the
/// branch loss, so the "identical to the trainer's loss on the same batch
/// and rng stream" contract holds by construction.
pub fn cfm_loss(
    net: &VelocityNet,
    tape: &Tape,
    batch: &mut [FlowSample],
    cfg_dropout: f64,
    branch_rng: &mut ChaCha8Rng,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let plan = TrainPlan {
        flow_ratio_p: 1.0,
        mode: TrainMode::FromScratch,
        cfg_dropout_pretrain: cfg_dropout,
        net: net.config().clone(),
        ..TrainPlan::default()
    };
    let (loss, _) = smf::smf_loss(net, tape, batch, &plan, None, branch_rng, dropout_rng)?;
    Ok(loss)
}

/// Reference fields with closed-form average velocity, used to validate the
/// identities before any learned model is involved.
#[derive(Clone, Debug)]
pub enum AnalyticField {
    /// v(z, tau) = c
    Constant(Vec<f64>),
    /// v(z, tau) = tau in every coordinate
    TimePoly { dim: usize },
    /// v(z, tau) = -z
    LinearState { dim: usize },
}

/// (1 - e^d) / d, continuous at d = 0 (value -1).
fn phi(d: f64) -> f64 {
    if d.abs() < 1e-4 {
        // series: -(1 + d/2 + d^2/6 + d^3/24)
        -(1.0 + d / 2.0 + d * d / 6.0 + d * d * d / 24.0)
    } else {
        -d.exp_m1() / d
    }
}

/// d/dd phi(d), continuous at d = 0 (value -1/2).
fn phi_prime(d: f64) -> f64 {
    if d.abs() < 1e-4 {
        -(0.5 + d / 3.0 + d * d / 8.0 + d * d * d / 30.0)
    } else {
        (-d.exp() * d + d.exp_m1()) / (d * d)
    }
}

impl AnalyticField {
    pub fn dim(&self) -> usize {
        match self {
            AnalyticField::Constant(c) => c.len(),
            AnalyticField::TimePoly { dim } | AnalyticField::LinearState { dim } => *dim,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AnalyticField::Constant(_) => "constant",
            AnalyticField::TimePoly { .. } => "time_poly",
            AnalyticField::LinearState { .. } => "linear_state",
        }
    }

    /// Instantaneous velocity v(z, tau).
    pub fn velocity_at(&self, z: &[f64], tau: f64) -> Vec<f64> {
        match self {
            AnalyticField::Constant(c) => c.clone(),
            AnalyticField::TimePoly { dim } => vec![tau; *dim],
            AnalyticField::LinearState { .. } => kernels::ew_neg(z),
        }
    }

    /// Closed-form average velocity u(z_t, r, t); u(., t, t) = v(., t).
    pub fn average_at(&self, z_t: &[f64], r: f64, t: f64) -> Vec<f64> {
        match self {
            AnalyticField::Constant(c) => c.clone(),
            AnalyticField::TimePoly { dim } => vec![(t + r) / 2.0; *dim],
            AnalyticField::LinearState { .. } => kernels::ew_scale(z_t, phi(t - r)),
        }
    }

    /// `(u, du)` where `du` is the total derivative of u along the direction
    /// `(v(z_t, t), 0, 1)` in (z, r, t) space — the differential identity's
    /// right-hand side needs exactly this.
    pub fn average_and_total_derivative(&self, z_t: &[f64], r: f64, t: f64) -> (Vec<f64>, Vec<f64>) {
        match self {
            AnalyticField::Constant(c) => (c.clone(), vec![0.0; c.len()]),
            AnalyticField::TimePoly { dim } => (vec![(t + r) / 2.0; *dim], vec![0.5; *dim]),
            AnalyticField::LinearState { .. } => {
                let d = t - r;
                // u = z phi(d); du/dt = v . grad_z u + d_t u = z (phi'(d) - phi(d))
                (
                    kernels::ew_scale(z_t, phi(d)),
                    kernels::ew_scale(z_t, phi_prime(d) - phi(d)),
                )
            }
        }
    }

    pub fn parse(name: &str) -> Result<AnalyticField> {
        match name {
            "constant" => Ok(AnalyticField::Constant(vec![0.7, -0.3])),
            "time_poly" => Ok(AnalyticField::TimePoly { dim: 2 }),
            "linear_state" => Ok(AnalyticField::LinearState { dim: 2 }),
            other => Err(Error::Config(format!("unknown analytic field `{other}`"))),
        }
    }
}

/// Spec'd entry point: batched closed-form average velocity.
pub fn analytic_average_velocity(field: &AnalyticField, z_t: &Tensor, r: f64, t: f64) -> Result<Tensor> {
    field.average_velocity(z_t, r, t, None)
}

/// Anything that provides an average velocity over `[r, t]` for a batch of
/// states: learned nets and closed-form fields alike. Samplers and the
/// identity diagnostics are written against this.
pub trait AverageVelocityField {
    fn field_dim(&self) -> usize;

    /// u(z, r, t) for every row of `z` (shape (batch, dim)), shared times.
    fn average_velocity(&self, z: &Tensor, r: f64, t: f64, cond: Option<&[usize]>) -> Result<Tensor>;

    /// v(z, t) = u(z, t, t).
    fn instantaneous_velocity(&self, z: &Tensor, t: f64, cond: Option<&[usize]>) -> Result<Tensor> {
        self.average_velocity(z, t, t, cond)
    }
}

impl AverageVelocityField for AnalyticField {
    fn field_dim(&self) -> usize {
        self.dim()
    }

    fn average_velocity(&self, z: &Tensor, r: f64, t: f64, _cond: Option<&[usize]>) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = (0..z.rows()).map(|i| self.average_at(z.row(i), r, t)).collect();
        Tensor::from_rows(&rows)
    }
}

impl AverageVelocityField for VelocityNet {
    fn field_dim(&self) -> usize {
        self.config().data_dim
    }

    fn average_velocity(&self, z: &Tensor, r: f64, t: f64, cond: Option<&[usize]>) -> Result<Tensor> {
        let batch = z.rows();
        let r_col = Tensor::matrix(batch, 1, vec![r; batch])?;
        let t_col = Tensor::matrix(batch, 1, vec![t; batch])?;
        self.forward(z, &r_col, &t_col, cond)
    }
}
