//! Interval-splitting consistency trainer.
//!
//! Each step mixes two branches over the batch: a `flow_ratio_p` fraction is
//! collapsed to the boundary (r := t) and regressed onto an instantaneous
//! velocity target, while the rest is supervised by the split-consistency
//! target built from the student's own average-velocity field:
//!
//!   u2 = u(z_t, s, t);  z_s = z_t - (t - s) u2;  u1 = u(z_s, r, s);
//!   target = (1 - lambda) u1 + lambda u2           (gradient-detached)
//!
//! Targets are generated outside the tape with dropout disabled; the single
//! tracked forward pass and one backward per step carry all the gradients.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, kernels, Tape, Tensor};
use crate::data::ToyDataset;
use crate::error::{Error, Result};
use crate::flow::{conditional_velocity, FlowSample, TimeDist};
use crate::model::{NetConfig, TrackedNet, VelocityNet};
use crate::optim::{Adam, Ema};
use crate::rng::TrainStreams;

/// lambda values touching {0, 1} make the consistency target the prediction
/// itself (zero-information self-regression), so draws are clamped away from
/// the endpoints.
pub const LAMBDA_CLAMP: (f64, f64) = (0.05, 0.95);

/// Abort when the loss exceeds this, or is non-finite, for
/// `DIVERGENCE_PATIENCE` consecutive steps.
const DIVERGENCE_LIMIT: f64 = 1e3;
const DIVERGENCE_PATIENCE: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    FromScratch,
    Distill,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossForm {
    /// Mean over the batch of the squared L2 residual (the default).
    Squared,
    /// Mean over the batch of the plain L2 residual.
    Unsquared,
}

/// Which consistency objective drives the non-boundary branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Algebraic interval-splitting target; three forwards, no JVP.
    SplitMeanFlow,
    /// Differential-identity target `v - (t - r) du/dt`; needs one JVP.
    MeanFlow,
}

impl Objective {
    pub fn as_str(&self) -> &'static str {
        match self {
            Objective::SplitMeanFlow => "splitmeanflow",
            Objective::MeanFlow => "meanflow",
        }
    }
}

/// Full hyperparameter record for one run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainPlan {
    pub mode: TrainMode,
    /// Fraction of each batch collapsed to the boundary branch. Must be > 0:
    /// p = 0 admits the degenerate collapse the boundary condition prevents.
    pub flow_ratio_p: f64,
    /// Teacher guidance scale folded into distillation targets.
    pub cfg_scale_w: f64,
    pub cfg_dropout_pretrain: f64,
    /// Fixed at 0.0 by the distillation recipe.
    pub cfg_dropout_distill: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub ema_decay: f64,
    pub use_ema: bool,
    pub time_dist: TimeDist,
    pub loss_form: LossForm,
    pub seed: u64,
    pub net: NetConfig,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            mode: TrainMode::FromScratch,
            flow_ratio_p: 0.75,
            cfg_scale_w: 2.0,
            cfg_dropout_pretrain: 0.1,
            cfg_dropout_distill: 0.0,
            batch_size: 128,
            steps: 0,
            lr: 1e-4,
            warmup_steps: 1000,
            ema_decay: 0.999,
            use_ema: true,
            time_dist: TimeDist::SortedUniform,
            loss_form: LossForm::Squared,
            seed: 0,
            net: NetConfig::default(),
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if !(self.flow_ratio_p > 0.0 && self.flow_ratio_p <= 1.0) {
            return Err(Error::Config(format!(
                "flow_ratio_p must lie in (0, 1], got {}",
                self.flow_ratio_p
            )));
        }
        if self.cfg_scale_w < 0.0 {
            return Err(Error::Config("cfg_scale_w must be >= 0".into()));
        }
        for (name, v) in [
            ("cfg_dropout_pretrain", self.cfg_dropout_pretrain),
            ("cfg_dropout_distill", self.cfg_dropout_distill),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema_decay must lie in [0, 1)".into()));
        }
        self.net.validate()
    }

    /// Condition dropout in effect for this plan's mode.
    pub fn active_cfg_dropout(&self) -> f64 {
        match self.mode {
            TrainMode::FromScratch => self.cfg_dropout_pretrain,
            TrainMode::Distill => self.cfg_dropout_distill,
        }
    }
}

/// A frozen pretrained net plus the guidance scale folded into its targets.
pub struct TeacherHandle {
    net: VelocityNet,
    pub cfg_scale_w: f64,
}

impl TeacherHandle {
    pub fn new(net: VelocityNet, cfg_scale_w: f64) -> TeacherHandle {
        TeacherHandle { net, cfg_scale_w }
    }

    pub fn net(&self) -> &VelocityNet {
        &self.net
    }

    /// Guided instantaneous velocity:
    /// `v_cfg = v(z, t | null) + w (v(z, t | cond) - v(z, t | null))`.
    /// Unconditional teachers, and scales where one pass suffices, use a
    /// single forward.
    pub fn cfg_velocity(&self, z: &Tensor, t_col: &Tensor, cond: Option<&[usize]>) -> Result<Tensor> {
        let w = self.cfg_scale_w;
        if !self.net.config().is_conditional() || cond.is_none() {
            return self.net.forward(z, t_col, t_col, None);
        }
        if w == 1.0 {
            // degenerates to the conditional velocity
            return self.net.forward(z, t_col, t_col, cond);
        }
        let v_null = self.net.forward(z, t_col, t_col, None)?;
        if w == 0.0 {
            return Ok(v_null);
        }
        let v_cond = self.net.forward(z, t_col, t_col, cond)?;
        v_null.add(&v_cond.sub(&v_null)?.scale(w))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Boundary,
    Consistency,
}

/// Per-sample Bernoulli(p) branch selection; boundary samples get r := t.
pub fn assign_branches(samples: &mut [FlowSample], p: f64, rng: &mut ChaCha8Rng) -> Vec<Branch> {
    samples
        .iter_mut()
        .map(|s| {
            if rng.random_bool(p) {
                s.set_boundary();
                Branch::Boundary
            } else {
                Branch::Consistency
            }
        })
        .collect()
}

/// Boundary-branch targets (rows align with `samples`): the teacher's guided
/// velocity in distill mode, the conditional velocity `eps - x` from scratch.
/// Always gradient-detached.
pub fn boundary_targets(
    mode: TrainMode,
    teacher: Option<&TeacherHandle>,
    samples: &[&FlowSample],
) -> Result<Vec<Vec<f64>>> {
    match mode {
        TrainMode::FromScratch => Ok(samples.iter().map(|s| conditional_velocity(s)).collect()),
        TrainMode::Distill => {
            let teacher = teacher.ok_or(Error::MissingTeacher)?;
            let n = samples.len();
            let z = Tensor::from_rows(&samples.iter().map(|s| s.z_t.clone()).collect::<Vec<_>>())?;
            let t_col = Tensor::matrix(n, 1, samples.iter().map(|s| s.t).collect())?;
            let cond = collect_cond(samples, teacher.net().config());
            let v = teacher.cfg_velocity(&z, &t_col, cond.as_deref())?;
            Ok((0..n).map(|i| v.row(i).to_vec()).collect())
        }
    }
}

/// Single-sample convenience wrapper over `boundary_targets`.
pub fn boundary_target(
    mode: TrainMode,
    teacher: Option<&TeacherHandle>,
    sample: &FlowSample,
) -> Result<Vec<f64>> {
    Ok(boundary_targets(mode, teacher, &[sample])?.remove(0))
}

/// Interval-splitting targets for a batch of consistency-branch samples.
/// Two plain forward passes; the result is detached by construction.
pub fn isc_targets(
    student: &VelocityNet,
    samples: &[&FlowSample],
    cond: Option<&[usize]>,
) -> Result<Vec<Vec<f64>>> {
    let n = samples.len();
    let dim = student.config().data_dim;
    let z_t = Tensor::from_rows(&samples.iter().map(|s| s.z_t.clone()).collect::<Vec<_>>())?;
    let s_col = Tensor::matrix(n, 1, samples.iter().map(|s| s.s).collect())?;
    let t_col = Tensor::matrix(n, 1, samples.iter().map(|s| s.t).collect())?;
    let r_col = Tensor::matrix(n, 1, samples.iter().map(|s| s.r).collect())?;

    let u2 = student.forward(&z_t, &s_col, &t_col, cond)?;

    // z_s = z_t - (t - s) * u2, rowwise
    let mut z_s_rows = Vec::with_capacity(n);
    for (i, s) in samples.iter().enumerate() {
        let gap = s.t - s.s;
        z_s_rows.push(
            z_t.row(i)
                .iter()
                .zip(u2.row(i))
                .map(|(zv, uv)| zv - gap * uv)
                .collect::<Vec<f64>>(),
        );
    }
    let z_s = Tensor::from_rows(&z_s_rows)?;
    let u1 = student.forward(&z_s, &r_col, &s_col, cond)?;

    let mut targets = Vec::with_capacity(n);
    for (i, s) in samples.iter().enumerate() {
        let lam = s.lambda;
        let row: Vec<f64> = (0..dim)
            .map(|j| (1.0 - lam) * u1.row(i)[j] + lam * u2.row(i)[j])
            .collect();
        if !kernels::all_finite(&row) {
            return Err(Error::Poisoned {
                context: "interval-splitting target".into(),
            });
        }
        targets.push(row);
    }
    Ok(targets)
}

/// Single-sample convenience wrapper over `isc_targets`.
pub fn isc_target(student: &VelocityNet, sample: &FlowSample) -> Result<Vec<f64>> {
    let cond = sample.cond.map(|c| vec![c]);
    Ok(isc_targets(student, &[sample], cond.as_deref())?.remove(0))
}

fn collect_cond(samples: &[&FlowSample], cfg: &NetConfig) -> Option<Vec<usize>> {
    if !cfg.is_conditional() {
        return None;
    }
    Some(
        samples
            .iter()
            .map(|s| s.cond.unwrap_or(cfg.null_class_id()))
            .collect(),
    )
}

/// Per-step scalar record, mirrored into the run's metrics CSV.
#[derive(Clone, Copy, Debug)]
pub struct StepRecord {
    pub step: usize,
    /// Fraction of the batch on the boundary branch.
    pub branch_mix: f64,
    pub loss: f64,
    /// Mean L2 residual of the consistency branch (0 when absent).
    pub isc_residual: f64,
}

pub struct StepStats {
    pub branch_mix: f64,
    pub isc_residual: f64,
}

/// Branch loss with an explicit branch assignment. `smf_loss` and the
/// baseline's loss are thin wrappers; tests drive specific branch mixes
/// through this directly. The caller owns the tape via `tracked`.
pub fn loss_with_branches(
    tracked: &TrackedNet,
    samples: &mut [FlowSample],
    branches: &[Branch],
    plan: &TrainPlan,
    objective: Objective,
    teacher: Option<&TeacherHandle>,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<(Tensor, StepStats)> {
    let student = tracked.net();
    let n = samples.len();
    debug_assert_eq!(n, branches.len());
    if n == 0 {
        return Err(Error::Config("empty batch".into()));
    }
    let cfg = student.config().clone();
    let dim = cfg.data_dim;

    // Condition dropout: one Bernoulli draw per sample whenever dropout is
    // active, so rng consumption is independent of the outcomes.
    let dropout = plan.active_cfg_dropout();
    let cond_ids: Option<Vec<usize>> = if cfg.is_conditional() {
        Some(
            samples
                .iter()
                .map(|s| {
                    let id = s.cond.unwrap_or(cfg.null_class_id());
                    if dropout > 0.0 && dropout_rng.random_bool(dropout) {
                        cfg.null_class_id()
                    } else {
                        id
                    }
                })
                .collect(),
        )
    } else {
        None
    };

    // Target generation runs in evaluation mode: outside the tape, with the
    // per-sample condition ids fixed above.
    let mut targets: Vec<Option<Vec<f64>>> = vec![None; n];
    let boundary_idx: Vec<usize> = (0..n).filter(|&i| branches[i] == Branch::Boundary).collect();
    let consistency_idx: Vec<usize> =
        (0..n).filter(|&i| branches[i] == Branch::Consistency).collect();

    if !boundary_idx.is_empty() {
        let group: Vec<&FlowSample> = boundary_idx.iter().map(|&i| &samples[i]).collect();
        let rows = match plan.mode {
            TrainMode::FromScratch => boundary_targets(TrainMode::FromScratch, None, &group)?,
            TrainMode::Distill => {
                let teacher = teacher.ok_or(Error::MissingTeacher)?;
                let z = Tensor::from_rows(&group.iter().map(|s| s.z_t.clone()).collect::<Vec<_>>())?;
                let t_col = Tensor::matrix(group.len(), 1, group.iter().map(|s| s.t).collect())?;
                let sub_cond: Option<Vec<usize>> = cond_ids
                    .as_ref()
                    .map(|ids| boundary_idx.iter().map(|&i| ids[i]).collect());
                let v = teacher.cfg_velocity(&z, &t_col, sub_cond.as_deref())?;
                (0..group.len()).map(|i| v.row(i).to_vec()).collect()
            }
        };
        for (slot, row) in boundary_idx.iter().zip(rows) {
            targets[*slot] = Some(row);
        }
    }

    if !consistency_idx.is_empty() {
        let group: Vec<&FlowSample> = consistency_idx.iter().map(|&i| &samples[i]).collect();
        let sub_cond: Option<Vec<usize>> = cond_ids
            .as_ref()
            .map(|ids| consistency_idx.iter().map(|&i| ids[i]).collect());
        let rows = match objective {
            Objective::SplitMeanFlow => isc_targets(student, &group, sub_cond.as_deref())?,
            Objective::MeanFlow => crate::meanflow::meanflow_targets_for_branch(
                student,
                &group,
                sub_cond.as_deref(),
                plan,
                teacher,
            )?,
        };
        for (slot, row) in consistency_idx.iter().zip(rows) {
            targets[*slot] = Some(row);
        }
    }

    let target_rows: Vec<Vec<f64>> =
        targets.into_iter().map(|t| t.expect("target filled")).collect();
    let target = Tensor::from_rows(&target_rows)?; // untracked: sg(target)

    // Prediction, training mode: one tracked forward over the whole batch.
    let z = Tensor::from_rows(&samples.iter().map(|s| s.z_t.clone()).collect::<Vec<_>>())?;
    let r_col = Tensor::matrix(n, 1, samples.iter().map(|s| s.r).collect())?;
    let t_col = Tensor::matrix(n, 1, samples.iter().map(|s| s.t).collect())?;
    let pred = tracked.forward(&z, &r_col, &t_col, cond_ids.as_deref())?;

    let diff = pred.sub(&target)?;
    let loss = match plan.loss_form {
        LossForm::Squared => diff.square().sum().scale(1.0 / n as f64),
        LossForm::Unsquared => {
            let ones = Tensor::matrix(dim, 1, vec![1.0; dim])?;
            diff.square().matmul(&ones)?.sqrt().mean()
        }
    };
    if !loss.all_finite() {
        return Err(Error::Poisoned {
            context: "branch loss".into(),
        });
    }

    let isc_residual = if consistency_idx.is_empty() {
        0.0
    } else {
        consistency_idx
            .iter()
            .map(|&i| {
                let d: Vec<f64> = pred
                    .row(i)
                    .iter()
                    .zip(&target_rows[i])
                    .map(|(a, b)| a - b)
                    .collect();
                kernels::l2_norm(&d)
            })
            .sum::<f64>()
            / consistency_idx.len() as f64
    };

    Ok((
        loss,
        StepStats {
            branch_mix: boundary_idx.len() as f64 / n as f64,
            isc_residual,
        },
    ))
}

/// The training loss: Bernoulli(p) branch split, then `loss_with_branches`.
pub fn smf_loss(
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
    loss_with_branches(
        &tracked,
        samples,
        &branches,
        plan,
        Objective::SplitMeanFlow,
        teacher,
        dropout_rng,
    )
}

pub struct TrainOutcome {
    pub net: VelocityNet,
    /// EMA snapshot of the weights, when enabled.
    pub ema: Option<VelocityNet>,
    pub history: Vec<StepRecord>,
}

impl TrainOutcome {
    /// The net to sample and evaluate with: the EMA shadow when available.
    pub fn eval_net(&self) -> &VelocityNet {
        self.ema.as_ref().unwrap_or(&self.net)
    }
}

/// Draw one training batch of flow samples from the dataset.
pub fn draw_batch(
    dataset: &ToyDataset,
    plan: &TrainPlan,
    data_rng: &mut ChaCha8Rng,
    prior_rng: &mut ChaCha8Rng,
    times_rng: &mut ChaCha8Rng,
) -> Result<Vec<FlowSample>> {
    let (points, labels) = dataset.sample_batch(plan.batch_size, data_rng)?;
    let dim = dataset.dim();
    let mut out = Vec::with_capacity(plan.batch_size);
    for i in 0..plan.batch_size {
        let eps: Vec<f64> = (0..dim).map(|_| prior_rng.sample(StandardNormal)).collect();
        let (r, t) = plan.time_dist.draw_pair(times_rng);
        let lambda = times_rng
            .random::<f64>()
            .clamp(LAMBDA_CLAMP.0, LAMBDA_CLAMP.1);
        let cond = labels.as_ref().map(|l| l[i]);
        out.push(FlowSample::new(points.row(i).to_vec(), eps, t, r, lambda, cond)?);
    }
    Ok(out)
}

/// Run the trainer. `init` overrides the starting weights; distillation
/// otherwise starts from the teacher's converged weights. Exactly one
/// backward pass per step.
pub fn train(
    plan: &TrainPlan,
    dataset: &ToyDataset,
    teacher: Option<&TeacherHandle>,
    objective: Objective,
    init: Option<&VelocityNet>,
) -> Result<TrainOutcome> {
    plan.validate()?;
    if plan.mode == TrainMode::Distill && teacher.is_none() {
        return Err(Error::MissingTeacher);
    }
    let mut streams = TrainStreams::new(plan.seed);
    let mut student = match (plan.mode, init) {
        (_, Some(net)) => net.with_param_blocks(&net.param_blocks())?,
        (TrainMode::Distill, None) => {
            // initialized from the converged teacher weights
            let t = teacher.expect("checked above");
            t.net().with_param_blocks(&t.net().param_blocks())?
        }
        (TrainMode::FromScratch, None) => VelocityNet::init(plan.net.clone(), &mut streams.init)?,
    };
    if student.config().data_dim != dataset.dim() {
        return Err(Error::Config(format!(
            "net data_dim {} != dataset dim {}",
            student.config().data_dim,
            dataset.dim()
        )));
    }

    let block_sizes: Vec<usize> = student.params().iter().map(|p| p.data.len()).collect();
    let mut opt = Adam::new(&block_sizes, plan.lr, plan.warmup_steps);
    let mut ema = plan
        .use_ema
        .then(|| Ema::new(student.param_blocks(), plan.ema_decay));
    let mut history = Vec::with_capacity(plan.steps);
    let mut bad_steps = 0usize;

    for step in 0..plan.steps {
        let mut samples = draw_batch(
            dataset,
            plan,
            &mut streams.data,
            &mut streams.prior,
            &mut streams.times,
        )?;
        let branches = assign_branches(&mut samples, plan.flow_ratio_p, &mut streams.branch);

        let tape = Tape::new();
        let grad_blocks;
        let loss_val;
        let stats;
        {
            let tracked = student.track(&tape);
            let (loss, s) = loss_with_branches(
                &tracked,
                &mut samples,
                &branches,
                plan,
                objective,
                teacher,
                &mut streams.dropout,
            )?;
            loss_val = loss.item();
            stats = s;
            let grads = autodiff::backward(&loss)?;
            student.counters().note_backward();
            grad_blocks = tracked.param_grads(&grads)?;
        }

        if !loss_val.is_finite() || loss_val > DIVERGENCE_LIMIT {
            bad_steps += 1;
            if bad_steps >= DIVERGENCE_PATIENCE {
                return Err(Error::Diverged {
                    step,
                    reason: format!(
                        "loss {loss_val} out of bounds for {bad_steps} consecutive steps"
                    ),
                });
            }
        } else {
            bad_steps = 0;
        }

        let mut blocks = student.param_blocks();
        opt.apply(&mut blocks, &grad_blocks);
        student.set_param_blocks(&blocks)?;
        if let Some(e) = ema.as_mut() {
            e.update(&blocks);
        }

        history.push(StepRecord {
            step,
            branch_mix: stats.branch_mix,
            loss: loss_val,
            isc_residual: stats.isc_residual,
        });
    }

    let ema_net = match ema {
        Some(e) => Some(student.with_param_blocks(e.blocks())?),
        None => None,
    };
    Ok(TrainOutcome {
        net: student,
        ema: ema_net,
        history,
    })
}
