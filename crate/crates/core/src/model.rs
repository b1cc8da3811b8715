//! The velocity network `u_theta(z, r, t, c)`.
//!
//! An MLP over the state `z`, sinusoidal embeddings of the two time scalars,
//! and an optional class-condition embedding. The forward pass is written
//! once, generically over the primitive set, so the tracked (training), plain
//! (eval) and dual (JVP) paths all run the identical computation. The network
//! itself contains no stochastic layers; condition dropout is applied by the
//! losses when they pick each sample's class id.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{DualTensor, Gradients, Tape, Tensor, TensorOps};
use crate::error::{Error, Result};

// Geometric frequency range for times in [0, 1]. The cap keeps directional
// third derivatives (~FREQ_MAX^3) small enough that central differences at
// h = 1e-5 remain a valid oracle for the JVP.
const FREQ_MIN: f64 = 1.0;
const FREQ_MAX: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub data_dim: usize,
    pub hidden_dim: usize,
    pub hidden_layers: usize,
    /// Width of one time embedding (even; two times are embedded).
    pub time_embed_dim: usize,
    /// 0 = unconditional. Conditional nets reserve one extra embedding row
    /// (id = num_classes) as the null class for guidance dropout.
    pub num_classes: usize,
    pub cond_embed_dim: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            data_dim: 2,
            hidden_dim: 256,
            hidden_layers: 3,
            time_embed_dim: 32,
            num_classes: 0,
            cond_embed_dim: 32,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.hidden_dim == 0 || self.hidden_layers == 0 {
            return Err(Error::Config("net dims must be positive".into()));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "time_embed_dim must be a positive even number, got {}",
                self.time_embed_dim
            )));
        }
        if self.is_conditional() && self.cond_embed_dim == 0 {
            return Err(Error::Config("cond_embed_dim must be positive for conditional nets".into()));
        }
        Ok(())
    }

    pub fn is_conditional(&self) -> bool {
        self.num_classes > 0
    }

    /// Reserved embedding row used when the condition is dropped.
    pub fn null_class_id(&self) -> usize {
        self.num_classes
    }

    pub fn input_width(&self) -> usize {
        self.data_dim
            + 2 * self.time_embed_dim
            + if self.is_conditional() { self.cond_embed_dim } else { 0 }
    }
}

/// Fixed geometric frequency ladder; embeds a time column as
/// `[sin(f_i t) .. , cos(f_i t) ..]`.
#[derive(Clone, Debug)]
pub struct TimeEmbedding {
    frequencies: Vec<f64>,
}

impl TimeEmbedding {
    pub fn new(time_embed_dim: usize) -> TimeEmbedding {
        let half = time_embed_dim / 2;
        let frequencies = (0..half)
            .map(|i| {
                if half == 1 {
                    FREQ_MIN
                } else {
                    FREQ_MIN * (FREQ_MAX / FREQ_MIN).powf(i as f64 / (half - 1) as f64)
                }
            })
            .collect();
        TimeEmbedding { frequencies }
    }

    pub fn dim(&self) -> usize {
        2 * self.frequencies.len()
    }

    /// `t_col` has shape (batch, 1); result has shape (batch, dim).
    pub fn embed<T: TensorOps>(&self, t_col: &T) -> Result<T> {
        let f_row = T::lift(
            &Tensor::matrix(1, self.frequencies.len(), self.frequencies.clone())
                .expect("frequency row"),
        );
        let phase = t_col.matmul(&f_row)?;
        T::concat_cols(&[&phase.sin(), &phase.cos()])
    }
}

/// Counts of batched network operations, for cost instrumentation.
#[derive(Debug, Default)]
pub struct OpCounters {
    forward: AtomicU64,
    jvp: AtomicU64,
    backward: AtomicU64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OpCounts {
    pub forwards: u64,
    pub jvps: u64,
    pub backwards: u64,
}

impl OpCounters {
    pub fn reset(&self) {
        self.forward.store(0, Ordering::Relaxed);
        self.jvp.store(0, Ordering::Relaxed);
        self.backward.store(0, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> OpCounts {
        OpCounts {
            forwards: self.forward.load(Ordering::Relaxed),
            jvps: self.jvp.load(Ordering::Relaxed),
            backwards: self.backward.load(Ordering::Relaxed),
        }
    }

    fn note_forward(&self) {
        self.forward.fetch_add(1, Ordering::Relaxed);
    }

    fn note_jvp(&self) {
        self.jvp.fetch_add(1, Ordering::Relaxed);
    }

    pub fn note_backward(&self) {
        self.backward.fetch_add(1, Ordering::Relaxed);
    }
}

/// A named parameter block. Master copies live here as plain buffers; they
/// are turned into (tracked) tensors per evaluation.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub(crate) struct ParamView<T> {
    /// (weight, bias) per layer, hidden layers then the output layer.
    pub layers: Vec<(T, T)>,
    pub cond_embed: Option<T>,
}

#[derive(Clone)]
pub struct VelocityNet {
    cfg: NetConfig,
    time_embed: TimeEmbedding,
    params: Vec<Param>,
    counters: Arc<OpCounters>,
}

impl VelocityNet {
    /// He-uniform hidden layers, zero-initialized output layer (the initial
    /// field is the zero map), small normal condition embedding.
    pub fn init(cfg: NetConfig, rng: &mut ChaCha8Rng) -> Result<VelocityNet> {
        cfg.validate()?;
        let mut params = Vec::new();
        let mut in_dim = cfg.input_width();
        for layer in 0..cfg.hidden_layers {
            let bound = (6.0 / in_dim as f64).sqrt();
            let w: Vec<f64> = (0..in_dim * cfg.hidden_dim)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            params.push(Param {
                name: format!("w{layer}"),
                shape: vec![in_dim, cfg.hidden_dim],
                data: w,
            });
            params.push(Param {
                name: format!("b{layer}"),
                shape: vec![1, cfg.hidden_dim],
                data: vec![0.0; cfg.hidden_dim],
            });
            in_dim = cfg.hidden_dim;
        }
        params.push(Param {
            name: "w_out".into(),
            shape: vec![cfg.hidden_dim, cfg.data_dim],
            data: vec![0.0; cfg.hidden_dim * cfg.data_dim],
        });
        params.push(Param {
            name: "b_out".into(),
            shape: vec![1, cfg.data_dim],
            data: vec![0.0; cfg.data_dim],
        });
        if cfg.is_conditional() {
            let rows = cfg.num_classes + 1;
            let table: Vec<f64> = (0..rows * cfg.cond_embed_dim)
                .map(|_| 0.02 * rng.sample::<f64, _>(StandardNormal))
                .collect();
            params.push(Param {
                name: "cond_embed".into(),
                shape: vec![rows, cfg.cond_embed_dim],
                data: table,
            });
        }
        Ok(VelocityNet {
            time_embed: TimeEmbedding::new(cfg.time_embed_dim),
            cfg,
            params,
            counters: Arc::new(OpCounters::default()),
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn counters(&self) -> &OpCounters {
        &self.counters
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Flat parameter blocks in declared order (checkpointing, EMA, Adam).
    pub fn param_blocks(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| p.data.clone()).collect()
    }

    pub fn set_param_blocks(&mut self, blocks: &[Vec<f64>]) -> Result<()> {
        if blocks.len() != self.params.len() {
            return Err(Error::CheckpointDims(format!(
                "expected {} parameter blocks, got {}",
                self.params.len(),
                blocks.len()
            )));
        }
        for (p, b) in self.params.iter_mut().zip(blocks) {
            if p.data.len() != b.len() {
                return Err(Error::CheckpointDims(format!(
                    "parameter {} expects {} values, got {}",
                    p.name,
                    p.data.len(),
                    b.len()
                )));
            }
            p.data.copy_from_slice(b);
        }
        Ok(())
    }

    /// A clone of this net carrying different parameter values (EMA snapshots).
    pub fn with_param_blocks(&self, blocks: &[Vec<f64>]) -> Result<VelocityNet> {
        let mut net = self.clone();
        net.counters = Arc::new(OpCounters::default());
        net.set_param_blocks(blocks)?;
        Ok(net)
    }

    fn view<T: TensorOps>(&self, mut lift: impl FnMut(&Param) -> T) -> ParamView<T> {
        let n_layers = self.cfg.hidden_layers + 1;
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            layers.push((lift(&self.params[2 * i]), lift(&self.params[2 * i + 1])));
        }
        let cond_embed = self
            .cfg
            .is_conditional()
            .then(|| lift(&self.params[2 * n_layers]));
        ParamView { layers, cond_embed }
    }

    fn param_tensor(p: &Param) -> Tensor {
        Tensor::new(p.shape.clone(), p.data.clone()).expect("param shape")
    }

    /// One-hot rows over `num_classes + 1` columns; `None` means the null id.
    fn one_hot(&self, batch: usize, cond: Option<&[usize]>) -> Result<Tensor> {
        let cols = self.cfg.num_classes + 1;
        let mut data = vec![0.0; batch * cols];
        for i in 0..batch {
            let id = match cond {
                Some(ids) => {
                    let id = ids[i];
                    if id > self.cfg.num_classes {
                        return Err(Error::Config(format!(
                            "class id {id} out of range 0..={}",
                            self.cfg.num_classes
                        )));
                    }
                    id
                }
                None => self.cfg.null_class_id(),
            };
            data[i * cols + id] = 1.0;
        }
        Tensor::matrix(batch, cols, data)
    }

    fn forward_in<T: TensorOps>(
        &self,
        view: &ParamView<T>,
        z: &T,
        r_col: &T,
        t_col: &T,
        one_hot: Option<&Tensor>,
    ) -> Result<T> {
        let batch = z.shape()[0];
        let er = self.time_embed.embed(r_col)?;
        let et = self.time_embed.embed(t_col)?;
        let mut parts: Vec<T> = vec![z.clone(), er, et];
        if let Some(table) = &view.cond_embed {
            let oh = T::lift(one_hot.expect("conditional net needs one-hot rows"));
            parts.push(oh.matmul(table)?);
        }
        let refs: Vec<&T> = parts.iter().collect();
        let mut h = T::concat_cols(&refs)?;
        let last = view.layers.len() - 1;
        for (i, (w, b)) in view.layers.iter().enumerate() {
            h = h.matmul(w)?.add(&b.broadcast_rows(batch)?)?;
            if i < last {
                h = h.silu();
            }
        }
        Ok(h)
    }

    fn check_inputs(&self, z: &Tensor, r: &Tensor, t: &Tensor) -> Result<(usize, Tensor, Tensor)> {
        if z.shape().len() != 2 || z.shape()[1] != self.cfg.data_dim {
            return Err(Error::InvalidShape {
                op: "forward",
                shape: z.shape().to_vec(),
                reason: format!("expected (batch, {})", self.cfg.data_dim),
            });
        }
        let batch = z.shape()[0];
        let r_col = as_column(r, batch, "r")?;
        let t_col = as_column(t, batch, "t")?;
        debug_assert!(
            r_col
                .data()
                .iter()
                .zip(t_col.data())
                .all(|(rv, tv)| rv <= &(tv + 1e-12)),
            "forward requires r <= t elementwise"
        );
        Ok((batch, r_col, t_col))
    }

    /// Plain (untracked) evaluation of `u_theta(z, r, t, c)`.
    pub fn forward(&self, z: &Tensor, r: &Tensor, t: &Tensor, cond: Option<&[usize]>) -> Result<Tensor> {
        let (batch, r_col, t_col) = self.check_inputs(z, r, t)?;
        let one_hot = if self.cfg.is_conditional() {
            Some(self.one_hot(batch, cond)?)
        } else {
            None
        };
        let view = self.view(|p| Self::param_tensor(p));
        let out = self.forward_in(&view, &z.stop_gradient(), &r_col, &t_col, one_hot.as_ref())?;
        self.counters.note_forward();
        if !out.all_finite() {
            return Err(Error::Poisoned {
                context: "velocity net forward".into(),
            });
        }
        Ok(out)
    }

    /// The model's estimate of the instantaneous velocity: forwards with r := t.
    pub fn as_instantaneous(&self, z: &Tensor, t: &Tensor, cond: Option<&[usize]>) -> Result<Tensor> {
        self.forward(z, t, t, cond)
    }

    /// Register parameters on a tape and return a handle whose forward passes
    /// are recorded for backprop. Leaves align with `params()` order.
    pub fn track<'a>(&'a self, tape: &Tape) -> TrackedNet<'a> {
        let mut leaves = Vec::with_capacity(self.params.len());
        for p in &self.params {
            leaves.push(tape.leaf(&Self::param_tensor(p)));
        }
        let n_layers = self.cfg.hidden_layers + 1;
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            layers.push((leaves[2 * i].clone(), leaves[2 * i + 1].clone()));
        }
        let cond_embed = self.cfg.is_conditional().then(|| leaves[2 * n_layers].clone());
        TrackedNet {
            net: self,
            view: ParamView { layers, cond_embed },
            leaves,
        }
    }

    /// Forward-mode evaluation returning `(u, du)` where `du` is the
    /// directional derivative along `(tangent_z, tangent_r, tangent_t)`.
    pub fn forward_jvp(
        &self,
        z: &Tensor,
        r: &Tensor,
        t: &Tensor,
        cond: Option<&[usize]>,
        tangent_z: &Tensor,
        tangent_r: f64,
        tangent_t: f64,
    ) -> Result<(Tensor, Tensor)> {
        let (batch, r_col, t_col) = self.check_inputs(z, r, t)?;
        if tangent_z.shape() != z.shape() {
            return Err(Error::ShapeMismatch {
                op: "forward_jvp",
                lhs: z.shape().to_vec(),
                rhs: tangent_z.shape().to_vec(),
            });
        }
        let one_hot = if self.cfg.is_conditional() {
            Some(self.one_hot(batch, cond)?)
        } else {
            None
        };
        let dz = DualTensor::new(z.stop_gradient(), tangent_z.clone())?;
        let dr = DualTensor::new(
            r_col.clone(),
            Tensor::matrix(batch, 1, vec![tangent_r; batch])?,
        )?;
        let dt = DualTensor::new(
            t_col.clone(),
            Tensor::matrix(batch, 1, vec![tangent_t; batch])?,
        )?;
        let view = self.view(|p| DualTensor::constant(&Self::param_tensor(p)));
        let out = self.forward_in(&view, &dz, &dr, &dt, one_hot.as_ref())?;
        self.counters.note_jvp();
        if !out.primal.all_finite() || !out.tangent.all_finite() {
            return Err(Error::Poisoned {
                context: "velocity net jvp".into(),
            });
        }
        Ok((out.primal, out.tangent))
    }
}

/// Tape-registered view of a net for one training step.
pub struct TrackedNet<'a> {
    net: &'a VelocityNet,
    view: ParamView<Tensor>,
    leaves: Vec<Tensor>,
}

impl<'a> TrackedNet<'a> {
    pub fn net(&self) -> &'a VelocityNet {
        self.net
    }

    pub fn forward(&self, z: &Tensor, r: &Tensor, t: &Tensor, cond: Option<&[usize]>) -> Result<Tensor> {
        let (batch, r_col, t_col) = self.net.check_inputs(z, r, t)?;
        let one_hot = if self.net.cfg.is_conditional() {
            Some(self.net.one_hot(batch, cond)?)
        } else {
            None
        };
        let out = self
            .net
            .forward_in(&self.view, z, &r_col, &t_col, one_hot.as_ref())?;
        self.net.counters.note_forward();
        if !out.all_finite() {
            return Err(Error::Poisoned {
                context: "velocity net forward".into(),
            });
        }
        Ok(out)
    }

    /// Gradient blocks aligned with `VelocityNet::params()` order.
    pub fn param_grads(&self, grads: &Gradients) -> Result<Vec<Vec<f64>>> {
        self.leaves
            .iter()
            .map(|leaf| Ok(grads.wrt(leaf)?.data().to_vec()))
            .collect()
    }
}

fn as_column(t: &Tensor, batch: usize, name: &'static str) -> Result<Tensor> {
    match t.shape() {
        [b] if *b == batch => t.with_shape(vec![batch, 1]),
        [b, 1] if *b == batch => Ok(t.stop_gradient()),
        other => Err(Error::InvalidShape {
            op: "forward",
            shape: other.to_vec(),
            reason: format!("{name} must have shape ({batch}) or ({batch}, 1)"),
        }),
    }
}
