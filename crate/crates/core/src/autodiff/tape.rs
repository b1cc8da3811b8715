//! Define-by-run Wengert tape.
//!
//! A fresh tape is built for every training step. Tracked tensors carry a
//! handle to the tape plus their node index; applying a primitive to any
//! tracked operand appends one node. Nodes save operand value buffers (cheap
//! Arc clones) so the backward sweep never recomputes the forward pass.
//! Recording is guarded by an uncontended mutex so tensors stay Send/Sync;
//! a tape is still meant to be driven by one thread per training step.

use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

use super::kernels as k;
use super::tensor::Tensor;

#[derive(Clone)]
pub struct Tape(Arc<Mutex<TapeInner>>);

#[derive(Clone)]
pub(crate) struct Track {
    pub tape: Tape,
    pub node: usize,
}

struct TapeInner {
    nodes: Vec<NodeRec>,
}

struct NodeRec {
    op: OpRec,
}

/// One operand as seen by the backward pass: the saved value buffer plus the
/// producing node, if the operand was tracked. Constants have `node: None`
/// and receive no gradient — this is what makes stop_gradient opaque.
pub(crate) struct Parent {
    node: Option<usize>,
    data: Arc<Vec<f64>>,
}

impl Parent {
    fn of(t: &Tensor) -> Parent {
        Parent {
            node: t.track.as_ref().map(|tr| tr.node),
            data: t.data_arc(),
        }
    }
}

enum OpRec {
    Leaf,
    Add { a: Parent, b: Parent },
    Sub { a: Parent, b: Parent },
    Mul { a: Parent, b: Parent },
    Matmul { a: Parent, b: Parent, m: usize, k: usize, n: usize },
    Scale { x: Parent, c: f64 },
    Silu { x: Parent },
    Relu { x: Parent },
    Sin { x: Parent },
    Cos { x: Parent },
    Square { x: Parent },
    Sqrt { x: Parent, out: Arc<Vec<f64>> },
    Sum { x: Parent },
    Mean { x: Parent },
    ConcatCols { parts: Vec<Parent>, rows: usize, widths: Vec<usize> },
    BroadcastRows { x: Parent, rows: usize },
}

impl Tape {
    pub fn new() -> Tape {
        Tape(Arc::new(Mutex::new(TapeInner { nodes: Vec::new() })))
    }

    pub fn len(&self) -> usize {
        self.0.lock().expect("tape lock").nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    /// Register a tensor's values as a tracked leaf on this tape.
    pub fn leaf(&self, t: &Tensor) -> Tensor {
        let node = self.push(OpRec::Leaf);
        Tensor::from_parts(
            t.shape().to_vec(),
            t.data_arc(),
            Some(Track {
                tape: self.clone(),
                node,
            }),
        )
    }

    fn push(&self, op: OpRec) -> usize {
        let mut inner = self.0.lock().expect("tape lock");
        inner.nodes.push(NodeRec { op });
        inner.nodes.len() - 1
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// The tape (if any) a new op output should be recorded on.
fn joint_tape(a: &Tensor, b: &Tensor) -> Result<Option<Tape>> {
    match (&a.track, &b.track) {
        (Some(ta), Some(tb)) => {
            if ta.tape.same_tape(&tb.tape) {
                Ok(Some(ta.tape.clone()))
            } else {
                Err(Error::TapeMismatch)
            }
        }
        (Some(ta), None) => Ok(Some(ta.tape.clone())),
        (None, Some(tb)) => Ok(Some(tb.tape.clone())),
        (None, None) => Ok(None),
    }
}

fn finish(shape: Vec<usize>, data: Vec<f64>, tape: Option<Tape>, op: impl FnOnce() -> OpRec) -> Tensor {
    let data = Arc::new(data);
    let track = tape.map(|tape| {
        let node = tape.push(op());
        Track { tape, node }
    });
    Tensor::from_parts(shape, data, track)
}

fn require_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        require_same_shape("add", self, other)?;
        let tape = joint_tape(self, other)?;
        Ok(finish(
            self.shape().to_vec(),
            k::ew_add(self.data(), other.data()),
            tape,
            || OpRec::Add {
                a: Parent::of(self),
                b: Parent::of(other),
            },
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        require_same_shape("sub", self, other)?;
        let tape = joint_tape(self, other)?;
        Ok(finish(
            self.shape().to_vec(),
            k::ew_sub(self.data(), other.data()),
            tape,
            || OpRec::Sub {
                a: Parent::of(self),
                b: Parent::of(other),
            },
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        require_same_shape("mul", self, other)?;
        let tape = joint_tape(self, other)?;
        Ok(finish(
            self.shape().to_vec(),
            k::ew_mul(self.data(), other.data()),
            tape,
            || OpRec::Mul {
                a: Parent::of(self),
                b: Parent::of(other),
            },
        ))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape().len() != 2 || other.shape().len() != 2 || self.shape()[1] != other.shape()[0]
        {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let (m, kk, n) = (self.shape()[0], self.shape()[1], other.shape()[1]);
        let tape = joint_tape(self, other)?;
        Ok(finish(
            vec![m, n],
            k::matmul(self.data(), other.data(), m, kk, n),
            tape,
            || OpRec::Matmul {
                a: Parent::of(self),
                b: Parent::of(other),
                m,
                k: kk,
                n,
            },
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        finish(
            self.shape().to_vec(),
            k::ew_scale(self.data(), c),
            self.track.as_ref().map(|t| t.tape.clone()),
            || OpRec::Scale {
                x: Parent::of(self),
                c,
            },
        )
    }

    pub fn silu(&self) -> Tensor {
        finish(
            self.shape().to_vec(),
            k::silu(self.data()),
            self.track.as_ref().map(|t| t.tape.clone()),
            || OpRec::Silu { x: Parent::of(self) },
        )
    }

    pub fn relu(&self) -> Tensor {
        finish(
            self.shape().to_vec(),
            k::relu(self.data()),
            self.track.as_ref().map(|t| t.tape.clone()),
            || OpRec::Relu { x: Parent::of(self) },
        )
    }

    pub fn sin(&self) -> Tensor {
        finish(
            self.shape().to_vec(),
            k::ew_sin(self.data()),
            self.track.as_ref().map(|t| t.tape.clone()),
            || OpRec::Sin { x: Parent::of(self) },
        )
    }

    pub fn cos(&self) -> Tensor {
        finish(
            self.shape().to_vec(),
            k::ew_cos(self.data()),
            self.track.as_ref().map(|t| t.tape.clone()),
            || OpRec::Cos { x: Parent::of(self) },
        )
    }

    pub fn square(&self) -> Tensor {
        finish(
            self.shape().to_vec(),
            k::ew_square(self.data()),
            self.track.as_ref().map(|t| t.tape.clone()),
            || OpRec::Square { x: Parent::of(self) },
        )
    }

    pub fn sqrt(&self) -> Tensor {
        let out = k::ew_sqrt(self.data());
        let out_arc = Arc::new(out.clone());
        finish(
            self.shape().to_vec(),
            out,
            self.track.as_ref().map(|t| t.tape.clone()),
            || OpRec::Sqrt {
                x: Parent::of(self),
                out: out_arc,
            },
        )
    }

    pub fn sum(&self) -> Tensor {
        finish(
            vec![1],
            vec![k::sum(self.data())],
            self.track.as_ref().map(|t| t.tape.clone()),
            || OpRec::Sum { x: Parent::of(self) },
        )
    }

    pub fn mean(&self) -> Tensor {
        finish(
            vec![1],
            vec![k::sum(self.data()) / self.numel() as f64],
            self.track.as_ref().map(|t| t.tape.clone()),
            || OpRec::Mean { x: Parent::of(self) },
        )
    }

    /// Concatenate rank-2 tensors along the last axis.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::InvalidShape {
                op: "concat_cols",
                shape: vec![],
                reason: "no parts".into(),
            });
        }
        let rows = parts[0].shape().first().copied().unwrap_or(0);
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            if p.shape().len() != 2 || p.shape()[0] != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            widths.push(p.shape()[1]);
        }
        let mut tape: Option<Tape> = None;
        for p in parts {
            if let Some(tr) = &p.track {
                match &tape {
                    None => tape = Some(tr.tape.clone()),
                    Some(t) if t.same_tape(&tr.tape) => {}
                    Some(_) => return Err(Error::TapeMismatch),
                }
            }
        }
        let slices: Vec<(&[f64], usize)> = parts
            .iter()
            .zip(&widths)
            .map(|(p, &w)| (p.data(), w))
            .collect();
        let total: usize = widths.iter().sum();
        Ok(finish(
            vec![rows, total],
            k::concat_cols(&slices, rows),
            tape,
            || OpRec::ConcatCols {
                parts: parts.iter().map(|p| Parent::of(p)).collect(),
                rows,
                widths,
            },
        ))
    }

    /// Tile a single row — shape (c) or (1, c) — into (rows, c).
    pub fn broadcast_rows(&self, rows: usize) -> Result<Tensor> {
        let cols = match self.shape() {
            [c] => *c,
            [1, c] => *c,
            other => {
                return Err(Error::InvalidShape {
                    op: "broadcast_rows",
                    shape: other.to_vec(),
                    reason: "expected a single row".into(),
                })
            }
        };
        Ok(finish(
            vec![rows, cols],
            k::broadcast_rows(self.data(), rows),
            self.track.as_ref().map(|t| t.tape.clone()),
            || OpRec::BroadcastRows {
                x: Parent::of(self),
                rows,
            },
        ))
    }
}

/// Gradients of a scalar loss with respect to every tracked node.
pub struct Gradients {
    tape: Tape,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `t`, which must be tracked on the same tape.
    /// Nodes untouched by the loss (e.g. behind stop_gradient) yield zeros.
    pub fn wrt(&self, t: &Tensor) -> Result<Tensor> {
        let track = t.track.as_ref().ok_or(Error::NotTracked)?;
        if !track.tape.same_tape(&self.tape) {
            return Err(Error::TapeMismatch);
        }
        match &self.grads[track.node] {
            Some(g) => Tensor::new(t.shape().to_vec(), g.clone()),
            None => Ok(t.zeros_like()),
        }
    }
}

/// Reverse sweep from a tracked scalar loss. Visits each tape node exactly
/// once, in reverse topological (i.e. recording) order.
pub fn backward(loss: &Tensor) -> Result<Gradients> {
    let track = loss.track.as_ref().ok_or(Error::NonScalarLoss {
        shape: loss.shape().to_vec(),
    })?;
    if !loss.is_scalar() {
        return Err(Error::NonScalarLoss {
            shape: loss.shape().to_vec(),
        });
    }
    let tape = track.tape.clone();
    let inner = tape.0.lock().expect("tape lock");
    let n = inner.nodes.len();
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
    grads[track.node] = Some(vec![1.0]);

    for idx in (0..n).rev() {
        let Some(g) = grads[idx].take() else { continue };
        let node = &inner.nodes[idx];
        let send = |p: &Parent, contrib: Vec<f64>, grads: &mut Vec<Option<Vec<f64>>>| {
            if let Some(pn) = p.node {
                match &mut grads[pn] {
                    Some(acc) => k::add_into(acc, &contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        };
        match &node.op {
            OpRec::Leaf => {
                grads[idx] = Some(g); // keep leaf gradients for readout
                continue;
            }
            OpRec::Add { a, b } => {
                send(a, g.clone(), &mut grads);
                send(b, g, &mut grads);
            }
            OpRec::Sub { a, b } => {
                send(a, g.clone(), &mut grads);
                send(b, k::ew_neg(&g), &mut grads);
            }
            OpRec::Mul { a, b } => {
                send(a, k::ew_mul(&g, &b.data), &mut grads);
                send(b, k::ew_mul(&g, &a.data), &mut grads);
            }
            OpRec::Matmul { a, b, m, k: kk, n } => {
                send(a, k::matmul_nt(&g, &b.data, *m, *n, *kk), &mut grads);
                send(b, k::matmul_tn(&a.data, &g, *m, *kk, *n), &mut grads);
            }
            OpRec::Scale { x, c } => {
                send(x, k::ew_scale(&g, *c), &mut grads);
            }
            OpRec::Silu { x } => {
                let contrib: Vec<f64> = g
                    .iter()
                    .zip(x.data.iter())
                    .map(|(gv, xv)| gv * k::silu_deriv(*xv))
                    .collect();
                send(x, contrib, &mut grads);
            }
            OpRec::Relu { x } => {
                let contrib: Vec<f64> = g
                    .iter()
                    .zip(x.data.iter())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                send(x, contrib, &mut grads);
            }
            OpRec::Sin { x } => {
                let contrib: Vec<f64> = g
                    .iter()
                    .zip(x.data.iter())
                    .map(|(gv, xv)| gv * xv.cos())
                    .collect();
                send(x, contrib, &mut grads);
            }
            OpRec::Cos { x } => {
                let contrib: Vec<f64> = g
                    .iter()
                    .zip(x.data.iter())
                    .map(|(gv, xv)| -gv * xv.sin())
                    .collect();
                send(x, contrib, &mut grads);
            }
            OpRec::Square { x } => {
                let contrib: Vec<f64> = g
                    .iter()
                    .zip(x.data.iter())
                    .map(|(gv, xv)| 2.0 * gv * xv)
                    .collect();
                send(x, contrib, &mut grads);
            }
            OpRec::Sqrt { x, out } => {
                let contrib: Vec<f64> = g
                    .iter()
                    .zip(out.iter())
                    .map(|(gv, ov)| gv / (2.0 * ov))
                    .collect();
                send(x, contrib, &mut grads);
            }
            OpRec::Sum { x } => {
                send(x, vec![g[0]; x.data.len()], &mut grads);
            }
            OpRec::Mean { x } => {
                let c = g[0] / x.data.len() as f64;
                send(x, vec![c; x.data.len()], &mut grads);
            }
            OpRec::ConcatCols { parts, rows, widths } => {
                let split = k::split_cols(&g, *rows, widths);
                for (p, contrib) in parts.iter().zip(split) {
                    send(p, contrib, &mut grads);
                }
            }
            OpRec::BroadcastRows { x, rows } => {
                let cols = x.data.len();
                send(x, k::sum_rows(&g, *rows, cols), &mut grads);
            }
        }
    }
    drop(inner);
    Ok(Gradients { tape, grads })
}
