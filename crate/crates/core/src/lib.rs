//! Average-velocity few-step generative modeling on toy distributions.
//!
//! The crate trains a field `u(z, r, t)` — the mean velocity of a flow over
//! the interval `[r, t]` — either by enforcing the algebraic interval
//! splitting consistency of displacements (three plain forward passes per
//! step) or, as a baseline, by regressing onto the differential identity
//! `u = v - (t - r) du/dt` (one JVP per step). A standard flow matching
//! pretraining stage provides the teacher. Samplers, toy datasets, quality
//! metrics and checkpointing round out the experiment loop.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod flow;
pub mod meanflow;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod sampler;
pub mod smf;

pub use error::{Error, Result};
