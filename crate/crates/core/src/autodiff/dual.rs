//! Forward-mode differentiation with dual tensors.
//!
//! Mirrors the tape's primitive set over (primal, tangent) pairs. This is the
//! only machinery the JVP-based baseline needs beyond the reverse-mode engine,
//! and nothing else depends on it.

use crate::error::{Error, Result};

use super::kernels as k;
use super::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct DualTensor {
    pub primal: Tensor,
    pub tangent: Tensor,
}

impl DualTensor {
    pub fn new(primal: Tensor, tangent: Tensor) -> Result<DualTensor> {
        if primal.shape() != tangent.shape() {
            return Err(Error::ShapeMismatch {
                op: "dual",
                lhs: primal.shape().to_vec(),
                rhs: tangent.shape().to_vec(),
            });
        }
        Ok(DualTensor {
            primal: primal.stop_gradient(),
            tangent: tangent.stop_gradient(),
        })
    }

    /// A value with zero tangent: constants do not move.
    pub fn constant(t: &Tensor) -> DualTensor {
        DualTensor {
            primal: t.stop_gradient(),
            tangent: t.zeros_like(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.primal.shape()
    }

    fn map(&self, primal: Vec<f64>, tangent: Vec<f64>) -> DualTensor {
        let shape = self.primal.shape().to_vec();
        DualTensor {
            primal: Tensor::new(shape.clone(), primal).expect("shape preserved"),
            tangent: Tensor::new(shape, tangent).expect("shape preserved"),
        }
    }

    pub fn add(&self, o: &DualTensor) -> Result<DualTensor> {
        Ok(DualTensor {
            primal: self.primal.add(&o.primal)?,
            tangent: self.tangent.add(&o.tangent)?,
        })
    }

    pub fn sub(&self, o: &DualTensor) -> Result<DualTensor> {
        Ok(DualTensor {
            primal: self.primal.sub(&o.primal)?,
            tangent: self.tangent.sub(&o.tangent)?,
        })
    }

    pub fn mul(&self, o: &DualTensor) -> Result<DualTensor> {
        let primal = self.primal.mul(&o.primal)?;
        let t = k::ew_add(
            &k::ew_mul(self.tangent.data(), o.primal.data()),
            &k::ew_mul(self.primal.data(), o.tangent.data()),
        );
        Ok(DualTensor {
            tangent: Tensor::new(primal.shape().to_vec(), t)?,
            primal,
        })
    }

    pub fn matmul(&self, o: &DualTensor) -> Result<DualTensor> {
        let primal = self.primal.matmul(&o.primal)?;
        // d(AB) = dA B + A dB
        let ta = self.tangent.matmul(&o.primal)?;
        let tb = self.primal.matmul(&o.tangent)?;
        Ok(DualTensor {
            tangent: ta.add(&tb)?,
            primal,
        })
    }

    pub fn scale(&self, c: f64) -> DualTensor {
        DualTensor {
            primal: self.primal.scale(c),
            tangent: self.tangent.scale(c),
        }
    }

    pub fn silu(&self) -> DualTensor {
        let primal = k::silu(self.primal.data());
        let tangent: Vec<f64> = self
            .primal
            .data()
            .iter()
            .zip(self.tangent.data())
            .map(|(x, dx)| k::silu_deriv(*x) * dx)
            .collect();
        self.map(primal, tangent)
    }

    pub fn relu(&self) -> DualTensor {
        let primal = k::relu(self.primal.data());
        let tangent: Vec<f64> = self
            .primal
            .data()
            .iter()
            .zip(self.tangent.data())
            .map(|(x, dx)| if *x > 0.0 { *dx } else { 0.0 })
            .collect();
        self.map(primal, tangent)
    }

    pub fn sin(&self) -> DualTensor {
        let primal = k::ew_sin(self.primal.data());
        let tangent: Vec<f64> = self
            .primal
            .data()
            .iter()
            .zip(self.tangent.data())
            .map(|(x, dx)| x.cos() * dx)
            .collect();
        self.map(primal, tangent)
    }

    pub fn cos(&self) -> DualTensor {
        let primal = k::ew_cos(self.primal.data());
        let tangent: Vec<f64> = self
            .primal
            .data()
            .iter()
            .zip(self.tangent.data())
            .map(|(x, dx)| -x.sin() * dx)
            .collect();
        self.map(primal, tangent)
    }

    pub fn square(&self) -> DualTensor {
        let primal = k::ew_square(self.primal.data());
        let tangent: Vec<f64> = self
            .primal
            .data()
            .iter()
            .zip(self.tangent.data())
            .map(|(x, dx)| 2.0 * x * dx)
            .collect();
        self.map(primal, tangent)
    }

    pub fn sqrt(&self) -> DualTensor {
        let primal = k::ew_sqrt(self.primal.data());
        let tangent: Vec<f64> = primal
            .iter()
            .zip(self.tangent.data())
            .map(|(s, dx)| dx / (2.0 * s))
            .collect();
        self.map(primal, tangent)
    }

    pub fn sum(&self) -> DualTensor {
        DualTensor {
            primal: self.primal.sum(),
            tangent: self.tangent.sum(),
        }
    }

    pub fn mean(&self) -> DualTensor {
        DualTensor {
            primal: self.primal.mean(),
            tangent: self.tangent.mean(),
        }
    }

    pub fn concat_cols(parts: &[&DualTensor]) -> Result<DualTensor> {
        let primals: Vec<&Tensor> = parts.iter().map(|p| &p.primal).collect();
        let tangents: Vec<&Tensor> = parts.iter().map(|p| &p.tangent).collect();
        Ok(DualTensor {
            primal: Tensor::concat_cols(&primals)?,
            tangent: Tensor::concat_cols(&tangents)?,
        })
    }

    pub fn broadcast_rows(&self, rows: usize) -> Result<DualTensor> {
        Ok(DualTensor {
            primal: self.primal.broadcast_rows(rows)?,
            tangent: self.tangent.broadcast_rows(rows)?,
        })
    }
}

/// Jacobian-vector product of `f` at `inputs` in the direction `tangents`:
/// returns `(f(x), J_f(x) · tangent)` from one dual evaluation.
pub fn jvp<F>(f: F, inputs: &[Tensor], tangents: &[Tensor]) -> Result<(Tensor, Tensor)>
where
    F: FnOnce(&[DualTensor]) -> Result<DualTensor>,
{
    if inputs.len() != tangents.len() {
        return Err(Error::InvalidShape {
            op: "jvp",
            shape: vec![inputs.len(), tangents.len()],
            reason: "one tangent per input required".into(),
        });
    }
    let duals: Vec<DualTensor> = inputs
        .iter()
        .zip(tangents)
        .map(|(x, dx)| DualTensor::new(x.clone(), dx.clone()))
        .collect::<Result<_>>()?;
    let out = f(&duals)?;
    Ok((out.primal, out.tangent))
}
