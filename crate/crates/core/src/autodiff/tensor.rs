use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

use super::kernels;
use super::tape::Track;

/// Row-major n-dimensional array of 64-bit floats.
///
/// Values are immutable after creation and the buffer is shared on clone.
/// A tensor may carry a tape handle, in which case every primitive applied
/// to it is recorded for reverse-mode differentiation.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    pub(crate) track: Option<Track>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::InvalidShape {
                op: "tensor",
                shape,
                reason: "extents must be >= 1".into(),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                op: "tensor",
                shape,
                reason: format!("shape wants {numel} values, got {}", data.len()),
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            track: None,
        })
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![v]),
            track: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Tensor {
        Tensor {
            shape: vec![data.len().max(1)],
            data: Arc::new(if data.is_empty() { vec![0.0] } else { data }),
            track: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
        let r = rows.len();
        let c = rows.first().map(|x| x.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::InvalidShape {
                    op: "from_rows",
                    shape: vec![r, row.len()],
                    reason: "ragged rows".into(),
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::matrix(r, c, data)
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Tensor> {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel])
    }

    pub fn zeros_like(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(vec![0.0; self.numel()]),
            track: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    pub fn grad_tracked(&self) -> bool {
        self.track.is_some()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert_eq!(self.shape.len(), 2);
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    pub fn all_finite(&self) -> bool {
        kernels::all_finite(&self.data)
    }

    /// Same values, detached from any tape. Backward contributes zero through it.
    pub fn stop_gradient(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            track: None,
        }
    }

    /// Reinterpret the buffer under a new shape (same element count).
    /// Only valid on untracked tensors; reshape is not a recorded primitive.
    pub(crate) fn with_shape(&self, shape: Vec<usize>) -> Result<Tensor> {
        debug_assert!(self.track.is_none(), "with_shape on a tracked tensor");
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::InvalidShape {
                op: "with_shape",
                shape,
                reason: format!("element count {} != {}", numel, self.numel()),
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
            track: None,
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Arc<Vec<f64>>, track: Option<Track>) -> Tensor {
        Tensor { shape, data, track }
    }
}

/// Value-identical tensor that the tape treats as a constant.
pub fn stop_gradient(x: &Tensor) -> Tensor {
    x.stop_gradient()
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor(shape={:?}, tracked={}, data={:?})",
            self.shape,
            self.grad_tracked(),
            if self.numel() <= 8 {
                format!("{:?}", &self.data[..])
            } else {
                format!("[{} values]", self.numel())
            }
        )
    }
}
