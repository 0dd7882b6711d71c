use crate::error::{Error, Result};

/// Dense row-major tensor with an optional gradient slot of the same length.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {shape:?} needs {n} values, got {}", data.len()),
            });
        }
        Ok(Self { shape, data, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Shape as `[n, c, rest]`, collapsing every trailing dimension.
    pub(crate) fn ncs(&self) -> Result<[usize; 3]> {
        if self.shape.len() < 2 {
            return Err(Error::ShapeMismatch {
                op: "ncs",
                detail: format!("need at least two dimensions, got {:?}", self.shape),
            });
        }
        let rest = self.shape[2..].iter().product();
        Ok([self.shape[0], self.shape[1], rest])
    }

    pub(crate) fn chw(&self, op: &'static str) -> Result<[usize; 3]> {
        match self.shape[..] {
            [c, h, w] => Ok([c, h, w]),
            _ => Err(Error::ShapeMismatch {
                op,
                detail: format!("expected [C, H, W], got {:?}", self.shape),
            }),
        }
    }
}
