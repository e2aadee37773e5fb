use crate::error::{Error, Result};
use crate::tensor::l2_norm_slice;

/// One flat gradient per sample, row-major `[batch_size, dim]`, with the
/// L2 norm of each row.
#[derive(Clone, Debug, PartialEq)]
pub struct PerSampleGradients {
    batch_size: usize,
    dim: usize,
    grads: Vec<f64>,
    norms: Vec<f64>,
}

impl PerSampleGradients {
    pub fn new(batch_size: usize, dim: usize, grads: Vec<f64>) -> Result<Self> {
        if grads.len() != batch_size * dim {
            return Err(Error::dim(format!(
                "{} gradient entries for {batch_size} samples of dimension {dim}",
                grads.len()
            )));
        }
        let norms = if dim == 0 {
            vec![0.0; batch_size]
        } else {
            grads.chunks(dim).map(l2_norm_slice).collect()
        };
        Ok(Self {
            batch_size,
            dim,
            grads,
            norms,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.grads[i * self.dim..(i + 1) * self.dim]
    }

    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.grads
    }

    /// Element-wise sum over samples.
    pub fn sum(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for i in 0..self.batch_size {
            for (o, g) in out.iter_mut().zip(self.row(i)) {
                *o += g;
            }
        }
        out
    }
}
