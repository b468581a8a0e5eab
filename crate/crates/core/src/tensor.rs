//! Dense row-major f64 tensors.
//!
//! Value types with no autodiff state; the tape in [`crate::autodiff`] builds
//! on these. Every public operation validates shapes and rejects non-finite
//! results so that numerical blowups surface as errors instead of NaNs
//! propagating through a training run.

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericError {
    #[error("shape mismatch in {op}: left {left:?}, right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape in {op}: {shape:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: &'static str,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("index {index} out of range for {op} (limit {limit})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        limit: usize,
    },
}

pub type NumericResult<T> = Result<T, NumericError>;

/// Dense tensor: `shape` lists dimensions, `data` is row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> NumericResult<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NumericError::InvalidShape {
                op: "new",
                shape,
                reason: "element count does not match shape product",
            });
        }
        let t = Tensor { shape, data };
        t.check_finite("new")?;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> NumericResult<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(NumericError::InvalidShape {
                    op: "from_rows",
                    shape: vec![r, row.len()],
                    reason: "ragged rows",
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    /// Seeded normal init, used for parameter initialization.
    pub fn randn<R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                // Box-Muller on two uniform draws.
                let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> NumericResult<f64> {
        if self.data.len() != 1 {
            return Err(NumericError::InvalidShape {
                op: "item",
                shape: self.shape.clone(),
                reason: "expected exactly one element",
            });
        }
        Ok(self.data[0])
    }

    pub fn rows(&self) -> NumericResult<usize> {
        self.dim2().map(|(r, _)| r)
    }

    pub fn cols(&self) -> NumericResult<usize> {
        self.dim2().map(|(_, c)| c)
    }

    fn dim2(&self) -> NumericResult<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(NumericError::InvalidShape {
                op: "dim2",
                shape: self.shape.clone(),
                reason: "expected a 2-d tensor",
            }),
        }
    }

    pub fn row(&self, r: usize) -> NumericResult<&[f64]> {
        let (rows, cols) = self.dim2()?;
        if r >= rows {
            return Err(NumericError::IndexOutOfRange {
                op: "row",
                index: r,
                limit: rows,
            });
        }
        Ok(&self.data[r * cols..(r + 1) * cols])
    }

    pub fn check_finite(&self, op: &'static str) -> NumericResult<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(NumericError::NonFinite { op })
        }
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> NumericResult<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(NumericError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            })
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> NumericResult<Tensor> {
        self.same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        let t = Tensor {
            shape: self.shape.clone(),
            data,
        };
        t.check_finite("add")?;
        Ok(t)
    }

    pub fn sub(&self, other: &Tensor) -> NumericResult<Tensor> {
        self.same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        let t = Tensor {
            shape: self.shape.clone(),
            data,
        };
        t.check_finite("sub")?;
        Ok(t)
    }

    pub fn mul(&self, other: &Tensor) -> NumericResult<Tensor> {
        self.same_shape(other, "mul")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        let t = Tensor {
            shape: self.shape.clone(),
            data,
        };
        t.check_finite("mul")?;
        Ok(t)
    }

    pub fn scale(&self, c: f64) -> NumericResult<Tensor> {
        let t = self.map(|v| v * c);
        t.check_finite("scale")?;
        Ok(t)
    }

    /// `self @ other` for 2-d tensors; i-k-j loop order keeps accesses row-major.
    pub fn matmul(&self, other: &Tensor) -> NumericResult<Tensor> {
        let (m, k) = self.dim2()?;
        let (k2, n) = other.dim2()?;
        if k != k2 {
            return Err(NumericError::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (kk, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[kk * n..(kk + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        let t = Tensor {
            shape: vec![m, n],
            data: out,
        };
        t.check_finite("matmul")?;
        Ok(t)
    }

    pub fn transpose(&self) -> NumericResult<Tensor> {
        let (r, c) = self.dim2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data: out,
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> NumericResult<f64> {
        self.same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    /// Squared Frobenius / L2 norm of the whole tensor.
    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matmul_identity() {
        let id = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(id.matmul(&m).unwrap(), m);
    }

    #[test]
    fn matmul_shape_mismatch_lists_both_shapes() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "unexpected message: {msg}");
    }

    #[test]
    fn non_finite_is_rejected() {
        let big = Tensor::full(vec![2], 1e308);
        assert!(matches!(
            big.add(&big),
            Err(NumericError::NonFinite { .. })
        ));
    }

    #[test]
    fn randn_is_seed_deterministic() {
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::randn(vec![3, 4], 0.02, &mut r1);
        let b = Tensor::randn(vec![3, 4], 0.02, &mut r2);
        assert_eq!(a, b);
    }

    #[test]
    fn transpose_round_trip() {
        let m = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(m.transpose().unwrap().transpose().unwrap(), m);
    }
}
