//! Dense row-major arrays.

use crate::error::{Result, StpsError};
use crate::scalar::Scalar;

/// A row-major array with an explicit shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(StpsError::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a tensor from `f64` values, converting to `T`.
    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::of(x)).collect())
    }

    /// Row-major matrix from nested rows; panics on ragged input (test helper).
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        let data = rows.iter().flat_map(|row| row.iter().map(|&x| T::of(x))).collect();
        Self {
            shape: vec![r, c],
            data,
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64_lossy()).collect()
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn reshaped(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(StpsError::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Element at a 2-D index.
    pub fn at2(&self, i: usize, j: usize) -> T {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    /// In-place `self += other`; shapes must match.
    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Self> {
        let r = self.shape.len();
        if r < 2 {
            return Err(StpsError::shape(
                "transpose",
                format!("rank {r} < 2 for shape {:?}", self.shape),
            ));
        }
        let (p, q) = (self.shape[r - 2], self.shape[r - 1]);
        let batch = self.data.len() / (p * q).max(1);
        let mut out = Vec::with_capacity(self.data.len());
        for b in 0..batch {
            let base = b * p * q;
            for j in 0..q {
                for i in 0..p {
                    out.push(self.data[base + i * q + j]);
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.swap(r - 2, r - 1);
        Ok(Self { shape, data: out })
    }

    /// Gathers rows (first axis) by index.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let k = *self.shape.first().unwrap_or(&0);
        let w = if k == 0 { 0 } else { self.data.len() / k };
        let mut data = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            if r >= k {
                return Err(StpsError::Bounds {
                    what: "rows",
                    index: r,
                    bound: k,
                });
            }
            data.extend_from_slice(&self.data[r * w..(r + 1) * w]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Ok(Self { shape, data })
    }

    /// Gathers a sub-block of a matrix: `self[rows, cols]`.
    pub fn select_block(&self, rows: &[usize], cols: &[usize]) -> Result<Self> {
        if self.shape.len() != 2 {
            return Err(StpsError::shape("select_block", format!("{:?}", self.shape)));
        }
        let c = self.shape[1];
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for &i in rows {
            for &j in cols {
                if i >= self.shape[0] || j >= c {
                    return Err(StpsError::Bounds {
                        what: "matrix block",
                        index: i.max(j),
                        bound: self.shape[0].min(c),
                    });
                }
                data.push(self.data[i * c + j]);
            }
        }
        Ok(Self {
            shape: vec![rows.len(), cols.len()],
            data,
        })
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::of(x.to_f64_lossy())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_len() {
        assert!(Tensor::<f64>::new([2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f64>::new([2, 2], vec![0.0; 4]).is_ok());
    }

    #[test]
    fn transpose_last_swaps_batched() {
        let t = Tensor::<f64>::from_f64([2, 1, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let tt = t.transpose_last().unwrap();
        assert_eq!(tt.shape(), &[2, 2, 1]);
        assert_eq!(tt.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(Tensor::<f64>::zeros([3]).transpose_last().is_err());
    }

    #[test]
    fn select_block_gathers() {
        let a = Tensor::<f64>::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let b = a.select_block(&[1, 0], &[2]).unwrap();
        assert_eq!(b.data(), &[6.0, 3.0]);
        assert!(a.select_block(&[2], &[0]).is_err());
    }
}
