//! Floating point scalar abstraction.
//!
//! Every numeric routine in the crate is generic over [`Scalar`], which is
//! implemented for `f32` and `f64`. Dense matrix products are dispatched to
//! the matching `matrixmultiply` kernel.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Strided view of a row-major matrix operand for [`Scalar::gemm`].
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> MatRef<'a, T> {
    /// Contiguous row-major matrix.
    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// The transpose of a contiguous row-major `rows × cols` matrix, without copying.
    pub fn transposed(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows: cols,
            cols: rows,
            row_stride: 1,
            col_stride: cols,
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride;
            assert!(last < self.data.len(), "matrix view exceeds buffer");
        }
    }
}

/// f32 / f64.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// `c ← a·b + beta·c` where `c` is a contiguous row-major `a.rows × b.cols` matrix.
    fn gemm(a: MatRef<'_, Self>, b: MatRef<'_, Self>, beta: Self, c: &mut [Self]);

    /// Lossy conversion from `f64`; panics only for values the type cannot represent at all.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $kernel:path) => {
        impl Scalar for $t {
            fn gemm(a: MatRef<'_, Self>, b: MatRef<'_, Self>, beta: Self, c: &mut [Self]) {
                assert_eq!(a.cols, b.rows, "gemm inner dimensions");
                assert_eq!(c.len(), a.rows * b.cols, "gemm output size");
                a.check();
                b.check();
                if a.rows == 0 || b.cols == 0 {
                    return;
                }
                if a.cols == 0 {
                    for v in c.iter_mut() {
                        *v = *v * beta;
                    }
                    return;
                }
                // SAFETY: all three views were bounds-checked above and `c` is
                // exclusively borrowed, so the kernel reads/writes in range.
                unsafe {
                    $kernel(
                        a.rows,
                        a.cols,
                        b.cols,
                        1.0,
                        a.data.as_ptr(),
                        a.row_stride as isize,
                        a.col_stride as isize,
                        b.data.as_ptr(),
                        b.row_stride as isize,
                        b.col_stride as isize,
                        beta,
                        c.as_mut_ptr(),
                        b.cols as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);
