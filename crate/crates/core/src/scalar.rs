//! Floating point element types usable by tensors.

use core::fmt::{Debug, Display};
use core::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// A strided read-only matrix view into a flat buffer.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

/// A strided mutable matrix view into a flat buffer.
pub struct MatMut<'a, T> {
    pub data: &'a mut [T],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> MatRef<'a, T> {
    /// Row-major dense view.
    pub fn dense(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, row_stride: cols, col_stride: 1 }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn span(&self) -> usize {
        span(self.rows, self.cols, self.row_stride, self.col_stride)
    }
}

impl<'a, T> MatMut<'a, T> {
    pub fn dense(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, row_stride: cols, col_stride: 1 }
    }

    fn span(&self) -> usize {
        span(self.rows, self.cols, self.row_stride, self.col_stride)
    }
}

fn span(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

/// Element type of tensors. Implemented for `f32` and `f64`.
pub trait Real: Float + NumAssign + FromPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static {
    const NAME: &'static str;

    /// `c = alpha * a * b + beta * c`. With `beta == 0` the prior contents of
    /// `c` are ignored.
    fn gemm(alpha: Self, a: MatRef<'_, Self>, b: MatRef<'_, Self>, beta: Self, c: MatMut<'_, Self>);

    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

fn check_gemm<T>(a: &MatRef<'_, T>, b: &MatRef<'_, T>, c: &MatMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(a.rows, c.rows, "gemm rows");
    assert_eq!(b.cols, c.cols, "gemm cols");
    assert!(a.span() <= a.data.len(), "gemm: a out of bounds");
    assert!(b.span() <= b.data.len(), "gemm: b out of bounds");
    assert!(c.span() <= c.data.len(), "gemm: c out of bounds");
}

macro_rules! impl_real {
    ($t:ty, $gemm:path, $name:literal) => {
        impl Real for $t {
            const NAME: &'static str = $name;

            fn gemm(alpha: Self, a: MatRef<'_, Self>, b: MatRef<'_, Self>, beta: Self, c: MatMut<'_, Self>) {
                check_gemm(&a, &b, &c);
                if c.rows == 0 || c.cols == 0 {
                    return;
                }
                if a.cols == 0 {
                    // matrixmultiply treats k == 0 as c = beta * c
                    for i in 0..c.rows {
                        for j in 0..c.cols {
                            let idx = i * c.row_stride + j * c.col_stride;
                            c.data[idx] = if beta == 0.0 { 0.0 } else { beta * c.data[idx] };
                        }
                    }
                    return;
                }
                // SAFETY: every strided access was bounds-checked by `check_gemm`
                // and `c` is uniquely borrowed.
                unsafe {
                    $gemm(
                        a.rows,
                        a.cols,
                        b.cols,
                        alpha,
                        a.data.as_ptr(),
                        a.row_stride as isize,
                        a.col_stride as isize,
                        b.data.as_ptr(),
                        b.row_stride as isize,
                        b.col_stride as isize,
                        beta,
                        c.data.as_mut_ptr(),
                        c.row_stride as isize,
                        c.col_stride as isize,
                    );
                }
            }

            #[inline]
            fn of(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm, "f32");
impl_real!(f64, matrixmultiply::dgemm, "f64");
