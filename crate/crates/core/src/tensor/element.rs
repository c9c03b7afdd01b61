use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive};

/// Scalar types the tensor core computes in. Training runs in `f32`,
/// gradient checks in `f64`.
pub trait Element:
    Float + FromPrimitive + Default + Debug + Display + Send + Sync + 'static
{
    /// `c = alpha * op(a) * op(b) + beta * c` on strided matrices, where
    /// `op(a)` is `m x k` and `op(b)` is `k x n`. Strides are in elements.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).unwrap_or_else(Self::nan)
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, strides: (isize, isize), what: &str) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * strides.0 + (cols as isize - 1) * strides.1;
    assert!(
        strides.0 >= 0 && strides.1 >= 0 && (last as usize) < len,
        "gemm operand {what} out of bounds: {rows}x{cols} strides {strides:?} len {len}"
    );
}

macro_rules! impl_element {
    ($t:ty, $gemm:path) => {
        impl Element for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                check_extent(a.len(), m, k, a_strides, "a");
                check_extent(b.len(), k, n, b_strides, "b");
                check_extent(c.len(), m, n, c_strides, "c");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every addressed element was bounds-checked above and
                // `c` is exclusively borrowed.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }
        }
    };
}

impl_element!(f32, matrixmultiply::sgemm);
impl_element!(f64, matrixmultiply::dgemm);
