use std::fmt::Debug;

use num_traits::Float;

/// Float type the engine runs in. Training and inference use `f32`;
/// gradient checks instantiate the same code with `f64`.
pub trait Scalar: Float + Default + Debug + Send + Sync + std::iter::Sum + std::ops::AddAssign + 'static {
    /// `c = a · b + beta · c` with `a: m×k`, `b: k×n`, `c: m×n`, all
    /// row-major. `ta`/`tb` read the stored matrix transposed.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], ta: bool, b: &[Self], tb: bool, beta: Self, c: &mut [Self]);

    fn of(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite")
    }
}

// Strides for a row-major `rows × cols` matrix read as-is or transposed.
fn strides(cols_stored: usize, trans: bool) -> (isize, isize) {
    if trans {
        (1, cols_stored as isize)
    } else {
        (cols_stored as isize, 1)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $f:ident) => {
        impl Scalar for $t {
            fn gemm(m: usize, k: usize, n: usize, a: &[Self], ta: bool, b: &[Self], tb: bool, beta: Self, c: &mut [Self]) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(if ta { m } else { k }, ta);
                let (rsb, csb) = strides(if tb { k } else { n }, tb);
                // SAFETY: the asserts above bound every index the kernel touches.
                unsafe {
                    matrixmultiply::$f(
                        m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta,
                        c.as_mut_ptr(), n as isize, 1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, sgemm);
impl_scalar!(f64, dgemm);
