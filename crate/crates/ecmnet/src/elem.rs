//! Scalar element abstraction so the whole stack runs in f32 (training speed)
//! or f64 (gradient checks and oracles).

/// Floating-point scalar usable as tensor element.
pub trait Scalar:
    Copy
    + Clone
    + Send
    + Sync
    + PartialOrd
    + core::fmt::Debug
    + core::fmt::Display
    + core::ops::Add<Output = Self>
    + core::ops::Sub<Output = Self>
    + core::ops::Mul<Output = Self>
    + core::ops::Div<Output = Self>
    + core::ops::Neg<Output = Self>
    + core::ops::AddAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn tanh(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn is_finite(self) -> bool;
    fn max_s(self, other: Self) -> Self;
    fn min_s(self, other: Self) -> Self;

    /// C = alpha * A(m,k) * B(k,n) + beta * C(m,n), all matrices row-major.
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        b: &[Self],
        beta: Self,
        c: &mut [Self],
    );
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            #[inline(always)]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline(always)]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline(always)]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline(always)]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline(always)]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline(always)]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline(always)]
            fn tanh(self) -> Self {
                self.tanh()
            }
            #[inline(always)]
            fn powi(self, n: i32) -> Self {
                self.powi(n)
            }
            #[inline(always)]
            fn is_finite(self) -> bool {
                self.is_finite()
            }
            #[inline(always)]
            fn max_s(self, other: Self) -> Self {
                if self > other {
                    self
                } else {
                    other
                }
            }
            #[inline(always)]
            fn min_s(self, other: Self) -> Self {
                if self < other {
                    self
                } else {
                    other
                }
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                b: &[Self],
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        k as isize,
                        1,
                        b.as_ptr(),
                        n as isize,
                        1,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Shorthand for lifting literals into the element type.
#[inline(always)]
pub fn lit<E: Scalar>(v: f64) -> E {
    E::from_f64(v)
}

/// Numerically stable sigmoid.
#[inline(always)]
pub fn sigmoid<E: Scalar>(x: E) -> E {
    if x.to_f64() >= 0.0 {
        let e = (-x).exp();
        E::ONE / (E::ONE + e)
    } else {
        let e = x.exp();
        e / (E::ONE + e)
    }
}

/// Numerically stable softplus, ln(1 + e^x).
#[inline(always)]
pub fn softplus<E: Scalar>(x: E) -> E {
    let xf = x.to_f64();
    if xf > 30.0 {
        x
    } else if xf < -30.0 {
        x.exp()
    } else {
        (E::ONE + x.exp()).ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_hand_product() {
        // (2x3) * (3x2)
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 3, 2, 1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
        // accumulate with beta = 1
        f64::gemm(2, 3, 2, 1.0, &a, &b, 1.0, &mut c);
        assert_eq!(c, [116.0, 128.0, 278.0, 308.0]);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert!(sigmoid(800.0f64) > 0.999_999);
        assert!(sigmoid(-800.0f64) < 1e-300);
        assert_eq!(sigmoid(0.0f64), 0.5);
    }

    #[test]
    fn softplus_limits() {
        assert!((softplus(0.0f64) - (2.0f64).ln()).abs() < 1e-15);
        assert_eq!(softplus(100.0f64), 100.0);
        assert!(softplus(-100.0f64) > 0.0);
    }
}
