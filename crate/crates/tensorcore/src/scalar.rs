//! Element types the engine is generic over.
//!
//! Training runs in `f32`; gradient checks run the same code in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

/// Floating-point element of a [`crate::Tensor`].
pub trait Scalar:
    Copy
    + Debug
    + Display
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }

    fn exp(self) -> Self;

    /// `exp` for throughput-critical softmax loops. For `f64` this is the
    /// exact libm `exp` (verification paths must match naive oracles to
    /// 1e-12); for `f32` it is a branch-free polynomial within ~1e-7
    /// relative, exact at 0, which auto-vectorizes.
    fn exp_fast(self) -> Self;

    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn max(self, other: Self) -> Self;
    fn is_finite(self) -> bool;

    /// True when every element is finite. Branch-free integer fold so the
    /// autovectorizer can chew through large activation buffers.
    fn slice_all_finite(data: &[Self]) -> bool;

    /// `c = alpha * a' @ b' + beta * c` where `a'` is `m x k` and `b'` is
    /// `k x n` under the given element strides (row, col).
    ///
    /// Backed by `matrixmultiply`, which picks SIMD kernels at runtime.
    /// Each output element is produced by one fixed-order accumulation, so
    /// results are bitwise reproducible for fixed shapes.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    );

    /// `c = alpha * a @ b + beta * c`, all row-major: a `[m,k]`, b `[k,n]`.
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        Self::gemm_strided(m, k, n, alpha, a, k as isize, 1, b, n as isize, 1, beta, c);
    }

    /// `c = alpha * a @ b_storage^T + beta * c`: a `[m,k]`, b_storage `[n,k]`.
    fn gemm_nt(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), n * k);
        Self::gemm_strided(m, k, n, alpha, a, k as isize, 1, b, 1, k as isize, beta, c);
    }

    /// `c = alpha * a_storage^T @ b + beta * c`: a_storage `[k,m]`, b `[k,n]`.
    fn gemm_tn(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
        debug_assert_eq!(a.len(), k * m);
        debug_assert_eq!(b.len(), k * n);
        Self::gemm_strided(m, k, n, alpha, a, 1, m as isize, b, n as isize, 1, beta, c);
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path, $expfast:path) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                <$t>::exp(self)
            }

            fn exp_fast(self) -> Self {
                $expfast(self)
            }
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            fn max(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }

            fn slice_all_finite(data: &[Self]) -> bool {
                // A float is non-finite iff its exponent bits are all ones;
                // then (bits & EXP_MASK) + EXP_LSB carries into the sign
                // bit. Pure and/add/or folds, so the loop vectorizes.
                let mut acc = [<$t as ExpMask>::Bits::default(); 8];
                let chunks = data.len() / 8;
                for c in 0..chunks {
                    let base = c * 8;
                    for lane in 0..8 {
                        acc[lane] |= (data[base + lane].to_bits() & Self::EXP_MASK)
                            .wrapping_add(Self::EXP_LSB);
                    }
                }
                for &v in &data[chunks * 8..] {
                    acc[0] |= (v.to_bits() & Self::EXP_MASK).wrapping_add(Self::EXP_LSB);
                }
                let folded = acc.iter().fold(<$t as ExpMask>::Bits::default(), |a, &b| a | b);
                folded & Self::SIGN_BIT == <$t as ExpMask>::Bits::default()
            }

            fn gemm_strided(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
            ) {
                debug_assert_eq!(c.len(), m * n);
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
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
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

trait ExpMask {
    type Bits: Copy
        + Default
        + PartialEq
        + std::ops::BitAnd<Output = Self::Bits>
        + std::ops::BitOr<Output = Self::Bits>;
    const EXP_MASK: Self::Bits;
    /// Lowest exponent bit: adding it to a saturated exponent field
    /// carries into the sign bit.
    const EXP_LSB: Self::Bits;
    const SIGN_BIT: Self::Bits;
}

impl ExpMask for f32 {
    type Bits = u32;
    const EXP_MASK: u32 = 0x7f80_0000;
    const EXP_LSB: u32 = 0x0080_0000;
    const SIGN_BIT: u32 = 0x8000_0000;
}

impl ExpMask for f64 {
    type Bits = u64;
    const EXP_MASK: u64 = 0x7ff0_0000_0000_0000;
    const EXP_LSB: u64 = 0x0010_0000_0000_0000;
    const SIGN_BIT: u64 = 0x8000_0000_0000_0000;
}

impl_scalar!(f32, matrixmultiply::sgemm, expf_poly);
impl_scalar!(f64, matrixmultiply::dgemm, f64::exp);

/// Branch-free expf: `2^n * e^r` with a degree-6 Taylor tail on
/// `r in [-ln2/2, ln2/2]`. Saturates below ~-87 to 0 and above ~88 to
/// the f32 max-exponent range, which softmax never reaches after max
/// subtraction.
#[inline]
fn expf_poly(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    let x = x.clamp(-87.0, 87.0);
    let n = (x * LOG2E).round();
    let r = (x - n * LN2_HI) - n * LN2_LO;
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
    // 2^n via exponent bits; n in [-127, 127] after the clamp.
    let two_n = f32::from_bits(((n as i32 + 127) as u32) << 23);
    p * two_n
}

