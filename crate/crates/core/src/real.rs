use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};

/// Floating-point element type for the numeric kernels.
///
/// Training runs in `f32`; gradient checks run the same code in `f64`.
pub trait Real:
    LinalgScalar
    + ScalarOperand
    + PartialOrd
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn lit(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;

    /// `x ← exp(x − shift)` in place, for `x ≤ shift`.
    fn exp_shifted(xs: &mut [Self], shift: Self) {
        for x in xs {
            *x = (*x - shift).exp();
        }
    }

    fn max(self, other: Self) -> Self {
        if self >= other {
            self
        } else {
            other
        }
    }
}

macro_rules! impl_real {
    ($t:ty, $exp_shifted:path) => {
        impl_real!($t; fn exp_shifted(xs: &mut [Self], shift: Self) {
            $exp_shifted(xs, shift)
        });
    };
    ($t:ty) => {
        impl_real!($t;);
    };
    ($t:ty; $($extra:item)*) => {
        impl Real for $t {
            #[inline]
            fn lit(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            $($extra)*
        }
    };
}

impl_real!(f32, exp_shifted_f32);
impl_real!(f64);

/// Branch-free `exp` on `[-87, 0]`, relative error about 2e-7. The plain
/// loop lets the compiler vectorise it, unlike calls into libm.
#[inline(always)]
fn exp_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    const ROUND: f32 = 12_582_912.0;
    let x = if x < -87.0 { -87.0 } else { x };
    let x = if x > 88.0 { 88.0 } else { x };
    let shifted = x * LOG2E + ROUND;
    let n = shifted - ROUND;
    let r = x - n * LN2_HI - n * LN2_LO;
    let mut p = 1.987_569_1e-4f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_5e-1;
    p = p * r + 5.000_000_1e-1;
    let y = p * r * r + r + 1.0;
    // The low mantissa bits of `shifted` hold `n` as an integer.
    let bits = shifted.to_bits().wrapping_sub(ROUND.to_bits()).wrapping_add(127);
    let scale = f32::from_bits(bits << 23);
    y * scale
}

fn exp_shifted_f32(xs: &mut [f32], shift: f32) {
    for x in xs {
        *x = exp_f32(*x - shift);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vector_exp_matches_libm() {
        let mut xs: Vec<f32> = (0..20_000).map(|i| -(i as f32) * 4e-3).collect();
        let want: Vec<f64> = xs.iter().map(|&x| (x as f64).exp()).collect();
        f32::exp_shifted(&mut xs, 0.0);
        for (g, w) in xs.iter().zip(&want) {
            assert!(((*g as f64) - w).abs() <= 4e-7 * w, "{g} vs {w}");
        }
        let mut ys = [f32::NEG_INFINITY, 0.0];
        f32::exp_shifted(&mut ys, 0.0);
        assert!(ys[0] < 1e-37 && ys[1] == 1.0);
    }
}
