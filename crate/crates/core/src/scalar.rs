//! Scalar types usable by the exact product-form computations.
//!
//! Normalizing constants, conditional pmfs and spinning allocations only need
//! field arithmetic, so they are written once against [`Scalar`] and
//! instantiated with `f64` for production work and [`BigRational`] when an
//! exact answer is wanted (hand-derived constants, identities that must hold
//! to the last bit).

use std::fmt::Debug;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{FromPrimitive, Num, Signed, ToPrimitive};

/// Field-like scalar with the few extras the recursions need.
pub trait Scalar:
    Num + Clone + Debug + PartialOrd + FromPrimitive + ToPrimitive + Send + Sync + 'static
{
    /// Exact conversion of a nonnegative count.
    fn from_count(k: u64) -> Self {
        Self::from_u64(k).expect("count representable in scalar")
    }

    /// Conversion of a model parameter (capacity, load). Exact for rationals.
    fn from_real(x: f64) -> Self;

    fn to_real(&self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Base-2 exponent of the magnitude, or `None` if the type never needs
    /// rescaling (arbitrary precision).
    fn binary_exponent(&self) -> Option<i64>;

    /// `self * 2^e`.
    fn scale_pow2(&self, e: i64) -> Self;

    fn abs_value(&self) -> Self {
        if *self < Self::zero() {
            Self::zero() - self.clone()
        } else {
            self.clone()
        }
    }
}

macro_rules! float_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            fn from_real(x: f64) -> Self {
                x as $t
            }

            fn binary_exponent(&self) -> Option<i64> {
                if *self == 0.0 || !self.is_finite() {
                    return Some(0);
                }
                Some(self.abs().log2().floor() as i64)
            }

            fn scale_pow2(&self, e: i64) -> Self {
                // powi on 2.0 is exact while the result stays normal
                let mut v = *self;
                let mut e = e;
                while e > 0 {
                    let step = e.min(512);
                    v *= (2.0 as $t).powi(step as i32);
                    e -= step;
                }
                while e < 0 {
                    let step = (-e).min(512);
                    v /= (2.0 as $t).powi(step as i32);
                    e += step;
                }
                v
            }
        }
    };
}

float_scalar!(f32);
float_scalar!(f64);

impl Scalar for BigRational {
    fn from_real(x: f64) -> Self {
        BigRational::from_float(x).expect("finite model parameter")
    }

    fn binary_exponent(&self) -> Option<i64> {
        None
    }

    fn scale_pow2(&self, e: i64) -> Self {
        let two = BigInt::from(2u8);
        let p = num_traits::pow(two, e.unsigned_abs() as usize);
        if e >= 0 {
            self * BigRational::from_integer(p)
        } else {
            self / BigRational::from_integer(p)
        }
    }

    fn abs_value(&self) -> Self {
        self.abs()
    }
}

/// Multinomial coefficient `(sum parts)! / prod(parts!)`, built as a product
/// of binomials so intermediate values stay integral.
pub fn multinomial<S: Scalar>(parts: impl IntoIterator<Item = u64>) -> S {
    let mut acc = S::one();
    let mut total = 0u64;
    for k in parts {
        for t in 1..=k {
            acc = acc * S::from_count(total + t) / S::from_count(t);
        }
        total += k;
    }
    acc
}

/// `base^k` by repeated squaring.
pub fn pow_count<S: Scalar>(base: &S, mut k: u64) -> S {
    let mut result = S::one();
    let mut b = base.clone();
    while k > 0 {
        if k & 1 == 1 {
            result = result * b.clone();
        }
        b = b.clone() * b;
        k >>= 1;
    }
    result
}

/// Relative difference `|a - b| / max(|a|, |b|)`, zero when both vanish.
pub fn rel_diff(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}
