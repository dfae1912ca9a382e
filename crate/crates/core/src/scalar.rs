//! Numeric abstraction shared by the energy model, the mapping and the ILP solver.
//!
//! Everything that sums energies is generic over [`Scalar`] so the same code
//! runs in `f64` for reporting and in exact rational arithmetic when two
//! estimation routes must be compared without rounding noise.

use std::fmt;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Float, FromPrimitive, Num, Signed, ToPrimitive, Zero};

/// Ordered field used for energies, times and LP coefficients.
pub trait Scalar:
    Num + Signed + FromPrimitive + ToPrimitive + Clone + PartialOrd + fmt::Debug + Send + Sync + 'static
{
    /// Converts a finite `f64`. Exact for rationals, rounding for `f32`.
    fn from_f64_value(v: f64) -> Self;

    fn to_f64_value(&self) -> f64;

    fn floor_value(&self) -> Self;

    /// Absolute slack used by pivoting and integrality tests; zero when exact.
    fn tolerance() -> Self;

    fn is_exact() -> bool;

    fn from_count(n: u64) -> Self {
        Self::from_u64(n).expect("count representable in scalar")
    }

    fn is_integral(&self) -> bool {
        let f = self.floor_value();
        let tol = Self::tolerance();
        (self.clone() - f.clone()) <= tol || (f + Self::one() - self.clone()) <= tol
    }

    fn nearest_integer(&self) -> Self {
        let half = Self::one() / (Self::one() + Self::one());
        (self.clone() + half).floor_value()
    }

    fn is_approx_zero(&self) -> bool {
        self.abs() <= Self::tolerance()
    }
}

macro_rules! float_scalar {
    ($t:ty, $tol:expr) => {
        impl Scalar for $t {
            fn from_f64_value(v: f64) -> Self {
                v as $t
            }

            fn to_f64_value(&self) -> f64 {
                *self as f64
            }

            fn floor_value(&self) -> Self {
                Float::floor(*self)
            }

            fn tolerance() -> Self {
                $tol
            }

            fn is_exact() -> bool {
                false
            }
        }
    };
}

float_scalar!(f32, 1e-5);
float_scalar!(f64, 1e-9);

impl Scalar for BigRational {
    fn from_f64_value(v: f64) -> Self {
        BigRational::from_float(v).expect("finite f64")
    }

    fn to_f64_value(&self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn floor_value(&self) -> Self {
        self.floor()
    }

    fn tolerance() -> Self {
        BigRational::zero()
    }

    fn is_exact() -> bool {
        true
    }
}

/// Converts between two scalar instantiations, going through `f64` for floats.
pub fn convert<A: Scalar, B: Scalar>(a: &A) -> B {
    if A::is_exact() && B::is_exact() {
        // Both are BigRational in practice; avoid the f64 detour.
        let any: &dyn std::any::Any = a;
        if let Some(r) = any.downcast_ref::<BigRational>() {
            let boxed: Box<dyn std::any::Any> = Box::new(r.clone());
            if let Ok(b) = boxed.downcast::<B>() {
                return *b;
            }
        }
    }
    B::from_f64_value(a.to_f64_value())
}

/// Integer-valued rational helper used by tests and the LP layer.
pub fn rational(n: i64, d: i64) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

/// Sums an iterator of scalars starting from zero.
pub fn sum<T: Scalar, I: IntoIterator<Item = T>>(it: I) -> T {
    it.into_iter().fold(T::zero(), |acc, x| acc + x)
}
