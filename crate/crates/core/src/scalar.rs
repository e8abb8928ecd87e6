//! Scalar types a [`Tape`](crate::Tape) can compute with.
//!
//! Models run on `f64`. The double-double [`Dd`] exists so the finite
//! difference side of a gradient check can be evaluated without the
//! cancellation error that `f64` suffers at small steps.

use core::fmt::Debug;
use core::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use twofloat::TwoFloat;

pub trait Real:
    Copy
    + Debug
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
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }

    fn one() -> Self {
        Self::from_f64(1.0)
    }

    fn abs(self) -> Self {
        if self < Self::zero() {
            -self
        } else {
            self
        }
    }

    fn max(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }

    /// Logistic function, evaluated so that `exp` never overflows.
    fn sigmoid(self) -> Self {
        let one = Self::one();
        if self >= Self::zero() {
            one / (one + (-self).exp())
        } else {
            let e = self.exp();
            e / (one + e)
        }
    }
}

/// Sum in iteration order, starting from zero.
pub fn total<S: Real>(values: impl IntoIterator<Item = S>) -> S {
    values.into_iter().fold(S::zero(), |a, b| a + b)
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn exp(self) -> Self {
        libm::exp(self)
    }

    fn ln(self) -> Self {
        libm::log(self)
    }

    fn tanh(self) -> Self {
        libm::tanh(self)
    }

    fn sqrt(self) -> Self {
        libm::sqrt(self)
    }

    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// Double-double scalar, about 32 significant digits.
///
/// Addition, multiplication and square root come from `twofloat`; its
/// division is accurate only to about `1e-19`, so quotients are computed
/// here by long division.
#[derive(Clone, Copy, Debug, Default, PartialEq, PartialOrd)]
pub struct Dd(TwoFloat);

impl Dd {
    pub fn hi(self) -> f64 {
        self.0.hi()
    }

    pub fn lo(self) -> f64 {
        self.0.lo()
    }
}

fn dd_div(a: TwoFloat, b: TwoFloat) -> TwoFloat {
    let q1 = a.hi() / b.hi();
    let r = a - b * q1;
    let q2 = r.hi() / b.hi();
    let r = r - b * q2;
    let q3 = r.hi() / b.hi();
    TwoFloat::new_add(q1, q2) + q3
}

macro_rules! dd_binary {
    ($op:ident, $method:ident, $assign:ident, $assign_method:ident, $f:expr) => {
        impl $op for Dd {
            type Output = Dd;

            fn $method(self, other: Dd) -> Dd {
                let f: fn(TwoFloat, TwoFloat) -> TwoFloat = $f;
                Dd(f(self.0, other.0))
            }
        }

        impl $assign for Dd {
            fn $assign_method(&mut self, other: Dd) {
                *self = $op::$method(*self, other);
            }
        }
    };
}

dd_binary!(Add, add, AddAssign, add_assign, |a, b| a + b);
dd_binary!(Sub, sub, SubAssign, sub_assign, |a, b| a - b);
dd_binary!(Mul, mul, MulAssign, mul_assign, |a, b| a * b);
dd_binary!(Div, div, DivAssign, div_assign, dd_div);

impl Neg for Dd {
    type Output = Dd;

    fn neg(self) -> Dd {
        Dd(-self.0)
    }
}

// Past this magnitude tanh is 1 to well beyond double-double precision,
// and the exp-ratio formula would overflow.
const DD_TANH_SATURATION: f64 = 40.0;

// exp(r) is evaluated as exp(r / 2^SQUARINGS)^(2^SQUARINGS); with the
// reduced argument below 4e-4 the Taylor series converges in a dozen terms.
const DD_EXP_SQUARINGS: usize = 10;
const DD_EXP_TERMS: usize = 12;

fn dd_exp(x: TwoFloat) -> TwoFloat {
    if x.hi() > 709.0 {
        return TwoFloat::from(f64::INFINITY);
    }
    if x.hi() < -745.0 {
        return TwoFloat::from(0.0);
    }
    let k = libm::round(x.hi() / core::f64::consts::LN_2);
    let r = (x - twofloat::consts::LN_2 * k) * libm::ldexp(1.0, -(DD_EXP_SQUARINGS as i32));
    // Accumulate e^s - 1 so that squaring does not lose the small part.
    let mut term = r;
    let mut em1 = r;
    for n in 2..=DD_EXP_TERMS {
        term = dd_div(term * r, TwoFloat::from(n as f64));
        em1 += term;
    }
    for _ in 0..DD_EXP_SQUARINGS {
        em1 = em1 * (em1 + 2.0);
    }
    let e = em1 + 1.0;
    let scale = k as i32;
    TwoFloat::new_add(libm::ldexp(e.hi(), scale), libm::ldexp(e.lo(), scale))
}

fn dd_ln(x: TwoFloat) -> TwoFloat {
    if !(x.hi() > 0.0) {
        return TwoFloat::from(f64::NAN);
    }
    let mut y = TwoFloat::from(libm::log(x.hi()));
    for _ in 0..2 {
        y += x * dd_exp(-y) - 1.0;
    }
    y
}

impl Real for Dd {
    fn from_f64(v: f64) -> Self {
        Dd(TwoFloat::from(v))
    }

    fn to_f64(self) -> f64 {
        self.hi() + self.lo()
    }

    fn exp(self) -> Self {
        Dd(dd_exp(self.0))
    }

    fn ln(self) -> Self {
        Dd(dd_ln(self.0))
    }

    fn tanh(self) -> Self {
        if self.hi() > DD_TANH_SATURATION {
            Dd::from_f64(1.0)
        } else if self.hi() < -DD_TANH_SATURATION {
            Dd::from_f64(-1.0)
        } else {
            let (p, m) = (self.exp(), (-self).exp());
            (p - m) / (p + m)
        }
    }

    fn sqrt(self) -> Self {
        Dd(self.0.sqrt())
    }

    fn is_finite(self) -> bool {
        self.hi().is_finite() && self.lo().is_finite()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn double_double_resolves_what_f64_cannot() {
        let tiny = 1e-20;
        assert_eq!((1.0 + tiny) - 1.0, 0.0);
        let d = (Dd::from_f64(1.0) + Dd::from_f64(tiny)) - Dd::from_f64(1.0);
        assert_eq!(d.to_f64(), tiny);
    }

    #[test]
    fn double_double_exp_and_ln_are_inverse() {
        for &x in &[-20.0, -3.5, -0.2, 1e-9, 0.7, 2.25, 30.0] {
            let d = Dd::from_f64(x);
            let back = Real::ln(Real::exp(d)) - d;
            assert!(back.to_f64().abs() <= 1e-28 * (1.0 + x.abs()), "x = {x}: {back:?}");
        }
        let e = Real::exp(Dd::from_f64(1.0));
        let e_ref = Dd(TwoFloat::new_add(core::f64::consts::E, 1.4456468917292502e-16));
        assert!((e - e_ref).to_f64().abs() < 1e-30);
    }

    #[test]
    fn division_is_exact_to_double_double() {
        let a = Dd(TwoFloat::new_add(0.7, 1.3e-17));
        let b = Dd(TwoFloat::new_add(3.1, -2.2e-16));
        let back = (a / b) * b - a;
        assert!(back.to_f64().abs() < 1e-31, "{back:?}");
    }

    #[test]
    fn transcendental_agree_with_f64() {
        for &x in &[-3.5, -0.2, 0.0, 0.7, 2.25] {
            let d = Dd::from_f64(x);
            assert!((Real::exp(d).to_f64() - libm::exp(x)).abs() < 1e-14);
            assert!((Real::tanh(d).to_f64() - libm::tanh(x)).abs() < 1e-15);
            assert!((Real::sigmoid(d).to_f64() - Real::sigmoid(x)).abs() < 1e-15);
            let p = Dd::from_f64(x.abs() + 0.5);
            assert!((Real::ln(p).to_f64() - libm::log(x.abs() + 0.5)).abs() < 1e-15);
            assert!((Real::sqrt(p).to_f64() - libm::sqrt(x.abs() + 0.5)).abs() < 1e-15);
        }
        assert_eq!(Real::tanh(Dd::from_f64(900.0)).to_f64(), 1.0);
    }
}
