//! Double-double arithmetic (about 106 significand bits) for high-precision
//! reference evaluations, plus the small numeric trait the reference models
//! are written against.

use std::ops::{Add, Div, Mul, Neg, Sub};
use std::sync::OnceLock;

pub trait Real:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self>
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }

    fn one() -> Self {
        Self::from_f64(1.0)
    }

    fn sigmoid(self) -> Self {
        if self.to_f64() >= 0.0 {
            Self::one() / (Self::one() + (-self).exp())
        } else {
            let e = self.exp();
            e / (Self::one() + e)
        }
    }

    fn tanh(self) -> Self {
        if self.to_f64() >= 0.0 {
            let e = (-(self + self)).exp();
            (Self::one() - e) / (Self::one() + e)
        } else {
            -(-self).tanh()
        }
    }

    fn max(self, other: Self) -> Self {
        if self.to_f64() >= other.to_f64() {
            self
        } else {
            other
        }
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
}

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DD {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

const LN2: DD = DD {
    hi: std::f64::consts::LN_2,
    lo: 2.319046813846299558e-17,
};

const EXP_TERMS: usize = 13;

fn inverse_factorials() -> &'static [DD; EXP_TERMS + 1] {
    static TABLE: OnceLock<[DD; EXP_TERMS + 1]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut f = 1.0;
        std::array::from_fn(|n| {
            if n > 0 {
                f *= n as f64;
            }
            DD::new(1.0) / DD::new(f)
        })
    })
}

impl DD {
    pub const fn new(hi: f64) -> Self {
        Self { hi, lo: 0.0 }
    }

    fn from_pair((hi, lo): (f64, f64)) -> Self {
        Self { hi, lo }
    }

    fn ldexp(self, k: i32) -> Self {
        let s = 2f64.powi(k);
        Self {
            hi: self.hi * s,
            lo: self.lo * s,
        }
    }
}

impl Add for DD {
    type Output = DD;
    fn add(self, y: DD) -> DD {
        let (s, e) = two_sum(self.hi, y.hi);
        let (t, f) = two_sum(self.lo, y.lo);
        let (s, e) = quick_two_sum(s, e + t);
        DD::from_pair(quick_two_sum(s, e + f))
    }
}

impl Neg for DD {
    type Output = DD;
    fn neg(self) -> DD {
        DD {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Sub for DD {
    type Output = DD;
    fn sub(self, y: DD) -> DD {
        self + (-y)
    }
}

impl Mul for DD {
    type Output = DD;
    fn mul(self, y: DD) -> DD {
        let (p, e) = two_prod(self.hi, y.hi);
        let e = e + (self.hi * y.lo + self.lo * y.hi);
        DD::from_pair(quick_two_sum(p, e))
    }
}

impl Div for DD {
    type Output = DD;
    fn div(self, y: DD) -> DD {
        let q1 = self.hi / y.hi;
        let r = self - y * DD::new(q1);
        let q2 = r.hi / y.hi;
        let r = r - y * DD::new(q2);
        let q3 = r.hi / y.hi;
        DD::from_pair(quick_two_sum(q1, q2)) + DD::new(q3)
    }
}

impl Real for DD {
    fn from_f64(x: f64) -> Self {
        DD::new(x)
    }

    fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    fn exp(self) -> Self {
        if self.hi < -745.0 {
            return DD::new(0.0);
        }
        // x = k ln2 + r, then exp(r) = exp(r / 32)^32.
        let k = (self.hi / LN2.hi).round();
        let r = (self - LN2 * DD::new(k)).ldexp(-5);
        let inv = inverse_factorials();
        let mut sum = inv[EXP_TERMS];
        for n in (0..EXP_TERMS).rev() {
            sum = sum * r + inv[n];
        }
        for _ in 0..5 {
            sum = sum * sum;
        }
        sum.ldexp(k as i32)
    }

    fn ln(self) -> Self {
        // Newton on exp(y) = x starting from the f64 logarithm.
        let mut y = DD::new(self.hi.ln());
        for _ in 0..2 {
            y = y + self * (-y).exp() - DD::new(1.0);
        }
        y
    }
}

#[cfg(test)]
#[allow(unused_imports)] // the acceptance target runs without the test harness
mod tests {
    use super::*;

    #[test]
    fn euler_number_to_double_double_precision() {
        let e = DD::new(1.0).exp();
        assert_eq!(e.hi, std::f64::consts::E);
        assert!((e.lo - 1.4456468917292502e-16).abs() < 1e-30, "{e:?}");
    }

    #[test]
    fn log_inverts_exp() {
        for x in [0.3, 1.7, 12.5, 1e-5] {
            let d = DD::new(x).exp().ln() - DD::new(x);
            assert!(d.to_f64().abs() < 1e-29 * x.max(1.0), "{x}: {d:?}");
        }
    }

    #[test]
    fn division_round_trips() {
        let a = DD::new(1.0) / DD::new(3.0);
        let back = a * DD::new(3.0) - DD::new(1.0);
        assert!(back.to_f64().abs() < 1e-31);
    }
}
