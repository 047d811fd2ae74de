//! Double-double arithmetic (about 32 significant digits) for reference
//! evaluations that plain f64 cannot resolve.

use std::ops::{Add, Div, Mul, Neg, Sub};

use hypertaxon::autodiff::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dd {
    hi: f64,
    lo: f64,
}

const LN2: Dd = Dd {
    hi: std::f64::consts::LN_2,
    lo: 2.319_046_813_846_299_6e-17,
};

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    Dd { hi: s, lo: b - (s - a) }
}

impl Dd {
    pub fn new(x: f64) -> Self {
        Dd { hi: x, lo: 0.0 }
    }

    fn scale(self, f: f64) -> Self {
        Dd {
            hi: self.hi * f,
            lo: self.lo * f,
        }
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let r = quick_two_sum(s, e + t);
        quick_two_sum(r.hi, r.lo + f)
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, o: Dd) -> Dd {
        self + -o
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, o: Dd) -> Dd {
        let p = self.hi * o.hi;
        let e = self.hi.mul_add(o.hi, -p) + (self.hi * o.lo + self.lo * o.hi);
        quick_two_sum(p, e)
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self - o * Dd::new(q1);
        let q2 = r.hi / o.hi;
        let r = r - o * Dd::new(q2);
        let q3 = r.hi / o.hi;
        quick_two_sum(q1, q2) + Dd::new(q3)
    }
}

macro_rules! with_f64 {
    ($($tr:ident $f:ident),*) => {$(
        impl $tr<f64> for Dd {
            type Output = Dd;
            fn $f(self, o: f64) -> Dd {
                $tr::$f(self, Dd::new(o))
            }
        }
    )*};
}
with_f64!(Add add, Sub sub, Mul mul, Div div);

impl Real for Dd {
    fn value(self) -> f64 {
        self.hi + self.lo
    }

    fn constant(self, v: f64) -> Self {
        Dd::new(v)
    }

    fn sqrt(self) -> Self {
        if self.hi <= 0.0 {
            return Dd::new(self.hi.sqrt());
        }
        let y = Dd::new(self.hi.sqrt());
        y + (self - y * y) * (0.5 / y.hi)
    }

    fn tanh(self) -> Self {
        let e = (self * 2.0).exp();
        (e - 1.0) / (e + 1.0)
    }

    fn asinh(self) -> Self {
        let a = self.abs();
        let r = (a + (a * a + 1.0).sqrt()).ln();
        if self.hi < 0.0 {
            -r
        } else {
            r
        }
    }

    fn ln(self) -> Self {
        let mut y = Dd::new(self.hi.ln());
        for _ in 0..2 {
            y = y + self * (-y).exp() - 1.0;
        }
        y
    }

    fn exp(self) -> Self {
        if self.hi > 709.0 {
            return Dd::new(f64::INFINITY);
        }
        if self.hi < -745.0 {
            return Dd::new(0.0);
        }
        let k = (self.hi / LN2.hi).round();
        let r = (self - LN2 * k).scale(1.0 / 1024.0);
        let mut term = Dd::new(1.0);
        let mut sum = Dd::new(1.0);
        for n in 1..=12 {
            term = term * r / n as f64;
            sum = sum + term;
        }
        for _ in 0..10 {
            sum = sum * sum;
        }
        sum.scale(2f64.powi(k as i32))
    }

    fn sigmoid(self) -> Self {
        if self.hi >= 0.0 {
            Dd::new(1.0) / ((-self).exp() + 1.0)
        } else {
            let e = self.exp();
            e / (e + 1.0)
        }
    }

    fn abs(self) -> Self {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(x: Dd, hi: f64, lo: f64) -> bool {
        let d = (x - Dd { hi, lo }).value();
        d.abs() <= 1e-27 * hi.abs()
    }

    #[test]
    fn double_double_reference_values() {
        assert!(close(Dd::new(-2.7).exp(), 0.06720551273974976, -3.2905029845427732e-18));
        assert!(close(Dd::new(0.3).ln(), -1.2039728043259361, 8.935521583403776e-17));
        assert!(close(Dd::new(-4.25).asinh(), -2.153628170462028, 1.3203710925358315e-17));
        assert!(close(Dd::new(0.125).tanh(), 0.12435300177159621, -2.1451880813141441e-19));
        assert!(close(Dd::new(1.0) / 3.0, 0.3333333333333333, 1.850371707708594e-17));
        assert!(close(Dd::new(2.0).sqrt(), std::f64::consts::SQRT_2, -9.667293313452913e-17));
    }
}
