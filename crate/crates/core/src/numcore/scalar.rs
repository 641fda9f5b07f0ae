//! Scalar arithmetic shared by plain `f64`, graph variables and forward-mode
//! duals, so one piece of geometric code yields values and derivatives.

use std::ops::{Add, Div, Mul, Neg, Sub};

use super::graph::Var;

pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn val(self) -> f64;
    /// A constant in the same arithmetic context as `self`.
    fn lift(self, v: f64) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn abs(self) -> Self;
    fn sqrt(self) -> Self;
}

impl Real for f64 {
    fn val(self) -> f64 {
        self
    }
    fn lift(self, v: f64) -> Self {
        v
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
}

impl<'g> Real for Var<'g> {
    fn val(self) -> f64 {
        self.item()
    }
    fn lift(self, v: f64) -> Self {
        self.graph().scalar(v)
    }
    fn sin(self) -> Self {
        Var::sin(&self)
    }
    fn cos(self) -> Self {
        Var::cos(&self)
    }
    fn abs(self) -> Self {
        Var::abs(&self)
    }
    fn sqrt(self) -> Self {
        Var::sqrt(&self)
    }
}

/// Value plus derivatives with respect to five seed variables.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual5 {
    pub v: f64,
    pub d: [f64; 5],
}

impl Dual5 {
    pub fn constant(v: f64) -> Self {
        Dual5 { v, d: [0.0; 5] }
    }

    /// The `i`-th seed variable with value `v`.
    pub fn seed(v: f64, i: usize) -> Self {
        let mut d = [0.0; 5];
        d[i] = 1.0;
        Dual5 { v, d }
    }

    fn chain(self, v: f64, dv: f64) -> Self {
        Dual5 {
            v,
            d: self.d.map(|x| x * dv),
        }
    }
}

impl Add for Dual5 {
    type Output = Dual5;
    fn add(self, o: Dual5) -> Dual5 {
        Dual5 {
            v: self.v + o.v,
            d: std::array::from_fn(|i| self.d[i] + o.d[i]),
        }
    }
}

impl Sub for Dual5 {
    type Output = Dual5;
    fn sub(self, o: Dual5) -> Dual5 {
        Dual5 {
            v: self.v - o.v,
            d: std::array::from_fn(|i| self.d[i] - o.d[i]),
        }
    }
}

impl Mul for Dual5 {
    type Output = Dual5;
    fn mul(self, o: Dual5) -> Dual5 {
        Dual5 {
            v: self.v * o.v,
            d: std::array::from_fn(|i| self.d[i] * o.v + self.v * o.d[i]),
        }
    }
}

impl Div for Dual5 {
    type Output = Dual5;
    fn div(self, o: Dual5) -> Dual5 {
        let inv = 1.0 / o.v;
        Dual5 {
            v: self.v * inv,
            d: std::array::from_fn(|i| (self.d[i] - self.v * inv * o.d[i]) * inv),
        }
    }
}

impl Neg for Dual5 {
    type Output = Dual5;
    fn neg(self) -> Dual5 {
        self.chain(-self.v, -1.0)
    }
}

impl Add<f64> for Dual5 {
    type Output = Dual5;
    fn add(self, c: f64) -> Dual5 {
        Dual5 { v: self.v + c, ..self }
    }
}

impl Sub<f64> for Dual5 {
    type Output = Dual5;
    fn sub(self, c: f64) -> Dual5 {
        Dual5 { v: self.v - c, ..self }
    }
}

impl Mul<f64> for Dual5 {
    type Output = Dual5;
    fn mul(self, c: f64) -> Dual5 {
        self.chain(self.v * c, c)
    }
}

impl Div<f64> for Dual5 {
    type Output = Dual5;
    fn div(self, c: f64) -> Dual5 {
        self.chain(self.v / c, 1.0 / c)
    }
}

impl Real for Dual5 {
    fn val(self) -> f64 {
        self.v
    }
    fn lift(self, v: f64) -> Self {
        Dual5::constant(v)
    }
    fn sin(self) -> Self {
        self.chain(self.v.sin(), self.v.cos())
    }
    fn cos(self) -> Self {
        self.chain(self.v.cos(), -self.v.sin())
    }
    fn abs(self) -> Self {
        let s = if self.v > 0.0 {
            1.0
        } else if self.v < 0.0 {
            -1.0
        } else {
            0.0
        };
        self.chain(self.v.abs(), s)
    }
    fn sqrt(self) -> Self {
        let r = self.v.sqrt();
        self.chain(r, 0.5 / r)
    }
}
