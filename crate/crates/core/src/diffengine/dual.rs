//! Forward-mode dual numbers with a fixed-width derivative vector.

// index loops over the fixed-width tangent arrays are clearer than
// iterator chains here and compile to the same code
#![allow(clippy::needless_range_loop)]

use super::{PlainReal, Real};
use std::ops::{Add, Div, Mul, Neg, Sub};

pub const SQRT_PI: f64 = 1.772_453_850_905_516;

/// Value plus `N` forward tangents. `N = 1` gives single-direction forward
/// mode (time derivatives); `N = 2` gives both spatial partials of an energy
/// in one pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual<const N: usize> {
    pub re: f64,
    pub eps: [f64; N],
}

pub type D1 = Dual<1>;
pub type D2 = Dual<2>;

impl<const N: usize> Dual<N> {
    #[inline]
    pub fn new(re: f64, eps: [f64; N]) -> Self {
        Dual { re, eps }
    }

    #[inline]
    pub fn constant(re: f64) -> Self {
        Dual { re, eps: [0.0; N] }
    }

    /// Variable seeded along direction `k`.
    #[inline]
    pub fn seeded(re: f64, k: usize) -> Self {
        let mut eps = [0.0; N];
        eps[k] = 1.0;
        Dual { re, eps }
    }

    /// Chain rule for a univariate primitive with value `f` and slope `df`.
    #[inline]
    fn chain(self, f: f64, df: f64) -> Self {
        let mut eps = [0.0; N];
        for i in 0..N {
            eps[i] = df * self.eps[i];
        }
        Dual { re: f, eps }
    }
}

impl<const N: usize> Add for Dual<N> {
    type Output = Self;
    #[inline]
    fn add(self, rhs: Self) -> Self {
        let mut eps = [0.0; N];
        for i in 0..N {
            eps[i] = self.eps[i] + rhs.eps[i];
        }
        Dual { re: self.re + rhs.re, eps }
    }
}

impl<const N: usize> Sub for Dual<N> {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: Self) -> Self {
        let mut eps = [0.0; N];
        for i in 0..N {
            eps[i] = self.eps[i] - rhs.eps[i];
        }
        Dual { re: self.re - rhs.re, eps }
    }
}

impl<const N: usize> Mul for Dual<N> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        let mut eps = [0.0; N];
        for i in 0..N {
            eps[i] = self.eps[i] * rhs.re + self.re * rhs.eps[i];
        }
        Dual { re: self.re * rhs.re, eps }
    }
}

impl<const N: usize> Div for Dual<N> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        let inv = 1.0 / rhs.re;
        let q = self.re * inv;
        let mut eps = [0.0; N];
        for i in 0..N {
            eps[i] = (self.eps[i] - q * rhs.eps[i]) * inv;
        }
        Dual { re: q, eps }
    }
}

impl<const N: usize> Neg for Dual<N> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        let mut eps = [0.0; N];
        for i in 0..N {
            eps[i] = -self.eps[i];
        }
        Dual { re: -self.re, eps }
    }
}

impl<const N: usize> Real for Dual<N> {
    #[inline]
    fn val(&self) -> f64 {
        self.re
    }

    #[inline]
    fn lift(&self, c: f64) -> Self {
        Self::constant(c)
    }

    #[inline]
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        self.chain(t, 1.0 - t * t)
    }

    #[inline]
    fn exp(self) -> Self {
        let e = self.re.exp();
        self.chain(e, e)
    }

    #[inline]
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        self.chain(s, 0.5 / s)
    }

    #[inline]
    fn erf(self) -> Self {
        let e = libm::erf(self.re);
        let d = 2.0 / SQRT_PI * (-self.re * self.re).exp();
        self.chain(e, d)
    }

    #[inline]
    fn powi(self, k: i32) -> Self {
        let f = self.re.powi(k);
        let df = k as f64 * self.re.powi(k - 1);
        self.chain(f, df)
    }

    #[inline]
    fn clamp_sub(self, lo: f64, hi: f64) -> Self {
        if self.re < lo {
            Self::constant(lo)
        } else if self.re > hi {
            Self::constant(hi)
        } else {
            self
        }
    }
}

impl<const N: usize> PlainReal for Dual<N> {
    #[inline]
    fn from_f64(c: f64) -> Self {
        Self::constant(c)
    }
}
