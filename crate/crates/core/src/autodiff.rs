//! Forward-mode differentiation.
//!
//! The localizers and costs are written once against [`Real`] and run either
//! on plain `f64` or on [`Dual`], which carries a gradient vector alongside
//! the value. Discrete decisions (AP selection, clamping, degeneracy checks)
//! always look at [`Real::value`], so derivatives are taken with those
//! decisions held fixed.

use std::ops::{Add, Div, Mul, Neg, Sub};

pub trait Real:
    Clone
    + std::fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Mul<f64, Output = Self>
{
    fn cst(v: f64) -> Self;
    fn value(&self) -> f64;
    fn sqrt(&self) -> Self;

    fn zero() -> Self {
        Self::cst(0.0)
    }

    fn square(&self) -> Self {
        self.clone() * self.clone()
    }
}

impl Real for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }

    #[inline]
    fn value(&self) -> f64 {
        *self
    }

    #[inline]
    fn sqrt(&self) -> Self {
        f64::sqrt(*self)
    }

    #[inline]
    fn square(&self) -> Self {
        self * self
    }
}

/// Value plus partial derivatives. An empty gradient means "constant" and
/// avoids allocating for the many literals that flow through the solvers.
#[derive(Debug, Clone, PartialEq)]
pub struct Dual {
    pub v: f64,
    pub g: Vec<f64>,
}

impl Dual {
    /// The `index`-th of `dim` independent variables.
    pub fn var(v: f64, index: usize, dim: usize) -> Self {
        let mut g = vec![0.0; dim];
        g[index] = 1.0;
        Self { v, g }
    }

    /// Partial derivative with respect to variable `i` (zero for constants).
    pub fn d(&self, i: usize) -> f64 {
        self.g.get(i).copied().unwrap_or(0.0)
    }

    fn combine(a: &[f64], ka: f64, b: &[f64], kb: f64) -> Vec<f64> {
        let n = a.len().max(b.len());
        (0..n)
            .map(|i| ka * a.get(i).copied().unwrap_or(0.0) + kb * b.get(i).copied().unwrap_or(0.0))
            .collect()
    }

    fn scaled(g: &[f64], k: f64) -> Vec<f64> {
        g.iter().map(|x| x * k).collect()
    }
}

impl Real for Dual {
    fn cst(v: f64) -> Self {
        Self { v, g: Vec::new() }
    }

    fn value(&self) -> f64 {
        self.v
    }

    fn sqrt(&self) -> Self {
        let r = self.v.sqrt();
        let k = 0.5 / r;
        Self {
            v: r,
            g: Dual::scaled(&self.g, k),
        }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual {
            v: self.v + o.v,
            g: Dual::combine(&self.g, 1.0, &o.g, 1.0),
        }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual {
            v: self.v - o.v,
            g: Dual::combine(&self.g, 1.0, &o.g, -1.0),
        }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual {
            v: self.v * o.v,
            g: Dual::combine(&self.g, o.v, &o.g, self.v),
        }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        let inv = 1.0 / o.v;
        let v = self.v * inv;
        Dual {
            v,
            g: Dual::combine(&self.g, inv, &o.g, -v * inv),
        }
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual {
            v: -self.v,
            g: Dual::scaled(&self.g, -1.0),
        }
    }
}

impl Add<f64> for Dual {
    type Output = Dual;
    fn add(self, o: f64) -> Dual {
        Dual {
            v: self.v + o,
            g: self.g,
        }
    }
}

impl Mul<f64> for Dual {
    type Output = Dual;
    fn mul(self, o: f64) -> Dual {
        Dual {
            v: self.v * o,
            g: Dual::scaled(&self.g, o),
        }
    }
}
