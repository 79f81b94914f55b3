//! Truncated multivariate Taylor arithmetic.
//!
//! A [`Jet`] carries every partial derivative up to a fixed total order,
//! stored as the Taylor polynomial in displacement coordinates. It is the
//! higher-order generalization of nested dual numbers: evaluating a smooth
//! map on jets seeded with `center_i + δ_i` yields its Taylor polynomial.

use std::ops::{Add, Div, Mul, Neg, Sub};

use super::polynomial::{Monomial, Polynomial};

/// Numeric type the dynamics are written against, so that the same code
/// runs on `f64` (simulation) and on [`Jet`] (Taylor expansion).
pub trait Scalar:
    Clone
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
    /// Value part (the constant term for a jet).
    fn value(&self) -> f64;
    fn constant_like(&self, c: f64) -> Self;
    fn sin(&self) -> Self;
    fn cos(&self) -> Self;
    fn sqrt(&self) -> Self;
    fn recip(&self) -> Self;

    fn tan(&self) -> Self {
        self.sin() / self.cos()
    }

    fn powi(&self, n: u32) -> Self {
        let mut acc = self.constant_like(1.0);
        for _ in 0..n {
            acc = acc * self.clone();
        }
        acc
    }
}

impl Scalar for f64 {
    fn value(&self) -> f64 {
        *self
    }
    fn constant_like(&self, c: f64) -> Self {
        c
    }
    fn sin(&self) -> Self {
        f64::sin(*self)
    }
    fn cos(&self) -> Self {
        f64::cos(*self)
    }
    fn sqrt(&self) -> Self {
        f64::sqrt(*self)
    }
    fn recip(&self) -> Self {
        1.0 / *self
    }
    fn powi(&self, n: u32) -> Self {
        f64::powi(*self, n as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Jet {
    poly: Polynomial,
    order: u32,
}

impl Jet {
    pub fn constant(nvars: usize, order: u32, c: f64) -> Self {
        Jet {
            poly: Polynomial::constant(nvars, c),
            order,
        }
    }

    /// The seed `center + δ_i` for input coordinate `i`.
    pub fn variable(nvars: usize, order: u32, i: usize, center: f64) -> Self {
        Jet {
            poly: Polynomial::var(nvars, i).add_constant(center),
            order,
        }
    }

    pub fn order(&self) -> u32 {
        self.order
    }

    pub fn polynomial(&self) -> &Polynomial {
        &self.poly
    }

    pub fn into_polynomial(self) -> Polynomial {
        self.poly
    }

    /// `Σ_k c_k h^k` with `h = self − value()`, truncated to the jet order.
    fn compose_series(&self, coeffs: &[f64]) -> Jet {
        let a0 = self.poly.constant_term();
        let h = self.poly.add_constant(-a0);
        let n = self.poly.nvars();
        let mut acc = Polynomial::constant(n, *coeffs.last().unwrap_or(&0.0));
        for &c in coeffs.iter().rev().skip(1) {
            acc = acc.mul_truncated(&h, Some(self.order)).add_constant(c);
        }
        Jet {
            poly: acc,
            order: self.order,
        }
    }

    fn check(&self, other: &Jet) {
        assert_eq!(self.order, other.order, "jets of different order");
        assert_eq!(self.poly.nvars(), other.poly.nvars(), "jets over different variables");
    }
}

fn factorial(k: u32) -> f64 {
    (1..=k).map(f64::from).product()
}

impl Scalar for Jet {
    fn value(&self) -> f64 {
        self.poly.constant_term()
    }

    fn constant_like(&self, c: f64) -> Self {
        Jet::constant(self.poly.nvars(), self.order, c)
    }

    fn sin(&self) -> Self {
        let a = self.value();
        let cycle = [a.sin(), a.cos(), -a.sin(), -a.cos()];
        let coeffs: Vec<f64> = (0..=self.order)
            .map(|k| cycle[(k % 4) as usize] / factorial(k))
            .collect();
        self.compose_series(&coeffs)
    }

    fn cos(&self) -> Self {
        let a = self.value();
        let cycle = [a.cos(), -a.sin(), -a.cos(), a.sin()];
        let coeffs: Vec<f64> = (0..=self.order)
            .map(|k| cycle[(k % 4) as usize] / factorial(k))
            .collect();
        self.compose_series(&coeffs)
    }

    fn sqrt(&self) -> Self {
        let a = self.value();
        // binomial series of (a + h)^(1/2)
        let mut coeffs = Vec::with_capacity(self.order as usize + 1);
        let mut binom = 1.0;
        for k in 0..=self.order {
            if k > 0 {
                binom *= (0.5 - (k - 1) as f64) / k as f64;
            }
            coeffs.push(binom * a.powf(0.5 - k as f64));
        }
        self.compose_series(&coeffs)
    }

    fn recip(&self) -> Self {
        let a = self.value();
        let coeffs: Vec<f64> = (0..=self.order)
            .map(|k| {
                let s = if k % 2 == 0 { 1.0 } else { -1.0 };
                s / a.powi(k as i32 + 1)
            })
            .collect();
        self.compose_series(&coeffs)
    }
}

impl Add for Jet {
    type Output = Jet;
    fn add(self, rhs: Jet) -> Jet {
        self.check(&rhs);
        Jet {
            poly: self.poly.add(&rhs.poly).expect("checked"),
            order: self.order,
        }
    }
}

impl Sub for Jet {
    type Output = Jet;
    fn sub(self, rhs: Jet) -> Jet {
        self.check(&rhs);
        Jet {
            poly: self.poly.sub(&rhs.poly).expect("checked"),
            order: self.order,
        }
    }
}

impl Mul for Jet {
    type Output = Jet;
    fn mul(self, rhs: Jet) -> Jet {
        self.check(&rhs);
        Jet {
            poly: self.poly.mul_truncated(&rhs.poly, Some(self.order)),
            order: self.order,
        }
    }
}

impl Div for Jet {
    type Output = Jet;
    #[allow(clippy::suspicious_arithmetic_impl)]
    fn div(self, rhs: Jet) -> Jet {
        self * rhs.recip()
    }
}

impl Neg for Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        Jet {
            poly: self.poly.scale(-1.0),
            order: self.order,
        }
    }
}

impl Add<f64> for Jet {
    type Output = Jet;
    fn add(self, rhs: f64) -> Jet {
        Jet {
            poly: self.poly.add_constant(rhs),
            order: self.order,
        }
    }
}

impl Sub<f64> for Jet {
    type Output = Jet;
    fn sub(self, rhs: f64) -> Jet {
        self + (-rhs)
    }
}

impl Mul<f64> for Jet {
    type Output = Jet;
    fn mul(self, rhs: f64) -> Jet {
        Jet {
            poly: self.poly.scale(rhs),
            order: self.order,
        }
    }
}

impl Div<f64> for Jet {
    type Output = Jet;
    fn div(self, rhs: f64) -> Jet {
        self * (1.0 / rhs)
    }
}

/// Coefficient of `δ^α` of a jet; used by tests and diagnostics.
pub fn jet_coeff(j: &Jet, exps: &[u16]) -> f64 {
    j.poly.coeff(&Monomial::new(exps.to_vec()))
}
