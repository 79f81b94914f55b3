//! Multivariate polynomials, truncated Taylor arithmetic and Taylor
//! surrogates of smooth maps.

mod jet;
mod polynomial;
mod taylor;

pub use jet::{jet_coeff, Jet, Scalar};
pub use polynomial::{monomials_in_degree_range, CompiledMap, Monomial, Polynomial, PolynomialMap, DROP_TOL};
pub use taylor::{taylor_expand, PolynomialSmoothMap, SmoothMap};
