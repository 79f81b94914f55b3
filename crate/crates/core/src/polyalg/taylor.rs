use super::jet::{Jet, Scalar};
use super::polynomial::PolynomialMap;
use crate::error::{Error, Result};

/// A smooth vector-valued map whose evaluation is written generically over
/// [`Scalar`], so it can be run on `f64` or on jets.
pub trait SmoothMap {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn eval_generic<S: Scalar>(&self, z: &[S]) -> Vec<S>;
}

/// Taylor polynomial of total degree `<= degree` of `f` about `center`, in
/// displacement coordinates `δ = z − center`.
pub fn taylor_expand<F: SmoothMap>(f: &F, center: &[f64], degree: u32) -> Result<PolynomialMap> {
    if degree < 1 {
        return Err(Error::input("Taylor degree must be at least 1"));
    }
    let n = f.input_dim();
    if center.len() != n {
        return Err(Error::input(format!(
            "expansion center of dimension {} for a map with input dimension {n}",
            center.len()
        )));
    }
    let seeds: Vec<Jet> = center
        .iter()
        .enumerate()
        .map(|(i, &c)| Jet::variable(n, degree, i, c))
        .collect();
    let out = f.eval_generic(&seeds);
    if out.len() != f.output_dim() {
        return Err(Error::numeric("map returned the wrong number of components"));
    }
    let comps: Vec<_> = out.into_iter().map(Jet::into_polynomial).collect();
    for c in &comps {
        if c.terms().any(|(_, v)| !v.is_finite()) {
            return Err(Error::numeric(
                "non-finite Taylor coefficient (derivative evaluation failed)",
            ));
        }
    }
    PolynomialMap::new(n, comps)
}

/// Wraps an existing polynomial map so it can be re-expanded.
pub struct PolynomialSmoothMap<'a>(pub &'a PolynomialMap);

impl SmoothMap for PolynomialSmoothMap<'_> {
    fn input_dim(&self) -> usize {
        self.0.input_dim()
    }

    fn output_dim(&self) -> usize {
        self.0.output_dim()
    }

    fn eval_generic<S: Scalar>(&self, z: &[S]) -> Vec<S> {
        self.0
            .components()
            .iter()
            .map(|p| {
                let mut acc = z[0].constant_like(0.0);
                for (m, c) in p.terms() {
                    let mut t = z[0].constant_like(c);
                    for (v, &e) in m.exps().iter().enumerate() {
                        if e > 0 {
                            t = t * z[v].powi(e as u32);
                        }
                    }
                    acc = acc + t;
                }
                acc
            })
            .collect()
    }
}
