use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coefficients smaller than this in magnitude are dropped when a polynomial
/// is canonicalized.
pub const DROP_TOL: f64 = 1e-14;

/// Exponent multi-index. Ordered graded-lexicographically: total degree
/// first, then exponents compared left to right.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Monomial(Vec<u16>);

impl Monomial {
    pub fn new(exps: Vec<u16>) -> Self {
        Monomial(exps)
    }

    pub fn one(nvars: usize) -> Self {
        Monomial(vec![0; nvars])
    }

    pub fn var(nvars: usize, i: usize) -> Self {
        let mut e = vec![0; nvars];
        e[i] = 1;
        Monomial(e)
    }

    pub fn exps(&self) -> &[u16] {
        &self.0
    }

    pub fn nvars(&self) -> usize {
        self.0.len()
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().map(|&e| e as u32).sum()
    }

    pub fn mul(&self, other: &Monomial) -> Monomial {
        Monomial(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    /// `self / other` if `other` divides `self`.
    pub fn div(&self, other: &Monomial) -> Option<Monomial> {
        let mut out = Vec::with_capacity(self.0.len());
        for (a, b) in self.0.iter().zip(&other.0) {
            if b > a {
                return None;
            }
            out.push(a - b);
        }
        Some(Monomial(out))
    }

    pub fn eval(&self, point: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(point)
            .filter(|(&e, _)| e > 0)
            .map(|(&e, &x)| x.powi(e as i32))
            .product()
    }
}

impl Ord for Monomial {
    fn cmp(&self, other: &Self) -> Ordering {
        self.degree().cmp(&other.degree()).then_with(|| self.0.cmp(&other.0))
    }
}

impl PartialOrd for Monomial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// All monomials in `nvars` variables with total degree in
/// `min_deg..=max_deg`, in graded-lex order.
pub fn monomials_in_degree_range(nvars: usize, min_deg: u32, max_deg: u32) -> Vec<Monomial> {
    fn rec(nvars: usize, i: usize, left: u32, cur: &mut Vec<u16>, out: &mut Vec<Monomial>) {
        if i + 1 == nvars {
            cur.push(left as u16);
            out.push(Monomial(cur.clone()));
            cur.pop();
            return;
        }
        for e in (0..=left).rev() {
            cur.push(e as u16);
            rec(nvars, i + 1, left - e, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if nvars == 0 {
        if min_deg == 0 {
            out.push(Monomial(Vec::new()));
        }
        return out;
    }
    for d in min_deg..=max_deg {
        let mut level = Vec::new();
        rec(nvars, 0, d, &mut Vec::with_capacity(nvars), &mut level);
        level.sort();
        out.extend(level);
    }
    out
}

/// Real multivariate polynomial in canonical form: no stored coefficient is
/// (numerically) zero.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Polynomial {
    nvars: usize,
    terms: BTreeMap<Monomial, f64>,
}

impl Polynomial {
    pub fn zero(nvars: usize) -> Self {
        Polynomial {
            nvars,
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(nvars: usize, c: f64) -> Self {
        let mut p = Self::zero(nvars);
        p.add_term(Monomial::one(nvars), c);
        p
    }

    /// The coordinate polynomial `x_i`.
    pub fn var(nvars: usize, i: usize) -> Self {
        let mut p = Self::zero(nvars);
        p.add_term(Monomial::var(nvars, i), 1.0);
        p
    }

    pub fn from_terms<I>(nvars: usize, terms: I) -> Result<Self>
    where
        I: IntoIterator<Item = (Vec<u16>, f64)>,
    {
        let mut p = Self::zero(nvars);
        for (exps, c) in terms {
            if exps.len() != nvars {
                return Err(Error::input(format!(
                    "multi-index of length {} in a polynomial over {} variables",
                    exps.len(),
                    nvars
                )));
            }
            p.add_term(Monomial(exps), c);
        }
        Ok(p)
    }

    /// Affine polynomial `a·x + c`.
    pub fn affine(a: &[f64], c: f64) -> Self {
        let n = a.len();
        let mut p = Self::constant(n, c);
        for (i, &ai) in a.iter().enumerate() {
            p.add_term(Monomial::var(n, i), ai);
        }
        p
    }

    /// Quadratic form `xᵀ M x` for a square matrix `M`.
    pub fn quadratic_form(m: &DMatrix<f64>) -> Self {
        let n = m.nrows();
        let mut p = Self::zero(n);
        for i in 0..n {
            for j in 0..n {
                let mut e = vec![0u16; n];
                e[i] += 1;
                e[j] += 1;
                p.add_term(Monomial(e), m[(i, j)]);
            }
        }
        p
    }

    fn add_term(&mut self, m: Monomial, c: f64) {
        debug_assert_eq!(m.nvars(), self.nvars);
        let entry = self.terms.entry(m.clone()).or_insert(0.0);
        *entry += c;
        if entry.abs() < DROP_TOL {
            self.terms.remove(&m);
        }
    }

    fn from_accumulator(nvars: usize, acc: HashMap<Monomial, f64>) -> Self {
        Polynomial {
            nvars,
            terms: acc.into_iter().filter(|(_, c)| c.abs() >= DROP_TOL).collect(),
        }
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, f64)> {
        self.terms.iter().map(|(m, &c)| (m, c))
    }

    pub fn coeff(&self, m: &Monomial) -> f64 {
        self.terms.get(m).copied().unwrap_or(0.0)
    }

    pub fn constant_term(&self) -> f64 {
        self.coeff(&Monomial::one(self.nvars))
    }

    /// Maximum total degree over stored terms; 0 for the zero polynomial.
    pub fn degree(&self) -> u32 {
        self.terms.keys().map(Monomial::degree).max().unwrap_or(0)
    }

    /// Minimum total degree over stored terms; 0 for the zero polynomial.
    pub fn min_degree(&self) -> u32 {
        self.terms.keys().map(Monomial::degree).min().unwrap_or(0)
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.terms.values().fold(0.0, |m, c| m.max(c.abs()))
    }

    pub fn coeff_norm(&self) -> f64 {
        self.terms.values().map(|c| c * c).sum::<f64>().sqrt()
    }

    pub fn eval(&self, point: &[f64]) -> Result<f64> {
        if point.len() != self.nvars {
            return Err(Error::input(format!(
                "point of dimension {} for a polynomial over {} variables",
                point.len(),
                self.nvars
            )));
        }
        Ok(self.terms.iter().map(|(m, c)| c * m.eval(point)).sum())
    }

    fn check_same(&self, other: &Polynomial) -> Result<()> {
        if self.nvars != other.nvars {
            return Err(Error::input(format!(
                "polynomials over {} and {} variables",
                self.nvars, other.nvars
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Polynomial) -> Result<Polynomial> {
        self.check_same(other)?;
        let mut out = self.clone();
        for (m, &c) in &other.terms {
            out.add_term(m.clone(), c);
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Polynomial) -> Result<Polynomial> {
        self.check_same(other)?;
        let mut out = self.clone();
        for (m, &c) in &other.terms {
            out.add_term(m.clone(), -c);
        }
        Ok(out)
    }

    pub fn mul(&self, other: &Polynomial) -> Result<Polynomial> {
        self.check_same(other)?;
        Ok(self.mul_truncated(other, None))
    }

    /// Product keeping only terms of total degree `<= max_degree`.
    pub fn mul_truncated(&self, other: &Polynomial, max_degree: Option<u32>) -> Polynomial {
        let mut acc: HashMap<Monomial, f64> = HashMap::with_capacity(self.terms.len() * 2);
        for (ma, &ca) in &self.terms {
            let da = ma.degree();
            for (mb, &cb) in &other.terms {
                if let Some(d) = max_degree {
                    if da + mb.degree() > d {
                        continue;
                    }
                }
                *acc.entry(ma.mul(mb)).or_insert(0.0) += ca * cb;
            }
        }
        Polynomial::from_accumulator(self.nvars, acc)
    }

    pub fn scale(&self, c: f64) -> Polynomial {
        let mut out = Polynomial::zero(self.nvars);
        for (m, &v) in &self.terms {
            out.add_term(m.clone(), v * c);
        }
        out
    }

    pub fn add_constant(&self, c: f64) -> Polynomial {
        let mut out = self.clone();
        out.add_term(Monomial::one(self.nvars), c);
        out
    }

    /// Drop every term of total degree above `max_degree`.
    pub fn truncate(&self, max_degree: u32) -> Polynomial {
        Polynomial {
            nvars: self.nvars,
            terms: self
                .terms
                .iter()
                .filter(|(m, _)| m.degree() <= max_degree)
                .map(|(m, &c)| (m.clone(), c))
                .collect(),
        }
    }

    pub fn derivative(&self, var: usize) -> Result<Polynomial> {
        if var >= self.nvars {
            return Err(Error::input(format!(
                "derivative with respect to variable {var} of a polynomial over {} variables",
                self.nvars
            )));
        }
        let mut out = Polynomial::zero(self.nvars);
        for (m, &c) in &self.terms {
            let e = m.0[var];
            if e == 0 {
                continue;
            }
            let mut exps = m.0.clone();
            exps[var] -= 1;
            out.add_term(Monomial(exps), c * e as f64);
        }
        Ok(out)
    }

    /// Substitute `x_i ↦ subs[i]`. All substituted polynomials must share a
    /// common number of variables, which becomes the result's.
    ///
    /// Evaluated by nested Horner schemes, one variable at a time, so
    /// substituting affine forms stays cheap even at high degree.
    pub fn substitute(&self, subs: &[Polynomial]) -> Result<Polynomial> {
        if subs.len() != self.nvars {
            return Err(Error::input(format!(
                "{} substitutions for a polynomial over {} variables",
                subs.len(),
                self.nvars
            )));
        }
        let new_n = match subs.first() {
            Some(s) => s.nvars,
            None => {
                return Ok(Polynomial::constant(0, self.constant_term()));
            }
        };
        if subs.iter().any(|s| s.nvars != new_n) {
            return Err(Error::input("substituted polynomials differ in variable count"));
        }
        let terms: Vec<(&[u16], f64)> = self.terms.iter().map(|(m, &c)| (&m.0[..], c)).collect();
        Ok(horner(&terms, 0, subs, new_n))
    }

    /// `p(M y + v)` as a polynomial in `y`, where `M` maps the new
    /// variables to the old ones.
    pub fn compose_affine(&self, m: &DMatrix<f64>, v: &DVector<f64>) -> Result<Polynomial> {
        if m.nrows() != self.nvars || v.len() != self.nvars {
            return Err(Error::input(format!(
                "affine map {}x{} (+{}) does not match {} variables",
                m.nrows(),
                m.ncols(),
                v.len(),
                self.nvars
            )));
        }
        let subs: Vec<Polynomial> = (0..self.nvars)
            .map(|i| {
                let row: Vec<f64> = m.row(i).iter().copied().collect();
                Polynomial::affine(&row, v[i])
            })
            .collect();
        self.substitute(&subs)
    }

    /// Re-express the polynomial in `new_nvars` variables by placing old
    /// variable `i` at position `positions[i]`.
    pub fn embed(&self, new_nvars: usize, positions: &[usize]) -> Result<Polynomial> {
        if positions.len() != self.nvars || positions.iter().any(|&p| p >= new_nvars) {
            return Err(Error::input("invalid embedding"));
        }
        let mut out = Polynomial::zero(new_nvars);
        for (m, &c) in &self.terms {
            let mut e = vec![0u16; new_nvars];
            for (i, &p) in positions.iter().enumerate() {
                e[p] += m.0[i];
            }
            out.add_term(Monomial(e), c);
        }
        Ok(out)
    }
}

fn horner(terms: &[(&[u16], f64)], var: usize, subs: &[Polynomial], new_n: usize) -> Polynomial {
    if terms.is_empty() {
        return Polynomial::zero(new_n);
    }
    if var == subs.len() {
        let c: f64 = terms.iter().map(|(_, c)| c).sum();
        return Polynomial::constant(new_n, c);
    }
    let mut groups: BTreeMap<u16, Vec<(&[u16], f64)>> = BTreeMap::new();
    for &(e, c) in terms {
        groups.entry(e[var]).or_default().push((e, c));
    }
    let max_k = *groups.keys().next_back().unwrap();
    let mut acc = Polynomial::zero(new_n);
    for k in (0..=max_k).rev() {
        if !acc.is_zero() {
            acc = acc.mul_truncated(&subs[var], None);
        }
        if let Some(g) = groups.get(&k) {
            let inner = horner(g, var + 1, subs, new_n);
            for (m, c) in inner.terms {
                acc.add_term(m, c);
            }
        }
    }
    acc
}

impl fmt::Debug for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl fmt::Display for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        let mut first = true;
        for (m, c) in self.terms.iter().rev() {
            if !first {
                write!(f, " + ")?;
            }
            first = false;
            write!(f, "{c}")?;
            for (i, &e) in m.0.iter().enumerate() {
                match e {
                    0 => {}
                    1 => write!(f, "·x{}", i + 1)?,
                    _ => write!(f, "·x{}^{}", i + 1, e)?,
                }
            }
        }
        Ok(())
    }
}

/// Vector-valued polynomial map; every component shares `input_dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolynomialMap {
    input_dim: usize,
    components: Vec<Polynomial>,
}

impl PolynomialMap {
    pub fn new(input_dim: usize, components: Vec<Polynomial>) -> Result<Self> {
        if let Some(c) = components.iter().find(|c| c.nvars != input_dim) {
            return Err(Error::input(format!(
                "component over {} variables in a map with input dimension {input_dim}",
                c.nvars
            )));
        }
        Ok(PolynomialMap { input_dim, components })
    }

    /// The linear map `x ↦ M x`.
    pub fn linear(m: &DMatrix<f64>) -> Self {
        let comps = (0..m.nrows())
            .map(|i| {
                let row: Vec<f64> = m.row(i).iter().copied().collect();
                Polynomial::affine(&row, 0.0)
            })
            .collect();
        PolynomialMap {
            input_dim: m.ncols(),
            components: comps,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[Polynomial] {
        &self.components
    }

    pub fn component(&self, i: usize) -> &Polynomial {
        &self.components[i]
    }

    pub fn degree(&self) -> u32 {
        self.components.iter().map(Polynomial::degree).max().unwrap_or(0)
    }

    pub fn eval(&self, point: &[f64]) -> Result<Vec<f64>> {
        self.components.iter().map(|c| c.eval(point)).collect()
    }

    /// Jacobian at `point`, by symbolic differentiation then evaluation.
    pub fn jacobian(&self, point: &[f64]) -> Result<DMatrix<f64>> {
        if point.len() != self.input_dim {
            return Err(Error::input(format!(
                "point of dimension {} for a map with input dimension {}",
                point.len(),
                self.input_dim
            )));
        }
        let mut j = DMatrix::zeros(self.output_dim(), self.input_dim);
        for (i, c) in self.components.iter().enumerate() {
            for k in 0..self.input_dim {
                j[(i, k)] = c.derivative(k)?.eval(point)?;
            }
        }
        Ok(j)
    }

    /// Component-wise substitution `x_i ↦ subs[i]`.
    pub fn substitute(&self, subs: &[Polynomial]) -> Result<PolynomialMap> {
        let comps = self
            .components
            .iter()
            .map(|c| c.substitute(subs))
            .collect::<Result<Vec<_>>>()?;
        let n = subs.first().map(Polynomial::nvars).unwrap_or(0);
        PolynomialMap::new(n, comps)
    }

    pub fn compose_affine(&self, m: &DMatrix<f64>, v: &DVector<f64>) -> Result<PolynomialMap> {
        let comps = self
            .components
            .iter()
            .map(|c| c.compose_affine(m, v))
            .collect::<Result<Vec<_>>>()?;
        PolynomialMap::new(m.ncols(), comps)
    }

    pub fn compile(&self) -> CompiledMap {
        CompiledMap::new(self.input_dim, &self.components)
    }

    /// Compiled evaluator of the Jacobian, row-major.
    pub fn compile_jacobian(&self) -> CompiledMap {
        let mut polys = Vec::with_capacity(self.output_dim() * self.input_dim);
        for c in &self.components {
            for k in 0..self.input_dim {
                polys.push(c.derivative(k).expect("variable index in range"));
            }
        }
        CompiledMap::new(self.input_dim, &polys)
    }
}

/// Flattened evaluator for a list of polynomials over a shared set of
/// variables; used on hot paths (rollouts, BPTT).
#[derive(Clone, Debug)]
pub struct CompiledMap {
    nvars: usize,
    stride: usize,
    coefs: Vec<f64>,
    term_factors: Vec<(u32, u32)>,
    factor_start: Vec<u32>,
    comp_start: Vec<u32>,
}

impl CompiledMap {
    fn new(nvars: usize, polys: &[Polynomial]) -> Self {
        let max_e = polys
            .iter()
            .flat_map(|p| p.terms.keys())
            .flat_map(|m| m.0.iter().copied())
            .max()
            .unwrap_or(0) as usize;
        let stride = max_e + 1;
        let mut coefs = Vec::new();
        let mut term_factors = Vec::new();
        let mut factor_start = vec![0u32];
        let mut comp_start = vec![0u32];
        for p in polys {
            for (m, &c) in &p.terms {
                coefs.push(c);
                for (v, &e) in m.0.iter().enumerate() {
                    if e > 0 {
                        term_factors.push(((v * stride) as u32, e as u32));
                    }
                }
                factor_start.push(term_factors.len() as u32);
            }
            comp_start.push(coefs.len() as u32);
        }
        CompiledMap {
            nvars,
            stride,
            coefs,
            term_factors,
            factor_start,
            comp_start,
        }
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn output_dim(&self) -> usize {
        self.comp_start.len() - 1
    }

    /// Evaluate into `out`; `point.len()` must equal `nvars`.
    pub fn eval_into(&self, point: &[f64], out: &mut [f64]) {
        assert_eq!(point.len(), self.nvars, "compiled map: dimension mismatch");
        let stride = self.stride;
        let mut pows = vec![1.0; self.nvars * stride];
        for (v, &x) in point.iter().enumerate() {
            for k in 1..stride {
                pows[v * stride + k] = pows[v * stride + k - 1] * x;
            }
        }
        for (i, o) in out.iter_mut().enumerate().take(self.output_dim()) {
            let (a, b) = (self.comp_start[i] as usize, self.comp_start[i + 1] as usize);
            let mut s = 0.0;
            for t in a..b {
                let mut term = self.coefs[t];
                let (fa, fb) = (self.factor_start[t] as usize, self.factor_start[t + 1] as usize);
                for &(base, e) in &self.term_factors[fa..fb] {
                    term *= pows[base as usize + e as usize];
                }
                s += term;
            }
            *o = s;
        }
    }

    pub fn eval(&self, point: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.output_dim()];
        self.eval_into(point, &mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(n: usize, terms: &[(&[u16], f64)]) -> Polynomial {
        Polynomial::from_terms(n, terms.iter().map(|(e, c)| (e.to_vec(), *c))).unwrap()
    }

    #[test]
    fn eval_examples() {
        assert_eq!(Polynomial::constant(2, 3.0).eval(&[7.0, -1.0]).unwrap(), 3.0);
        let q = p(2, &[(&[2, 1], 1.0)]);
        assert_eq!(q.eval(&[2.0, 3.0]).unwrap(), 12.0);
        assert_eq!(Polynomial::zero(3).eval(&[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert!(matches!(q.eval(&[1.0]), Err(Error::Input(_))));
    }

    #[test]
    fn arithmetic_examples() {
        let x = Polynomial::var(1, 0);
        let a = x.add_constant(1.0);
        let b = x.add_constant(-1.0);
        assert_eq!(a.mul(&b).unwrap(), p(1, &[(&[2], 1.0), (&[0], -1.0)]));
        assert_eq!(a.add(&Polynomial::zero(1)).unwrap(), a);

        let c = 0.7;
        let sq = p(1, &[(&[2], 1.0)]);
        let shifted = sq
            .compose_affine(&DMatrix::identity(1, 1), &DVector::from_element(1, c))
            .unwrap();
        let expect = p(1, &[(&[2], 1.0), (&[1], 2.0 * c), (&[0], c * c)]);
        for (m, v) in expect.terms() {
            assert!((shifted.coeff(m) - v).abs() < 1e-15);
        }
        assert_eq!(shifted.num_terms(), 3);

        let y = Polynomial::var(2, 0);
        assert!(matches!(x.add(&y), Err(Error::Input(_))));
    }

    #[test]
    fn canonical_form_and_degree() {
        let x = Polynomial::var(2, 0);
        let d = x.sub(&x).unwrap();
        assert!(d.is_zero());
        assert_eq!(d.degree(), 0);
        let q = p(2, &[(&[3, 1], 2.0), (&[0, 1], 1.0), (&[1, 0], 1e-16)]);
        assert_eq!(q.num_terms(), 2);
        assert_eq!(q.degree(), 4);
        let prod = q.mul(&q).unwrap();
        assert_eq!(prod.degree(), 8);
    }

    #[test]
    fn graded_lex_order() {
        let ms = monomials_in_degree_range(2, 0, 2);
        let exps: Vec<Vec<u16>> = ms.iter().map(|m| m.exps().to_vec()).collect();
        assert_eq!(
            exps,
            vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![0, 2], vec![1, 1], vec![2, 0]]
        );
        assert_eq!(monomials_in_degree_range(4, 0, 5).len(), 126);
        assert_eq!(monomials_in_degree_range(4, 1, 5).len(), 125);
    }

    #[test]
    fn jacobian_examples() {
        let id = PolynomialMap::linear(&DMatrix::identity(3, 3));
        assert_eq!(id.jacobian(&[0.3, -1.0, 2.0]).unwrap(), DMatrix::identity(3, 3));
        let f = PolynomialMap::new(2, vec![p(2, &[(&[1, 1], 1.0)])]).unwrap();
        let j = f.jacobian(&[2.0, 3.0]).unwrap();
        assert_eq!(j, DMatrix::from_row_slice(1, 2, &[3.0, 2.0]));
        assert!(f.jacobian(&[1.0]).is_err());
    }

    #[test]
    fn compiled_matches_direct() {
        let q = p(3, &[(&[3, 1, 0], 2.0), (&[0, 1, 2], -1.5), (&[0, 0, 0], 0.25)]);
        let r = p(3, &[(&[1, 0, 0], 1.0), (&[0, 4, 0], 3.0)]);
        let map = PolynomialMap::new(3, vec![q.clone(), r.clone()]).unwrap();
        let pt = [0.3, -0.7, 1.1];
        let out = map.compile().eval(&pt);
        assert!((out[0] - q.eval(&pt).unwrap()).abs() < 1e-14);
        assert!((out[1] - r.eval(&pt).unwrap()).abs() < 1e-14);
        let jac = map.compile_jacobian().eval(&pt);
        let direct = map.jacobian(&pt).unwrap();
        for i in 0..2 {
            for k in 0..3 {
                assert!((jac[i * 3 + k] - direct[(i, k)]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn substitution_matches_evaluation() {
        let q = p(2, &[(&[3, 1], 2.0), (&[0, 2], -1.0), (&[1, 0], 0.5)]);
        let s0 = p(3, &[(&[1, 0, 0], 1.0), (&[0, 1, 1], 2.0)]);
        let s1 = p(3, &[(&[0, 0, 1], -1.0), (&[0, 0, 0], 0.3)]);
        let comp = q.substitute(&[s0.clone(), s1.clone()]).unwrap();
        let y = [0.4, -0.2, 0.9];
        let inner = [s0.eval(&y).unwrap(), s1.eval(&y).unwrap()];
        assert!((comp.eval(&y).unwrap() - q.eval(&inner).unwrap()).abs() < 1e-13);
    }
}
