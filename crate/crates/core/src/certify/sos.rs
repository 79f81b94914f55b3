//! Sum-of-squares certificates through Gram-matrix semidefinite programs.
//!
//! A constraint `p₀ + Σ_j λ_j g_j ∈ SOS` with SOS multipliers
//! `λ_j = m_jᵀ Λ_j m_j` becomes the search for `G = S + t·I` and `Λ_j ⪰ 0`
//! with `p₀ + Σ_j λ_j g_j = mᵀ G m`, maximizing the margin `t` (capped).
//! Certificates are re-checked after the solve: the multipliers are
//! projected onto the PSD cone, the constraint polynomial is rebuilt
//! exactly, and the Gram reconstruction residual is compared with the
//! smallest Gram eigenvalue.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::sdp::{self, SdpOptions, SdpProblem, SymEntry};
use crate::polyalg::{monomials_in_degree_range, Monomial, Polynomial};

#[derive(Clone, Debug, PartialEq)]
pub struct SosOptions {
    pub sdp: SdpOptions,
    /// Upper bound on the Gram margin `t`.
    pub margin_cap: f64,
    /// Smallest admissible Gram eigenvalue of a valid certificate.
    pub eig_tol: f64,
    /// Largest admissible reconstruction residual of a valid certificate.
    pub residual_tol: f64,
}

impl Default for SosOptions {
    fn default() -> Self {
        SosOptions {
            sdp: SdpOptions::default(),
            margin_cap: 1.0,
            eig_tol: 1e-8,
            residual_tol: 1e-7,
        }
    }
}

/// An SOS multiplier `λ = mᵀ Λ m` applied to `g`.
#[derive(Clone, Debug, PartialEq)]
pub struct Multiplier {
    pub g: Polynomial,
    pub basis: Vec<Monomial>,
}

/// `fixed + Σ λ_j g_j` must be a sum of squares over `basis`.
#[derive(Clone, Debug, PartialEq)]
pub struct SosConstraint {
    pub fixed: Polynomial,
    pub multipliers: Vec<Multiplier>,
    pub basis: Vec<Monomial>,
}

impl SosConstraint {
    /// Plain SOS test for `p` with a Newton-style Gram basis.
    pub fn plain(p: &Polynomial) -> Self {
        SosConstraint {
            fixed: p.clone(),
            multipliers: Vec::new(),
            basis: gram_basis(p),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GramBlock {
    /// Exponent vectors of the basis monomials.
    pub basis: Vec<Vec<u16>>,
    /// Row-major symmetric matrix.
    pub matrix: Vec<Vec<f64>>,
}

impl GramBlock {
    fn new(basis: &[Monomial], m: &DMatrix<f64>) -> Self {
        GramBlock {
            basis: basis.iter().map(|b| b.exps().to_vec()).collect(),
            matrix: (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect(),
        }
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        let n = self.matrix.len();
        DMatrix::from_fn(n, n, |i, j| self.matrix[i][j])
    }

    pub fn monomials(&self) -> Vec<Monomial> {
        self.basis.iter().map(|e| Monomial::new(e.clone())).collect()
    }

    /// `mᵀ G m` as a polynomial over `nvars` variables.
    pub fn polynomial(&self, nvars: usize) -> Polynomial {
        gram_polynomial(nvars, &self.monomials(), &self.to_matrix())
    }

    pub fn min_eigenvalue(&self) -> f64 {
        if self.matrix.is_empty() {
            return f64::INFINITY;
        }
        self.to_matrix().symmetric_eigenvalues().min()
    }
}

/// Witness that `polynomial = Σ_blocks mᵀ G m` up to `residual_norm`.
#[derive(Clone, Debug, PartialEq)]
pub struct SosCertificate {
    /// The certified polynomial (multipliers included), normalized by `scale`.
    pub polynomial: Polynomial,
    pub scale: f64,
    pub gram: Vec<GramBlock>,
    pub multipliers: Vec<Polynomial>,
    pub multiplier_gram: Vec<Vec<GramBlock>>,
    /// Optimal margin `t` reported by the solver.
    pub margin: f64,
    pub min_eigenvalue: f64,
    pub residual_norm: f64,
    /// Every residual monomial lies in the Gram product set.
    pub residual_representable: bool,
}

impl SosCertificate {
    /// Eigenvalue and reconstruction checks.
    pub fn is_valid(&self, opts: &SosOptions) -> bool {
        self.min_eigenvalue >= -opts.eig_tol && self.residual_norm <= opts.residual_tol
    }

    /// `G + R ⪰ 0` for any symmetric `R` with `mᵀRm` equal to the residual:
    /// such an `R` exists with spectral norm at most the residual's
    /// coefficient norm, so the margin must exceed it.
    pub fn is_strict(&self) -> bool {
        self.residual_representable && self.min_eigenvalue > self.residual_norm
    }

    /// Recompute the reconstruction residual from the stored data.
    pub fn recompute_residual(&self) -> f64 {
        let n = self.polynomial.nvars();
        let mut sum = Polynomial::zero(n);
        for b in &self.gram {
            sum = sum.add(&b.polynomial(n)).expect("same dimension");
        }
        self.polynomial.sub(&sum).expect("same dimension").coeff_norm()
    }
}

/// `mᵀ G m`.
pub fn gram_polynomial(nvars: usize, basis: &[Monomial], g: &DMatrix<f64>) -> Polynomial {
    let mut terms: BTreeMap<Monomial, f64> = BTreeMap::new();
    for a in 0..basis.len() {
        for b in a..basis.len() {
            let w = if a == b { g[(a, a)] } else { g[(a, b)] + g[(b, a)] };
            *terms.entry(basis[a].mul(&basis[b])).or_insert(0.0) += w;
        }
    }
    Polynomial::from_terms(nvars, terms.into_iter().map(|(m, c)| (m.exps().to_vec(), c))).expect("consistent basis")
}

/// Gram basis for a plain SOS test: degrees between half the minimum and
/// half the maximum degree, with each exponent at most half the largest
/// exponent of that variable in `p`.
pub fn gram_basis(p: &Polynomial) -> Vec<Monomial> {
    let n = p.nvars();
    if p.is_zero() {
        return Vec::new();
    }
    let lo = p.min_degree().div_ceil(2);
    let hi = p.degree() / 2;
    let mut max_exp = vec![0u16; n];
    for (m, _) in p.terms() {
        for (e, &v) in max_exp.iter_mut().zip(m.exps()) {
            *e = (*e).max(v);
        }
    }
    monomials_in_degree_range(n, lo, hi)
        .into_iter()
        .filter(|m| m.exps().iter().zip(&max_exp).all(|(&e, &mx)| 2 * e <= mx))
        .collect()
}

fn all_even(p: &Polynomial) -> bool {
    p.terms().all(|(m, _)| m.degree() % 2 == 0)
}

fn split_parity(basis: &[Monomial], split: bool) -> Vec<Vec<Monomial>> {
    if !split {
        return vec![basis.to_vec()];
    }
    let (even, odd): (Vec<_>, Vec<_>) = basis.iter().cloned().partition(|m| m.degree() % 2 == 0);
    [even, odd].into_iter().filter(|b| !b.is_empty()).collect()
}

fn project_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.nrows() == 0 {
        return m.clone();
    }
    let e = m.clone().symmetric_eigen();
    let d = e.eigenvalues.map(|v| v.max(0.0));
    &e.eigenvectors * DMatrix::from_diagonal(&d) * e.eigenvectors.transpose()
}

/// Search for a certificate. `None` when the support cannot be matched, the
/// solver fails, or the result does not pass [`SosCertificate::is_valid`].
pub fn sos_certify(c: &SosConstraint, opts: &SosOptions) -> Option<SosCertificate> {
    let n = c.fixed.nvars();
    let scale = match c.fixed.max_abs_coeff() {
        s if s > 0.0 => s,
        _ => 1.0,
    };
    let fixed = c.fixed.scale(1.0 / scale);
    let split = all_even(&fixed) && c.multipliers.iter().all(|m| all_even(&m.g));

    let gram_blocks = split_parity(&c.basis, split);
    let mult_blocks: Vec<Vec<Vec<Monomial>>> = c.multipliers.iter().map(|m| split_parity(&m.basis, split)).collect();

    let mut block_sizes: Vec<usize> = gram_blocks.iter().map(Vec::len).collect();
    let mut rows: BTreeMap<Monomial, Vec<SymEntry>> = BTreeMap::new();
    let mut diag_count: BTreeMap<Monomial, f64> = BTreeMap::new();
    for (blk, basis) in gram_blocks.iter().enumerate() {
        for a in 0..basis.len() {
            for b in a..basis.len() {
                let m = basis[a].mul(&basis[b]);
                rows.entry(m.clone()).or_default().push((blk, a, b, 1.0));
                if a == b {
                    *diag_count.entry(m).or_insert(0.0) += 1.0;
                }
            }
        }
    }
    let mut mult_block_index = Vec::new();
    for (mult, blocks) in c.multipliers.iter().zip(&mult_blocks) {
        let mut idx = Vec::new();
        for basis in blocks {
            let blk = block_sizes.len();
            block_sizes.push(basis.len());
            idx.push(blk);
            for a in 0..basis.len() {
                for b in a..basis.len() {
                    let prod = Polynomial::from_terms(n, [(basis[a].mul(&basis[b]).exps().to_vec(), 1.0)])
                        .expect("basis dimension")
                        .mul(&mult.g)
                        .ok()?;
                    for (m, v) in prod.terms() {
                        rows.entry(m.clone()).or_default().push((blk, a, b, -v));
                    }
                }
            }
        }
        mult_block_index.push(idx);
    }
    for (m, _) in fixed.terms() {
        rows.entry(m.clone()).or_default();
    }
    let s_blk = block_sizes.len();
    block_sizes.push(1);

    let mut problem = SdpProblem {
        block_sizes,
        objective: vec![(s_blk, 0, 0, 1.0)],
        ..Default::default()
    };
    for (m, mut entries) in rows {
        let cnt = diag_count.get(&m).copied().unwrap_or(0.0);
        let rhs = fixed.coeff(&m) - opts.margin_cap * cnt;
        if cnt != 0.0 {
            entries.push((s_blk, 0, 0, -cnt));
        }
        if entries.is_empty() {
            if rhs.abs() > 1e-12 {
                return None;
            }
            continue;
        }
        problem.constraints.push(entries);
        problem.b.push(rhs);
    }

    let sol = sdp::solve(&problem, &opts.sdp);
    // the last iterate is re-checked below whatever the solver status
    let sol = sol.ok()?;
    let margin = opts.margin_cap - sol.x[s_blk][(0, 0)];

    let mut total = fixed.clone();
    let mut multipliers = Vec::new();
    let mut multiplier_gram = Vec::new();
    for ((mult, blocks), idx) in c.multipliers.iter().zip(&mult_blocks).zip(&mult_block_index) {
        let mut lam = Polynomial::zero(n);
        let mut grams = Vec::new();
        for (basis, &blk) in blocks.iter().zip(idx) {
            let psd = project_psd(&sol.x[blk]);
            lam = lam.add(&gram_polynomial(n, basis, &psd)).ok()?;
            grams.push(GramBlock::new(basis, &psd));
        }
        total = total.add(&lam.mul(&mult.g).ok()?).ok()?;
        multipliers.push(lam);
        multiplier_gram.push(grams);
    }

    let mut grams: Vec<DMatrix<f64>> = gram_blocks
        .iter()
        .enumerate()
        .map(|(blk, basis)| (&sol.x[blk] + DMatrix::identity(basis.len(), basis.len()) * margin).symmetrize())
        .collect();
    let recon = |grams: &[DMatrix<f64>]| -> Option<Polynomial> {
        let mut r = Polynomial::zero(n);
        for (basis, g) in gram_blocks.iter().zip(grams) {
            r = r.add(&gram_polynomial(n, basis, g)).ok()?;
        }
        total.sub(&r).ok()
    };
    // Minimum-norm correction of the Gram entries so the coefficients
    // match exactly: every entry belonging to a monomial moves by the same
    // amount.
    let mut owners: BTreeMap<Monomial, Vec<(usize, usize, usize)>> = BTreeMap::new();
    for (blk, basis) in gram_blocks.iter().enumerate() {
        for a in 0..basis.len() {
            for b in 0..basis.len() {
                owners.entry(basis[a].mul(&basis[b])).or_default().push((blk, a, b));
            }
        }
    }
    for (m, r) in recon(&grams)?.terms() {
        if let Some(cells) = owners.get(m) {
            let c = r / cells.len() as f64;
            for &(blk, a, b) in cells {
                grams[blk][(a, b)] += c;
            }
        }
    }
    let mut gram = Vec::new();
    let mut min_eig = f64::INFINITY;
    for (basis, g) in gram_blocks.iter().zip(&grams) {
        min_eig = min_eig.min(g.clone().symmetric_eigenvalues().min());
        gram.push(GramBlock::new(basis, g));
    }
    let residual = recon(&grams)?;
    let cert = SosCertificate {
        residual_representable: residual.terms().all(|(m, _)| owners.contains_key(m)),
        residual_norm: residual.coeff_norm(),
        polynomial: total,
        scale,
        gram,
        multipliers,
        multiplier_gram,
        margin,
        min_eigenvalue: min_eig,
    };
    cert.is_valid(opts).then_some(cert)
}

trait Symmetrize {
    fn symmetrize(self) -> Self;
}

impl Symmetrize for DMatrix<f64> {
    fn symmetrize(self) -> Self {
        (&self + self.transpose()) * 0.5
    }
}

/// Certify that every polynomial in `polys` is SOS. `None` if any fails.
pub fn sos_feasible(polys: &[Polynomial], opts: &SosOptions) -> Option<Vec<SosCertificate>> {
    polys
        .iter()
        .map(|p| sos_certify(&SosConstraint::plain(p), opts))
        .collect()
}

/// Margin and dual moment data of a plain SOS test, for diagnosing
/// infeasibility: returns `(margin, moment matrix, L(p))` where the moment
/// matrix is the dual slack on the Gram block and `L(p)` the pseudo-moment
/// functional applied to the normalized `p`.
pub fn plain_sos_dual(p: &Polynomial, opts: &SosOptions) -> Option<(f64, DMatrix<f64>, f64)> {
    let basis = gram_basis(p);
    let fixed = p.scale(1.0 / p.max_abs_coeff().max(f64::MIN_POSITIVE));
    let mut rows: BTreeMap<Monomial, Vec<SymEntry>> = BTreeMap::new();
    let mut diag: BTreeMap<Monomial, f64> = BTreeMap::new();
    for a in 0..basis.len() {
        for b in a..basis.len() {
            let m = basis[a].mul(&basis[b]);
            rows.entry(m.clone()).or_default().push((0, a, b, 1.0));
            if a == b {
                *diag.entry(m).or_insert(0.0) += 1.0;
            }
        }
    }
    for (m, _) in fixed.terms() {
        if !rows.contains_key(m) {
            return None;
        }
    }
    let mut problem = SdpProblem {
        block_sizes: vec![basis.len(), 1],
        objective: vec![(1, 0, 0, 1.0)],
        ..Default::default()
    };
    let mut keys = Vec::new();
    for (m, mut e) in rows {
        let cnt = diag.get(&m).copied().unwrap_or(0.0);
        if cnt != 0.0 {
            e.push((1, 0, 0, -cnt));
        }
        problem.b.push(fixed.coeff(&m) - opts.margin_cap * cnt);
        problem.constraints.push(e);
        keys.push(m);
    }
    let sol = sdp::solve(&problem, &opts.sdp);
    let sol = sol.ok()?;
    let margin = opts.margin_cap - sol.x[1][(0, 0)];
    // moments L_α = −y_α
    let moments: BTreeMap<&Monomial, f64> = keys.iter().zip(sol.y.iter()).map(|(m, &y)| (m, -y)).collect();
    let mm = DMatrix::from_fn(basis.len(), basis.len(), |a, b| moments[&basis[a].mul(&basis[b])]);
    let lp: f64 = fixed.terms().map(|(m, c)| c * moments[m]).sum();
    Some((margin, mm, lp))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn poly(n: usize, terms: &[(&[u16], f64)]) -> Polynomial {
        Polynomial::from_terms(n, terms.iter().map(|(e, c)| (e.to_vec(), *c))).unwrap()
    }

    fn motzkin() -> Polynomial {
        poly(2, &[(&[4, 2], 1.0), (&[2, 4], 1.0), (&[2, 2], -3.0), (&[0, 0], 1.0)])
    }

    #[test]
    fn perfect_square_is_certified() {
        let p = poly(2, &[(&[2, 0], 1.0), (&[1, 1], 2.0), (&[0, 2], 1.0)]);
        let opts = SosOptions::default();
        let certs = sos_feasible(std::slice::from_ref(&p), &opts).expect("certificate");
        let c = &certs[0];
        assert!(c.is_valid(&opts));
        assert!(c.recompute_residual() <= 1e-7);
        assert!(c.gram.iter().all(|g| g.min_eigenvalue() >= -1e-8));
    }

    #[test]
    fn negative_polynomial_is_rejected() {
        let p = poly(1, &[(&[2], -1.0), (&[0], -1.0)]);
        assert!(sos_feasible(&[p], &SosOptions::default()).is_none());
    }

    #[test]
    fn strictly_positive_polynomial_has_a_strict_certificate() {
        // x⁴ − 2x² + 2 = (x² − 1)² + 1
        let p = poly(1, &[(&[4], 1.0), (&[2], -2.0), (&[0], 2.0)]);
        let c = sos_certify(&SosConstraint::plain(&p), &SosOptions::default()).unwrap();
        assert!(c.is_strict());
        assert!(c.margin > 0.0);
    }

    #[test]
    fn motzkin_is_not_sos() {
        let opts = SosOptions::default();
        assert!(sos_feasible(&[motzkin()], &opts).is_none());
        // dual witness: a PSD moment matrix with L(p) < 0
        let (margin, mm, lp) = plain_sos_dual(&motzkin(), &opts).unwrap();
        assert!(margin < -1e-6, "{margin}");
        assert!(mm.symmetric_eigenvalues().min() >= -1e-8);
        assert!(lp < 0.0);
    }

    #[test]
    fn multiplier_certifies_positivity_on_a_set() {
        // 1 − x² ≥ 0 on {x² ≤ 1/2}: 1 − x² + λ (x² − 1/2) with λ = 1 is 1/2
        let x2 = poly(1, &[(&[2], 1.0), (&[0], -0.5)]);
        let c = SosConstraint {
            fixed: poly(1, &[(&[0], 1.0), (&[2], -1.0)]),
            multipliers: vec![Multiplier {
                g: x2,
                basis: vec![Monomial::new(vec![0])],
            }],
            basis: monomials_in_degree_range(1, 0, 1),
        };
        let cert = sos_certify(&c, &SosOptions::default()).unwrap();
        assert!(cert.is_strict());
        let lam = cert.multipliers[0].constant_term();
        assert!(lam >= 1.0 - 1e-6);
    }

    #[test]
    fn support_outside_the_basis_is_rejected() {
        // x³ cannot appear in any Gram product of {1, x}
        let p = poly(1, &[(&[3], 1.0), (&[0], 1.0)]);
        let c = SosConstraint {
            fixed: p,
            multipliers: Vec::new(),
            basis: monomials_in_degree_range(1, 0, 1),
        };
        assert!(sos_certify(&c, &SosOptions::default()).is_none());
    }
}
