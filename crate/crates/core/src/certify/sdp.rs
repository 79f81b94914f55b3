//! Primal-dual interior-point method for block-diagonal semidefinite programs
//!
//! ```text
//! minimize ⟨C, X⟩  subject to  ⟨A_i, X⟩ = b_i,  X ⪰ 0
//! ```
//!
//! using the HKM search direction with Mehrotra predictor-corrector steps and
//! an infeasible starting point.

use nalgebra::{DMatrix, DVector};

/// Entry `(block, row, col, value)` of a symmetric block matrix with
/// `row <= col`; off-diagonal entries stand for both `(row, col)` and
/// `(col, row)`.
pub type SymEntry = (usize, usize, usize, f64);

#[derive(Clone, Debug, Default)]
pub struct SdpProblem {
    pub block_sizes: Vec<usize>,
    pub constraints: Vec<Vec<SymEntry>>,
    pub b: Vec<f64>,
    pub objective: Vec<SymEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SdpOptions {
    pub max_iters: usize,
    /// Relative gap and infeasibility tolerance.
    pub tol: f64,
    /// Fraction of the step to the boundary.
    pub step_fraction: f64,
}

impl Default for SdpOptions {
    fn default() -> Self {
        SdpOptions {
            max_iters: 100,
            tol: 1e-9,
            step_fraction: 0.98,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SdpStatus {
    Optimal,
    MaxIterations,
    NumericalFailure,
}

#[derive(Clone, Debug)]
pub struct SdpSolution {
    pub status: SdpStatus,
    pub x: Vec<DMatrix<f64>>,
    pub y: DVector<f64>,
    pub z: Vec<DMatrix<f64>>,
    pub primal_objective: f64,
    pub dual_objective: f64,
    pub primal_infeasibility: f64,
    pub dual_infeasibility: f64,
    pub iterations: usize,
}

type Blocks = Vec<DMatrix<f64>>;

/// Constraint data regrouped by block for fast products.
struct Layout {
    /// per block: (constraint, row, col, value)
    by_block: Vec<Vec<(usize, usize, usize, f64)>>,
}

impl SdpProblem {
    fn check(&self) -> Result<(), String> {
        if self.constraints.len() != self.b.len() {
            return Err("constraint and right-hand-side counts differ".into());
        }
        let ok = |e: &SymEntry| e.0 < self.block_sizes.len() && e.1 <= e.2 && e.2 < self.block_sizes[e.0];
        if !self.constraints.iter().flatten().chain(&self.objective).all(ok) {
            return Err("constraint entry outside its block".into());
        }
        Ok(())
    }

    fn layout(&self) -> Layout {
        let mut by_block = vec![Vec::new(); self.block_sizes.len()];
        for (i, c) in self.constraints.iter().enumerate() {
            for &(blk, r, col, v) in c {
                by_block[blk].push((i, r, col, v));
            }
        }
        Layout { by_block }
    }

    fn zeros(&self) -> Blocks {
        self.block_sizes.iter().map(|&n| DMatrix::zeros(n, n)).collect()
    }

    fn sym_blocks(&self, entries: &[SymEntry], scale: f64, out: &mut Blocks) {
        for &(blk, r, c, v) in entries {
            out[blk][(r, c)] += scale * v;
            if r != c {
                out[blk][(c, r)] += scale * v;
            }
        }
    }

    /// `A(X)_i = ⟨A_i, X⟩` for symmetric `X`.
    fn apply(&self, x: &Blocks) -> DVector<f64> {
        DVector::from_iterator(
            self.constraints.len(),
            self.constraints.iter().map(|c| inner_entries(c, x)),
        )
    }

    /// `Aᵀ(y) = Σ y_i A_i`.
    fn adjoint(&self, y: &DVector<f64>) -> Blocks {
        let mut out = self.zeros();
        for (c, &yi) in self.constraints.iter().zip(y.iter()) {
            if yi != 0.0 {
                self.sym_blocks(c, yi, &mut out);
            }
        }
        out
    }

    fn objective_blocks(&self) -> Blocks {
        let mut c = self.zeros();
        self.sym_blocks(&self.objective, 1.0, &mut c);
        c
    }
}

fn inner_entries(entries: &[SymEntry], x: &Blocks) -> f64 {
    entries
        .iter()
        .map(|&(blk, r, c, v)| {
            if r == c {
                v * x[blk][(r, r)]
            } else {
                2.0 * v * x[blk][(r, c)]
            }
        })
        .sum()
}

fn inner(a: &Blocks, b: &Blocks) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

fn frob(a: &Blocks) -> f64 {
    inner(a, a).sqrt()
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Largest `α` with `X + α dX ⪰ 0` (infinite when every direction is PSD).
fn max_step(x: &Blocks, dx: &Blocks) -> Option<f64> {
    let mut alpha = f64::INFINITY;
    for (xb, db) in x.iter().zip(dx) {
        if xb.nrows() == 0 {
            continue;
        }
        let l = xb.clone().cholesky()?.l();
        let li = l.clone().try_inverse()?;
        let m = symmetrize(&(&li * db * li.transpose()));
        let lmin = m.symmetric_eigenvalues().min();
        if lmin < 0.0 {
            alpha = alpha.min(-1.0 / lmin);
        }
    }
    Some(alpha)
}

/// Schur complement `M_ij = ⟨A_i, X A_j W⟩`, exploiting sparse `A_j`.
fn schur(problem: &SdpProblem, layout: &Layout, x: &Blocks, w: &Blocks) -> DMatrix<f64> {
    let m = problem.constraints.len();
    let mut schur = DMatrix::zeros(m, m);
    for (blk, entries) in layout.by_block.iter().enumerate() {
        if entries.is_empty() {
            continue;
        }
        let n = problem.block_sizes[blk];
        let (xb, wb) = (&x[blk], &w[blk]);
        // group the block's entries by constraint
        let mut groups: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); m];
        for &(i, r, c, v) in entries {
            groups[i].push((r, c, v));
        }
        let mut t = DMatrix::<f64>::zeros(n, n);
        for j in 0..m {
            if groups[j].is_empty() {
                continue;
            }
            t.fill(0.0);
            for &(r, c, v) in &groups[j] {
                // X A W with A = v (e_r e_cᵀ + e_c e_rᵀ)
                t.ger(v, &xb.column(r), &wb.column(c), 1.0);
                if r != c {
                    t.ger(v, &xb.column(c), &wb.column(r), 1.0);
                }
            }
            for i in 0..m {
                if groups[i].is_empty() {
                    continue;
                }
                let s: f64 = groups[i]
                    .iter()
                    .map(|&(r, c, v)| {
                        if r == c {
                            v * t[(r, r)]
                        } else {
                            v * (t[(r, c)] + t[(c, r)])
                        }
                    })
                    .sum();
                schur[(i, j)] += s;
            }
        }
    }
    symmetrize(&schur)
}

struct Direction {
    dx: Blocks,
    dy: DVector<f64>,
    dz: Blocks,
}

pub fn solve(problem: &SdpProblem, opts: &SdpOptions) -> Result<SdpSolution, String> {
    problem.check()?;
    let layout = problem.layout();
    let m = problem.constraints.len();
    let nsum: usize = problem.block_sizes.iter().sum();
    let b = DVector::from_row_slice(&problem.b);
    let c = problem.objective_blocks();
    let bnorm = b.norm();
    let cnorm = frob(&c);

    let scale = 10f64.max((nsum as f64).sqrt()).max(bnorm.sqrt());
    let mut x: Blocks = problem
        .block_sizes
        .iter()
        .map(|&n| DMatrix::identity(n, n) * scale)
        .collect();
    let mut z: Blocks = problem
        .block_sizes
        .iter()
        .map(|&n| DMatrix::identity(n, n) * scale)
        .collect();
    let mut y = DVector::zeros(m);

    let mut status = SdpStatus::MaxIterations;
    let mut iterations = 0;
    let (mut pinf, mut dinf) = (f64::INFINITY, f64::INFINITY);
    for it in 0..opts.max_iters {
        iterations = it;
        let rp = &b - problem.apply(&x);
        let aty = problem.adjoint(&y);
        let rd: Blocks = c.iter().zip(&z).zip(&aty).map(|((cb, zb), ab)| cb - zb - ab).collect();
        let mu = inner(&x, &z) / nsum as f64;
        let pobj = inner(&c, &x);
        let dobj = b.dot(&y);
        pinf = rp.norm() / (1.0 + bnorm);
        dinf = frob(&rd) / (1.0 + cnorm);
        let gap = (pobj - dobj).abs() / (1.0 + pobj.abs() + dobj.abs());
        if pinf < opts.tol && dinf < opts.tol && gap < opts.tol && mu < opts.tol {
            status = SdpStatus::Optimal;
            break;
        }

        let mut w: Blocks = Vec::with_capacity(z.len());
        for zb in &z {
            match zb.clone().cholesky() {
                Some(ch) => w.push(symmetrize(&ch.inverse())),
                None if zb.nrows() == 0 => w.push(zb.clone()),
                None => {
                    status = SdpStatus::NumericalFailure;
                    break;
                }
            }
        }
        if status == SdpStatus::NumericalFailure {
            break;
        }
        let schur_m = schur(problem, &layout, &x, &w);
        let chol = match schur_m.clone().cholesky() {
            Some(ch) => ch,
            None => {
                let reg = 1e-12 * (1.0 + schur_m.diagonal().amax());
                match (schur_m + DMatrix::identity(m, m) * reg).cholesky() {
                    Some(ch) => ch,
                    None => {
                        status = SdpStatus::NumericalFailure;
                        break;
                    }
                }
            }
        };

        // X Rd W, shared by both solves
        let x_rd_w: Blocks = x
            .iter()
            .zip(&rd)
            .zip(&w)
            .map(|((xb, rb), wb)| symmetrize(&(xb * rb * wb)))
            .collect();
        let a_x_rd_w = problem.apply(&x_rd_w);
        let direction = |rc_w: &Blocks| -> Direction {
            let rhs = &rp - problem.apply(rc_w) + &a_x_rd_w;
            let dy = chol.solve(&rhs);
            let atdy = problem.adjoint(&dy);
            let dz: Blocks = rd.iter().zip(&atdy).map(|(r, a)| r - a).collect();
            let dx: Blocks = rc_w
                .iter()
                .zip(&x)
                .zip(&dz)
                .zip(&w)
                .map(|(((rcw, xb), dzb), wb)| symmetrize(&(rcw - xb * dzb * wb)))
                .collect();
            Direction { dx, dy, dz }
        };

        // predictor: Rc = −XZ, so Rc W = −X
        let neg_x: Blocks = x.iter().map(|xb| -xb).collect();
        let aff = direction(&neg_x);
        let (Some(ap), Some(ad)) = (max_step(&x, &aff.dx), max_step(&z, &aff.dz)) else {
            status = SdpStatus::NumericalFailure;
            break;
        };
        let (ap, ad) = (ap.min(1.0), ad.min(1.0));
        let x_aff: Blocks = x.iter().zip(&aff.dx).map(|(a, d)| a + d * ap).collect();
        let z_aff: Blocks = z.iter().zip(&aff.dz).map(|(a, d)| a + d * ad).collect();
        let mu_aff = inner(&x_aff, &z_aff) / nsum as f64;
        let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3);

        // corrector: Rc = σμI − XZ − dXa dZa
        let rc_w: Blocks = x
            .iter()
            .zip(&w)
            .zip(aff.dx.iter().zip(&aff.dz))
            .map(|((xb, wb), (dxa, dza))| symmetrize(&(wb * (sigma * mu) - xb - dxa * dza * wb)))
            .collect();
        let d = direction(&rc_w);
        let (Some(ap), Some(ad)) = (max_step(&x, &d.dx), max_step(&z, &d.dz)) else {
            status = SdpStatus::NumericalFailure;
            break;
        };
        let ap = (opts.step_fraction * ap).min(1.0);
        let ad = (opts.step_fraction * ad).min(1.0);
        for (xb, db) in x.iter_mut().zip(&d.dx) {
            *xb += db * ap;
        }
        for (zb, db) in z.iter_mut().zip(&d.dz) {
            *zb += db * ad;
        }
        y += &d.dy * ad;
        if !(x.iter().chain(&z).all(|m| m.iter().all(|v| v.is_finite())) && y.iter().all(|v| v.is_finite())) {
            status = SdpStatus::NumericalFailure;
            break;
        }
        iterations = it + 1;
    }
    Ok(SdpSolution {
        status,
        primal_objective: inner(&c, &x),
        dual_objective: b.dot(&y),
        primal_infeasibility: pinf,
        dual_infeasibility: dinf,
        x,
        y,
        z,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smallest_eigenvalue_as_sdp() {
        // min ⟨C, X⟩ s.t. tr X = 1 has value λ_min(C)
        let cm = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 1.0]);
        let mut objective = Vec::new();
        for r in 0..3 {
            for c in r..3 {
                if cm[(r, c)] != 0.0 {
                    objective.push((0, r, c, cm[(r, c)]));
                }
            }
        }
        let p = SdpProblem {
            block_sizes: vec![3],
            constraints: vec![vec![(0, 0, 0, 1.0), (0, 1, 1, 1.0), (0, 2, 2, 1.0)]],
            b: vec![1.0],
            objective,
        };
        let s = solve(&p, &SdpOptions::default()).unwrap();
        assert_eq!(s.status, SdpStatus::Optimal);
        let lmin = cm.symmetric_eigenvalues().min();
        assert!((s.primal_objective - lmin).abs() < 1e-7);
        assert!((s.dual_objective - lmin).abs() < 1e-7);
    }

    #[test]
    fn linear_program_in_diagonal_blocks() {
        // min x1 + 2 x2 s.t. x1 + x2 = 1, x >= 0
        let p = SdpProblem {
            block_sizes: vec![1, 1],
            constraints: vec![vec![(0, 0, 0, 1.0), (1, 0, 0, 1.0)]],
            b: vec![1.0],
            objective: vec![(0, 0, 0, 1.0), (1, 0, 0, 2.0)],
        };
        let s = solve(&p, &SdpOptions::default()).unwrap();
        assert_eq!(s.status, SdpStatus::Optimal);
        assert!((s.x[0][(0, 0)] - 1.0).abs() < 1e-7);
        assert!(s.x[1][(0, 0)].abs() < 1e-7);
    }

    #[test]
    fn malformed_problem_is_rejected() {
        let p = SdpProblem {
            block_sizes: vec![2],
            constraints: vec![vec![(0, 1, 0, 1.0)]],
            b: vec![1.0],
            objective: vec![],
        };
        assert!(solve(&p, &SdpOptions::default()).is_err());
    }
}
