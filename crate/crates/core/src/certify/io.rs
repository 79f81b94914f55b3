//! Certificate files.
//!
//! A certificate is stored as pretty-printed JSON with these fields:
//!
//! | field | content |
//! |---|---|
//! | `format` | `"shield-certificate/1"` |
//! | `env`, `variant`, `obstacle_seed` | environment the set was built for |
//! | `method` | `"sos"` or `"exact_linear"` |
//! | `target` | canonical target `{ "x": [...], "u": [...] }` |
//! | `a`, `b`, `q`, `r` | local linearization and LQR weights, row-major rows |
//! | `k`, `p` | gain and cost-to-go matrices, row-major rows |
//! | `epsilon` | certified level |
//! | `decrease` | SOS data or `null`: `scale`, `margin`, `min_eigenvalue`, `residual_norm`, `gram`, `multiplier_gram` |
//! | `rows` | per safety row: `a`, `slack`, `mu` and the Gram matrix over `(1, δ)` |
//!
//! Gram blocks are `{ "basis": [[exponents...], ...], "matrix": [[...], ...] }`
//! in the scaled variables `y` with `δ = √ε·L⁻ᵀy`, `P = L Lᵀ`. Loading
//! rebuilds the decrease polynomial from the environment and rejects any
//! file whose Gram data does not certify it.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::sos::GramBlock;
use super::verify::{recheck_decrease, InvariantCertificate, InvariantSet, Method, RowCertificate, VerifyConfig};
use crate::dynamics::{EnvKind, Environment, Target, Variant};
use crate::error::{Error, Result};
use crate::lqr::LqrController;

pub const FORMAT: &str = "shield-certificate/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecreaseData {
    pub scale: f64,
    pub margin: f64,
    pub min_eigenvalue: f64,
    pub residual_norm: f64,
    pub gram: Vec<GramBlock>,
    pub multiplier_gram: Vec<Vec<GramBlock>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateFile {
    pub format: String,
    pub env: EnvKind,
    pub variant: Variant,
    pub obstacle_seed: u64,
    pub method: Method,
    pub target: Target,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub k: Vec<Vec<f64>>,
    pub p: Vec<Vec<f64>>,
    pub epsilon: f64,
    pub decrease: Option<DecreaseData>,
    pub rows: Vec<RowCertificate>,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn matrix(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != nc) {
        return Err(Error::input(format!("certificate field `{name}` is not rectangular")));
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

impl CertificateFile {
    /// Describe a canonical-frame set.
    pub fn from_set(env: &Environment, set: &InvariantSet) -> Self {
        let c = set.controller();
        let (decrease, rows) = match set.certificate() {
            Some(InvariantCertificate { decrease, rows }) => (
                Some(DecreaseData {
                    scale: decrease.scale,
                    margin: decrease.margin,
                    min_eigenvalue: decrease.min_eigenvalue,
                    residual_norm: decrease.residual_norm,
                    gram: decrease.gram.clone(),
                    multiplier_gram: decrease.multiplier_gram.clone(),
                }),
                rows.clone(),
            ),
            None => (None, Vec::new()),
        };
        CertificateFile {
            format: FORMAT.to_string(),
            env: env.kind(),
            variant: env.variant(),
            obstacle_seed: env.obstacle_seed(),
            method: set.method(),
            target: set.target().clone(),
            a: rows_of(&c.a),
            b: rows_of(&c.b),
            q: rows_of(&c.q),
            r: rows_of(&c.r),
            k: rows_of(&c.k),
            p: rows_of(&c.p),
            epsilon: set.epsilon(),
            decrease,
            rows,
        }
    }

    /// Rebuild the set, re-checking every certificate against `env`.
    pub fn into_set(self, env: &Environment, cfg: &VerifyConfig) -> Result<InvariantSet> {
        if self.format != FORMAT {
            return Err(Error::input(format!("unknown certificate format `{}`", self.format)));
        }
        if self.env != env.kind() || self.variant != env.variant() {
            return Err(Error::input("certificate was built for another environment"));
        }
        let (canonical, frame) = env.canonicalize_target(&self.target);
        if self.method == Method::Sos && canonical != self.target {
            return Err(Error::input("SOS certificate target is not canonical"));
        }
        let ctrl = LqrController {
            frame,
            a: matrix(&self.a, "a")?,
            b: matrix(&self.b, "b")?,
            q: matrix(&self.q, "q")?,
            r: matrix(&self.r, "r")?,
            k: matrix(&self.k, "k")?,
            p: matrix(&self.p, "p")?,
        };
        let n = ctrl.frame.local_state_dim();
        let m = ctrl.frame.local_action_dim();
        let shapes = [(&ctrl.a, n, n), (&ctrl.b, n, m), (&ctrl.k, m, n), (&ctrl.p, n, n)];
        if shapes.iter().any(|(x, r, c)| x.shape() != (*r, *c)) {
            return Err(Error::input("certificate matrices have the wrong shape"));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::input("certificate epsilon must be finite and non-negative"));
        }
        match self.method {
            Method::ExactLinear => {
                if !env.exact_linear() {
                    return Err(Error::input("closed-form certificates need an exactly linear model"));
                }
                if self.obstacle_seed != env.obstacle_seed() {
                    return Err(Error::input("certificate was built for another obstacle layout"));
                }
                let rows = super::verify::local_rows(env, &ctrl);
                let expected = super::verify::exact_linear_invariant(&ctrl, &rows, &env.local_disks(&ctrl.frame));
                if self.epsilon > expected.epsilon() * (1.0 + 1e-12) {
                    return Err(Error::numeric("certificate epsilon exceeds the closed-form bound"));
                }
                Ok(InvariantSet::new(ctrl, self.epsilon, Method::ExactLinear, None))
            }
            Method::Sos => {
                let d = self
                    .decrease
                    .ok_or_else(|| Error::input("SOS certificate without decrease data"))?;
                let decrease = recheck_decrease(env, &ctrl, self.epsilon, cfg, d.scale, d.gram, d.multiplier_gram)?
                    .ok_or_else(|| Error::numeric("stored decrease certificate does not verify"))?;
                let p_inv = ctrl
                    .p
                    .clone()
                    .try_inverse()
                    .ok_or_else(|| Error::numeric("cost-to-go matrix is singular"))?;
                let expected = super::verify::rows_epsilon(&p_inv, &super::verify::local_rows(env, &ctrl));
                if self.epsilon > expected * (1.0 + 1e-12) {
                    return Err(Error::numeric("certificate epsilon exceeds the safety rows"));
                }
                let eig_tol = cfg.sos_options().eig_tol;
                if self.rows.iter().any(|r| r.min_eigenvalue() < -eig_tol) {
                    return Err(Error::numeric("stored row certificate is not PSD"));
                }
                Ok(InvariantSet::new(
                    ctrl,
                    self.epsilon,
                    Method::Sos,
                    Some(InvariantCertificate {
                        decrease,
                        rows: self.rows,
                    }),
                ))
            }
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::input(e.to_string()))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }
}
