//! Symmetry-keyed certificate cache and the stability query.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use super::verify::{exact_linear_invariant, local_rows, lqr_verify, InvariantSet, VerifyConfig};
use crate::dynamics::{EnvKind, Environment, Target, Variant};
use crate::error::Result;
use crate::lqr::{lqr_control_in_frame, LqrConfig, LqrController};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct Key {
    kind: EnvKind,
    variant: Variant,
    x: Vec<u64>,
    u: Vec<u64>,
}

impl Key {
    fn new(env: &Environment, canonical: &Target) -> Self {
        Key {
            kind: env.kind(),
            variant: env.variant(),
            x: canonical.x.iter().map(|v| v.to_bits()).collect(),
            u: canonical.u.iter().map(|v| v.to_bits()).collect(),
        }
    }
}

/// Canonical-frame results: the controller, and for the SOS path its
/// certified set. `None` records a target that cannot be stabilized or
/// certified.
#[derive(Clone, Debug)]
struct Entry {
    controller: Option<LqrController>,
    set: Option<InvariantSet>,
}

/// Certificates keyed by canonical LQR target. One cache serves one set of
/// environment parameters; the key separates environment kinds and
/// variants but not obstacle layouts, which only enter the per-query
/// closed form.
#[derive(Debug)]
pub struct CertificateCache {
    lqr: LqrConfig,
    verify: VerifyConfig,
    entries: RwLock<HashMap<Key, Arc<Entry>>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl Default for CertificateCache {
    fn default() -> Self {
        Self::new(LqrConfig::default(), VerifyConfig::default())
    }
}

impl CertificateCache {
    pub fn new(lqr: LqrConfig, verify: VerifyConfig) -> Self {
        CertificateCache {
            lqr,
            verify,
            entries: RwLock::new(HashMap::new()),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    pub fn lqr_config(&self) -> &LqrConfig {
        &self.lqr
    }

    pub fn verify_config(&self) -> &VerifyConfig {
        &self.verify
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(hits, misses)`.
    pub fn stats(&self) -> (u64, u64) {
        (self.hits.load(Ordering::Relaxed), self.misses.load(Ordering::Relaxed))
    }

    /// Insert a canonical-frame set, for example one loaded from a file.
    pub fn insert(&self, env: &Environment, set: InvariantSet) {
        let key = Key::new(env, set.target());
        let entry = Arc::new(Entry {
            controller: Some(set.controller()),
            set: Some(set),
        });
        self.entries.write().expect("cache lock").insert(key, entry);
    }

    /// The canonical-frame set for `target`'s class, computing it on a miss.
    pub fn canonical_set(&self, env: &Environment, target: &Target) -> Result<Option<InvariantSet>> {
        let (canonical, _) = env.canonicalize_target(target);
        Ok(self.entry(env, &canonical)?.set.clone())
    }

    fn entry(&self, env: &Environment, canonical: &Target) -> Result<Arc<Entry>> {
        let key = Key::new(env, canonical);
        if let Some(e) = self.entries.read().expect("cache lock").get(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(Arc::clone(e));
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let (_, frame) = env.canonicalize_target(canonical);
        let controller = lqr_control_in_frame(env, frame, &self.lqr)?;
        let set = match &controller {
            Some(c) if !env.exact_linear() => lqr_verify(env, c, &self.verify)?,
            _ => None,
        };
        let entry = Arc::new(Entry { controller, set });
        let mut map = self.entries.write().expect("cache lock");
        Ok(Arc::clone(map.entry(key).or_insert(entry)))
    }

    /// Certified invariant set around `target`, or `None` when the target
    /// cannot be stabilized or certified.
    pub fn invariant_set(&self, env: &Environment, target: &Target) -> Result<Option<InvariantSet>> {
        let (canonical, frame) = env.canonicalize_target(target);
        let entry = self.entry(env, &canonical)?;
        if env.exact_linear() {
            return Ok(entry.controller.as_ref().map(|c| {
                let c = c.recenter(frame.clone());
                let rows = local_rows(env, &c);
                exact_linear_invariant(&c, &rows, &env.local_disks(&frame))
            }));
        }
        Ok(entry.set.as_ref().map(|s| s.recenter(frame)))
    }
}

/// Whether `x` lies in the certified invariant set of its own LQR target
/// `ρ(x)`, together with that set. Verification failures answer `false`.
pub fn is_stable(env: &Environment, x: &[f64], cache: &CertificateCache) -> (bool, Option<InvariantSet>) {
    if x.len() != env.state_dim() || x.iter().any(|v| !v.is_finite()) {
        return (false, None);
    }
    match cache.invariant_set(env, &env.lqr_target(x)) {
        Ok(Some(set)) => (set.contains(x), Some(set)),
        _ => (false, None),
    }
}
