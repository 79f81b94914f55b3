//! Certified invariant sets around LQR targets.

pub mod cache;
pub mod io;
pub mod sdp;
pub mod sos;
pub mod verify;

pub use cache::{is_stable, CertificateCache};
pub use io::CertificateFile;
pub use verify::{
    exact_linear_invariant, lqr_verify, InvariantCertificate, InvariantSet, Method, RowCertificate, VerifyConfig,
};
