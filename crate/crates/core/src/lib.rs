//! Numerical laboratory for Feynman-Kac perturbations of symmetric Markov
//! processes: heat-kernel envelopes, path functionals, Kato-class tests,
//! spectral functions of the perturbed form, and Monte-Carlo estimators of
//! the perturbed semigroup, gauge and resolvent.

pub mod envelopes;
pub mod error;
pub mod experiment;
pub mod feynman_kac;
pub mod functionals;
pub mod kato;
pub mod linalg;
pub mod numerics;
pub mod processes;
pub mod spectral;

pub use error::{Error, Result};

/// Sizes the global worker pool from `FKLAB_THREADS` (unset or 0: rayon's
/// default). Returns the number of workers in use.
pub fn init_threads() -> usize {
    let n = std::env::var("FKLAB_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()).unwrap_or(0);
    if n > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    rayon::current_num_threads()
}
