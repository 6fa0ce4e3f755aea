//! Low-rank QP repair of a dense layer feeding a linear classifier head,
//! with per-sample margin and Lipschitz-radius certificates.
//!
//! The model slice is `s = W_c σ(W v + b) + b_c`. Repair changes only `W`,
//! one rank-`r` step at a time, until every misclassified sample in the
//! repair set clears a margin `γ_s` while a remain set keeps its predictions.
//!
//! ```
//! use qprepair::{certify, generate, repair, RepairHyper, SynthConfig};
//!
//! let problem = generate(&SynthConfig { seed: 33, ..Default::default() })?;
//! let hyper = RepairHyper::default();
//! let out = repair(&problem.model, &problem.repair, &problem.remain, &hyper)?;
//! assert!(out.trace.converged);
//! let report = certify(&out.model, &problem.repair, &problem.remain, &hyper, &out.trace)?;
//! assert!(report.summary.gap_min >= hyper.gamma_s);
//! # Ok::<(), qprepair::Error>(())
//! ```

pub mod bundle;
pub mod cert;
pub mod error;
pub mod gsn;
pub mod linalg;
pub mod model;
pub mod qp;
pub mod repair;
pub mod synth;

pub use bundle::{load, save, write_report, DType, TensorBundle};
pub use cert::{
    certify, lipschitz_bound, proximity_bands, robustness_radius, stress_test, CertificateReport,
    ProximityReport, StressReport, DEFAULT_MULTIPLIERS,
};
pub use error::{BundleError, BundleErrorKind, Error, Result};
pub use gsn::{gap_sensitivity_norm, gsn_ft, GsnFtConfig, GsnFtTrace};
pub use linalg::{spectral_norm, truncated_svd, DenseMatrix, SvdResult};
pub use model::{ActivationKind, HeadModel, Sample};
pub use qp::{assemble, kkt_residuals, solve, QpProblem, QpSolution, QpStatus, RepairHyper};
pub use repair::{repair, repair_with, RepairOptions, RepairOutcome, RepairTrace};
pub use synth::{generate, SynthConfig, SynthProblem};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/sensitivity.md")]
    mod sensitivity {}
    #[doc = include_str!("../../../book/src/qp.md")]
    mod qp {}
    #[doc = include_str!("../../../book/src/repair.md")]
    mod repair {}
    #[doc = include_str!("../../../book/src/certificates.md")]
    mod certificates {}
    #[doc = include_str!("../../../book/src/bundles.md")]
    mod bundles {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/testing.md")]
    mod testing {}
}
