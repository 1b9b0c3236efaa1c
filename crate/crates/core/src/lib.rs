//! Multi-source domain adaptation with weighted joint distribution optimal
//! transport (WJDOT).
//!
//! Given `J` labeled source domains and one unlabeled target domain, the
//! solver learns a target classifier `f` together with mixture weights
//! `alpha` on the simplex so that the proxy target joint distribution
//! `(g(x), f(g(x)))` is as close as possible, in Wasserstein distance, to the
//! mixture `sum_j alpha_j p_j` of the source joint distributions. The learned
//! `alpha` doubles as a source/target similarity score.
//!
//! Module map:
//!
//! * [`measures`]: datasets, empirical measures and joint (embedding, label) measures.
//! * [`ot`]: ground cost, exact transportation simplex, stabilized Sinkhorn,
//!   simplex projection.
//! * [`model`]: feed-forward embedding with classifier heads, ERM/MTL pretraining,
//!   transport-weighted label loss gradients, checkpoints.
//! * [`wjdot`]: mixture construction, dual-based mixture-weight gradients and the
//!   block-coordinate solver.
//! * [`baselines`]: source-only baseline, concatenated JDOT and averaged JDOT.
//! * [`scores`]: group scores over mixture weights and the diagnosis rule.
//! * [`datagen`]: synthetic multi-source benchmarks and the dataset CSV format.
//! * [`experiment`]: config-driven experiment runner and metric summaries.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod datagen;
pub mod error;
pub mod experiment;
pub mod measures;
pub mod model;
pub mod ot;
pub mod scores;
pub mod wjdot;

pub use error::{Error, Result};
