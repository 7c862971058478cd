//! Data-driven distributionally robust optimization over Wasserstein balls,
//! solved through semidefinite moment relaxations.
//!
//! The pipeline: an ambiguity set of radius `r` around `N` observed samples
//! turns the robust objective into `f(x) + λ rᵖ + (1/N) Σᵢ supξ [F(x,ξ) − λ‖ξ−ξ̂⁽ⁱ⁾‖ᵖ]`.
//! Each inner supremum over the support set is replaced by a truncated
//! moment-sequence maximization (`relax`), solved by the built-in dense
//! semidefinite solver (`conic`), and the outer minimization over `(x, λ)`
//! runs a level bundle method (`outer`). Single-stage polynomial costs and
//! two-stage linear-recourse costs are supported; `production` ships a
//! multi-product planning model as a ready-made two-stage family.
//!
//! Layers, bottom up:
//! - [`polybasis`]: multi-indices, graded-lex monomial bases, sparse polynomials.
//! - [`moments`]: truncated moment sequences, moment and localizing matrices.
//! - [`conic`]: dense SDP (interior point), LP (revised simplex), projection QP.
//! - [`relax`]: assembles the inner relaxations and their aggregated form.
//! - [`outer`]: level bundle method, subgradient oracles, full solves.
//! - [`production`]: the planning model, sampling, out-of-sample evaluation.

pub mod conic;
pub mod fixtures;
pub mod moments;
pub mod outer;
pub mod polybasis;
pub mod production;
pub mod relax;
pub mod rng;

mod par;

pub use conic::{ConicProgram, LinearProgram, LpOutcome, SdpOutcome, SdpSettings};
pub use moments::{LocalizerTemplate, Tms};
pub use outer::{solve_eso, solve_wdro, BundleSettings, OuterError, SolveReport};
pub use polybasis::{
    format_polynomial, parse_polynomial, MonomialBasis, MultiIndex, PolyError, Polynomial,
};
pub use production::{
    default_config, evaluate_out_of_sample, evaluate_values, sample_uncertainty, summarize,
    to_instance, OutOfSampleStats, ProductionConfig, UncertaintySample,
};
pub use relax::{
    budget_value, penalty_value, DecisionBox, InnerOutcome, RelaxError, RelaxVariant,
    SingleStageInstance, TwoStageInstance,
};
