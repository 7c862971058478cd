//! Built-in dense conic solvers: a primal-dual interior-point SDP solver with
//! homogeneous self-dual embedding, a revised-simplex LP solver, and a small
//! active-set projection QP. Everything is dense and deterministic; no
//! external solver processes are involved.

mod lp;
mod qp;
mod sdp;

pub use lp::{solve_lp, LinearProgram, LpOutcome, LpSolution};
pub use qp::{project_polyhedron, QpError};
pub use sdp::{solve_sdp, solve_sdp_warm, SdpSettings};

use std::sync::Arc;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::moments::LocalizerTemplate;

/// One positive-semidefinite block of a conic program: a compiled localizing
/// (or moment) matrix template, applied to the variable vector starting at
/// `var_offset`. Offsets let several truncated moment sequences share one
/// coupled program.
#[derive(Clone, Debug)]
pub struct PsdBlock {
    pub template: Arc<LocalizerTemplate>,
    pub var_offset: usize,
}

/// Sparse scalar constraint `Σ coeffs·y ≤ rhs`.
#[derive(Clone, Debug)]
pub struct LinearIneq {
    pub coeffs: Vec<(usize, f64)>,
    pub rhs: f64,
}

/// Maximize `objective · y` subject to every PSD block being positive
/// semidefinite, the scalar inequalities, and `y[i] = 1` for each index in
/// `normalized` (the mass component of each moment-sequence block).
#[derive(Clone, Debug)]
pub struct ConicProgram {
    pub num_vars: usize,
    pub objective: Vec<f64>,
    pub psd_blocks: Vec<PsdBlock>,
    pub linear_ineqs: Vec<LinearIneq>,
    pub normalized: Vec<usize>,
}

impl ConicProgram {
    /// Sanity-check the index structure before handing it to the solver.
    pub fn validate(&self) -> Result<(), SolverFailure> {
        let m = self.num_vars;
        let bad = |what: &str| {
            Err(SolverFailure::BadProgram {
                message: what.to_string(),
            })
        };
        if self.objective.len() != m {
            return bad("objective length differs from num_vars");
        }
        let mut seen = vec![false; m];
        for &i in &self.normalized {
            if i >= m {
                return bad("normalized index out of range");
            }
            if seen[i] {
                return bad("duplicate normalized index");
            }
            seen[i] = true;
        }
        for block in &self.psd_blocks {
            let dim = block.template.dim();
            for i in 0..dim {
                for j in i..dim {
                    for &(idx, _) in block.template.entry(i, j) {
                        if block.var_offset + idx >= m {
                            return bad("psd block references variable out of range");
                        }
                    }
                }
            }
        }
        for ineq in &self.linear_ineqs {
            if ineq.coeffs.iter().any(|&(i, _)| i >= m) {
                return bad("linear inequality references variable out of range");
            }
        }
        if self.psd_blocks.is_empty() {
            return bad("program has no psd blocks");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct KktResiduals {
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
}

/// Interior solution of a conic program.
#[derive(Clone, Debug)]
pub struct SdpSolution {
    pub y: Vec<f64>,
    pub value: f64,
    /// one PSD multiplier per block, same order as the program
    pub psd_duals: Vec<DMatrix<f64>>,
    /// one nonnegative multiplier per scalar inequality
    pub ineq_duals: Vec<f64>,
    pub residuals: KktResiduals,
    pub iterations: usize,
}

/// Certificate that the supremum is `+∞`: a direction with positive objective
/// rate along which every block stays PSD, every inequality non-increasing,
/// and every normalized coordinate zero.
#[derive(Clone, Debug)]
pub struct ImprovingRay {
    /// unit-norm direction in the full variable space
    pub direction: Vec<f64>,
    /// objective · direction (strictly positive)
    pub objective_rate: f64,
    /// how far the ray violates feasibility of the recession cone
    pub residual: f64,
}

/// Certificate of primal infeasibility (a separating dual ray).
#[derive(Clone, Debug)]
pub struct InfeasibilityCert {
    pub psd_rays: Vec<DMatrix<f64>>,
    pub ineq_rays: Vec<f64>,
    pub residual: f64,
}

#[derive(Clone, Debug)]
pub enum SdpOutcome {
    Optimal(SdpSolution),
    Unbounded(ImprovingRay),
    Infeasible(InfeasibilityCert),
}

/// Inconclusive termination. Callers must treat this as "no answer", never as
/// a value or a certificate.
#[derive(Debug, Error)]
pub enum SolverFailure {
    #[error("malformed program: {message}")]
    BadProgram { message: String },
    #[error("no conclusive status after {iterations} iterations (mu={mu:.3e}, step={step:.3e})")]
    NumericalFailure {
        iterations: usize,
        mu: f64,
        step: f64,
    },
    #[error("simplex iteration limit after {iterations} pivots")]
    IterationLimit { iterations: usize },
    #[error("singular simplex basis")]
    SingularBasis,
}
