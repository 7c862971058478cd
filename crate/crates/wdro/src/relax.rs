//! Moment-relaxation assembly for the robust objective.
//!
//! For a decision `x` and radius `r`, the inner worst-case expectation over
//! the ambiguity ball is bounded by semidefinite programs over truncated
//! moment sequences. Two equivalent shapes are built here:
//!
//! - `penalty_value`: fixes the multiplier `λ` and evaluates
//!   `λ rᵖ + (1/N) Σᵢ sup_y ⟨F_x − λ Q_p⁽ⁱ⁾, y⟩` — `N` independent small
//!   SDPs, solved concurrently. Together with the deterministic cost `f(x)`
//!   this is the objective the outer bundle minimizes over `(x, λ)`.
//! - `budget_value`: one coupled SDP with `N` tms blocks joined by the
//!   scalar transport budget `(1/N) Σᵢ ⟨Q_p⁽ⁱ⁾, y⁽ⁱ⁾⟩ ≤ rᵖ`; its budget
//!   multiplier is the optimal `λ` of the penalty form when the budget has
//!   an interior (r > 0).
//!
//! Costs come in two families: single-stage polynomial costs `F(x, ξ)` over
//! a basic closed semialgebraic support, and two-stage linear-recourse costs
//! where the inner variable `u` of the recourse dual joins `ξ` in the moment
//! sequence. For recourse problems with an unbounded dual feasible set the
//! plain relaxation can be `+∞` at every `λ`; the strengthened variant adds
//! the per-sample ball-product cuts `(ε² − ‖ξ − ξ̂⁽ⁱ⁾‖₂²)·g` that restore a
//! finite, consistent bound.

use std::sync::Arc;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::conic::{
    solve_sdp, solve_sdp_warm, ConicProgram, LinearIneq, PsdBlock, SdpOutcome, SdpSettings,
    SolverFailure,
};
use crate::moments::{LocalizerTemplate, MomentError, Tms};
use crate::par;
use crate::polybasis::{distance_power, MonomialBasis, MultiIndex, PolyError, Polynomial};

#[derive(Debug, Error)]
pub enum RelaxError {
    #[error("instance is inconsistent: {0}")]
    BadInstance(String),
    #[error("relaxation order {got} is below the minimum admissible order {minimum}")]
    OrderTooLow { minimum: u32, got: u32 },
    #[error("inner supremum for sample {sample} is unbounded at lambda = {lambda} (objective rate {rate:.3e})")]
    Unbounded {
        sample: usize,
        lambda: f64,
        rate: f64,
    },
    #[error("coupled relaxation is unbounded at radius budget {budget:.3e}")]
    BudgetUnbounded { budget: f64 },
    #[error("conic solve failed: {0}")]
    Solver(#[from] SolverFailure),
    #[error("polynomial input rejected: {0}")]
    Poly(#[from] PolyError),
    #[error("moment assembly rejected: {0}")]
    Moment(#[from] MomentError),
}

/// Box decision set `[lo_t, hi_t]` per coordinate.
#[derive(Clone, Debug)]
pub struct DecisionBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl DecisionBox {
    pub fn singleton(point: Vec<f64>) -> Self {
        DecisionBox {
            lo: point.clone(),
            hi: point,
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.lo.len()
            && x.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(v, (lo, hi))| *v >= lo - 1e-9 && *v <= hi + 1e-9)
    }

    pub fn clamp(&self, x: &mut [f64]) {
        for (v, (lo, hi)) in x.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
            *v = v.clamp(*lo, *hi);
        }
    }
}

/// Polynomial cost `F(x, ξ)` with a semialgebraic uncertainty support.
///
/// - `f`: deterministic cost, polynomial in `x` alone (`n1` variables);
/// - `cost`: joint polynomial in `(x, ξ)` — `x` block first, then `ξ`;
/// - `support`: inequalities `h_j(ξ) ≥ 0` cutting the support set;
/// - `samples`: the observed points, each of length `n0`;
/// - `norm_matrix`: the positive definite `H` of the transport metric
///   `‖ξ‖_H = √(ξᵀHξ)`;
/// - `wasserstein_p`: even transport exponent.
#[derive(Clone, Debug)]
pub struct SingleStageInstance {
    pub n1: usize,
    pub n0: usize,
    pub f: Polynomial,
    pub cost: Polynomial,
    pub support: Vec<Polynomial>,
    pub samples: Vec<Vec<f64>>,
    pub norm_matrix: DMatrix<f64>,
    pub wasserstein_p: u32,
    pub decision_box: DecisionBox,
}

impl SingleStageInstance {
    pub fn validate(&self) -> Result<(), RelaxError> {
        let bad = |m: String| Err(RelaxError::BadInstance(m));
        if self.f.nvars() != self.n1 {
            return bad(format!("f has {} variables, expected n1={}", self.f.nvars(), self.n1));
        }
        if self.cost.nvars() != self.n1 + self.n0 {
            return bad(format!(
                "cost has {} variables, expected n1+n0={}",
                self.cost.nvars(),
                self.n1 + self.n0
            ));
        }
        for h in &self.support {
            if h.nvars() != self.n0 {
                return bad(format!(
                    "support polynomial has {} variables, expected n0={}",
                    h.nvars(),
                    self.n0
                ));
            }
        }
        if self.wasserstein_p < 2 || self.wasserstein_p % 2 != 0 {
            return bad(format!("transport exponent must be even >= 2, got {}", self.wasserstein_p));
        }
        if self.norm_matrix.nrows() != self.n0 || self.norm_matrix.ncols() != self.n0 {
            return bad("norm matrix dimension differs from n0".into());
        }
        if self.samples.is_empty() {
            return bad("at least one sample is required".into());
        }
        for (i, s) in self.samples.iter().enumerate() {
            if s.len() != self.n0 {
                return bad(format!("sample {i} has length {}, expected {}", s.len(), self.n0));
            }
            for h in &self.support {
                if h.eval(s) < -1e-9 {
                    return bad(format!("sample {i} violates a support inequality"));
                }
            }
        }
        if self.decision_box.dim() != self.n1
            || self.decision_box.lo.iter().zip(&self.decision_box.hi).any(|(l, h)| l > h)
        {
            return bad("decision box is empty or mis-sized".into());
        }
        Ok(())
    }

    /// Partial evaluation `F_x = F(x, ·)` as a polynomial in `ξ`.
    pub fn cost_at(&self, x: &[f64]) -> Polynomial {
        self.cost.substitute_prefix(x)
    }

    /// Lowest admissible relaxation order at the decision `x`:
    /// `max{⌈deg F_x / 2⌉, ⌈deg h / 2⌉, p/2}`.
    pub fn min_order(&self, x: &[f64]) -> u32 {
        let deg_fx = self.cost_at(x).degree();
        let deg_h = self.support.iter().map(Polynomial::degree).max().unwrap_or(0);
        (deg_fx.div_ceil(2))
            .max(deg_h.div_ceil(2))
            .max(self.wasserstein_p / 2)
            .max(1)
    }

    /// Order admissible at every decision: uses the `ξ`-degree of the joint
    /// cost, which bounds `deg F_x` uniformly in `x`.
    pub fn min_order_bound(&self) -> u32 {
        let deg_xi = self
            .cost
            .terms()
            .map(|(alpha, _)| alpha.0[self.n1..].iter().sum::<u32>())
            .max()
            .unwrap_or(0);
        let deg_h = self.support.iter().map(Polynomial::degree).max().unwrap_or(0);
        (deg_xi.div_ceil(2))
            .max(deg_h.div_ceil(2))
            .max(self.wasserstein_p / 2)
            .max(1)
    }
}

/// Two-stage cost: deterministic `f(x)` plus the recourse value
/// `F(x, ξ) = max_u { uᵀB(ξ)x + b(ξ)ᵀu + d(ξ) : c(ξ) − Aᵀu ≥ 0 }`.
///
/// `recourse_a` is `A ∈ ℝ^{n2×m2}` (column `j` gives the `j`-th dual
/// constraint), `recourse_b` the `n2×n1` polynomial matrix `B(ξ)`,
/// `affine_b`/`affine_c` the polynomial maps `b(ξ) ∈ ℝ^{n2}` and
/// `c(ξ) ∈ ℝ^{m2}`, `offset_d` the scalar `d(ξ)`. All polynomials are in `ξ`
/// alone (`n0` variables).
#[derive(Clone, Debug)]
pub struct TwoStageInstance {
    pub n1: usize,
    pub n0: usize,
    pub n2: usize,
    pub m2: usize,
    pub f: Polynomial,
    pub recourse_a: DMatrix<f64>,
    pub recourse_b: Vec<Vec<Polynomial>>,
    pub affine_b: Vec<Polynomial>,
    pub affine_c: Vec<Polynomial>,
    pub offset_d: Polynomial,
    pub support: Vec<Polynomial>,
    pub samples: Vec<Vec<f64>>,
    pub norm_matrix: DMatrix<f64>,
    pub wasserstein_p: u32,
    pub decision_box: DecisionBox,
}

impl TwoStageInstance {
    pub fn validate(&self) -> Result<(), RelaxError> {
        let bad = |m: String| Err(RelaxError::BadInstance(m));
        if self.f.nvars() != self.n1 {
            return bad("f variable count differs from n1".into());
        }
        if self.recourse_a.nrows() != self.n2 || self.recourse_a.ncols() != self.m2 {
            return bad("recourse matrix A must be n2 x m2".into());
        }
        if self.recourse_b.len() != self.n2
            || self.recourse_b.iter().any(|row| row.len() != self.n1)
        {
            return bad("recourse coefficient matrix B must be n2 x n1".into());
        }
        if self.affine_b.len() != self.n2 {
            return bad("affine term b must have n2 components".into());
        }
        if self.affine_c.len() != self.m2 {
            return bad("constraint offset c must have m2 components".into());
        }
        let xi_polys = self
            .recourse_b
            .iter()
            .flatten()
            .chain(self.affine_b.iter())
            .chain(self.affine_c.iter())
            .chain(std::iter::once(&self.offset_d))
            .chain(self.support.iter());
        for p in xi_polys {
            if p.nvars() != self.n0 {
                return bad("a coefficient polynomial is not in the uncertainty variables".into());
            }
        }
        if self.wasserstein_p < 2 || self.wasserstein_p % 2 != 0 {
            return bad("transport exponent must be even >= 2".into());
        }
        if self.norm_matrix.nrows() != self.n0 || self.norm_matrix.ncols() != self.n0 {
            return bad("norm matrix dimension differs from n0".into());
        }
        if self.samples.is_empty() {
            return bad("at least one sample is required".into());
        }
        for (i, s) in self.samples.iter().enumerate() {
            if s.len() != self.n0 {
                return bad(format!("sample {i} has length {}, expected {}", s.len(), self.n0));
            }
            for h in &self.support {
                if h.eval(s) < -1e-9 {
                    return bad(format!("sample {i} violates a support inequality"));
                }
            }
        }
        if self.decision_box.dim() != self.n1
            || self.decision_box.lo.iter().zip(&self.decision_box.hi).any(|(l, h)| l > h)
        {
            return bad("decision box is empty or mis-sized".into());
        }
        Ok(())
    }

    /// Joint-variable objective `G_x(ξ, u) = uᵀB(ξ)x + b(ξ)ᵀu + d(ξ)` over
    /// `(ξ, u)` with the `ξ` block first. Degree in `u` is exactly one.
    pub fn recourse_objective_at(&self, x: &[f64]) -> Polynomial {
        let nj = self.n0 + self.n2;
        let mut out = self.offset_d.extend_vars(nj);
        for j in 0..self.n2 {
            let mut coeff = self.affine_b[j].clone();
            for (t, xt) in x.iter().enumerate() {
                coeff = coeff.add(&self.recourse_b[j][t].scale(*xt));
            }
            let u_j = Polynomial::variable(nj, self.n0 + j);
            out = out.add(&coeff.extend_vars(nj).mul(&u_j));
        }
        out
    }

    /// Dual feasibility cuts `g_j(ξ, u) = c_j(ξ) − a_jᵀu ≥ 0` in the joint
    /// variables.
    pub fn dual_cuts(&self) -> Vec<Polynomial> {
        let nj = self.n0 + self.n2;
        (0..self.m2)
            .map(|j| {
                let mut g = self.affine_c[j].extend_vars(nj);
                for i in 0..self.n2 {
                    let a = self.recourse_a[(i, j)];
                    if a != 0.0 {
                        g = g.sub(&Polynomial::variable(nj, self.n0 + i).scale(a));
                    }
                }
                g
            })
            .collect()
    }

    /// Recourse value `F(x, ξ)` by linear programming; `None` when the dual
    /// is unbounded (primal infeasible at this `ξ`).
    pub fn recourse_value(&self, x: &[f64], xi: &[f64]) -> Option<f64> {
        use crate::conic::{solve_lp, LinearProgram, LpOutcome};
        use nalgebra::DVector;
        // max over u of  wᵀu + d  s.t. Aᵀ u ≤ c(ξ)
        let mut w = DVector::zeros(self.n2);
        for j in 0..self.n2 {
            let mut c = self.affine_b[j].eval(xi);
            for (t, xt) in x.iter().enumerate() {
                c += self.recourse_b[j][t].eval(xi) * xt;
            }
            w[j] = c;
        }
        let a_ub = self.recourse_a.transpose();
        let b_ub = DVector::from_iterator(self.m2, self.affine_c.iter().map(|c| c.eval(xi)));
        let lp = LinearProgram::inequality(-w, a_ub, b_ub);
        match solve_lp(&lp).ok()? {
            LpOutcome::Optimal(sol) => Some(-sol.value + self.offset_d.eval(xi)),
            _ => None,
        }
    }

    /// Lowest admissible order `max{⌈deg G_x/2⌉, ⌈deg g/2⌉, ⌈deg h/2⌉, p/2}`,
    /// or with strengthening cuts `max{·, ⌈deg g_ε/2⌉}`.
    pub fn min_order(&self, x: &[f64], strengthened: bool) -> u32 {
        let deg_gx = self.recourse_objective_at(x).degree();
        self.order_from_parts(deg_gx, strengthened)
    }

    /// Order admissible at every decision: bounds `deg G_x` by the largest
    /// coefficient degree plus one for the `u` factor.
    pub fn min_order_bound(&self, strengthened: bool) -> u32 {
        let deg_b = self
            .recourse_b
            .iter()
            .flatten()
            .map(Polynomial::degree)
            .max()
            .unwrap_or(0);
        let deg_affine = self.affine_b.iter().map(Polynomial::degree).max().unwrap_or(0);
        let deg_gx = (deg_b.max(deg_affine) + 1).max(self.offset_d.degree());
        self.order_from_parts(deg_gx, strengthened)
    }

    fn order_from_parts(&self, deg_gx: u32, strengthened: bool) -> u32 {
        let deg_g = self
            .dual_cuts()
            .iter()
            .map(Polynomial::degree)
            .max()
            .unwrap_or(0);
        let deg_h = self.support.iter().map(Polynomial::degree).max().unwrap_or(0);
        let mut order = (deg_gx.div_ceil(2))
            .max(deg_g.div_ceil(2))
            .max(deg_h.div_ceil(2))
            .max(self.wasserstein_p / 2)
            .max(1);
        if strengthened {
            order = order.max((deg_g + 2).div_ceil(2));
        }
        order
    }
}

/// Which relaxation family to assemble for an instance.
#[derive(Clone, Copy, Debug)]
pub enum RelaxVariant<'a> {
    Single(&'a SingleStageInstance),
    Two(&'a TwoStageInstance),
    /// Two-stage with the per-sample ball-product cuts. `epsilon: None`
    /// selects `max(N·rᵖ, 1e-3)` at evaluation time.
    TwoStrengthened(&'a TwoStageInstance, Option<f64>),
}

impl<'a> RelaxVariant<'a> {
    pub fn deterministic_cost(&self) -> &'a Polynomial {
        match self {
            RelaxVariant::Single(s) => &s.f,
            RelaxVariant::Two(t) | RelaxVariant::TwoStrengthened(t, _) => &t.f,
        }
    }

    pub fn samples(&self) -> &'a [Vec<f64>] {
        match self {
            RelaxVariant::Single(s) => &s.samples,
            RelaxVariant::Two(t) | RelaxVariant::TwoStrengthened(t, _) => &t.samples,
        }
    }

    pub fn decision_box(&self) -> &'a DecisionBox {
        match self {
            RelaxVariant::Single(s) => &s.decision_box,
            RelaxVariant::Two(t) | RelaxVariant::TwoStrengthened(t, _) => &t.decision_box,
        }
    }

    pub fn decision_dim(&self) -> usize {
        match self {
            RelaxVariant::Single(s) => s.n1,
            RelaxVariant::Two(t) | RelaxVariant::TwoStrengthened(t, _) => t.n1,
        }
    }

    pub fn uncertainty_dim(&self) -> usize {
        match self {
            RelaxVariant::Single(s) => s.n0,
            RelaxVariant::Two(t) | RelaxVariant::TwoStrengthened(t, _) => t.n0,
        }
    }

    pub fn wasserstein_p(&self) -> u32 {
        match self {
            RelaxVariant::Single(s) => s.wasserstein_p,
            RelaxVariant::Two(t) | RelaxVariant::TwoStrengthened(t, _) => t.wasserstein_p,
        }
    }

    pub fn validate(&self) -> Result<(), RelaxError> {
        match self {
            RelaxVariant::Single(s) => s.validate(),
            RelaxVariant::Two(t) => t.validate(),
            RelaxVariant::TwoStrengthened(t, eps) => {
                if let Some(e) = eps {
                    if !(*e > 0.0) {
                        return Err(RelaxError::BadInstance(format!(
                            "strengthening radius must be positive, got {e}"
                        )));
                    }
                }
                t.validate()
            }
        }
    }

    pub fn min_order(&self, x: &[f64]) -> u32 {
        match self {
            RelaxVariant::Single(s) => s.min_order(x),
            RelaxVariant::Two(t) => t.min_order(x, false),
            RelaxVariant::TwoStrengthened(t, _) => t.min_order(x, true),
        }
    }

    /// Mean cost at the samples themselves, `(1/N) Σ F(x, ξ̂⁽ⁱ⁾)` — the
    /// worst-case expectation at radius zero, and the expectation part of the
    /// sample-average baseline. Two-stage recourse values come from linear
    /// programs; `None` if any recourse is unbounded.
    pub fn mean_sample_cost(&self, x: &[f64]) -> Option<f64> {
        let n = self.samples().len() as f64;
        let mut acc = 0.0;
        match self {
            RelaxVariant::Single(s) => {
                let fx = s.cost_at(x);
                for sample in &s.samples {
                    acc += fx.eval(sample);
                }
            }
            RelaxVariant::Two(t) | RelaxVariant::TwoStrengthened(t, _) => {
                for sample in &t.samples {
                    acc += t.recourse_value(x, sample)?;
                }
            }
        }
        Some(acc / n)
    }
}

/// Everything shared by the `N` per-sample programs at one `(x, k)`:
/// the joint monomial basis, the compiled support localizers, the moment
/// template, and the objective/transport coefficient vectors.
struct InnerAssembly {
    basis: Arc<MonomialBasis>,
    /// templates common to every sample (moment matrix first)
    shared_blocks: Vec<Arc<LocalizerTemplate>>,
    /// per-sample extra templates (strengthening cuts; empty otherwise)
    sample_blocks: Vec<Vec<Arc<LocalizerTemplate>>>,
    /// objective coefficients ⟨F_x, ·⟩
    objective: Vec<f64>,
    /// per-sample transport coefficients ⟨Q_p⁽ⁱ⁾, ·⟩
    transport: Vec<Vec<f64>>,
}

fn assemble(
    variant: &RelaxVariant,
    x: &[f64],
    k: u32,
    radius: f64,
) -> Result<InnerAssembly, RelaxError> {
    variant.validate()?;
    if !variant.decision_box().contains(x) {
        return Err(RelaxError::BadInstance(format!(
            "decision {x:?} is outside the decision box"
        )));
    }
    let minimum = variant.min_order(x);
    if k < minimum {
        return Err(RelaxError::OrderTooLow { minimum, got: k });
    }

    let p = variant.wasserstein_p();
    let (njoint, objective_poly, cuts, support, norm_matrix, samples) = match variant {
        RelaxVariant::Single(s) => (
            s.n0,
            s.cost_at(x),
            Vec::new(),
            s.support.clone(),
            &s.norm_matrix,
            &s.samples,
        ),
        RelaxVariant::Two(t) | RelaxVariant::TwoStrengthened(t, _) => (
            t.n0 + t.n2,
            t.recourse_objective_at(x),
            t.dual_cuts(),
            t.support
                .iter()
                .map(|h| h.extend_vars(t.n0 + t.n2))
                .collect(),
            &t.norm_matrix,
            &t.samples,
        ),
    };

    let basis = Arc::new(MonomialBasis::new(njoint, 2 * k));
    let mut shared_blocks = vec![Arc::new(LocalizerTemplate::new(
        &Polynomial::constant(njoint, 1.0),
        &basis,
        k,
    )?)];
    for q in support.iter().chain(cuts.iter()) {
        shared_blocks.push(Arc::new(LocalizerTemplate::new(q, &basis, k)?));
    }

    let n0 = variant.uncertainty_dim();
    let mut sample_blocks = vec![Vec::new(); samples.len()];
    if let RelaxVariant::TwoStrengthened(_, eps) = variant {
        let n = samples.len() as f64;
        let eps = eps.unwrap_or_else(|| (n * radius.powi(p as i32)).max(1e-3));
        if !(eps > 0.0) {
            return Err(RelaxError::BadInstance(
                "strengthening radius must be positive".into(),
            ));
        }
        for (i, sample) in samples.iter().enumerate() {
            // ε² − ‖ξ − ξ̂⁽ⁱ⁾‖₂²  (always the Euclidean ball)
            let ball = distance_power(sample, &DMatrix::identity(n0, n0), 2)?
                .scale(-1.0)
                .add(&Polynomial::constant(n0, eps * eps))
                .extend_vars(njoint);
            for g in &cuts {
                sample_blocks[i]
                    .push(Arc::new(LocalizerTemplate::new(&ball.mul(g), &basis, k)?));
            }
        }
    }

    let objective = basis.coeff_vector(&objective_poly)?;
    let mut transport = Vec::with_capacity(samples.len());
    for sample in samples {
        let q = distance_power(sample, norm_matrix, p)?.extend_vars(njoint);
        transport.push(basis.coeff_vector(&q)?);
    }

    Ok(InnerAssembly {
        basis,
        shared_blocks,
        sample_blocks,
        objective,
        transport,
    })
}

impl InnerAssembly {
    /// Program for one sample at a fixed multiplier: maximize
    /// `⟨F_x − λ Q_p⁽ⁱ⁾, y⟩` over the normalized tms cone.
    fn sample_program(&self, i: usize, lambda: f64) -> ConicProgram {
        let m = self.basis.len();
        let objective = self
            .objective
            .iter()
            .zip(&self.transport[i])
            .map(|(c, q)| c - lambda * q)
            .collect();
        let psd_blocks = self
            .shared_blocks
            .iter()
            .chain(self.sample_blocks[i].iter())
            .map(|t| PsdBlock {
                template: Arc::clone(t),
                var_offset: 0,
            })
            .collect();
        ConicProgram {
            num_vars: m,
            objective,
            psd_blocks,
            linear_ineqs: Vec::new(),
            normalized: vec![0],
        }
    }

    /// One coupled program: `N` tms blocks, shared budget row, mean objective.
    fn coupled_program(&self, budget: f64) -> ConicProgram {
        let m = self.basis.len();
        let n = self.transport.len();
        let scale = 1.0 / n as f64;
        let mut objective = vec![0.0; m * n];
        let mut psd_blocks = Vec::new();
        let mut coeffs = Vec::new();
        let mut normalized = Vec::with_capacity(n);
        for i in 0..n {
            let off = i * m;
            for (j, c) in self.objective.iter().enumerate() {
                objective[off + j] = c * scale;
            }
            for t in self.shared_blocks.iter().chain(self.sample_blocks[i].iter()) {
                psd_blocks.push(PsdBlock {
                    template: Arc::clone(t),
                    var_offset: off,
                });
            }
            for (j, q) in self.transport[i].iter().enumerate() {
                if *q != 0.0 {
                    coeffs.push((off + j, q * scale));
                }
            }
            normalized.push(off);
        }
        ConicProgram {
            num_vars: m * n,
            objective,
            psd_blocks,
            linear_ineqs: vec![LinearIneq {
                coeffs,
                rhs: budget,
            }],
            normalized,
        }
    }
}

/// Value and maximizing moment sequence of one inner supremum.
#[derive(Clone, Debug)]
pub struct InnerOutcome {
    pub value: f64,
    pub tms: Tms,
    /// `⟨Q_p⁽ⁱ⁾, y⟩` at the maximizer — the sample's transport spend
    pub transport: f64,
    pub iterations: usize,
}

/// Result of the fixed-`λ` evaluation.
#[derive(Clone, Debug)]
pub struct PenaltyEval {
    /// `λ rᵖ + (1/N) Σᵢ sup ⟨F_x − λ Q⁽ⁱ⁾, y⟩` — the worst-case expectation
    /// bound at this multiplier; the deterministic cost `f(x)` is not
    /// included (callers minimizing over `x` add it)
    pub value: f64,
    pub inner: Vec<InnerOutcome>,
    /// `(1/N) Σᵢ ⟨Q_p⁽ⁱ⁾, y⁽ⁱ⁾⟩` — subgradient of the value in `λ` is
    /// `rᵖ −` this
    pub mean_transport: f64,
}

/// Result of the coupled budget-form evaluation.
#[derive(Clone, Debug)]
pub struct BudgetEval {
    /// `sup { (1/N) Σ ⟨F_x, y⁽ⁱ⁾⟩ : budget ≤ rᵖ }`, without `f(x)`
    pub value: f64,
    pub tms: Vec<Tms>,
    /// multiplier of the budget row — the optimal `λ` when `r > 0`
    pub budget_dual: f64,
    pub iterations: usize,
}

/// Evaluate the penalty form at `(x, λ)`: `N` independent SDPs, one per
/// sample, solved concurrently; the mean is accumulated in sample order so
/// the value does not depend on thread scheduling. Warm starts (one prior
/// tms per sample) shorten the solves inside outer iterations.
pub fn penalty_value(
    variant: &RelaxVariant,
    x: &[f64],
    lambda: f64,
    radius: f64,
    k: u32,
    settings: &SdpSettings,
    warm: Option<&[Tms]>,
) -> Result<PenaltyEval, RelaxError> {
    if !(lambda >= 0.0) {
        return Err(RelaxError::BadInstance(format!(
            "multiplier must be nonnegative, got {lambda}"
        )));
    }
    if !(radius >= 0.0) {
        return Err(RelaxError::BadInstance(format!(
            "radius must be nonnegative, got {radius}"
        )));
    }
    let asm = assemble(variant, x, k, radius)?;
    let n = asm.transport.len();
    let p = variant.wasserstein_p();

    let results: Vec<Result<InnerOutcome, RelaxError>> = par::map_range(n, |i| {
        let prog = asm.sample_program(i, lambda);
        let outcome = match warm.and_then(|w| w.get(i)) {
            Some(t) => solve_sdp_warm(&prog, settings, t.values()),
            None => solve_sdp(&prog, settings),
        }?;
        match outcome {
            SdpOutcome::Optimal(sol) => {
                let transport = asm.transport[i]
                    .iter()
                    .zip(&sol.y)
                    .map(|(q, y)| q * y)
                    .sum();
                Ok(InnerOutcome {
                    value: sol.value,
                    tms: Tms::new(Arc::clone(&asm.basis), sol.y)?,
                    transport,
                    iterations: sol.iterations,
                })
            }
            SdpOutcome::Unbounded(ray) => Err(RelaxError::Unbounded {
                sample: i,
                lambda,
                rate: ray.objective_rate,
            }),
            SdpOutcome::Infeasible(_) => Err(RelaxError::BadInstance(format!(
                "inner feasible set for sample {i} is empty; the support set has no moment-feasible point"
            ))),
        }
    });

    let mut inner = Vec::with_capacity(n);
    for r in results {
        inner.push(r?);
    }
    let mean_inner: f64 = inner.iter().map(|o| o.value).sum::<f64>() / n as f64;
    let mean_transport: f64 = inner.iter().map(|o| o.transport).sum::<f64>() / n as f64;
    let value = lambda * radius.powi(p as i32) + mean_inner;
    Ok(PenaltyEval {
        value,
        inner,
        mean_transport,
    })
}

/// Exact reduction of the budget form at radius zero. The budget row pins
/// every sample's transport spend `⟨Q_p⁽ⁱ⁾, y⁽ⁱ⁾⟩` to zero (each term is a
/// nonnegative expectation), which puts the distance directions in the
/// moment matrix kernel and collapses the `ξ`-marginal of block `i` to the
/// point mass at `ξ̂⁽ⁱ⁾` across every represented degree. The coupled SDP is
/// therefore equal to the sample average of the cost — single-stage — or to
/// `N` small moment programs over the recourse variables alone. Solving the
/// reduced form directly avoids the ill-conditioning of the degenerate
/// budget row, whose multiplier is unattained at zero radius.
fn budget_zero(
    variant: &RelaxVariant,
    x: &[f64],
    k: u32,
    settings: &SdpSettings,
) -> Result<BudgetEval, RelaxError> {
    variant.validate()?;
    if !variant.decision_box().contains(x) {
        return Err(RelaxError::BadInstance(format!(
            "decision {x:?} is outside the decision box"
        )));
    }
    let minimum = variant.min_order(x);
    if k < minimum {
        return Err(RelaxError::OrderTooLow { minimum, got: k });
    }
    let off_support = |sample: &[f64]| {
        RelaxError::BadInstance(format!(
            "sample {sample:?} lies outside the support set; the zero-radius feasible set is empty"
        ))
    };

    match variant {
        RelaxVariant::Single(s) => {
            let basis = Arc::new(MonomialBasis::new(s.n0, 2 * k));
            let cost = s.cost_at(x);
            let mut tms = Vec::with_capacity(s.samples.len());
            let mut total = 0.0;
            for sample in &s.samples {
                if s.support.iter().any(|h| h.eval(sample) < -1e-9) {
                    return Err(off_support(sample));
                }
                total += cost.eval(sample);
                tms.push(Tms::new(Arc::clone(&basis), basis.eval_vector(sample))?);
            }
            Ok(BudgetEval {
                value: total / s.samples.len() as f64,
                tms,
                budget_dual: f64::INFINITY,
                iterations: 0,
            })
        }
        RelaxVariant::Two(t) | RelaxVariant::TwoStrengthened(t, _) => {
            // Strengthening cuts degenerate here: the ball factor is the
            // constant ε² at the pinned marginal, so each product cut is the
            // plain cut again.
            let joint = Arc::new(MonomialBasis::new(t.n0 + t.n2, 2 * k));
            let objective = t.recourse_objective_at(x);
            let cuts = t.dual_cuts();
            let n = t.samples.len();
            let results: Vec<Result<(f64, Vec<f64>, usize), RelaxError>> =
                par::map_range(n, |i| {
                    let sample = &t.samples[i];
                    if t.support.iter().any(|h| h.eval(sample) < -1e-9) {
                        return Err(off_support(sample));
                    }
                    let ubasis = Arc::new(MonomialBasis::new(t.n2, 2 * k));
                    let mut blocks = vec![Arc::new(LocalizerTemplate::new(
                        &Polynomial::constant(t.n2, 1.0),
                        &ubasis,
                        k,
                    )?)];
                    for g in &cuts {
                        let gu = g.substitute_prefix(sample);
                        if gu.degree() == 0 {
                            if gu.eval(&vec![0.0; t.n2]) < -1e-9 {
                                return Err(RelaxError::BadInstance(format!(
                                    "dual cut is violated at sample {i}; the recourse dual set is empty there"
                                )));
                            }
                            continue;
                        }
                        blocks.push(Arc::new(LocalizerTemplate::new(&gu, &ubasis, k)?));
                    }
                    let prog = ConicProgram {
                        num_vars: ubasis.len(),
                        objective: ubasis.coeff_vector(&objective.substitute_prefix(sample))?,
                        psd_blocks: blocks
                            .into_iter()
                            .map(|template| PsdBlock {
                                template,
                                var_offset: 0,
                            })
                            .collect(),
                        linear_ineqs: Vec::new(),
                        normalized: vec![0],
                    };
                    match solve_sdp(&prog, settings)? {
                        SdpOutcome::Optimal(sol) => {
                            // lift E[u^β] to the joint sequence through the
                            // point-mass ξ-marginal: E[ξ^α u^β] = ξ̂^α E[u^β]
                            let mut vals = vec![0.0; joint.len()];
                            for (j, m) in joint.iter().enumerate() {
                                let (alpha, beta) = m.0.split_at(t.n0);
                                let factor: f64 = alpha
                                    .iter()
                                    .zip(sample)
                                    .map(|(&e, &v)| v.powi(e as i32))
                                    .product();
                                if factor == 0.0 {
                                    continue;
                                }
                                let pos = ubasis
                                    .index_of(&MultiIndex(beta.to_vec()))
                                    .expect("joint degree bound covers the tail");
                                vals[j] += factor * sol.y[pos];
                            }
                            Ok((sol.value, vals, sol.iterations))
                        }
                        SdpOutcome::Unbounded(_) => {
                            Err(RelaxError::BudgetUnbounded { budget: 0.0 })
                        }
                        SdpOutcome::Infeasible(_) => Err(RelaxError::BadInstance(format!(
                            "recourse dual feasible set at sample {i} admits no moment-feasible point"
                        ))),
                    }
                });

            let mut tms = Vec::with_capacity(n);
            let mut total = 0.0;
            let mut iterations = 0;
            for r in results {
                let (v, vals, its) = r?;
                total += v;
                iterations += its;
                tms.push(Tms::new(Arc::clone(&joint), vals)?);
            }
            Ok(BudgetEval {
                value: total / n as f64,
                tms,
                budget_dual: f64::INFINITY,
                iterations,
            })
        }
    }
}

/// Evaluate the budget form at `x`: one coupled SDP over `N` moment blocks
/// with the aggregated transport budget `≤ rᵖ`. The budget row's multiplier
/// is reported as `budget_dual`; for `r > 0` it is the minimizing `λ` of
/// the penalty form.
pub fn budget_value(
    variant: &RelaxVariant,
    x: &[f64],
    radius: f64,
    k: u32,
    settings: &SdpSettings,
) -> Result<BudgetEval, RelaxError> {
    if !(radius >= 0.0) {
        return Err(RelaxError::BadInstance(format!(
            "radius must be nonnegative, got {radius}"
        )));
    }
    if radius == 0.0 {
        return budget_zero(variant, x, k, settings);
    }
    let asm = assemble(variant, x, k, radius)?;
    let p = variant.wasserstein_p();
    let budget = radius.powi(p as i32);
    let prog = asm.coupled_program(budget);
    match solve_sdp(&prog, settings)? {
        SdpOutcome::Optimal(sol) => {
            let m = asm.basis.len();
            let n = asm.transport.len();
            let mut tms = Vec::with_capacity(n);
            for i in 0..n {
                let vals = sol.y[i * m..(i + 1) * m].to_vec();
                tms.push(Tms::new(Arc::clone(&asm.basis), vals)?);
            }
            Ok(BudgetEval {
                value: sol.value,
                tms,
                budget_dual: sol.ineq_duals[0].max(0.0),
                iterations: sol.iterations,
            })
        }
        SdpOutcome::Unbounded(_) => Err(RelaxError::BudgetUnbounded { budget }),
        SdpOutcome::Infeasible(_) => Err(RelaxError::BadInstance(
            "coupled feasible set is empty: no moment-feasible point meets the budget".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{box_cubic, half_strip_recourse as half_strip};
    use nalgebra::DMatrix;

    fn settings() -> SdpSettings {
        SdpSettings::default()
    }

    /// `F(x, ξ) = ξ` on `Ξ = [−1, 1]`, one sample at the origin — decision
    /// enters nowhere, so the instance isolates the inner program.
    fn interval_linear() -> SingleStageInstance {
        SingleStageInstance {
            n1: 1,
            n0: 1,
            f: Polynomial::zero(1),
            cost: Polynomial::variable(2, 1),
            support: vec![Polynomial::constant(1, 1.0)
                .sub(&Polynomial::variable(1, 0).pow(2))],
            samples: vec![vec![0.0]],
            norm_matrix: DMatrix::identity(1, 1),
            wasserstein_p: 2,
            decision_box: DecisionBox::singleton(vec![0.0]),
        }
    }

    #[test]
    fn min_order_formula() {
        let inst = box_cubic();
        // cubic cost, quadratic support, p = 2
        assert_eq!(inst.min_order(&[0.0]), 2);
        let lin = interval_linear();
        assert_eq!(lin.min_order(&[0.0]), 1);
        // quartic cost forces order 2 even with linear support
        let mut quartic = interval_linear();
        quartic.cost = Polynomial::variable(2, 1).pow(4);
        quartic.support = vec![Polynomial::constant(1, 1.0).sub(&Polynomial::variable(1, 0))];
        assert_eq!(quartic.min_order(&[0.0]), 2);
    }

    #[test]
    fn order_below_minimum_is_rejected() {
        let inst = box_cubic();
        let variant = RelaxVariant::Single(&inst);
        match penalty_value(&variant, &[0.0], 1.0, 0.1, 1, &settings(), None) {
            Err(RelaxError::OrderTooLow { minimum: 2, got: 1 }) => {}
            other => panic!("expected order rejection, got {other:?}"),
        }
    }

    #[test]
    fn instance_validation_catches_bad_data() {
        let mut inst = interval_linear();
        inst.samples = vec![vec![2.0]]; // outside [−1, 1]
        assert!(matches!(
            RelaxVariant::Single(&inst).validate(),
            Err(RelaxError::BadInstance(_))
        ));
        let mut odd = interval_linear();
        odd.wasserstein_p = 3;
        assert!(odd.validate().is_err());
        let mut short = interval_linear();
        short.samples = vec![];
        assert!(short.validate().is_err());
    }

    #[test]
    fn interval_linear_cost_quarter_value() {
        // sup_{t ∈ [−1,1]} (t − t²) = 1/4 at t = 1/2
        let inst = interval_linear();
        let variant = RelaxVariant::Single(&inst);
        let eval = penalty_value(&variant, &[0.0], 1.0, 0.0, 1, &settings(), None).unwrap();
        assert!((eval.value - 0.25).abs() < 1e-6, "value {}", eval.value);
        let tms = &eval.inner[0].tms;
        assert!((tms.get(&[1]).unwrap() - 0.5).abs() < 1e-5);
        assert!((tms.get(&[2]).unwrap() - 0.25).abs() < 1e-5);
        assert!((eval.mean_transport - 0.25).abs() < 1e-5);
    }

    #[test]
    fn constant_cost_value_ignores_radius_at_zero_multiplier() {
        let mut inst = interval_linear();
        inst.cost = Polynomial::constant(2, 3.0);
        let variant = RelaxVariant::Single(&inst);
        let a = penalty_value(&variant, &[0.0], 0.0, 0.1, 1, &settings(), None).unwrap();
        let b = penalty_value(&variant, &[0.0], 0.0, 0.7, 1, &settings(), None).unwrap();
        assert!((a.value - 3.0).abs() < 1e-6);
        assert!((b.value - 3.0).abs() < 1e-6);
    }

    #[test]
    fn box_cubic_penalty_matches_closed_form() {
        // at λ = 1/(2r): λr² + sup(ξ₁³ + ξ₂ − λ‖ξ‖²) = r/2 + r/2 = r
        let inst = box_cubic();
        let variant = RelaxVariant::Single(&inst);
        let r = 0.25;
        let lambda = 1.0 / (2.0 * r);
        let eval = penalty_value(&variant, &[0.0], lambda, r, 2, &settings(), None).unwrap();
        assert!(
            (eval.inner[0].value - 0.125).abs() < 1e-5,
            "inner {}",
            eval.inner[0].value
        );
        assert!((eval.value - 0.25).abs() < 1e-5, "value {}", eval.value);
    }

    #[test]
    fn box_cubic_budget_agrees_with_penalty_at_dual() {
        let inst = box_cubic();
        let variant = RelaxVariant::Single(&inst);
        let r = 0.25;
        let budget = budget_value(&variant, &[0.0], r, 2, &settings()).unwrap();
        assert!(
            (budget.value - 0.25).abs() < 1e-4,
            "budget value {}",
            budget.value
        );
        let at_dual = penalty_value(
            &variant,
            &[0.0],
            budget.budget_dual,
            r,
            2,
            &settings(),
            None,
        )
        .unwrap();
        let gap = (budget.value - at_dual.value).abs();
        assert!(
            gap <= 1e-5 * (1.0 + budget.value.abs()),
            "duality gap {gap}, dual {}",
            budget.budget_dual
        );
    }

    #[test]
    fn budget_zero_radius_recovers_sample_mean() {
        let inst = box_cubic();
        let variant = RelaxVariant::Single(&inst);
        let mean = variant.mean_sample_cost(&[0.0]).unwrap();
        assert_eq!(mean, 0.0);
        let budget = budget_value(&variant, &[0.0], 0.0, 2, &settings()).unwrap();
        assert!(
            (budget.value - mean).abs() <= 1e-5 * (1.0 + mean.abs()),
            "value {} vs mean {}",
            budget.value,
            mean
        );
    }

    #[test]
    fn two_stage_objective_and_cuts() {
        let inst = half_strip();
        // G_x = (ξ − 1)u over joint (ξ, u)
        let g = inst.recourse_objective_at(&[0.0]);
        assert_eq!(g.nvars(), 2);
        assert!((g.eval(&[0.5, 2.0]) - (-1.0)).abs() < 1e-12);
        assert!((g.eval(&[1.0, 7.0]) - 0.0).abs() < 1e-12);
        let cuts = inst.dual_cuts();
        assert_eq!(cuts.len(), 1);
        // g₁ = 0 − (−1)·u = u
        assert!((cuts[0].eval(&[0.3, 4.0]) - 4.0).abs() < 1e-12);
        assert_eq!(inst.min_order(&[0.0], false), 1);
        // strengthening multiplies the cut by a quadratic ball
        assert_eq!(inst.min_order(&[0.0], true), 2);
    }

    #[test]
    fn two_stage_recourse_values_by_lp() {
        let inst = half_strip();
        // (ξ − 1)u over u ≥ 0: optimum 0 for ξ ≤ 1
        assert!((inst.recourse_value(&[0.0], &[0.5]).unwrap()).abs() < 1e-9);
        assert!((inst.recourse_value(&[0.0], &[-1.0]).unwrap()).abs() < 1e-9);
        let variant = RelaxVariant::Two(&inst);
        assert!(variant.mean_sample_cost(&[0.0]).unwrap().abs() < 1e-9);

        // u ∈ [0, 1], objective ξu → max(ξ, 0)
        let boxed = TwoStageInstance {
            m2: 2,
            recourse_a: DMatrix::from_row_slice(1, 2, &[1.0, -1.0]),
            affine_b: vec![Polynomial::variable(1, 0)],
            affine_c: vec![Polynomial::constant(1, 1.0), Polynomial::zero(1)],
            ..half_strip()
        };
        assert!((boxed.recourse_value(&[0.0], &[0.5]).unwrap() - 0.5).abs() < 1e-9);
        assert!(boxed.recourse_value(&[0.0], &[-0.3]).unwrap().abs() < 1e-9);
    }

    #[test]
    fn half_strip_inner_is_unbounded() {
        let inst = half_strip();
        let variant = RelaxVariant::Two(&inst);
        for (lambda, k) in [(1.0, 1), (0.0, 1), (2.5, 2)] {
            match penalty_value(&variant, &[0.0], lambda, 0.1, k, &settings(), None) {
                Err(RelaxError::Unbounded { sample: 0, .. }) => {}
                other => panic!("expected unbounded at λ={lambda}, k={k}: {other:?}"),
            }
        }
    }

    #[test]
    fn strengthened_half_strip_has_extra_blocks() {
        let inst = half_strip();
        let plain = RelaxVariant::Two(&inst);
        let strong = RelaxVariant::TwoStrengthened(&inst, Some(0.5));
        let asm_plain = assemble(&plain, &[0.0], 2, 0.1).unwrap();
        let asm_strong = assemble(&strong, &[0.0], 2, 0.1).unwrap();
        // moment block + h + g
        assert_eq!(asm_plain.shared_blocks.len(), 3);
        assert!(asm_plain.sample_blocks[0].is_empty());
        // plus one ball-product cut per dual constraint
        assert_eq!(asm_strong.sample_blocks[0].len(), 1);
        // joint basis over (ξ, u) at 2k = 4: C(2+4, 4) = 15
        assert_eq!(asm_strong.basis.len(), 15);
    }
}
