//! Outer minimization over `(x, λ)` and the sample-average baseline.
//!
//! The robust objective `f(x) + λrᵖ + (1/N) Σᵢ sup⟨F_x − λQ⁽ⁱ⁾, y⟩` is
//! convex in `(x, λ)` whenever `f` and `F(·, ξ)` are (two-stage recourse
//! objectives are affine in `x`, so they always qualify). Each oracle call
//! prices the inner suprema through `relax::penalty_value` and returns an
//! exact subgradient read off the maximizing moment sequences; a level
//! bundle method drives the iterates. The sample-average problem (radius
//! zero) is solved directly: bundle descent on the polynomial objective for
//! single-stage costs, one deterministic-equivalent linear program stacking
//! all recourse blocks for two-stage costs.

use std::cell::RefCell;
use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::conic::{
    project_polyhedron, solve_lp, LinearProgram, LpOutcome, SdpSettings, SolverFailure,
};
use crate::moments::MomentError;
use crate::polybasis::Polynomial;
use crate::relax::{penalty_value, PenaltyEval, RelaxError, RelaxVariant};

#[derive(Debug, Error)]
pub enum OuterError {
    #[error("relaxation failed: {0}")]
    Relax(#[from] RelaxError),
    #[error("conic solve failed: {0}")]
    Solver(#[from] SolverFailure),
    #[error("moment pairing failed: {0}")]
    Moment(#[from] MomentError),
    #[error("bounding problem degenerate: {0}")]
    BoundDegenerate(String),
    #[error("recourse stage infeasible for sample {sample}")]
    RecourseInfeasible { sample: usize },
    #[error("bad input: {0}")]
    BadInput(String),
}

/// Knobs for the level bundle loop and the inner conic solves.
#[derive(Clone, Debug)]
pub struct BundleSettings {
    /// stop when `upper − lower ≤ tol·(1 + |upper|)`
    pub tol: f64,
    pub max_iters: usize,
    /// level interpolation `ℓ = lower + weight·(upper − lower)`
    pub level_weight: f64,
    /// cut capacity; the oldest cut is dropped first
    pub max_cuts: usize,
    pub sdp: SdpSettings,
}

impl Default for BundleSettings {
    fn default() -> Self {
        BundleSettings {
            tol: 1e-6,
            max_iters: 300,
            level_weight: 0.5,
            max_cuts: 200,
            sdp: SdpSettings::default(),
        }
    }
}

/// One row of the descent log.
#[derive(Clone, Debug)]
pub struct IterateLog {
    pub iter: usize,
    pub point: Vec<f64>,
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Result of a bundle run on a generic convex oracle.
#[derive(Clone, Debug)]
pub struct BundleOutcome {
    pub point: Vec<f64>,
    pub value: f64,
    pub lower: f64,
    pub iterations: usize,
    pub log: Vec<IterateLog>,
}

struct Cut {
    point: Vec<f64>,
    value: f64,
    grad: Vec<f64>,
}

/// `min t` over the box subject to every cut lying below `t`; returns the
/// bound and its argmin.
fn bound_lp(cuts: &VecDeque<Cut>, lo: &[f64], hi: &[f64]) -> Result<(f64, Vec<f64>), OuterError> {
    let d = lo.len();
    let rows = cuts.len() + 2 * d;
    let mut a = DMatrix::zeros(rows, d + 1);
    let mut b = DVector::zeros(rows);
    for (r, cut) in cuts.iter().enumerate() {
        for (c, g) in cut.grad.iter().enumerate() {
            a[(r, c)] = *g;
        }
        a[(r, d)] = -1.0;
        b[r] = cut.grad.iter().zip(&cut.point).map(|(g, z)| g * z).sum::<f64>() - cut.value;
    }
    for i in 0..d {
        a[(cuts.len() + 2 * i, i)] = 1.0;
        b[cuts.len() + 2 * i] = hi[i];
        a[(cuts.len() + 2 * i + 1, i)] = -1.0;
        b[cuts.len() + 2 * i + 1] = -lo[i];
    }
    let mut minimize = DVector::zeros(d + 1);
    minimize[d] = 1.0;
    match solve_lp(&LinearProgram::inequality(minimize, a, b))? {
        LpOutcome::Optimal(sol) => Ok((sol.value, sol.x.as_slice()[..d].to_vec())),
        other => Err(OuterError::BoundDegenerate(format!(
            "cut model bound ended as {other:?} on a compact box"
        ))),
    }
}

/// Project `center` onto the level set `{z : cuts(z) ≤ level} ∩ box`.
fn level_step(
    center: &[f64],
    cuts: &VecDeque<Cut>,
    lo: &[f64],
    hi: &[f64],
    level: f64,
) -> Option<Vec<f64>> {
    let d = lo.len();
    let rows = cuts.len() + 2 * d;
    let mut a = DMatrix::zeros(rows, d);
    let mut b = DVector::zeros(rows);
    for (r, cut) in cuts.iter().enumerate() {
        for (c, g) in cut.grad.iter().enumerate() {
            a[(r, c)] = *g;
        }
        b[r] = cut.grad.iter().zip(&cut.point).map(|(g, z)| g * z).sum::<f64>() - cut.value
            + level;
    }
    for i in 0..d {
        a[(cuts.len() + 2 * i, i)] = 1.0;
        b[cuts.len() + 2 * i] = hi[i];
        a[(cuts.len() + 2 * i + 1, i)] = -1.0;
        b[cuts.len() + 2 * i + 1] = -lo[i];
    }
    let target = DVector::from_column_slice(center);
    project_polyhedron(&target, &a, &b)
        .ok()
        .map(|z| z.as_slice().to_vec())
}

/// Minimize a convex function over a box from subgradient evaluations.
///
/// `oracle(z)` returns the value and one subgradient at `z`. Iterates are
/// projections of the incumbent onto the level set of the cutting-plane
/// model; the model minimum supplies a certified lower bound, so the
/// returned `value − lower` gap is an optimality certificate up to the
/// oracle's own accuracy.
pub fn level_bundle_minimize<F>(
    mut oracle: F,
    lo: &[f64],
    hi: &[f64],
    start: Option<&[f64]>,
    settings: &BundleSettings,
) -> Result<BundleOutcome, OuterError>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>), OuterError>,
{
    let d = lo.len();
    if hi.len() != d || d == 0 {
        return Err(OuterError::BadInput("box bounds are mis-sized".into()));
    }
    if lo.iter().zip(hi).any(|(l, h)| l > h || !l.is_finite() || !h.is_finite()) {
        return Err(OuterError::BadInput("box is empty or unbounded".into()));
    }
    let clamp = |z: &mut Vec<f64>| {
        for (v, (l, h)) in z.iter_mut().zip(lo.iter().zip(hi)) {
            *v = v.clamp(*l, *h);
        }
    };
    let mut z: Vec<f64> = match start {
        Some(s) if s.len() == d => s.to_vec(),
        Some(_) => return Err(OuterError::BadInput("start point is mis-sized".into())),
        None => lo.iter().zip(hi).map(|(l, h)| 0.5 * (l + h)).collect(),
    };
    clamp(&mut z);

    let mut cuts: VecDeque<Cut> = VecDeque::new();
    let mut best_value = f64::INFINITY;
    let mut best_point = z.clone();
    let mut lower = f64::NEG_INFINITY;
    let mut log = Vec::new();
    let mut iterations = 0;

    for iter in 0..settings.max_iters {
        iterations = iter + 1;
        let (value, grad) = oracle(&z)?;
        if grad.len() != d {
            return Err(OuterError::BadInput(format!(
                "oracle returned a subgradient of length {}, expected {d}",
                grad.len()
            )));
        }
        if !value.is_finite() {
            return Err(OuterError::BadInput(format!(
                "oracle returned a non-finite value at {z:?}"
            )));
        }
        if value < best_value {
            best_value = value;
            best_point = z.clone();
        }
        if cuts.len() == settings.max_cuts {
            cuts.pop_front();
        }
        cuts.push_back(Cut {
            point: z.clone(),
            value,
            grad,
        });

        // dropping cuts only loosens the model, so the bound stays valid and
        // is kept monotone
        let (bound, argmin) = bound_lp(&cuts, lo, hi)?;
        lower = lower.max(bound);
        let scale = 1.0 + best_value.abs();
        // Inner solves that stop at their accuracy floor yield cuts that can
        // overestimate slightly, letting the model bound cross the incumbent
        // by the oracle's noise level. A small crossing means no further
        // progress is possible — clamp and let the gap check stop the loop.
        // A gross crossing still flags a broken model.
        if lower > best_value + 1e-2 * scale {
            return Err(OuterError::BoundDegenerate(format!(
                "model lower bound {lower} exceeded the best value {best_value}"
            )));
        }
        lower = lower.min(best_value);
        log.push(IterateLog {
            iter,
            point: z.clone(),
            value,
            lower,
            upper: best_value,
        });
        if best_value - lower <= settings.tol * scale {
            break;
        }

        let level = lower + settings.level_weight * (best_value - lower);
        z = match level_step(&best_point, &cuts, lo, hi, level) {
            Some(step) => step,
            None => argmin,
        };
        clamp(&mut z);
    }

    Ok(BundleOutcome {
        point: best_point,
        value: best_value,
        lower,
        iterations,
        log,
    })
}

/// Exact subgradient of the relaxed objective at `(x, λ)` from the inner
/// maximizers: `x`-components pair the cost's `x`-gradient with each
/// moment sequence, the `λ`-component is `rᵖ` minus the mean transport
/// spend.
pub fn outer_subgradient(
    variant: &RelaxVariant,
    x: &[f64],
    radius: f64,
    eval: &PenaltyEval,
) -> Result<Vec<f64>, OuterError> {
    let n1 = variant.decision_dim();
    let samples = variant.samples().len();
    if eval.inner.len() != samples {
        return Err(OuterError::BadInput(format!(
            "{} maximizers for {} samples",
            eval.inner.len(),
            samples
        )));
    }
    let joint_dim = match variant {
        RelaxVariant::Single(s) => s.n0,
        RelaxVariant::Two(t) | RelaxVariant::TwoStrengthened(t, _) => t.n0 + t.n2,
    };
    if eval.inner.iter().any(|o| o.tms.nvars() != joint_dim) {
        return Err(OuterError::BadInput(
            "maximizer moment sequences do not match the instance variables".into(),
        ));
    }

    let mut grad = Vec::with_capacity(n1 + 1);
    for t in 0..n1 {
        let mut component = variant.deterministic_cost().derivative(t).eval(x);
        let pairing = match variant {
            RelaxVariant::Single(s) => s.cost.derivative(t).substitute_prefix(x),
            RelaxVariant::Two(inst) | RelaxVariant::TwoStrengthened(inst, _) => {
                let nj = inst.n0 + inst.n2;
                let mut p = Polynomial::zero(nj);
                for j in 0..inst.n2 {
                    let u_j = Polynomial::variable(nj, inst.n0 + j);
                    p = p.add(&inst.recourse_b[j][t].extend_vars(nj).mul(&u_j));
                }
                p
            }
        };
        let mut mean = 0.0;
        for outcome in &eval.inner {
            mean += outcome.tms.pair(&pairing)?;
        }
        component += mean / samples as f64;
        grad.push(component);
    }
    let p = variant.wasserstein_p();
    grad.push(radius.powi(p as i32) - eval.mean_transport);
    Ok(grad)
}

/// Full solve report: the minimizer, its certified gap, and descent
/// diagnostics.
#[derive(Clone, Debug)]
pub struct SolveReport {
    pub x: Vec<f64>,
    pub lambda: f64,
    /// in-sample objective `f(x) + λrᵖ + mean inner value` (for the
    /// sample-average solver, `f(x) + mean sample cost`)
    pub value: f64,
    /// `upper − lower` of the bundle model at termination
    pub gap: f64,
    pub iterations: usize,
    pub oracle_calls: usize,
    /// interior-point iterations summed over every inner solve
    pub inner_iterations: usize,
    pub lambda_cap: f64,
    pub cap_doublings: u32,
    pub log: Vec<IterateLog>,
}

/// Crude scale for the multiplier cap: the largest cost magnitude seen at
/// the samples over a three-point decision sweep.
fn cost_scale(variant: &RelaxVariant) -> f64 {
    let bx = variant.decision_box();
    let mid: Vec<f64> = bx.lo.iter().zip(&bx.hi).map(|(l, h)| 0.5 * (l + h)).collect();
    let probes = [bx.lo.clone(), mid, bx.hi.clone()];
    let mut scale: f64 = 0.0;
    for x in &probes {
        match variant {
            RelaxVariant::Single(s) => {
                let fx = s.cost_at(x);
                for sample in &s.samples {
                    scale = scale.max(fx.eval(sample).abs());
                }
            }
            RelaxVariant::Two(t) | RelaxVariant::TwoStrengthened(t, _) => {
                for sample in &t.samples {
                    if let Some(v) = t.recourse_value(x, sample) {
                        scale = scale.max(v.abs());
                    }
                }
            }
        }
    }
    scale
}

/// Minimize the relaxed robust objective over `X × [0, λ_max]`.
///
/// `order` overrides the relaxation order (`None` takes the uniform
/// admissible minimum). The multiplier cap starts at
/// `10·(1 + cost scale)/rᵖ`; if the minimizer lands on the cap, the cap
/// doubles and the descent reruns, at most three times, with a warning on
/// standard error.
pub fn solve_wdro(
    variant: &RelaxVariant,
    radius: f64,
    order: Option<u32>,
    settings: &BundleSettings,
) -> Result<SolveReport, OuterError> {
    if !(radius > 0.0) {
        return Err(OuterError::BadInput(format!(
            "radius must be positive for the robust solve, got {radius}; the sample-average solver handles radius zero"
        )));
    }
    variant.validate().map_err(OuterError::Relax)?;
    let k = order.unwrap_or_else(|| match variant {
        RelaxVariant::Single(s) => s.min_order_bound(),
        RelaxVariant::Two(t) => t.min_order_bound(false),
        RelaxVariant::TwoStrengthened(t, _) => t.min_order_bound(true),
    });
    let p = variant.wasserstein_p();
    let rp = radius.powi(p as i32);
    let bx = variant.decision_box();
    let n1 = variant.decision_dim();
    let f = variant.deterministic_cost();

    let mut lambda_cap = 10.0 * (1.0 + cost_scale(variant)) / rp;
    let mut cap_doublings = 0;
    loop {
        let mut lo = bx.lo.clone();
        let mut hi = bx.hi.clone();
        lo.push(0.0);
        hi.push(lambda_cap);
        let mut start: Vec<f64> = bx
            .lo
            .iter()
            .zip(&bx.hi)
            .map(|(l, h)| 0.5 * (l + h))
            .collect();
        start.push(1.0_f64.min(lambda_cap));

        let warm: RefCell<Option<Vec<crate::moments::Tms>>> = RefCell::new(None);
        let counters = RefCell::new((0usize, 0usize)); // (oracle calls, inner iterations)
        let oracle = |z: &[f64]| -> Result<(f64, Vec<f64>), OuterError> {
            let (x, lambda) = z.split_at(n1);
            let warm_tms = warm.borrow();
            let eval = penalty_value(
                variant,
                x,
                lambda[0].max(0.0),
                radius,
                k,
                &settings.sdp,
                warm_tms.as_deref(),
            )?;
            drop(warm_tms);
            let grad = outer_subgradient(variant, x, radius, &eval)?;
            {
                let mut c = counters.borrow_mut();
                c.0 += 1;
                c.1 += eval.inner.iter().map(|o| o.iterations).sum::<usize>();
            }
            let value = f.eval(x) + eval.value;
            *warm.borrow_mut() = Some(eval.inner.into_iter().map(|o| o.tms).collect());
            Ok((value, grad))
        };

        let outcome = level_bundle_minimize(oracle, &lo, &hi, Some(&start), settings)?;
        let (oracle_calls, inner_iterations) = *counters.borrow();
        let lambda_star = outcome.point[n1];
        if lambda_star > 0.99 * lambda_cap && cap_doublings < 3 {
            eprintln!(
                "warning: multiplier {lambda_star:.3e} reached its cap {lambda_cap:.3e}; doubling the cap and re-solving"
            );
            lambda_cap *= 2.0;
            cap_doublings += 1;
            continue;
        }
        return Ok(SolveReport {
            x: outcome.point[..n1].to_vec(),
            lambda: lambda_star,
            value: outcome.value,
            gap: outcome.value - outcome.lower,
            iterations: outcome.iterations,
            oracle_calls,
            inner_iterations,
            lambda_cap,
            cap_doublings,
            log: outcome.log,
        });
    }
}

/// Minimize the sample-average objective `f(x) + (1/N) Σ F(x, ξ̂⁽ⁱ⁾)` over
/// the decision box — the radius-zero baseline.
///
/// Single-stage costs descend by the same bundle method with exact
/// gradients. Two-stage costs solve one deterministic-equivalent linear
/// program with all `N` recourse blocks sharing `x`; this requires an
/// affine deterministic cost.
pub fn solve_eso(
    variant: &RelaxVariant,
    settings: &BundleSettings,
) -> Result<SolveReport, OuterError> {
    variant.validate().map_err(OuterError::Relax)?;
    match variant {
        RelaxVariant::Single(s) => {
            let n = s.samples.len() as f64;
            let oracle = |x: &[f64]| -> Result<(f64, Vec<f64>), OuterError> {
                let fx = s.cost_at(x);
                let mut value = s.f.eval(x);
                for sample in &s.samples {
                    value += fx.eval(sample) / n;
                }
                let mut grad = Vec::with_capacity(s.n1);
                for t in 0..s.n1 {
                    let mut gt = s.f.derivative(t).eval(x);
                    let dcost = s.cost.derivative(t).substitute_prefix(x);
                    for sample in &s.samples {
                        gt += dcost.eval(sample) / n;
                    }
                    grad.push(gt);
                }
                Ok((value, grad))
            };
            let outcome =
                level_bundle_minimize(oracle, &s.decision_box.lo, &s.decision_box.hi, None, settings)?;
            Ok(SolveReport {
                x: outcome.point.clone(),
                lambda: 0.0,
                value: outcome.value,
                gap: outcome.value - outcome.lower,
                iterations: outcome.iterations,
                oracle_calls: outcome.iterations,
                inner_iterations: 0,
                lambda_cap: 0.0,
                cap_doublings: 0,
                log: outcome.log,
            })
        }
        RelaxVariant::Two(t) | RelaxVariant::TwoStrengthened(t, _) => {
            if t.f.degree() > 1 {
                return Err(OuterError::BadInput(
                    "the stacked recourse solver needs an affine deterministic cost".into(),
                ));
            }
            solve_eso_two_stage(t)
        }
    }
}

fn solve_eso_two_stage(t: &crate::relax::TwoStageInstance) -> Result<SolveReport, OuterError> {
    let n = t.samples.len();
    let scale = 1.0 / n as f64;
    let nvars = t.n1 + n * t.m2;
    let woff = |i: usize| t.n1 + i * t.m2;

    // minimize cᵀx + (1/N) Σᵢ c(ξ̂⁽ⁱ⁾)ᵀw⁽ⁱ⁾  subject to
    //   A w⁽ⁱ⁾ − B(ξ̂⁽ⁱ⁾) x = b(ξ̂⁽ⁱ⁾),  w⁽ⁱ⁾ ≥ 0,  x in the box
    let mut minimize = DVector::zeros(nvars);
    let mut constant = t.f.eval(&vec![0.0; t.n1]);
    for s in 0..t.n1 {
        minimize[s] = t.f.derivative(s).eval(&vec![0.0; t.n1]);
    }
    for (i, sample) in t.samples.iter().enumerate() {
        for j in 0..t.m2 {
            minimize[woff(i) + j] = t.affine_c[j].eval(sample) * scale;
        }
        constant += t.offset_d.eval(sample) * scale;
    }

    let mut a_eq = DMatrix::zeros(n * t.n2, nvars);
    let mut b_eq = DVector::zeros(n * t.n2);
    for (i, sample) in t.samples.iter().enumerate() {
        for row in 0..t.n2 {
            let r = i * t.n2 + row;
            for col in 0..t.m2 {
                a_eq[(r, woff(i) + col)] = t.recourse_a[(row, col)];
            }
            for s in 0..t.n1 {
                a_eq[(r, s)] = -t.recourse_b[row][s].eval(sample);
            }
            b_eq[r] = t.affine_b[row].eval(sample);
        }
    }

    let ub_rows = 2 * t.n1 + n * t.m2;
    let mut a_ub = DMatrix::zeros(ub_rows, nvars);
    let mut b_ub = DVector::zeros(ub_rows);
    for s in 0..t.n1 {
        a_ub[(2 * s, s)] = 1.0;
        b_ub[2 * s] = t.decision_box.hi[s];
        a_ub[(2 * s + 1, s)] = -1.0;
        b_ub[2 * s + 1] = -t.decision_box.lo[s];
    }
    for i in 0..n {
        for j in 0..t.m2 {
            let r = 2 * t.n1 + i * t.m2 + j;
            a_ub[(r, woff(i) + j)] = -1.0;
        }
    }

    let lp = LinearProgram {
        minimize,
        a_ub,
        b_ub,
        a_eq,
        b_eq,
    };
    match solve_lp(&lp)? {
        LpOutcome::Optimal(sol) => {
            let x = sol.x.as_slice()[..t.n1].to_vec();
            Ok(SolveReport {
                value: sol.value + constant,
                lambda: 0.0,
                gap: 0.0,
                iterations: 1,
                oracle_calls: 1,
                inner_iterations: 0,
                lambda_cap: 0.0,
                cap_doublings: 0,
                log: Vec::new(),
                x,
            })
        }
        LpOutcome::Infeasible { .. } => {
            // attribute the failure to a sample if a single recourse stage
            // is already infeasible at the box midpoint
            let mid: Vec<f64> = t
                .decision_box
                .lo
                .iter()
                .zip(&t.decision_box.hi)
                .map(|(l, h)| 0.5 * (l + h))
                .collect();
            for (i, sample) in t.samples.iter().enumerate() {
                if t.recourse_value(&mid, sample).is_none() {
                    return Err(OuterError::RecourseInfeasible { sample: i });
                }
            }
            Err(OuterError::BadInput(
                "stacked recourse program is infeasible".into(),
            ))
        }
        LpOutcome::Unbounded { .. } => Err(OuterError::BadInput(
            "stacked recourse program is unbounded below; the recourse dual must be feasible".into(),
        )),
    }
}
