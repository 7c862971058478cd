//! Dense primal-dual interior-point SDP solver on the homogeneous self-dual
//! embedding.
//!
//! The public program maximizes `obj·y` over PSD block constraints, scalar
//! inequalities, and pinned mass coordinates. Internally the pinned
//! coordinates are eliminated by substitution and the rest becomes the
//! standard form `min c'ᵀx  s.t.  Gx + s = h, s ∈ K` with
//! `K = ℝ₊^l × ⊕ S₊^{n_b}`. The embedding
//!
//! ```text
//!   Gᵀz + c'τ = 0,   Gx + s − hτ = 0,   c'ᵀx + hᵀz + κ = 0,
//!   s ∈ K, z ∈ K, τ ≥ 0, κ ≥ 0, complementary
//! ```
//!
//! is driven to complementarity by a Mehrotra-style predictor-corrector with
//! Nesterov–Todd scaling on the PSD blocks. `τ ≫ κ` at convergence yields an
//! optimal pair; `τ ≪ κ` yields an unboundedness or infeasibility
//! certificate, decided by the sign of the objective/right-hand-side pairing
//! (ratio threshold `cert_ratio`). Everything else is a `NumericalFailure`.

use nalgebra::{DMatrix, DVector};

use super::{
    ConicProgram, ImprovingRay, InfeasibilityCert, KktResiduals, SdpOutcome, SdpSolution,
    SolverFailure,
};
use crate::par;

#[derive(Clone, Copy, Debug)]
pub struct SdpSettings {
    /// target for primal/dual residuals and relative gap
    pub tol: f64,
    pub max_iters: usize,
    /// `τ/κ` threshold that flips the exit to the certificate branch
    pub cert_ratio: f64,
    /// residual tolerance for accepting a certificate
    pub cert_tol: f64,
}

impl Default for SdpSettings {
    fn default() -> Self {
        SdpSettings {
            tol: 1e-8,
            max_iters: 200,
            cert_ratio: 1e-6,
            cert_tol: 1e-7,
        }
    }
}

/// Solve from the cold start (`x = 0`, identity cone points).
pub fn solve_sdp(
    prog: &ConicProgram,
    settings: &SdpSettings,
) -> Result<SdpOutcome, SolverFailure> {
    solve_inner(prog, settings, None)
}

/// Solve starting near a caller-supplied point in the original variable
/// space. The start is pushed strictly inside the cone before iterating; the
/// solver remains exact, a good guess just shortens the path.
pub fn solve_sdp_warm(
    prog: &ConicProgram,
    settings: &SdpSettings,
    y0: &[f64],
) -> Result<SdpOutcome, SolverFailure> {
    solve_inner(prog, settings, Some(y0))
}

// ---------------------------------------------------------------------------
// preparation: eliminate pinned coordinates, compile block data

struct BlockData {
    dim: usize,
    /// constant part of the block (contribution of pinned coordinates)
    cmat: DMatrix<f64>,
    /// free variable -> upper-triangle triplets of its coefficient matrix
    vars: Vec<(usize, Vec<(usize, usize, f64)>)>,
}

struct Prep {
    mf: usize,
    l: usize,
    free: Vec<usize>,
    cobj: DVector<f64>,
    glin: DMatrix<f64>,
    hlin: DVector<f64>,
    blocks: Vec<BlockData>,
}

fn prepare(prog: &ConicProgram) -> Prep {
    let m = prog.num_vars;
    let mut fixed = vec![false; m];
    for &i in &prog.normalized {
        fixed[i] = true;
    }
    let free: Vec<usize> = (0..m).filter(|&i| !fixed[i]).collect();
    let mut pos = vec![usize::MAX; m];
    for (p, &i) in free.iter().enumerate() {
        pos[i] = p;
    }
    let mf = free.len();

    let cobj = DVector::from_iterator(mf, free.iter().map(|&i| -prog.objective[i]));

    let l = prog.linear_ineqs.len();
    let mut glin = DMatrix::zeros(l, mf);
    let mut hlin = DVector::zeros(l);
    for (j, ineq) in prog.linear_ineqs.iter().enumerate() {
        let mut h = ineq.rhs;
        for &(i, c) in &ineq.coeffs {
            if fixed[i] {
                h -= c;
            } else {
                glin[(j, pos[i])] += c;
            }
        }
        hlin[j] = h;
    }

    let mut blocks = Vec::with_capacity(prog.psd_blocks.len());
    for pb in &prog.psd_blocks {
        let dim = pb.template.dim();
        let mut cmat = DMatrix::zeros(dim, dim);
        let mut per_var: std::collections::BTreeMap<usize, Vec<(usize, usize, f64)>> =
            std::collections::BTreeMap::new();
        for i in 0..dim {
            for j in i..dim {
                for &(idx, c) in pb.template.entry(i, j) {
                    let g = pb.var_offset + idx;
                    if fixed[g] {
                        cmat[(i, j)] += c;
                        if i != j {
                            cmat[(j, i)] += c;
                        }
                    } else {
                        per_var.entry(pos[g]).or_default().push((i, j, c));
                    }
                }
            }
        }
        blocks.push(BlockData {
            dim,
            cmat,
            vars: per_var.into_iter().collect(),
        });
    }

    Prep {
        mf,
        l,
        free,
        cobj,
        glin,
        hlin,
        blocks,
    }
}

impl BlockData {
    /// `Σ x_u A_u` (dense symmetric).
    fn combine(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim, self.dim);
        for (u, trips) in &self.vars {
            let xv = x[*u];
            if xv == 0.0 {
                continue;
            }
            for &(i, j, c) in trips {
                out[(i, j)] += c * xv;
                if i != j {
                    out[(j, i)] += c * xv;
                }
            }
        }
        out
    }

    /// `⟨A_u, V⟩` for each listed variable, accumulated into `out` with `sign`.
    fn adjoint_into(&self, v: &DMatrix<f64>, sign: f64, out: &mut DVector<f64>) {
        for (u, trips) in &self.vars {
            let mut acc = 0.0;
            for &(i, j, c) in trips {
                acc += if i == j { c * v[(i, i)] } else { 2.0 * c * v[(i, j)] };
            }
            out[*u] += sign * acc;
        }
    }
}

// ---------------------------------------------------------------------------
// cone points

#[derive(Clone)]
struct ConePoint {
    lin: DVector<f64>,
    mats: Vec<DMatrix<f64>>,
}

impl ConePoint {
    fn identity(prep: &Prep) -> Self {
        ConePoint {
            lin: DVector::from_element(prep.l, 1.0),
            mats: prep
                .blocks
                .iter()
                .map(|b| DMatrix::identity(b.dim, b.dim))
                .collect(),
        }
    }

    fn dot(&self, other: &ConePoint) -> f64 {
        let mut acc = self.lin.dot(&other.lin);
        for (a, b) in self.mats.iter().zip(&other.mats) {
            acc += a.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>();
        }
        acc
    }

    fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    fn axpy(&mut self, alpha: f64, other: &ConePoint) {
        self.lin.axpy(alpha, &other.lin, 1.0);
        for (a, b) in self.mats.iter_mut().zip(&other.mats) {
            *a += b * alpha;
        }
    }

    fn scale(&self, alpha: f64) -> ConePoint {
        ConePoint {
            lin: &self.lin * alpha,
            mats: self.mats.iter().map(|m| m * alpha).collect(),
        }
    }
}

/// `Gx` as a cone point: `(G_lin x, −Σ x_u A_u per block)`.
fn g_apply(prep: &Prep, x: &DVector<f64>) -> ConePoint {
    ConePoint {
        lin: &prep.glin * x,
        mats: prep.blocks.iter().map(|b| -b.combine(x)).collect(),
    }
}

/// `Gᵀz`.
fn g_adjoint(prep: &Prep, z: &ConePoint) -> DVector<f64> {
    let mut out = prep.glin.transpose() * &z.lin;
    for (b, zm) in prep.blocks.iter().zip(&z.mats) {
        b.adjoint_into(zm, -1.0, &mut out);
    }
    out
}

fn h_point(prep: &Prep) -> ConePoint {
    ConePoint {
        lin: prep.hlin.clone(),
        mats: prep.blocks.iter().map(|b| b.cmat.clone()).collect(),
    }
}

// ---------------------------------------------------------------------------
// Nesterov–Todd scaling

struct Scaling {
    /// nonneg cone: `d = s/z`, `λ = sqrt(s·z)` componentwise
    dlin: DVector<f64>,
    lamlin: DVector<f64>,
    /// PSD blocks: scaling factor R, its inverse, `(RRᵀ)⁻¹`, scaled spectrum
    rs: Vec<DMatrix<f64>>,
    pinvs: Vec<DMatrix<f64>>,
    sig: Vec<DVector<f64>>,
}

fn chol_with_jitter(m: &DMatrix<f64>) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if let Some(c) = m.clone().cholesky() {
        return Some(c);
    }
    let scale = m.diagonal().amax().max(1e-300);
    let mut delta = 1e-14 * scale;
    for _ in 0..6 {
        let jittered = m + DMatrix::identity(m.nrows(), m.ncols()) * delta;
        if let Some(c) = jittered.cholesky() {
            return Some(c);
        }
        delta *= 100.0;
    }
    None
}

fn nt_scaling(prep: &Prep, s: &ConePoint, z: &ConePoint) -> Option<Scaling> {
    let dlin = s.lin.component_div(&z.lin);
    let lamlin = s.lin.component_mul(&z.lin).map(f64::sqrt);
    let mut rs = Vec::with_capacity(prep.blocks.len());
    let mut pinvs = Vec::with_capacity(prep.blocks.len());
    let mut sig = Vec::with_capacity(prep.blocks.len());
    for (sm, zm) in s.mats.iter().zip(&z.mats) {
        let ls = chol_with_jitter(sm)?.l();
        let lz = chol_with_jitter(zm)?.l();
        let svd = (lz.transpose() * &ls).svd(true, true);
        let u = svd.u.as_ref()?;
        let vt = svd.v_t.as_ref()?;
        let sv = &svd.singular_values;
        if sv.iter().any(|&t| t <= 0.0 || !t.is_finite()) {
            return None;
        }
        let inv_sqrt = DMatrix::from_diagonal(&sv.map(|t| 1.0 / t.sqrt()));
        let r = &ls * vt.transpose() * &inv_sqrt;
        let rinv = &inv_sqrt * u.transpose() * lz.transpose();
        let pinv = rinv.transpose() * &rinv;
        rs.push(r);
        pinvs.push(pinv);
        sig.push(sv.clone_owned());
    }
    Some(Scaling {
        dlin,
        lamlin,
        rs,
        pinvs,
        sig,
    })
}

impl Scaling {
    /// `W z`: `Rᵀ V R` per block, `sqrt(d)·v` on the nonneg part.
    fn w(&self, v: &ConePoint) -> ConePoint {
        ConePoint {
            lin: v.lin.zip_map(&self.dlin, |a, d| a * d.sqrt()),
            mats: v
                .mats
                .iter()
                .zip(&self.rs)
                .map(|(m, r)| r.transpose() * m * r)
                .collect(),
        }
    }

    /// `Wᵀ v`: `R V Rᵀ` per block.
    fn wt(&self, v: &ConePoint) -> ConePoint {
        ConePoint {
            lin: v.lin.zip_map(&self.dlin, |a, d| a * d.sqrt()),
            mats: v
                .mats
                .iter()
                .zip(&self.rs)
                .map(|(m, r)| r * m * r.transpose())
                .collect(),
        }
    }

    /// Scaled point `λ` as a cone point (diagonal per block).
    fn lambda(&self) -> ConePoint {
        ConePoint {
            lin: self.lamlin.clone(),
            mats: self.sig.iter().map(DMatrix::from_diagonal).collect(),
        }
    }

    /// Jordan quotient `λ \∘ u` in the scaled space.
    fn lambda_div(&self, u: &ConePoint) -> ConePoint {
        ConePoint {
            lin: u.lin.component_div(&self.lamlin),
            mats: u
                .mats
                .iter()
                .zip(&self.sig)
                .map(|(m, sv)| {
                    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| {
                        2.0 * m[(i, j)] / (sv[i] + sv[j])
                    })
                })
                .collect(),
        }
    }

    /// `H⁻¹ v` with `H = WᵀW`: `Pinv V Pinv` per block, `v/d` on nonneg.
    fn hinv(&self, v: &ConePoint) -> ConePoint {
        ConePoint {
            lin: v.lin.component_div(&self.dlin),
            mats: v
                .mats
                .iter()
                .zip(&self.pinvs)
                .map(|(m, pinv)| pinv * m * pinv)
                .collect(),
        }
    }

    /// `H v`.
    fn happly(&self, v: &ConePoint) -> ConePoint {
        ConePoint {
            lin: v.lin.component_mul(&self.dlin),
            mats: v
                .mats
                .iter()
                .zip(&self.rs)
                .map(|(m, r)| {
                    let p = r * r.transpose();
                    &p * m * &p
                })
                .collect(),
        }
    }
}

/// Jordan product `a ∘ b` in the scaled space (symmetrized per block).
fn jordan_mul(a: &ConePoint, b: &ConePoint) -> ConePoint {
    ConePoint {
        lin: a.lin.component_mul(&b.lin),
        mats: a
            .mats
            .iter()
            .zip(&b.mats)
            .map(|(x, y)| {
                let p = x * y;
                (&p + p.transpose()) * 0.5
            })
            .collect(),
    }
}

/// Largest `α` with `λ + α·d` in the cone (scaled space), capped at `cap`.
fn max_step(scaling: &Scaling, d: &ConePoint, cap: f64) -> f64 {
    let mut alpha: f64 = cap;
    for (lam, dv) in scaling.lamlin.iter().zip(d.lin.iter()) {
        if *dv < 0.0 {
            alpha = alpha.min(-lam / dv);
        }
    }
    for (sv, dm) in scaling.sig.iter().zip(&d.mats) {
        // eigenvalues of Σ^{-1/2} D Σ^{-1/2}
        let n = dm.nrows();
        let scaled = DMatrix::from_fn(n, n, |i, j| dm[(i, j)] / (sv[i] * sv[j]).sqrt());
        let eig = scaled.symmetric_eigen();
        let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        if min < 0.0 {
            alpha = alpha.min(-1.0 / min);
        }
    }
    alpha
}

// ---------------------------------------------------------------------------
// KKT system

struct Kkt {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

fn build_schur(prep: &Prep, scaling: &Scaling) -> DMatrix<f64> {
    let mf = prep.mf;
    let mut m = DMatrix::zeros(mf, mf);
    // nonneg rows: Σ_j g_j g_jᵀ / d_j
    for j in 0..prep.l {
        let g = prep.glin.row(j).transpose();
        m.ger(1.0 / scaling.dlin[j], &g, &g, 1.0);
    }
    // PSD blocks: (Gᵀ H⁻¹ G)_{uv} = ⟨A_u, Pinv A_v Pinv⟩
    for (b, pinv) in prep.blocks.iter().zip(&scaling.pinvs) {
        let nvars = b.vars.len();
        // T_u = Pinv A_u Pinv via outer products of Pinv columns
        let ts: Vec<DMatrix<f64>> = par::map_range(nvars, |a| {
            let (_, trips) = &b.vars[a];
            let mut t = DMatrix::zeros(b.dim, b.dim);
            for &(i, j, c) in trips {
                let pi = pinv.column(i).into_owned();
                if i == j {
                    t.ger(c, &pi, &pi, 1.0);
                } else {
                    let pj = pinv.column(j).into_owned();
                    t.ger(c, &pi, &pj, 1.0);
                    t.ger(c, &pj, &pi, 1.0);
                }
            }
            t
        });
        for a in 0..nvars {
            let (u, _) = b.vars[a];
            for c in a..nvars {
                let (v, trips_v) = &b.vars[c];
                let mut acc = 0.0;
                for &(i, j, co) in trips_v {
                    acc += if i == j {
                        co * ts[a][(i, i)]
                    } else {
                        2.0 * co * ts[a][(i, j)]
                    };
                }
                m[(u, *v)] += acc;
                if u != *v {
                    m[(*v, u)] += acc;
                }
            }
        }
    }
    m
}

impl Kkt {
    fn new(prep: &Prep, scaling: &Scaling) -> Option<Kkt> {
        let m = build_schur(prep, scaling);
        Some(Kkt {
            chol: chol_with_jitter(&m)?,
        })
    }

    /// Solve `[0 Gᵀ; G −H] (ux, uz) = (bx, bz)` with one refinement round.
    fn solve(
        &self,
        prep: &Prep,
        scaling: &Scaling,
        bx: &DVector<f64>,
        bz: &ConePoint,
    ) -> (DVector<f64>, ConePoint) {
        let (mut ux, mut uz) = self.solve_raw(prep, scaling, bx, bz);
        // one round of iterative refinement on the full 2x2 system
        let r1 = bx - g_adjoint(prep, &uz);
        let mut r2 = bz.clone();
        r2.axpy(-1.0, &g_apply(prep, &ux));
        r2.axpy(1.0, &scaling.happly(&uz));
        let (dx, dz) = self.solve_raw(prep, scaling, &r1, &r2);
        ux += dx;
        uz.axpy(1.0, &dz);
        (ux, uz)
    }

    fn solve_raw(
        &self,
        prep: &Prep,
        scaling: &Scaling,
        bx: &DVector<f64>,
        bz: &ConePoint,
    ) -> (DVector<f64>, ConePoint) {
        let rhs = bx + g_adjoint(prep, &scaling.hinv(bz));
        let ux = self.chol.solve(&rhs);
        let mut gz = g_apply(prep, &ux);
        gz.axpy(-1.0, bz);
        let uz = scaling.hinv(&gz);
        (ux, uz)
    }
}

// ---------------------------------------------------------------------------
// main loop

/// Best iterate seen so far, by worst-of-three merit. Returned when the
/// iteration later degrades: near machine precision the Newton system's
/// conditioning grows like `1/μ²` and the homogeneous iterate can drift once
/// complementarity is essentially exact.
struct Snapshot {
    x: DVector<f64>,
    z: ConePoint,
    tau: f64,
    pres: f64,
    dres: f64,
    relgap: f64,
    iter: usize,
    merit: f64,
}

fn solve_inner(
    prog: &ConicProgram,
    settings: &SdpSettings,
    warm: Option<&[f64]>,
) -> Result<SdpOutcome, SolverFailure> {
    prog.validate()?;
    let prep = prepare(prog);
    let h = h_point(&prep);
    let nu = (prep.l + prep.blocks.iter().map(|b| b.dim).sum::<usize>()) as f64;

    let mut x = DVector::zeros(prep.mf);
    let mut s = ConePoint::identity(&prep);
    let mut z = ConePoint::identity(&prep);
    let mut tau = 1.0;
    let mut kappa = 1.0;

    if let Some(y0) = warm {
        for (p, &orig) in prep.free.iter().enumerate() {
            x[p] = y0.get(orig).copied().unwrap_or(0.0);
        }
        // slack at the warm point, pushed strictly inside the cone
        let mut slack = h.clone();
        slack.axpy(-1.0, &g_apply(&prep, &x));
        let floor = 1e-3;
        for v in slack.lin.iter_mut() {
            *v = v.max(floor);
        }
        for m in slack.mats.iter_mut() {
            let eig = m.clone().symmetric_eigen();
            let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
            if min < floor {
                *m += DMatrix::identity(m.nrows(), m.ncols()) * (floor - min);
            }
        }
        s = slack;
    }

    let hnorm = h.norm();
    let cnorm = prep.cobj.norm();
    let mut tiny_steps = 0usize;
    let mut last_step = 1.0;
    let mut mu = (s.dot(&z) + tau * kappa) / (nu + 1.0);
    let mut best: Option<Snapshot> = None;
    let acceptable = settings.tol * 100.0;
    // Badly conditioned programs (e.g. moment matrices over an unnormalized
    // degree-4 basis) hit an f64 accuracy floor well above `tol`; once the
    // iteration has broken down for good, an iterate within √tol is still an
    // answer, and the outcome reports the residuals actually achieved.
    let fallback_tol = acceptable.max(settings.tol.sqrt());
    let mut fail_iter = settings.max_iters;

    'iters: for iter in 0..settings.max_iters {
        // residuals of the embedding
        let rx = g_adjoint(&prep, &z) + &prep.cobj * tau; // want 0
        let mut rz = g_apply(&prep, &x); // want 0
        rz.axpy(1.0, &s);
        rz.axpy(-tau, &h);
        let rtau = prep.cobj.dot(&x) + h.dot(&z) + kappa;
        mu = (s.dot(&z) + tau * kappa) / (nu + 1.0);

        // convergence on the de-homogenized iterate
        let pres = rz.scale(1.0 / tau).norm() / (1.0 + hnorm);
        let dres = rx.norm() / tau / (1.0 + cnorm);
        let pobj = prep.cobj.dot(&x) / tau;
        let gap_abs = s.dot(&z) / (tau * tau);
        let relgap = gap_abs / f64::max(1.0, pobj.abs());
        if std::env::var("WDRO_SDP_TRACE").is_ok() {
            eprintln!(
                "it {iter:3} pobj {:+.6e} pres {:.2e} dres {:.2e} relgap {:+.2e} tau {:.2e} kappa {:.2e} mu {:.2e} step {:.2e}",
                -pobj, pres, dres, relgap, tau, kappa, mu, last_step
            );
        }
        let merit = pres.max(dres).max(relgap);
        if best.as_ref().map_or(true, |b| merit < b.merit) {
            best = Some(Snapshot {
                x: x.clone(),
                z: z.clone(),
                tau,
                pres,
                dres,
                relgap,
                iter,
                merit,
            });
        }
        if merit <= settings.tol {
            return Ok(extract_optimal(
                prog, &prep, &x, &z, tau, iter, pres, dres, relgap,
            ));
        }

        // Certificate checks. Gated on κ keeping pace with τ: on a run that
        // is heading to an optimum κ/τ → 0, and there a noise-level cᵀx < 0
        // or hᵀz < 0 makes `scale` tiny, `xnorm` huge, and the residual test
        // below passes vacuously. Certificate-bound runs keep κ/τ bounded
        // away from zero even when both collapse.
        let cert_side = kappa >= 1e-3 * tau;
        let ctx = prep.cobj.dot(&x);
        if cert_side && ctx < 0.0 {
            let scale = -ctx;
            let xb = &x / scale;
            let mut resid = g_apply(&prep, &xb);
            resid.axpy(1.0, &s.scale(1.0 / scale));
            let xnorm = xb.norm();
            if resid.norm() <= settings.cert_tol * (1.0 + xnorm) {
                return Ok(extract_unbounded(prog, &prep, &x));
            }
        }
        let htz = h.dot(&z);
        if cert_side && htz < 0.0 {
            let scale = -htz;
            let resid = g_adjoint(&prep, &z.scale(1.0 / scale));
            let znorm = z.norm() / scale;
            if resid.norm() <= settings.cert_tol * (1.0 + znorm) {
                return Ok(extract_infeasible(&prep, &z, scale));
            }
        }
        // hard certificate branch once τ has collapsed
        if tau <= settings.cert_ratio * kappa {
            if ctx < 0.0 {
                return Ok(extract_unbounded(prog, &prep, &x));
            }
            if htz < 0.0 {
                return Ok(extract_infeasible(&prep, &z, -htz));
            }
            fail_iter = iter;
            break 'iters;
        }
        // Walked away from a converged iterate: stop and fall back to it.
        // The `acceptable` bound must stay tight here — weakly unbounded
        // programs plateau near a deceptive "optimum" (merit ~√tol) before
        // the iterate escapes and the certificate forms, and those runs have
        // to keep going.
        if let Some(b) = &best {
            if b.merit <= acceptable && merit > 100.0 * b.merit.max(1e-300) {
                fail_iter = iter;
                break 'iters;
            }
        }
        if mu <= 0.0 {
            fail_iter = iter;
            break 'iters;
        }

        let scaling = match nt_scaling(&prep, &s, &z) {
            Some(sc) => sc,
            None => {
                fail_iter = iter;
                break 'iters;
            }
        };
        let kkt = match Kkt::new(&prep, &scaling) {
            Some(k) => k,
            None => {
                fail_iter = iter;
                break 'iters;
            }
        };
        let lambda = scaling.lambda();
        let (x1, z1) = kkt.solve(&prep, &scaling, &(-&prep.cobj), &h);
        let denom = prep.cobj.dot(&x1) + h.dot(&z1) - kappa / tau;

        let direction = |dc: &ConePoint, dtk: f64| -> (DVector<f64>, ConePoint, ConePoint, f64, f64)
        {
            let bx = -&rx;
            let lam_div = scaling.lambda_div(dc);
            let mut bz = rz.scale(-1.0);
            bz.axpy(-1.0, &scaling.wt(&lam_div));
            let (x2, z2) = kkt.solve(&prep, &scaling, &bx, &bz);
            let btau = -rtau;
            let dtau =
                (btau - prep.cobj.dot(&x2) - h.dot(&z2) - dtk / tau) / denom;
            let dx = &x2 + &x1 * dtau;
            let mut dz = z2;
            dz.axpy(dtau, &z1);
            // ds̃ = λ\∘dc − W dz  (scaled); ds = Wᵀ ds̃
            let mut ds_scaled = lam_div.clone();
            ds_scaled.axpy(-1.0, &scaling.w(&dz));
            let dkappa = (dtk - kappa * dtau) / tau;
            (dx, dz, ds_scaled, dtau, dkappa)
        };

        // predictor (affine)
        let mut dc = jordan_mul(&lambda, &lambda).scale(-1.0);
        let dtk = -tau * kappa;
        let (_dx_a, dz_a, ds_scaled_a, dtau_a, dkappa_a) = direction(&dc, dtk);
        let dz_scaled_a = scaling.w(&dz_a);
        let mut alpha_aff = max_step(&scaling, &ds_scaled_a, f64::INFINITY);
        alpha_aff = max_step(&scaling, &dz_scaled_a, alpha_aff);
        if dtau_a < 0.0 {
            alpha_aff = alpha_aff.min(-tau / dtau_a);
        }
        if dkappa_a < 0.0 {
            alpha_aff = alpha_aff.min(-kappa / dkappa_a);
        }
        let alpha_aff = alpha_aff.min(1.0);
        let sigma = (1.0 - alpha_aff).powi(3).clamp(0.0, 1.0);

        // combined: recenter and apply the Mehrotra correction
        let corr = jordan_mul(&ds_scaled_a, &dz_scaled_a);
        dc.axpy(-1.0, &corr);
        dc.lin.add_scalar_mut(sigma * mu);
        for m in dc.mats.iter_mut() {
            let n = m.nrows();
            *m += DMatrix::identity(n, n) * (sigma * mu);
        }
        let dtk = -tau * kappa + sigma * mu - dtau_a * dkappa_a;
        let (dx, dz, ds_scaled, dtau, dkappa) = direction(&dc, dtk);
        let dz_scaled = scaling.w(&dz);
        let mut alpha = max_step(&scaling, &ds_scaled, f64::INFINITY);
        alpha = max_step(&scaling, &dz_scaled, alpha);
        if dtau < 0.0 {
            alpha = alpha.min(-tau / dtau);
        }
        if dkappa < 0.0 {
            alpha = alpha.min(-kappa / dkappa);
        }
        let step = (0.99 * alpha).min(1.0);
        if step < 1e-10 {
            tiny_steps += 1;
            if tiny_steps >= 3 {
                fail_iter = iter;
                break 'iters;
            }
        } else {
            tiny_steps = 0;
        }
        last_step = step;

        x += &dx * step;
        let ds = scaling.wt(&ds_scaled);
        s.axpy(step, &ds);
        z.axpy(step, &dz);
        tau += step * dtau;
        kappa += step * dkappa;
    }

    // fallback: hand back the best stored iterate if it is close enough
    if let Some(b) = best {
        if b.merit <= fallback_tol {
            return Ok(extract_optimal(
                prog, &prep, &b.x, &b.z, b.tau, b.iter, b.pres, b.dres, b.relgap,
            ));
        }
    }
    Err(SolverFailure::NumericalFailure {
        iterations: fail_iter,
        mu,
        step: last_step,
    })
}

fn extract_optimal(
    prog: &ConicProgram,
    prep: &Prep,
    x: &DVector<f64>,
    z: &ConePoint,
    tau: f64,
    iterations: usize,
    pres: f64,
    dres: f64,
    relgap: f64,
) -> SdpOutcome {
    let mut y = vec![0.0; prog.num_vars];
    for &i in &prog.normalized {
        y[i] = 1.0;
    }
    for (p, &orig) in prep.free.iter().enumerate() {
        y[orig] = x[p] / tau;
    }
    let value: f64 = prog
        .objective
        .iter()
        .zip(&y)
        .map(|(c, v)| c * v)
        .sum();
    SdpOutcome::Optimal(SdpSolution {
        y,
        value,
        psd_duals: z.mats.iter().map(|m| m / tau).collect(),
        ineq_duals: z.lin.iter().map(|v| v / tau).collect(),
        residuals: KktResiduals {
            primal: pres,
            dual: dres,
            gap: relgap,
        },
        iterations,
    })
}

fn extract_unbounded(prog: &ConicProgram, prep: &Prep, x: &DVector<f64>) -> SdpOutcome {
    let mut dir = vec![0.0; prog.num_vars];
    for (p, &orig) in prep.free.iter().enumerate() {
        dir[orig] = x[p];
    }
    let norm: f64 = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in dir.iter_mut() {
        *v /= norm;
    }
    let rate: f64 = prog
        .objective
        .iter()
        .zip(&dir)
        .map(|(c, v)| c * v)
        .sum();
    // recession residual: how far the normalized ray leaves the cone
    let xf = DVector::from_iterator(prep.mf, prep.free.iter().map(|&i| dir[i]));
    let mut worst: f64 = 0.0;
    let gx = g_apply(prep, &xf);
    for row in gx.lin.iter() {
        // a·ray = (G ray)_lin must be ≤ 0
        worst = worst.max(*row);
    }
    for m in gx.mats.iter() {
        // block along ray is −(G ray); needs min eigenvalue ≥ 0
        let eig = (-m).symmetric_eigen();
        let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        worst = worst.max(-min);
    }
    SdpOutcome::Unbounded(ImprovingRay {
        direction: dir,
        objective_rate: rate,
        residual: worst,
    })
}

fn extract_infeasible(prep: &Prep, z: &ConePoint, scale: f64) -> SdpOutcome {
    let zb = z.scale(1.0 / scale);
    let residual = g_adjoint(prep, &zb).norm();
    SdpOutcome::Infeasible(InfeasibilityCert {
        psd_rays: zb.mats.clone(),
        ineq_rays: zb.lin.iter().cloned().collect(),
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conic::{LinearIneq, PsdBlock};
    use crate::moments::LocalizerTemplate;
    use crate::polybasis::{MonomialBasis, Polynomial};
    use crate::rng::SplitMix64;
    use std::sync::Arc;

    /// Variables: index 0 pinned to one (carries block constants), 1..=m real.
    fn dense_program(
        objective: Vec<f64>,
        blocks: Vec<(DMatrix<f64>, Vec<DMatrix<f64>>)>,
        ineqs: Vec<(Vec<f64>, f64)>,
    ) -> ConicProgram {
        let m = objective.len();
        let mut obj = vec![0.0; m + 1];
        obj[1..].copy_from_slice(&objective);
        let psd_blocks = blocks
            .into_iter()
            .map(|(c, mats)| {
                let dim = c.nrows();
                let mut upper = Vec::new();
                for i in 0..dim {
                    for j in i..dim {
                        let mut entry = Vec::new();
                        if c[(i, j)] != 0.0 {
                            entry.push((0usize, c[(i, j)]));
                        }
                        for (k, a) in mats.iter().enumerate() {
                            if a[(i, j)] != 0.0 {
                                entry.push((k + 1, a[(i, j)]));
                            }
                        }
                        upper.push(entry);
                    }
                }
                PsdBlock {
                    template: Arc::new(LocalizerTemplate::from_entries(dim, upper).unwrap()),
                    var_offset: 0,
                }
            })
            .collect();
        let linear_ineqs = ineqs
            .into_iter()
            .map(|(coeffs, rhs)| LinearIneq {
                coeffs: coeffs
                    .iter()
                    .enumerate()
                    .filter(|(_, c)| **c != 0.0)
                    .map(|(i, c)| (i + 1, *c))
                    .collect(),
                rhs,
            })
            .collect();
        ConicProgram {
            num_vars: m + 1,
            objective: obj,
            psd_blocks,
            linear_ineqs,
            normalized: vec![0],
        }
    }

    fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
        (m + m.transpose()) * 0.5
    }

    fn min_eig(m: &DMatrix<f64>) -> f64 {
        m.clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn correlation_bound() {
        // max y1 : [[1, y1], [y1, y2]] PSD, y2 <= 1  ->  1 at y = (1, 1)
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let a1 = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let a2 = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]);
        let prog = dense_program(
            vec![1.0, 0.0],
            vec![(c, vec![a1, a2])],
            vec![(vec![0.0, 1.0], 1.0)],
        );
        match solve_sdp(&prog, &SdpSettings::default()).unwrap() {
            SdpOutcome::Optimal(sol) => {
                assert!((sol.value - 1.0).abs() < 1e-6, "value {}", sol.value);
                assert!((sol.y[1] - 1.0).abs() < 1e-5);
                assert!((sol.y[2] - 1.0).abs() < 1e-5);
                assert_eq!(sol.y[0], 1.0);
            }
            other => panic!("expected optimal, got {other:?}"),
        }
    }

    #[test]
    fn diagonal_blocks_reduce_to_lp() {
        // max 2y1 + y2 : y1 <= 0.5, y2 <= 2 expressed as 1x1 PSD blocks
        let b1 = (
            DMatrix::from_row_slice(1, 1, &[0.5]),
            vec![
                DMatrix::from_row_slice(1, 1, &[-1.0]),
                DMatrix::from_row_slice(1, 1, &[0.0]),
            ],
        );
        let b2 = (
            DMatrix::from_row_slice(1, 1, &[2.0]),
            vec![
                DMatrix::from_row_slice(1, 1, &[0.0]),
                DMatrix::from_row_slice(1, 1, &[-1.0]),
            ],
        );
        let prog = dense_program(vec![2.0, 1.0], vec![b1, b2], vec![]);
        match solve_sdp(&prog, &SdpSettings::default()).unwrap() {
            SdpOutcome::Optimal(sol) => {
                assert!((sol.value - 3.0).abs() < 1e-6);
                assert!((sol.y[1] - 0.5).abs() < 1e-6);
                assert!((sol.y[2] - 2.0).abs() < 1e-6);
            }
            other => panic!("expected optimal, got {other:?}"),
        }
    }

    #[test]
    fn random_instances_satisfy_kkt() {
        let mut rng = SplitMix64::new(0xDDA7);
        for rep in 0..30 {
            let m = 2 + rng.index(4);
            let n = 2 + rng.index(3);
            let c = DMatrix::identity(n, n);
            let mats: Vec<DMatrix<f64>> = (0..m)
                .map(|_| {
                    sym(&DMatrix::from_fn(n, n, |_, _| rng.uniform(-1.0, 1.0)))
                })
                .collect();
            let objective: Vec<f64> = (0..m).map(|_| rng.uniform(-1.0, 1.0)).collect();
            // box keeps it bounded; origin is strictly feasible
            let mut ineqs = Vec::new();
            for k in 0..m {
                let mut row = vec![0.0; m];
                row[k] = 1.0;
                ineqs.push((row.clone(), 1.5));
                row[k] = -1.0;
                ineqs.push((row, 1.5));
            }
            let prog = dense_program(objective.clone(), vec![(c.clone(), mats.clone())], ineqs);
            let sol = match solve_sdp(&prog, &SdpSettings::default()).unwrap() {
                SdpOutcome::Optimal(sol) => sol,
                other => panic!("rep {rep}: expected optimal, got {other:?}"),
            };
            assert!(
                sol.residuals.primal < 1e-7
                    && sol.residuals.dual < 1e-7
                    && sol.residuals.gap < 1e-7,
                "rep {rep}: residuals {:?}",
                sol.residuals
            );
            // primal feasibility
            let mut block = c.clone();
            for (k, a) in mats.iter().enumerate() {
                block += a * sol.y[k + 1];
            }
            assert!(min_eig(&block) > -1e-6, "rep {rep}: primal block");
            for k in 0..m {
                assert!(sol.y[k + 1].abs() <= 1.5 + 1e-7, "rep {rep}: box");
            }
            // dual feasibility: g_u = sum_j a_ju * lam_j - <A_u, Z>
            let z = &sol.psd_duals[0];
            assert!(min_eig(z) > -1e-6, "rep {rep}: dual block");
            assert!(sol.ineq_duals.iter().all(|&l| l > -1e-9), "rep {rep}");
            for u in 0..m {
                let mut lhs = 0.0;
                // box rows in insertion order: (+e_k, 1.5), (-e_k, 1.5)
                lhs += sol.ineq_duals[2 * u] - sol.ineq_duals[2 * u + 1];
                let az: f64 = mats[u]
                    .iter()
                    .zip(z.iter())
                    .map(|(a, zz)| a * zz)
                    .sum();
                let resid = (objective[u] - (lhs - az)).abs();
                assert!(resid < 1e-6, "rep {rep}: stationarity {resid}");
            }
            // complementarity
            let bz: f64 = block.iter().zip(z.iter()).map(|(a, b)| a * b).sum();
            assert!(bz.abs() < 1e-5, "rep {rep}: <B,Z> = {bz}");
        }
    }

    #[test]
    fn warm_start_agrees_with_cold() {
        let mut rng = SplitMix64::new(7_407);
        for rep in 0..8 {
            let m = 3;
            let n = 3;
            let c = DMatrix::identity(n, n);
            let mats: Vec<DMatrix<f64>> = (0..m)
                .map(|_| sym(&DMatrix::from_fn(n, n, |_, _| rng.uniform(-1.0, 1.0))))
                .collect();
            let objective: Vec<f64> = (0..m).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let mut ineqs = Vec::new();
            for k in 0..m {
                let mut row = vec![0.0; m];
                row[k] = 1.0;
                ineqs.push((row.clone(), 1.0));
                row[k] = -1.0;
                ineqs.push((row, 1.0));
            }
            let prog = dense_program(objective, vec![(c, mats)], ineqs);
            let cold = match solve_sdp(&prog, &SdpSettings::default()).unwrap() {
                SdpOutcome::Optimal(sol) => sol,
                other => panic!("rep {rep}: {other:?}"),
            };
            let warm = match solve_sdp_warm(&prog, &SdpSettings::default(), &cold.y).unwrap() {
                SdpOutcome::Optimal(sol) => sol,
                other => panic!("rep {rep}: warm {other:?}"),
            };
            assert!(
                (warm.value - cold.value).abs() < 1e-6 * (1.0 + cold.value.abs()),
                "rep {rep}: {} vs {}",
                warm.value,
                cold.value
            );
        }
    }

    #[test]
    fn moment_program_first_moment_on_interval() {
        // sup E[x] over probability measures on [-1, 1], orders 1 and 2
        for k in 1u32..=2 {
            let basis = Arc::new(MonomialBasis::new(1, 2 * k));
            let x = Polynomial::variable(1, 0);
            let q = Polynomial::constant(1, 1.0).sub(&x.mul(&x));
            let moment = LocalizerTemplate::new(&Polynomial::constant(1, 1.0), &basis, k).unwrap();
            let loc = LocalizerTemplate::new(&q, &basis, k).unwrap();
            let mut objective = vec![0.0; basis.len()];
            objective[basis.index_of(&crate::polybasis::MultiIndex(vec![1])).unwrap()] = 1.0;
            let prog = ConicProgram {
                num_vars: basis.len(),
                objective,
                psd_blocks: vec![
                    PsdBlock {
                        template: Arc::new(moment),
                        var_offset: 0,
                    },
                    PsdBlock {
                        template: Arc::new(loc),
                        var_offset: 0,
                    },
                ],
                linear_ineqs: vec![],
                normalized: vec![0],
            };
            match solve_sdp(&prog, &SdpSettings::default()).unwrap() {
                SdpOutcome::Optimal(sol) => {
                    assert!(
                        (sol.value - 1.0).abs() < 1e-5,
                        "order {k}: value {}",
                        sol.value
                    );
                }
                other => panic!("order {k}: {other:?}"),
            }
        }
    }

    #[test]
    fn moment_program_cross_moment_on_box() {
        // sup E[x1 x2] on [-1,1]^2 = 1 (point mass at (1,1))
        let basis = Arc::new(MonomialBasis::new(2, 2));
        let x1 = Polynomial::variable(2, 0);
        let x2 = Polynomial::variable(2, 1);
        let one = Polynomial::constant(2, 1.0);
        let moment = LocalizerTemplate::new(&one, &basis, 1).unwrap();
        let loc1 = LocalizerTemplate::new(&one.sub(&x1.mul(&x1)), &basis, 1).unwrap();
        let loc2 = LocalizerTemplate::new(&one.sub(&x2.mul(&x2)), &basis, 1).unwrap();
        let mut objective = vec![0.0; basis.len()];
        objective[basis
            .index_of(&crate::polybasis::MultiIndex(vec![1, 1]))
            .unwrap()] = 1.0;
        let prog = ConicProgram {
            num_vars: basis.len(),
            objective,
            psd_blocks: [moment, loc1, loc2]
                .into_iter()
                .map(|t| PsdBlock {
                    template: Arc::new(t),
                    var_offset: 0,
                })
                .collect(),
            linear_ineqs: vec![],
            normalized: vec![0],
        };
        match solve_sdp(&prog, &SdpSettings::default()).unwrap() {
            SdpOutcome::Optimal(sol) => {
                assert!((sol.value - 1.0).abs() < 1e-5, "value {}", sol.value);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn detects_unbounded_moment_program() {
        // sup E[x] over measures on [0, inf): unbounded
        let basis = Arc::new(MonomialBasis::new(1, 2));
        let x = Polynomial::variable(1, 0);
        let moment = LocalizerTemplate::new(&Polynomial::constant(1, 1.0), &basis, 1).unwrap();
        let loc = LocalizerTemplate::new(&x, &basis, 1).unwrap();
        let mut objective = vec![0.0; basis.len()];
        objective[1] = 1.0;
        let prog = ConicProgram {
            num_vars: basis.len(),
            objective,
            psd_blocks: [moment, loc]
                .into_iter()
                .map(|t| PsdBlock {
                    template: Arc::new(t),
                    var_offset: 0,
                })
                .collect(),
            linear_ineqs: vec![],
            normalized: vec![0],
        };
        match solve_sdp(&prog, &SdpSettings::default()).unwrap() {
            SdpOutcome::Unbounded(ray) => {
                assert!(ray.objective_rate > 1e-6, "rate {}", ray.objective_rate);
                assert!(ray.residual < 1e-5, "residual {}", ray.residual);
                assert!(ray.direction[0].abs() < 1e-7, "mass component moves");
                let norm: f64 = ray.direction.iter().map(|v| v * v).sum::<f64>();
                assert!((norm - 1.0).abs() < 1e-9);
            }
            other => panic!("expected unbounded, got {other:?}"),
        }
    }

    #[test]
    fn detects_infeasible_program() {
        // y >= 1 (1x1 block) against y <= 0
        let c = DMatrix::from_row_slice(1, 1, &[-1.0]);
        let a = DMatrix::from_row_slice(1, 1, &[1.0]);
        let prog = dense_program(vec![1.0], vec![(c, vec![a])], vec![(vec![1.0], 0.0)]);
        match solve_sdp(&prog, &SdpSettings::default()).unwrap() {
            SdpOutcome::Infeasible(cert) => {
                assert!(cert.residual < 1e-5);
                assert!(cert.psd_rays[0][(0, 0)] > 0.0);
                assert!(cert.ineq_rays[0] > 0.0);
            }
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn rejects_malformed_program() {
        let c = DMatrix::from_row_slice(1, 1, &[1.0]);
        let a = DMatrix::from_row_slice(1, 1, &[1.0]);
        let mut prog = dense_program(vec![1.0], vec![(c, vec![a])], vec![]);
        prog.objective.pop();
        assert!(matches!(
            solve_sdp(&prog, &SdpSettings::default()),
            Err(SolverFailure::BadProgram { .. })
        ));
    }
}
