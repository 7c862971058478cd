//! Two-phase revised simplex for dense linear programs.
//!
//! Public form: minimize `cᵀx` over free `x` subject to `A_ub x ≤ b_ub` and
//! `A_eq x = b_eq`. Internally each free variable is split into a positive
//! and negative part, slacks turn inequalities into equalities, and phase one
//! drives a full artificial basis to zero. Bland's rule everywhere: slower
//! than steepest-edge but immune to cycling, which matters more here — these
//! programs are small and frequently degenerate (bundle master problems,
//! recourse evaluations).

use nalgebra::{DMatrix, DVector};

use super::SolverFailure;

const EPS_COST: f64 = 1e-9;
const EPS_PIVOT: f64 = 1e-11;

#[derive(Clone, Debug)]
pub struct LinearProgram {
    pub minimize: DVector<f64>,
    pub a_ub: DMatrix<f64>,
    pub b_ub: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
}

impl LinearProgram {
    /// Inequality-only program `min cᵀx : A x ≤ b`.
    pub fn inequality(minimize: DVector<f64>, a_ub: DMatrix<f64>, b_ub: DVector<f64>) -> Self {
        let n = minimize.len();
        LinearProgram {
            minimize,
            a_ub,
            b_ub,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LpSolution {
    pub x: DVector<f64>,
    pub value: f64,
    /// multipliers with `c + A_ubᵀ·duals_ub + A_eqᵀ·duals_eq = 0`, `duals_ub ≥ 0`
    pub duals_ub: DVector<f64>,
    pub duals_eq: DVector<f64>,
    /// optimal basis as standard-form column indices
    pub basis: Vec<usize>,
}

#[derive(Clone, Debug)]
pub enum LpOutcome {
    Optimal(LpSolution),
    /// feasible direction with `cᵀray < 0`; `objective_rate = cᵀray`
    Unbounded {
        ray: DVector<f64>,
        objective_rate: f64,
    },
    /// smallest attainable total constraint violation (phase-one optimum)
    Infeasible { residual: f64 },
}

struct Standard {
    /// m × ncols equality system, rhs ≥ 0 after row normalization
    a: DMatrix<f64>,
    b: DVector<f64>,
    /// phase-two costs for real columns
    cost: DVector<f64>,
    ncols: usize,
    /// row signs applied during normalization (per original row order: ub then eq)
    row_sign: Vec<f64>,
    n: usize,
    n_ub: usize,
}

fn standardize(lp: &LinearProgram) -> Result<Standard, SolverFailure> {
    let n = lp.minimize.len();
    let n_ub = lp.b_ub.len();
    let n_eq = lp.b_eq.len();
    if lp.a_ub.ncols() != n && n_ub > 0 || lp.a_eq.ncols() != n && n_eq > 0 {
        return Err(SolverFailure::BadProgram {
            message: "constraint matrix width does not match objective length".into(),
        });
    }
    if lp.a_ub.nrows() != n_ub || lp.a_eq.nrows() != n_eq {
        return Err(SolverFailure::BadProgram {
            message: "right-hand side length does not match constraint rows".into(),
        });
    }
    let m = n_ub + n_eq;
    let ncols = 2 * n + n_ub;
    let mut a = DMatrix::zeros(m, ncols);
    let mut b = DVector::zeros(m);
    let mut row_sign = vec![1.0; m];
    for r in 0..n_ub {
        for j in 0..n {
            a[(r, j)] = lp.a_ub[(r, j)];
            a[(r, n + j)] = -lp.a_ub[(r, j)];
        }
        a[(r, 2 * n + r)] = 1.0;
        b[r] = lp.b_ub[r];
    }
    for r in 0..n_eq {
        for j in 0..n {
            a[(n_ub + r, j)] = lp.a_eq[(r, j)];
            a[(n_ub + r, n + j)] = -lp.a_eq[(r, j)];
        }
        b[n_ub + r] = lp.b_eq[r];
    }
    for r in 0..m {
        if b[r] < 0.0 {
            b[r] = -b[r];
            row_sign[r] = -1.0;
            for j in 0..ncols {
                a[(r, j)] = -a[(r, j)];
            }
        }
    }
    let mut cost = DVector::zeros(ncols);
    for j in 0..n {
        cost[j] = lp.minimize[j];
        cost[n + j] = -lp.minimize[j];
    }
    Ok(Standard {
        a,
        b,
        cost,
        ncols,
        row_sign,
        n,
        n_ub,
    })
}

struct Tableau<'a> {
    std: &'a Standard,
    /// basis column indices; `ncols + r` denotes the artificial of row r
    basis: Vec<usize>,
    /// maintained inverse of the basis matrix, eta-updated on each pivot
    binv: DMatrix<f64>,
    stale_pivots: usize,
    /// pivots between full refactorizations; 1 keeps the inverse exact
    refactor_every: usize,
}

impl Tableau<'_> {
    fn column(&self, j: usize) -> DVector<f64> {
        if j >= self.std.ncols {
            let mut e = DVector::zeros(self.std.b.len());
            e[j - self.std.ncols] = 1.0;
            e
        } else {
            self.std.a.column(j).into_owned()
        }
    }

    fn refactor(&mut self) -> Result<(), SolverFailure> {
        let m = self.std.b.len();
        if m == 0 {
            self.binv = DMatrix::zeros(0, 0);
            return Ok(());
        }
        let mut bm = DMatrix::zeros(m, m);
        for (k, &j) in self.basis.iter().enumerate() {
            bm.set_column(k, &self.column(j));
        }
        self.binv = bm.try_inverse().ok_or(SolverFailure::SingularBasis)?;
        self.stale_pivots = 0;
        Ok(())
    }

    /// Replace the basic column of row `i` by column `e`, given the current
    /// direction `d = binv · column(e)`; the inverse is updated in place.
    fn pivot(&mut self, i: usize, e: usize, d: &DVector<f64>) -> Result<(), SolverFailure> {
        let m = self.std.b.len();
        let piv = d[i];
        let row_i = self.binv.row(i).into_owned() / piv;
        for r in 0..m {
            if r != i {
                let f = d[r];
                if f != 0.0 {
                    let update = &row_i * f;
                    let mut row_r = self.binv.row_mut(r);
                    row_r -= update;
                }
            }
        }
        self.binv.row_mut(i).copy_from(&row_i);
        self.basis[i] = e;
        self.stale_pivots += 1;
        if self.stale_pivots >= self.refactor_every {
            self.refactor()?;
        }
        Ok(())
    }

    /// Bland-rule simplex on the given costs. `allow` filters candidate
    /// entering columns. Returns the basic solution or an unbounded direction
    /// (entering column index).
    fn run(
        &mut self,
        costs: &dyn Fn(usize) -> f64,
        allow: &dyn Fn(usize) -> bool,
        max_iters: usize,
    ) -> Result<SimplexEnd, SolverFailure> {
        let m = self.std.b.len();
        let mut in_basis = vec![false; self.std.ncols + m];
        for &j in &self.basis {
            in_basis[j] = true;
        }
        for _ in 0..max_iters {
            let xb = &self.binv * &self.std.b;
            let cb = DVector::from_iterator(m, self.basis.iter().map(|&j| costs(j)));
            let y = self.binv.transpose() * cb;
            let mut entering = None;
            for j in 0..self.std.ncols {
                if !allow(j) || in_basis[j] {
                    continue;
                }
                let reduced = costs(j) - y.dot(&self.std.a.column(j));
                if reduced < -EPS_COST {
                    entering = Some(j);
                    break;
                }
            }
            let e = match entering {
                Some(e) => e,
                None => return Ok(SimplexEnd::Optimal),
            };
            let d = &self.binv * self.column(e);
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..m {
                if d[i] > EPS_PIVOT {
                    let ratio = xb[i] / d[i];
                    let better = match leave {
                        None => true,
                        Some((li, lr)) => {
                            ratio < lr - 1e-12
                                || (ratio <= lr + 1e-12 && self.basis[i] < self.basis[li])
                        }
                    };
                    if better {
                        leave = Some((i, ratio));
                    }
                }
            }
            match leave {
                Some((i, _)) => {
                    // a tiny pivot on a stale inverse invites drift; refresh
                    // and redo the step from exact data
                    if d[i].abs() < 1e-7 && self.stale_pivots > 0 {
                        self.refactor()?;
                        continue;
                    }
                    in_basis[self.basis[i]] = false;
                    in_basis[e] = true;
                    let tiny = d[i].abs() < 1e-7;
                    self.pivot(i, e, &d)?;
                    if tiny {
                        // the update divided by a near-zero element; rebuild
                        self.refactor()?;
                    }
                }
                None => {
                    // confirm against an exact inverse before declaring a ray
                    if self.stale_pivots > 0 {
                        self.refactor()?;
                        continue;
                    }
                    return Ok(SimplexEnd::Unbounded { entering: e });
                }
            }
        }
        Err(SolverFailure::IterationLimit {
            iterations: max_iters,
        })
    }
}

enum SimplexEnd {
    Optimal,
    Unbounded { entering: usize },
}

pub fn solve_lp(lp: &LinearProgram) -> Result<LpOutcome, SolverFailure> {
    // fast path: eta-updated inverse, refactored every 64 pivots; heavily
    // degenerate instances can drift into a dependent basis, and those redo
    // the solve with an exact inverse at every pivot
    match solve_with(lp, 64) {
        Err(SolverFailure::SingularBasis) => solve_with(lp, 1),
        other => other,
    }
}

fn solve_with(lp: &LinearProgram, refactor_every: usize) -> Result<LpOutcome, SolverFailure> {
    let std = standardize(lp)?;
    let m = std.b.len();
    let cap = 50 * (std.ncols + m + 1);

    // non-flipped inequality rows keep slack coefficient +1 and b ≥ 0, so
    // their slacks form a feasible start; only the rest need artificials
    let basis: Vec<usize> = (0..m)
        .map(|r| {
            if r < std.n_ub && std.row_sign[r] > 0.0 {
                2 * std.n + r
            } else {
                std.ncols + r
            }
        })
        .collect();
    let mut tab = Tableau {
        std: &std,
        basis,
        // every starting column is a unit vector, so the basis matrix is I
        binv: DMatrix::identity(m, m),
        stale_pivots: 0,
        refactor_every: refactor_every.max(1),
    };

    // phase one: minimize artificial mass
    let art_cost = |j: usize| if j >= std.ncols { 1.0 } else { 0.0 };
    match tab.run(&art_cost, &|_| true, cap)? {
        SimplexEnd::Optimal => {}
        SimplexEnd::Unbounded { .. } => {
            // phase-one objective is bounded below by zero
            return Err(SolverFailure::SingularBasis);
        }
    }
    tab.refactor()?;
    let xb = &tab.binv * &std.b;
    let infeas: f64 = tab
        .basis
        .iter()
        .zip(xb.iter())
        .filter(|(&j, _)| j >= std.ncols)
        .map(|(_, &v)| v.max(0.0))
        .sum();
    if infeas > 1e-8 * (1.0 + std.b.amax()) {
        return Ok(LpOutcome::Infeasible { residual: infeas });
    }

    // drive leftover artificials out; rows that resist are redundant and the
    // artificial stays basic at zero, barred from re-entering
    for i in 0..m {
        if tab.basis[i] < std.ncols {
            continue;
        }
        let row = tab.binv.row(i).into_owned();
        for j in 0..std.ncols {
            if tab.basis.contains(&j) {
                continue;
            }
            let dot = (&row * std.a.column(j))[(0, 0)];
            if dot.abs() > 1e-9 {
                let d = &tab.binv * tab.column(j);
                tab.pivot(i, j, &d)?;
                // pivots here may sit near the tolerance; keep the inverse exact
                tab.refactor()?;
                break;
            }
        }
    }

    // phase two: artificial columns are frozen out of the entering set
    let real_cost = |j: usize| if j >= std.ncols { 0.0 } else { std.cost[j] };
    let end = tab.run(&real_cost, &|j| j < std.ncols, cap)?;

    tab.refactor()?;
    let binv = tab.binv.clone();
    let xb = &binv * &std.b;
    match end {
        SimplexEnd::Optimal => {
            let mut xstd = DVector::zeros(std.ncols);
            for (k, &j) in tab.basis.iter().enumerate() {
                if j < std.ncols {
                    xstd[j] = xb[k];
                }
            }
            let mut x = DVector::zeros(std.n);
            for j in 0..std.n {
                x[j] = xstd[j] - xstd[std.n + j];
            }
            let value = lp.minimize.dot(&x);
            let cb = DVector::from_iterator(m, tab.basis.iter().map(|&j| real_cost(j)));
            let y = binv.transpose() * cb;
            // stationarity multipliers in the caller's row order and signs
            let mut duals_ub = DVector::zeros(std.n_ub);
            let mut duals_eq = DVector::zeros(m - std.n_ub);
            for r in 0..m {
                let v = -std.row_sign[r] * y[r];
                if r < std.n_ub {
                    duals_ub[r] = v;
                } else {
                    duals_eq[r - std.n_ub] = v;
                }
            }
            for v in duals_ub.iter_mut() {
                if *v < 0.0 && *v > -1e-7 {
                    *v = 0.0;
                }
            }
            Ok(LpOutcome::Optimal(LpSolution {
                x,
                value,
                duals_ub,
                duals_eq,
                basis: tab.basis.clone(),
            }))
        }
        SimplexEnd::Unbounded { entering } => {
            let d = &binv * tab.column(entering);
            let mut ray_std = DVector::zeros(std.ncols);
            ray_std[entering] = 1.0;
            for (k, &j) in tab.basis.iter().enumerate() {
                if j < std.ncols {
                    ray_std[j] = -d[k];
                }
            }
            let mut ray = DVector::zeros(std.n);
            for j in 0..std.n {
                ray[j] = ray_std[j] - ray_std[std.n + j];
            }
            let rate = lp.minimize.dot(&ray);
            Ok(LpOutcome::Unbounded {
                ray,
                objective_rate: rate,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn dm(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, data)
    }

    fn dv(data: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(data)
    }

    #[test]
    fn two_var_vertex() {
        // min −x−y : x+y ≤ 1, x ≤ 0.7, −x ≤ 0, −y ≤ 0  → (0.7, 0.3), value −1
        let lp = LinearProgram::inequality(
            dv(&[-1.0, -1.0]),
            dm(4, 2, &[1.0, 1.0, 1.0, 0.0, -1.0, 0.0, 0.0, -1.0]),
            dv(&[1.0, 0.7, 0.0, 0.0]),
        );
        match solve_lp(&lp).unwrap() {
            LpOutcome::Optimal(sol) => {
                assert!((sol.value + 1.0).abs() < 1e-9);
                assert!((sol.x[0] - 0.7).abs() < 1e-9);
                assert!((sol.x[1] - 0.3).abs() < 1e-9);
            }
            other => panic!("expected optimal, got {other:?}"),
        }
    }

    #[test]
    fn equality_and_free_sign() {
        // min x1 − x2 : x1 + x2 = 2, x2 ≤ 3 → x2 = 3, x1 = −1, value −4
        let lp = LinearProgram {
            minimize: dv(&[1.0, -1.0]),
            a_ub: dm(1, 2, &[0.0, 1.0]),
            b_ub: dv(&[3.0]),
            a_eq: dm(1, 2, &[1.0, 1.0]),
            b_eq: dv(&[2.0]),
        };
        match solve_lp(&lp).unwrap() {
            LpOutcome::Optimal(sol) => {
                assert!((sol.value + 4.0).abs() < 1e-9);
                assert!((sol.x[0] + 1.0).abs() < 1e-9);
                assert!((sol.x[1] - 3.0).abs() < 1e-9);
            }
            other => panic!("expected optimal, got {other:?}"),
        }
    }

    #[test]
    fn detects_unbounded() {
        // min −x : −x ≤ 0 → x → ∞
        let lp = LinearProgram::inequality(dv(&[-1.0]), dm(1, 1, &[-1.0]), dv(&[0.0]));
        match solve_lp(&lp).unwrap() {
            LpOutcome::Unbounded {
                ray,
                objective_rate,
            } => {
                assert!(ray[0] > 0.0);
                assert!(objective_rate < 0.0);
            }
            other => panic!("expected unbounded, got {other:?}"),
        }
    }

    #[test]
    fn detects_infeasible() {
        // x ≤ −1, −x ≤ −1 → x ≤ −1 and x ≥ 1
        let lp = LinearProgram::inequality(
            dv(&[1.0]),
            dm(2, 1, &[1.0, -1.0]),
            dv(&[-1.0, -1.0]),
        );
        match solve_lp(&lp).unwrap() {
            LpOutcome::Infeasible { residual } => assert!(residual > 0.5),
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn redundant_rows_are_harmless() {
        // duplicated equality plus an implied inequality
        let lp = LinearProgram {
            minimize: dv(&[1.0, 1.0]),
            a_ub: dm(1, 2, &[1.0, 1.0]),
            b_ub: dv(&[2.0]),
            a_eq: dm(2, 2, &[1.0, 1.0, 2.0, 2.0]),
            b_eq: dv(&[2.0, 4.0]),
        };
        match solve_lp(&lp).unwrap() {
            LpOutcome::Optimal(sol) => {
                assert!((sol.value - 2.0).abs() < 1e-9);
                assert!((sol.x[0] + sol.x[1] - 2.0).abs() < 1e-9);
            }
            other => panic!("expected optimal, got {other:?}"),
        }
    }

    #[test]
    fn duals_satisfy_stationarity() {
        let mut rng = SplitMix64::new(775_577);
        for rep in 0..40 {
            let n = 2 + rng.index(3);
            let m_ub = 2 + rng.index(4);
            // bounded feasible region: box plus random cuts through the box
            let mut rows = Vec::new();
            let mut rhs = Vec::new();
            for j in 0..n {
                let mut lo = vec![0.0; n];
                lo[j] = -1.0;
                rows.extend_from_slice(&lo);
                rhs.push(1.0);
                let mut hi = vec![0.0; n];
                hi[j] = 1.0;
                rows.extend_from_slice(&hi);
                rhs.push(1.0);
            }
            for _ in 0..m_ub {
                for _ in 0..n {
                    rows.push(rng.uniform(-1.0, 1.0));
                }
                rhs.push(rng.uniform(0.3, 1.5));
            }
            let a = dm(rhs.len(), n, &rows);
            let b = dv(&rhs);
            let c = DVector::from_fn(n, |_, _| rng.uniform(-1.0, 1.0));
            let lp = LinearProgram::inequality(c.clone(), a.clone(), b.clone());
            let sol = match solve_lp(&lp).unwrap() {
                LpOutcome::Optimal(sol) => sol,
                other => panic!("rep {rep}: expected optimal, got {other:?}"),
            };
            // primal feasibility
            let slack = &b - &a * &sol.x;
            assert!(
                slack.iter().all(|&v| v > -1e-8),
                "rep {rep}: infeasible primal"
            );
            // stationarity c + Aᵀλ = 0 and λ ≥ 0
            let grad = &c + a.transpose() * &sol.duals_ub;
            assert!(
                grad.amax() < 1e-7,
                "rep {rep}: stationarity residual {}",
                grad.amax()
            );
            assert!(sol.duals_ub.iter().all(|&v| v >= 0.0));
            // complementary slackness
            for (sl, du) in slack.iter().zip(sol.duals_ub.iter()) {
                assert!(sl * du < 1e-6, "rep {rep}: slack {sl} dual {du}");
            }
        }
    }

    #[test]
    fn matches_enumerated_vertices() {
        // brute-force check on random bounded 2-var programs
        let mut rng = SplitMix64::new(991);
        for rep in 0..60 {
            let mut rows = vec![
                -1.0, 0.0, //
                1.0, 0.0, //
                0.0, -1.0, //
                0.0, 1.0,
            ];
            let mut rhs = vec![1.0, 1.0, 1.0, 1.0];
            for _ in 0..3 {
                rows.push(rng.uniform(-1.0, 1.0));
                rows.push(rng.uniform(-1.0, 1.0));
                rhs.push(rng.uniform(0.2, 1.2));
            }
            let m = rhs.len();
            let a = dm(m, 2, &rows);
            let b = dv(&rhs);
            let c = DVector::from_fn(2, |_, _| rng.uniform(-1.0, 1.0));
            let lp = LinearProgram::inequality(c.clone(), a.clone(), b.clone());
            let sol = match solve_lp(&lp).unwrap() {
                LpOutcome::Optimal(sol) => sol,
                other => panic!("rep {rep}: {other:?}"),
            };
            // enumerate vertices of pairwise row intersections
            let mut best = f64::INFINITY;
            for i in 0..m {
                for j in (i + 1)..m {
                    let det = a[(i, 0)] * a[(j, 1)] - a[(i, 1)] * a[(j, 0)];
                    if det.abs() < 1e-9 {
                        continue;
                    }
                    let x0 = (b[i] * a[(j, 1)] - a[(i, 1)] * b[j]) / det;
                    let x1 = (a[(i, 0)] * b[j] - b[i] * a[(j, 0)]) / det;
                    let pt = dv(&[x0, x1]);
                    let feas = (&b - &a * &pt).iter().all(|&v| v > -1e-8);
                    if feas {
                        best = best.min(c.dot(&pt));
                    }
                }
            }
            assert!(
                (sol.value - best).abs() < 1e-6,
                "rep {rep}: simplex {} vs vertices {best}",
                sol.value
            );
        }
    }
}
