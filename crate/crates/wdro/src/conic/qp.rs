//! Euclidean projection onto a polyhedron `{z : A z ≤ b}` by an alternating
//! active-set scheme.
//!
//! Each pass projects onto the affine hull of the current working set by
//! solving the normal equations `A_S A_Sᵀ μ = A_S t − b_S` (pseudo-inverse,
//! so rank-deficient sets are tolerated), drops the most negative
//! multiplier, then re-adds the most violated constraint. Termination with
//! nonnegative multipliers and no violation is a KKT point, which for this
//! strictly convex objective is the projection. The iteration cap guards the
//! rare cycling case; callers fall back to a linear master problem when the
//! cap trips.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("projection active-set did not settle after {0} passes")]
    IterationLimit(usize),
    #[error("malformed projection input: {0}")]
    BadInput(String),
}

const FEAS_TOL: f64 = 1e-9;
const MULT_TOL: f64 = 1e-10;

pub fn project_polyhedron(
    target: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Result<DVector<f64>, QpError> {
    let m = a.nrows();
    let n = a.ncols();
    if target.len() != n {
        return Err(QpError::BadInput(format!(
            "target has length {}, constraints have {} columns",
            target.len(),
            n
        )));
    }
    if b.len() != m {
        return Err(QpError::BadInput(format!(
            "rhs has length {}, constraints have {} rows",
            b.len(),
            m
        )));
    }

    let violation = |z: &DVector<f64>| -> Option<(usize, f64)> {
        let mut worst: Option<(usize, f64)> = None;
        for r in 0..m {
            let v = a.row(r).transpose().dot(z) - b[r];
            let tol = FEAS_TOL * (1.0 + b[r].abs());
            if v > tol && worst.map_or(true, |(_, wv)| v > wv) {
                worst = Some((r, v));
            }
        }
        worst
    };

    let mut active: Vec<usize> = Vec::new();
    let cap = 12 * (m + 1);
    for _ in 0..cap {
        let z;
        let mu;
        if active.is_empty() {
            z = target.clone();
            mu = DVector::zeros(0);
        } else {
            let k = active.len();
            let mut asub = DMatrix::zeros(k, n);
            let mut bsub = DVector::zeros(k);
            for (i, &r) in active.iter().enumerate() {
                asub.row_mut(i).copy_from(&a.row(r));
                bsub[i] = b[r];
            }
            let gram = &asub * asub.transpose();
            let rhs = &asub * target - bsub;
            let svd = gram.svd(true, true);
            mu = svd
                .solve(&rhs, 1e-12)
                .map_err(|e| QpError::BadInput(e.to_string()))?;
            z = target - asub.transpose() * &mu;
        }
        if let Some((pos, _)) = mu
            .iter()
            .enumerate()
            .filter(|(_, &v)| v < -MULT_TOL)
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        {
            active.remove(pos);
            continue;
        }
        match violation(&z) {
            Some((r, _)) if !active.contains(&r) => active.push(r),
            Some(_) => {
                // the violated row is already in the working set: the normal
                // equations were rank-deficient in an unhelpful way; give up
                return Err(QpError::IterationLimit(cap));
            }
            None => return Ok(z),
        }
    }
    Err(QpError::IterationLimit(cap))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn dv(data: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(data)
    }

    #[test]
    fn interior_point_is_fixed() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let b = dv(&[1.0, 1.0]);
        let t = dv(&[0.2, -0.3]);
        let z = project_polyhedron(&t, &a, &b).unwrap();
        assert!((z - t).amax() < 1e-12);
    }

    #[test]
    fn projects_onto_halfplane() {
        // x + y ≤ 1, target (1,1) → (0.5, 0.5)
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let b = dv(&[1.0]);
        let z = project_polyhedron(&dv(&[1.0, 1.0]), &a, &b).unwrap();
        assert!((z[0] - 0.5).abs() < 1e-10);
        assert!((z[1] - 0.5).abs() < 1e-10);
    }

    #[test]
    fn projects_onto_box_corner() {
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
        let b = dv(&[1.0, 1.0, 1.0, 1.0]);
        let z = project_polyhedron(&dv(&[3.0, -2.5]), &a, &b).unwrap();
        assert!((z[0] - 1.0).abs() < 1e-10);
        assert!((z[1] + 1.0).abs() < 1e-10);
    }

    #[test]
    fn matches_dense_grid_on_random_polygons() {
        let mut rng = SplitMix64::new(20_240_331);
        for rep in 0..30 {
            // box plus random cuts that keep the origin feasible
            let mut rows = vec![1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0];
            let mut rhs = vec![1.0, 1.0, 1.0, 1.0];
            for _ in 0..3 {
                rows.push(rng.uniform(-1.0, 1.0));
                rows.push(rng.uniform(-1.0, 1.0));
                rhs.push(rng.uniform(0.1, 1.0));
            }
            let m = rhs.len();
            let a = DMatrix::from_row_slice(m, 2, &rows);
            let b = dv(&rhs);
            let t = dv(&[rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0)]);
            let z = project_polyhedron(&t, &a, &b).unwrap();
            // feasibility
            let slack = &b - &a * &z;
            assert!(slack.iter().all(|&v| v > -1e-8), "rep {rep}");
            // no feasible grid point gets closer
            let d_z = (&z - &t).norm_squared();
            let steps = 160;
            for gi in 0..=steps {
                for gj in 0..=steps {
                    let p = dv(&[
                        -1.0 + 2.0 * gi as f64 / steps as f64,
                        -1.0 + 2.0 * gj as f64 / steps as f64,
                    ]);
                    if (&b - &a * &p).iter().all(|&v| v >= 0.0) {
                        let d_p = (&p - &t).norm_squared();
                        assert!(
                            d_p > d_z - 1e-6,
                            "rep {rep}: grid point closer ({d_p} vs {d_z})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn kkt_certificate_on_random_instances() {
        let mut rng = SplitMix64::new(44_100);
        for rep in 0..60 {
            let n = 2 + rng.index(3);
            let m = 3 + rng.index(5);
            let mut rows = Vec::new();
            let mut rhs = Vec::new();
            for _ in 0..m {
                for _ in 0..n {
                    rows.push(rng.uniform(-1.0, 1.0));
                }
                rhs.push(rng.uniform(0.05, 1.0));
            }
            let a = DMatrix::from_row_slice(m, n, &rows);
            let b = dv(&rhs);
            let t = DVector::from_fn(n, |_, _| rng.uniform(-1.5, 1.5));
            let z = match project_polyhedron(&t, &a, &b) {
                Ok(z) => z,
                Err(QpError::IterationLimit(_)) => continue,
                Err(e) => panic!("rep {rep}: {e}"),
            };
            let slack = &b - &a * &z;
            assert!(slack.iter().all(|&v| v > -1e-7), "rep {rep}");
            // t − z must lie in the span of active outward normals
            let diff = &t - &z;
            if diff.amax() < 1e-10 {
                continue;
            }
            let act: Vec<usize> = (0..m).filter(|&r| slack[r] < 1e-6).collect();
            assert!(!act.is_empty(), "rep {rep}: moved with nothing active");
            let mut asub = DMatrix::zeros(act.len(), n);
            for (i, &r) in act.iter().enumerate() {
                asub.row_mut(i).copy_from(&a.row(r));
            }
            let gram = &asub * asub.transpose();
            let rhs2 = &asub * &diff;
            let mu = gram.svd(true, true).solve(&rhs2, 1e-12).unwrap();
            let recon = asub.transpose() * &mu;
            assert!(
                (recon - &diff).amax() < 1e-6,
                "rep {rep}: t−z outside active normal span"
            );
        }
    }
}
