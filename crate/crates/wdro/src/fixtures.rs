//! Worked instances with known closed forms or provable pathologies, shared
//! by the test suites and the command-line verifier.
//!
//! All three have a singleton decision box, so solving them is a pure
//! evaluation at `x = 0`; the interest is entirely in the inner relaxations.

use nalgebra::DMatrix;

use crate::polybasis::Polynomial;
use crate::relax::{DecisionBox, SingleStageInstance, TwoStageInstance};

/// `F(ξ) = ξ₁³ + ξ₂` on the box `[−1, 1]²`, one sample at the origin,
/// Euclidean metric, `p = 2`.
///
/// For radius `r < 1/2` the robust value is exactly `r`, attained at the
/// multiplier `λ = 1/(2r)` with inner value `r/2`; the sample-average value
/// is `0`. The order-2 relaxation is exact, so the relaxed and true values
/// coincide — the go-to instance for end-to-end agreement checks.
pub fn box_cubic() -> SingleStageInstance {
    let xi1 = Polynomial::variable(3, 1);
    let xi2 = Polynomial::variable(3, 2);
    SingleStageInstance {
        n1: 1,
        n0: 2,
        f: Polynomial::zero(1),
        cost: xi1.pow(3).add(&xi2),
        support: vec![
            Polynomial::constant(2, 1.0).sub(&Polynomial::variable(2, 0).pow(2)),
            Polynomial::constant(2, 1.0).sub(&Polynomial::variable(2, 1).pow(2)),
        ],
        samples: vec![vec![0.0, 0.0]],
        norm_matrix: DMatrix::identity(2, 2),
        wasserstein_p: 2,
        decision_box: DecisionBox::singleton(vec![0.0]),
    }
}

/// `F(ξ) = 3ξ₁ξ₂ξ₃ − ξ₁²ξ₂ − ξ₁ξ₂² − ξ₃³` on the nonnegative orthant, one
/// sample at `(1, 1, 1)`, `p = 2`.
///
/// By the arithmetic–geometric mean inequality `F ≤ 0` on the support, so
/// the true worst-case expectation is finite for every radius. The moment
/// relaxation still diverges: substituting squares into the cubic part
/// yields the Motzkin form, which no sum-of-squares certificate of any
/// order can dominate, so the relaxed inner supremum is `+∞` for every
/// multiplier once `2k ≥ 4`. Exercises honest unboundedness reporting on a
/// problem whose true value is tame.
pub fn orthant_amgm() -> SingleStageInstance {
    let xi1 = Polynomial::variable(4, 1);
    let xi2 = Polynomial::variable(4, 2);
    let xi3 = Polynomial::variable(4, 3);
    let cost = xi1
        .mul(&xi2)
        .mul(&xi3)
        .scale(3.0)
        .sub(&xi1.pow(2).mul(&xi2))
        .sub(&xi1.mul(&xi2.pow(2)))
        .sub(&xi3.pow(3));
    SingleStageInstance {
        n1: 1,
        n0: 3,
        f: Polynomial::zero(1),
        cost,
        support: vec![
            Polynomial::variable(3, 0),
            Polynomial::variable(3, 1),
            Polynomial::variable(3, 2),
        ],
        samples: vec![vec![1.0, 1.0, 1.0]],
        norm_matrix: DMatrix::identity(3, 3),
        wasserstein_p: 2,
        decision_box: DecisionBox::singleton(vec![0.0]),
    }
}

/// Recourse value `max { (ξ − 1)u : u ≥ 0 }` on `Ξ = [−1, 1]`, one sample
/// at the origin, `p = 2`.
///
/// The recourse is `0` at every point of the support (the maximand slopes
/// down), so the true robust value is `0` for every radius. But the dual
/// feasible set is the half-line `u ≥ 0`, and over the joint half-strip
/// `(ξ, u)` the moment program is unbounded at every multiplier: moments can
/// push mass toward `ξ = 1`, `u → ∞` where `(ξ − 1)u` stays `0` pointwise
/// but its relaxation does not. The strengthened variant intersects each
/// dual cut with a ball around the sample to shut this direction down.
pub fn half_strip_recourse() -> TwoStageInstance {
    TwoStageInstance {
        n1: 1,
        n0: 1,
        n2: 1,
        m2: 1,
        f: Polynomial::zero(1),
        recourse_a: DMatrix::from_row_slice(1, 1, &[-1.0]),
        recourse_b: vec![vec![Polynomial::zero(1)]],
        affine_b: vec![Polynomial::variable(1, 0).sub(&Polynomial::constant(1, 1.0))],
        affine_c: vec![Polynomial::zero(1)],
        offset_d: Polynomial::zero(1),
        support: vec![Polynomial::constant(1, 1.0).sub(&Polynomial::variable(1, 0).pow(2))],
        samples: vec![vec![0.0]],
        norm_matrix: DMatrix::identity(1, 1),
        wasserstein_p: 2,
        decision_box: DecisionBox::singleton(vec![0.0]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conic::SdpSettings;
    use crate::relax::{penalty_value, RelaxError, RelaxVariant};

    #[test]
    fn fixtures_validate() {
        assert!(RelaxVariant::Single(&box_cubic()).validate().is_ok());
        assert!(RelaxVariant::Single(&orthant_amgm()).validate().is_ok());
        assert!(RelaxVariant::Two(&half_strip_recourse()).validate().is_ok());
    }

    #[test]
    fn orthant_amgm_cost_is_nonpositive_on_support() {
        let inst = orthant_amgm();
        let fx = inst.cost_at(&[0.0]);
        let pts: &[[f64; 3]] = &[
            [1.0, 1.0, 1.0],
            [0.0, 0.0, 0.0],
            [2.0, 0.5, 1.3],
            [0.1, 4.0, 0.7],
            [3.0, 3.0, 3.0],
        ];
        for p in pts {
            assert!(fx.eval(p) <= 1e-12, "F({p:?}) = {}", fx.eval(p));
        }
        // equality on the diagonal, where all three means coincide
        assert!(fx.eval(&[2.0, 2.0, 2.0]).abs() < 1e-12);
    }

    #[test]
    fn orthant_amgm_relaxation_is_unbounded() {
        let inst = orthant_amgm();
        let variant = RelaxVariant::Single(&inst);
        for lambda in [0.0, 1.0, 10.0] {
            match penalty_value(
                &variant,
                &[0.0],
                lambda,
                0.1,
                2,
                &SdpSettings::default(),
                None,
            ) {
                Err(RelaxError::Unbounded { sample: 0, .. }) => {}
                other => panic!("expected unbounded at λ={lambda}: {other:?}"),
            }
        }
    }
}
