//! Re-run the packaged reference problems and compare against their known
//! values, printing expected vs got for every check.

use wdro::fixtures::{box_cubic, half_strip_recourse, orthant_amgm};
use wdro::{
    budget_value, penalty_value, solve_wdro, BundleSettings, RelaxError, RelaxVariant,
    SdpSettings,
};

use crate::{Failure, VerifyArgs, EXIT_PATHOLOGY};

struct Tally {
    passed: usize,
    failed: usize,
}

impl Tally {
    fn check(&mut self, name: &str, expected: &str, got: &str, ok: bool) {
        if ok {
            self.passed += 1;
            println!("pass  {name}: expected {expected}, got {got}");
        } else {
            self.failed += 1;
            println!("FAIL  {name}: expected {expected}, got {got}");
        }
    }
}

pub fn cmd_verify(args: &VerifyArgs) -> Result<(), Failure> {
    let mut tally = Tally { passed: 0, failed: 0 };
    let sdp = SdpSettings::default();
    let bundle = BundleSettings::default();

    // Cubic cost on the box: the robust value equals the radius exactly
    // while the transport penalty is the active constraint.
    let cubic = box_cubic();
    for r in [0.1, 0.25, 0.4] {
        let name = format!("box_cubic value at r={r}");
        match solve_wdro(&RelaxVariant::Single(&cubic), r, Some(2), &bundle) {
            Ok(report) => tally.check(
                &name,
                &format!("{r}"),
                &format!("{:.8}", report.value),
                (report.value - r).abs() <= 1e-5,
            ),
            Err(e) => tally.check(&name, &format!("{r}"), &format!("error: {e}"), false),
        }
        if args.verbose {
            eprintln!("{name} done");
        }
    }

    // Orthant AM-GM cost: the relaxed inner supremum diverges at every
    // multiplier even though the true value is finite.
    let orthant = orthant_amgm();
    for k in [2, 3] {
        for lambda in [0.0, 1.0, 10.0] {
            let name = format!("orthant_amgm inner status at k={k}, lambda={lambda}");
            let got = penalty_value(
                &RelaxVariant::Single(&orthant),
                &[0.0],
                lambda,
                0.1,
                k,
                &sdp,
                None,
            );
            report_unbounded(&mut tally, &name, got.map(|e| e.value).err());
        }
    }

    // Half-strip recourse: the joint moment program escapes along the dual
    // ray for every multiplier.
    let strip = half_strip_recourse();
    for k in [2, 3] {
        let name = format!("half_strip inner status at k={k}, lambda=2.5");
        let got = penalty_value(
            &RelaxVariant::Two(&strip),
            &[0.0],
            2.5,
            0.1,
            k,
            &sdp,
            None,
        );
        report_unbounded(&mut tally, &name, got.map(|e| e.value).err());
    }

    // Radius zero pins every distribution to its sample: the coupled
    // program must reproduce the plain sample average.
    let mut shifted = box_cubic();
    shifted.samples = vec![vec![0.3, -0.4], vec![-0.5, 0.2]];
    let variant = RelaxVariant::Single(&shifted);
    let expected = variant.mean_sample_cost(&[0.0]).unwrap();
    let name = "box_cubic sample average at r=0";
    match budget_value(&variant, &[0.0], 0.0, 2, &sdp) {
        Ok(eval) => tally.check(
            name,
            &format!("{expected:.8}"),
            &format!("{:.8}", eval.value),
            (eval.value - expected).abs() <= 1e-5 * (1.0 + expected.abs()),
        ),
        Err(e) => tally.check(name, &format!("{expected:.8}"), &format!("error: {e}"), false),
    }

    println!("{} passed, {} failed", tally.passed, tally.failed);
    if tally.failed > 0 {
        Err(Failure {
            code: EXIT_PATHOLOGY,
            message: format!("{} fixture check(s) failed", tally.failed),
        })
    } else {
        Ok(())
    }
}

fn report_unbounded(tally: &mut Tally, name: &str, err: Option<RelaxError>) {
    match err {
        Some(RelaxError::Unbounded { sample, rate, .. }) => tally.check(
            name,
            "Unbounded",
            &format!("Unbounded (sample {sample}, rate {rate:.3e})"),
            rate > 0.0,
        ),
        Some(other) => tally.check(name, "Unbounded", &format!("error: {other}"), false),
        None => tally.check(name, "Unbounded", "Optimal", false),
    }
}
