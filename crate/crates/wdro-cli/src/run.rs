//! Solve and sweep commands: per-radius dispatch, out-of-sample scoring and
//! CSV emission.

use std::fmt;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use wdro::{
    evaluate_out_of_sample, solve_eso, solve_wdro, summarize, OutOfSampleStats, OuterError,
    RelaxError,
};

use crate::config::{self, Loaded, Problem};
use crate::{Failure, RunArgs, EXIT_NUMERICAL, EXIT_PATHOLOGY, EXIT_USAGE};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Status {
    Optimal,
    Unbounded,
    Infeasible,
    NumericalFailure,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let word = match self {
            Status::Optimal => "Optimal",
            Status::Unbounded => "Unbounded",
            Status::Infeasible => "Infeasible",
            Status::NumericalFailure => "NumericalFailure",
        };
        f.write_str(word)
    }
}

/// One sweep record; statistics stay empty unless the status is Optimal.
pub struct Row {
    pub radius: f64,
    pub status: Status,
    pub in_sample: Option<f64>,
    pub lambda: Option<f64>,
    pub x: Option<Vec<f64>>,
    pub stats: Option<OutOfSampleStats>,
    pub time_s: f64,
}

/// 12 significant digits, `.` decimal separator.
pub fn sig(v: f64) -> String {
    format!("{:.11e}", v)
}

pub fn header(n1: usize) -> String {
    let mut h = String::from(
        "radius,status,in_sample,lambda,oos_mean,oos_median,oos_q10,oos_q90,oos_std,time_s",
    );
    for i in 1..=n1 {
        h.push_str(&format!(",x{i}"));
    }
    h
}

pub fn row_line(row: &Row, n1: usize, stable: bool) -> String {
    let cell = |v: Option<f64>| v.map(sig).unwrap_or_default();
    let mut s = format!("{},{}", sig(row.radius), row.status);
    s.push(',');
    s.push_str(&cell(row.in_sample));
    s.push(',');
    s.push_str(&cell(row.lambda));
    let stats = [
        row.stats.as_ref().map(|t| t.mean),
        row.stats.as_ref().map(|t| t.median),
        row.stats.as_ref().map(|t| t.q10),
        row.stats.as_ref().map(|t| t.q90),
        row.stats.as_ref().map(|t| t.std),
    ];
    for v in stats {
        s.push(',');
        s.push_str(&cell(v));
    }
    s.push(',');
    s.push_str(&sig(if stable { 0.0 } else { row.time_s }));
    for i in 0..n1 {
        s.push(',');
        s.push_str(&cell(row.x.as_ref().map(|x| x[i])));
    }
    s
}

/// Write lines with `\n` endings to the file, or stdout when no path given.
pub fn write_lines(dest: Option<&PathBuf>, lines: &[String]) -> Result<(), Failure> {
    let mut body = lines.join("\n");
    body.push('\n');
    match dest {
        Some(path) => std::fs::write(path, body)
            .map_err(|e| Failure::io(&format!("writing {}", path.display()), e)),
        None => std::io::stdout()
            .write_all(body.as_bytes())
            .map_err(|e| Failure::io("writing stdout", e)),
    }
}

pub fn out_path(args_out: &Option<PathBuf>, loaded: &Loaded) -> Option<PathBuf> {
    args_out
        .clone()
        .or_else(|| loaded.config.out.as_ref().map(PathBuf::from))
}

fn classify(err: &OuterError) -> (Status, u8) {
    match err {
        OuterError::Relax(RelaxError::Unbounded { .. })
        | OuterError::Relax(RelaxError::BudgetUnbounded { .. }) => {
            (Status::Unbounded, EXIT_PATHOLOGY)
        }
        OuterError::Relax(RelaxError::BadInstance(_)) | OuterError::RecourseInfeasible { .. } => {
            (Status::Infeasible, EXIT_PATHOLOGY)
        }
        OuterError::BadInput(_) => (Status::NumericalFailure, EXIT_USAGE),
        _ => (Status::NumericalFailure, EXIT_NUMERICAL),
    }
}

/// Score a decision against held-out data: fresh scenario draws for the
/// production model, the training samples themselves otherwise (bespoke
/// instances carry no generative model to draw from).
pub fn out_of_sample(
    problem: &Problem,
    cfg: &config::RunConfig,
    x: &[f64],
) -> Option<OutOfSampleStats> {
    match problem {
        Problem::Production { config: pc, .. } => {
            match evaluate_out_of_sample(pc, x, cfg.seeds.eval, cfg.eval_count) {
                Ok(stats) => Some(stats),
                Err(e) => {
                    eprintln!("warning: out-of-sample evaluation failed: {e}");
                    None
                }
            }
        }
        Problem::Single(inst) => {
            let fx = inst.f.eval(x);
            let cost = inst.cost_at(x);
            let values: Vec<f64> = inst.samples.iter().map(|s| fx + cost.eval(s)).collect();
            Some(summarize(&values))
        }
        Problem::Two(inst) => {
            let fx = inst.f.eval(x);
            let mut values = Vec::with_capacity(inst.samples.len());
            for (i, s) in inst.samples.iter().enumerate() {
                match inst.recourse_value(x, s) {
                    Some(v) => values.push(fx + v),
                    None => {
                        eprintln!("warning: recourse evaluation failed for sample {i}");
                        return None;
                    }
                }
            }
            Some(summarize(&values))
        }
    }
}

/// Solve one radius; a failed solve still produces a row recording the
/// status, alongside the failure for callers that abort.
pub fn solve_one(loaded: &Loaded, radius: f64, verbose: bool) -> (Row, Option<Failure>) {
    let cfg = &loaded.config;
    let settings = cfg.tolerances.bundle_settings();
    let t0 = Instant::now();
    let result = if radius == 0.0 {
        solve_eso(&loaded.problem.variant(false, None), &settings)
    } else {
        solve_wdro(
            &loaded.problem.variant(cfg.strengthen, cfg.epsilon),
            radius,
            cfg.order_k,
            &settings,
        )
    };
    let time_s = t0.elapsed().as_secs_f64();
    match result {
        Ok(report) => {
            if verbose {
                eprintln!(
                    "radius {radius}: Optimal, in-sample {:.6}, lambda {:.4}, {:.1}s",
                    report.value, report.lambda, time_s
                );
            }
            let stats = out_of_sample(&loaded.problem, cfg, &report.x);
            (
                Row {
                    radius,
                    status: Status::Optimal,
                    in_sample: Some(report.value),
                    lambda: Some(report.lambda),
                    x: Some(report.x),
                    stats,
                    time_s,
                },
                None,
            )
        }
        Err(err) => {
            let (status, code) = classify(&err);
            if verbose {
                eprintln!("radius {radius}: {status}, {:.1}s", time_s);
            }
            (
                Row {
                    radius,
                    status,
                    in_sample: None,
                    lambda: None,
                    x: None,
                    stats: None,
                    time_s,
                },
                Some(Failure {
                    code,
                    message: format!("radius {radius}: {err}"),
                }),
            )
        }
    }
}

pub fn cmd_solve(args: &RunArgs) -> Result<(), Failure> {
    let loaded = config::load(&args.config, args.radius)?;
    if loaded.config.radii.len() != 1 {
        return Err(Failure::usage(format!(
            "solve expects exactly one radius, the config lists {}; pass --radius to pick one",
            loaded.config.radii.len()
        )));
    }
    let n1 = loaded.problem.decision_dim();
    let radius = loaded.config.radii[0];
    let (row, failure) = solve_one(&loaded, radius, args.verbose);
    let lines = vec![header(n1), row_line(&row, n1, args.stable_output)];
    write_lines(out_path(&args.out, &loaded).as_ref(), &lines)?;
    match failure {
        None => Ok(()),
        Some(f) => Err(f),
    }
}

pub fn cmd_sweep(args: &RunArgs) -> Result<(), Failure> {
    let loaded = config::load(&args.config, args.radius)?;
    let n1 = loaded.problem.decision_dim();
    let mut lines = vec![header(n1)];
    let mut prev: Option<f64> = None;
    for &radius in &loaded.config.radii {
        let (row, failure) = solve_one(&loaded, radius, args.verbose);
        if let Some(f) = failure {
            // record the status and keep sweeping the remaining radii
            eprintln!("warning: {}", f.message);
        }
        if let (Some(p), Some(v)) = (prev, row.in_sample) {
            if v < p - 1e-6 * (1.0 + p.abs()) {
                eprintln!(
                    "warning: in-sample value fell from {p:.6} to {v:.6} at radius {radius}; \
                     the robust value should be nondecreasing in the radius"
                );
            }
        }
        if row.status == Status::Optimal {
            prev = row.in_sample;
        }
        lines.push(row_line(&row, n1, args.stable_output));
    }
    write_lines(out_path(&args.out, &loaded).as_ref(), &lines)
}
