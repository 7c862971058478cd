//! Score a stored first-stage decision sample by sample: fresh scenario
//! draws for the production model, the training samples otherwise.

use wdro::{evaluate_values, summarize};

use crate::config::{self, Problem};
use crate::run::{sig, write_lines, out_path};
use crate::{EvalArgs, Failure, EXIT_NUMERICAL};

pub fn cmd_eval(args: &EvalArgs) -> Result<(), Failure> {
    let loaded = config::load(&args.config, None)?;
    let text = std::fs::read_to_string(&args.decision)
        .map_err(|e| Failure::io(&format!("reading {}", args.decision.display()), e))?;
    let x: Vec<f64> = serde_json::from_str(&text).map_err(|e| {
        Failure::usage(format!(
            "{}: expected a JSON array of numbers: {e}",
            args.decision.display()
        ))
    })?;
    let n1 = loaded.problem.decision_dim();
    if x.len() != n1 {
        return Err(Failure::usage(format!(
            "decision has {} entries, the problem expects {n1}",
            x.len()
        )));
    }

    let values = per_sample_values(&loaded.problem, &loaded.config, &x)?;
    if args.verbose {
        eprintln!("scored {} samples", values.len());
    }
    let stats = summarize(&values);
    let mut lines = vec![String::from("sample_index,value,mean,median,q10,q90,std")];
    for (i, v) in values.iter().enumerate() {
        lines.push(format!("{i},{},,,,,", sig(*v)));
    }
    lines.push(format!(
        "summary,,{},{},{},{},{}",
        sig(stats.mean),
        sig(stats.median),
        sig(stats.q10),
        sig(stats.q90),
        sig(stats.std)
    ));
    write_lines(out_path(&args.out, &loaded).as_ref(), &lines)
}

fn per_sample_values(
    problem: &Problem,
    cfg: &config::RunConfig,
    x: &[f64],
) -> Result<Vec<f64>, Failure> {
    match problem {
        Problem::Production { config: pc, .. } => {
            evaluate_values(pc, x, cfg.seeds.eval, cfg.eval_count).map_err(|e| Failure {
                code: EXIT_NUMERICAL,
                message: format!("evaluation failed: {e}"),
            })
        }
        Problem::Single(inst) => {
            let fx = inst.f.eval(x);
            let cost = inst.cost_at(x);
            Ok(inst.samples.iter().map(|s| fx + cost.eval(s)).collect())
        }
        Problem::Two(inst) => {
            let fx = inst.f.eval(x);
            let mut values = Vec::with_capacity(inst.samples.len());
            for (i, s) in inst.samples.iter().enumerate() {
                match inst.recourse_value(x, s) {
                    Some(v) => values.push(fx + v),
                    None => {
                        return Err(Failure {
                            code: EXIT_NUMERICAL,
                            message: format!("recourse evaluation failed for sample {i}"),
                        })
                    }
                }
            }
            Ok(values)
        }
    }
}
