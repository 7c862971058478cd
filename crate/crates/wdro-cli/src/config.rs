//! JSON run configuration: problem payloads, radius grids, seeds and solver
//! tolerances, plus construction of the in-memory problem instances.

use std::path::Path;

use nalgebra::DMatrix;
use serde::Deserialize;
use wdro::{
    default_config, parse_polynomial, sample_uncertainty, to_instance, BundleSettings,
    DecisionBox, ProductionConfig, RelaxVariant, SingleStageInstance, TwoStageInstance,
};

use crate::Failure;

#[derive(Deserialize, Clone, Copy, PartialEq, Eq, Debug)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Single,
    TwoStage,
    Production,
}

#[derive(Deserialize, Clone, Copy, Debug)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub train: u64,
    pub eval: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds { train: 1, eval: 2 }
    }
}

#[derive(Deserialize, Clone, Copy, Debug)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub bundle: f64,
    pub bundle_max_iters: usize,
    pub sdp: f64,
    pub sdp_max_iters: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        let b = BundleSettings::default();
        Tolerances {
            bundle: b.tol,
            bundle_max_iters: b.max_iters,
            sdp: b.sdp.tol,
            sdp_max_iters: b.sdp.max_iters,
        }
    }
}

impl Tolerances {
    pub fn bundle_settings(&self) -> BundleSettings {
        let mut s = BundleSettings::default();
        s.tol = self.bundle;
        s.max_iters = self.bundle_max_iters;
        s.sdp.tol = self.sdp;
        s.sdp.max_iters = self.sdp_max_iters;
        s
    }
}

/// Top-level run configuration. `instance` stays untyped until `kind` picks
/// the payload shape.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub kind: Kind,
    #[serde(default)]
    pub instance: Option<serde_json::Value>,
    #[serde(default)]
    pub production: Option<ProductionPayload>,
    pub radii: Vec<f64>,
    #[serde(default)]
    pub order_k: Option<u32>,
    #[serde(default = "default_p")]
    pub wasserstein_p: u32,
    #[serde(default)]
    pub strengthen: bool,
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default = "default_eval_count")]
    pub eval_count: usize,
    #[serde(default)]
    pub out: Option<String>,
    #[serde(default)]
    pub tolerances: Tolerances,
}

fn default_p() -> u32 {
    2
}

fn default_eval_count() -> usize {
    1000
}

#[derive(Deserialize, Debug)]
#[serde(deny_unknown_fields)]
pub struct ProductionPayload {
    pub ingredients: usize,
    pub products: usize,
    pub capacity: f64,
    pub sigma: f64,
    pub train_count: usize,
    #[serde(default)]
    pub demand_cap: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SinglePayload {
    n1: usize,
    n0: usize,
    f: String,
    cost: String,
    support: Vec<String>,
    samples: Vec<Vec<f64>>,
    #[serde(default)]
    norm: Option<Vec<Vec<f64>>>,
    decision_lo: Vec<f64>,
    decision_hi: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TwoStagePayload {
    n1: usize,
    n0: usize,
    n2: usize,
    m2: usize,
    f: String,
    recourse_a: Vec<Vec<f64>>,
    recourse_b: Vec<Vec<String>>,
    affine_b: Vec<String>,
    affine_c: Vec<String>,
    offset_d: String,
    support: Vec<String>,
    samples: Vec<Vec<f64>>,
    #[serde(default)]
    norm: Option<Vec<Vec<f64>>>,
    decision_lo: Vec<f64>,
    decision_hi: Vec<f64>,
}

/// A fully built problem, ready to hand to the solvers.
pub enum Problem {
    Single(SingleStageInstance),
    Two(TwoStageInstance),
    Production {
        config: ProductionConfig,
        instance: TwoStageInstance,
    },
}

impl Problem {
    pub fn variant(&self, strengthen: bool, epsilon: Option<f64>) -> RelaxVariant<'_> {
        match self {
            Problem::Single(s) => RelaxVariant::Single(s),
            Problem::Two(t) | Problem::Production { instance: t, .. } => {
                if strengthen {
                    RelaxVariant::TwoStrengthened(t, epsilon)
                } else {
                    RelaxVariant::Two(t)
                }
            }
        }
    }

    pub fn decision_dim(&self) -> usize {
        match self {
            Problem::Single(s) => s.n1,
            Problem::Two(t) | Problem::Production { instance: t, .. } => t.n1,
        }
    }
}

pub struct Loaded {
    pub config: RunConfig,
    pub problem: Problem,
}

/// Read, validate and build a run. A `--radius` override replaces the
/// config's radius list before validation.
pub fn load(path: &Path, radius_override: Option<f64>) -> Result<Loaded, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::io(&format!("reading {}", path.display()), e))?;
    let mut config: RunConfig = serde_json::from_str(&text)
        .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    if let Some(r) = radius_override {
        config.radii = vec![r];
    }
    validate(&config)?;
    let problem = build_problem(&config)?;
    Ok(Loaded { config, problem })
}

fn validate(config: &RunConfig) -> Result<(), Failure> {
    if config.radii.is_empty() {
        return Err(Failure::usage("config error at field `radii`: list is empty"));
    }
    for (i, r) in config.radii.iter().enumerate() {
        if !r.is_finite() || *r < 0.0 {
            return Err(Failure::usage(format!(
                "config error at field `radii[{i}]`: radius {r} must be finite and nonnegative"
            )));
        }
    }
    if config.radii.windows(2).any(|w| w[0] > w[1]) {
        return Err(Failure::usage(
            "config error at field `radii`: radii must be sorted nondecreasing",
        ));
    }
    if config.wasserstein_p < 2 || config.wasserstein_p % 2 != 0 {
        return Err(Failure::usage(format!(
            "config error at field `wasserstein_p`: transport order {} must be even and >= 2",
            config.wasserstein_p
        )));
    }
    if config.eval_count == 0 {
        return Err(Failure::usage(
            "config error at field `eval_count`: at least one evaluation sample is required",
        ));
    }
    if let Some(eps) = config.epsilon {
        if !(eps > 0.0) {
            return Err(Failure::usage(format!(
                "config error at field `epsilon`: ball radius {eps} must be positive"
            )));
        }
    }
    if config.strengthen && config.kind == Kind::Single {
        return Err(Failure::usage(
            "config error at field `strengthen`: ball cuts apply to two-stage problems only",
        ));
    }
    match config.kind {
        Kind::Production => {
            if config.production.is_none() {
                return Err(Failure::usage(
                    "config error: kind `production` needs a `production` payload",
                ));
            }
            if config.instance.is_some() {
                return Err(Failure::usage(
                    "config error at field `instance`: not used by kind `production`",
                ));
            }
        }
        Kind::Single | Kind::TwoStage => {
            if config.instance.is_none() {
                return Err(Failure::usage(
                    "config error: this kind needs an `instance` payload",
                ));
            }
            if config.production.is_some() {
                return Err(Failure::usage(
                    "config error at field `production`: only used by kind `production`",
                ));
            }
        }
    }
    Ok(())
}

fn build_problem(config: &RunConfig) -> Result<Problem, Failure> {
    match config.kind {
        Kind::Single => {
            let inst = build_single(config.instance.clone().unwrap(), config.wasserstein_p)?;
            inst.validate()
                .map_err(|e| Failure::usage(format!("config error in `instance`: {e}")))?;
            Ok(Problem::Single(inst))
        }
        Kind::TwoStage => {
            let inst = build_two_stage(config.instance.clone().unwrap(), config.wasserstein_p)?;
            inst.validate()
                .map_err(|e| Failure::usage(format!("config error in `instance`: {e}")))?;
            Ok(Problem::Two(inst))
        }
        Kind::Production => {
            let payload = config.production.as_ref().unwrap();
            if payload.train_count == 0 {
                return Err(Failure::usage(
                    "config error at field `production.train_count`: at least one training sample is required",
                ));
            }
            let mut pc = default_config(
                payload.ingredients,
                payload.products,
                payload.capacity,
                payload.sigma,
            )
            .map_err(|e| Failure::usage(format!("config error in `production`: {e}")))?;
            pc.demand_cap = payload.demand_cap;
            let samples = sample_uncertainty(&pc, config.seeds.train, payload.train_count);
            let mut instance = to_instance(&pc, &samples);
            instance.wasserstein_p = config.wasserstein_p;
            instance
                .validate()
                .map_err(|e| Failure::usage(format!("config error in `production`: {e}")))?;
            Ok(Problem::Production {
                config: pc,
                instance,
            })
        }
    }
}

fn parse_poly_field(
    field: &str,
    text: &str,
    blocks: &[(&str, usize)],
) -> Result<wdro::Polynomial, Failure> {
    parse_polynomial(text, blocks)
        .map_err(|e| Failure::usage(format!("config error at field `{field}`: {e}")))
}

fn parse_matrix(field: &str, rows: &[Vec<f64>], nr: usize, nc: usize) -> Result<DMatrix<f64>, Failure> {
    if rows.len() != nr || rows.iter().any(|r| r.len() != nc) {
        return Err(Failure::usage(format!(
            "config error at field `{field}`: expected a {nr}x{nc} row-major matrix"
        )));
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

fn build_single(value: serde_json::Value, p: u32) -> Result<SingleStageInstance, Failure> {
    let pay: SinglePayload = serde_json::from_value(value)
        .map_err(|e| Failure::usage(format!("config error in `instance`: {e}")))?;
    let joint: &[(&str, usize)] = &[("x", pay.n1), ("xi", pay.n0)];
    let xi_only: &[(&str, usize)] = &[("xi", pay.n0)];
    let f = parse_poly_field("instance.f", &pay.f, &[("x", pay.n1)])?;
    let cost = parse_poly_field("instance.cost", &pay.cost, joint)?;
    let support = pay
        .support
        .iter()
        .enumerate()
        .map(|(i, s)| parse_poly_field(&format!("instance.support[{i}]"), s, xi_only))
        .collect::<Result<Vec<_>, _>>()?;
    let norm_matrix = match &pay.norm {
        Some(rows) => parse_matrix("instance.norm", rows, pay.n0, pay.n0)?,
        None => DMatrix::identity(pay.n0, pay.n0),
    };
    Ok(SingleStageInstance {
        n1: pay.n1,
        n0: pay.n0,
        f,
        cost,
        support,
        samples: pay.samples,
        norm_matrix,
        wasserstein_p: p,
        decision_box: DecisionBox {
            lo: pay.decision_lo,
            hi: pay.decision_hi,
        },
    })
}

fn build_two_stage(value: serde_json::Value, p: u32) -> Result<TwoStageInstance, Failure> {
    let pay: TwoStagePayload = serde_json::from_value(value)
        .map_err(|e| Failure::usage(format!("config error in `instance`: {e}")))?;
    let xi_only: &[(&str, usize)] = &[("xi", pay.n0)];
    let f = parse_poly_field("instance.f", &pay.f, &[("x", pay.n1)])?;
    let recourse_a = parse_matrix("instance.recourse_a", &pay.recourse_a, pay.n2, pay.m2)?;
    if pay.recourse_b.len() != pay.n2 || pay.recourse_b.iter().any(|r| r.len() != pay.n1) {
        return Err(Failure::usage(format!(
            "config error at field `instance.recourse_b`: expected a {}x{} polynomial matrix",
            pay.n2, pay.n1
        )));
    }
    let mut recourse_b = Vec::with_capacity(pay.n2);
    for (j, row) in pay.recourse_b.iter().enumerate() {
        let mut out = Vec::with_capacity(pay.n1);
        for (t, text) in row.iter().enumerate() {
            out.push(parse_poly_field(
                &format!("instance.recourse_b[{j}][{t}]"),
                text,
                xi_only,
            )?);
        }
        recourse_b.push(out);
    }
    let affine_b = pay
        .affine_b
        .iter()
        .enumerate()
        .map(|(i, s)| parse_poly_field(&format!("instance.affine_b[{i}]"), s, xi_only))
        .collect::<Result<Vec<_>, _>>()?;
    let affine_c = pay
        .affine_c
        .iter()
        .enumerate()
        .map(|(i, s)| parse_poly_field(&format!("instance.affine_c[{i}]"), s, xi_only))
        .collect::<Result<Vec<_>, _>>()?;
    let offset_d = parse_poly_field("instance.offset_d", &pay.offset_d, xi_only)?;
    let support = pay
        .support
        .iter()
        .enumerate()
        .map(|(i, s)| parse_poly_field(&format!("instance.support[{i}]"), s, xi_only))
        .collect::<Result<Vec<_>, _>>()?;
    let norm_matrix = match &pay.norm {
        Some(rows) => parse_matrix("instance.norm", rows, pay.n0, pay.n0)?,
        None => DMatrix::identity(pay.n0, pay.n0),
    };
    Ok(TwoStageInstance {
        n1: pay.n1,
        n0: pay.n0,
        n2: pay.n2,
        m2: pay.m2,
        f,
        recourse_a,
        recourse_b,
        affine_b,
        affine_c,
        offset_d,
        support,
        samples: pay.samples,
        norm_matrix,
        wasserstein_p: p,
        decision_box: DecisionBox {
            lo: pay.decision_lo,
            hi: pay.decision_hi,
        },
    })
}
