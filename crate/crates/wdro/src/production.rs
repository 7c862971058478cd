//! Two-stage production benchmark: buy ingredient inventory up front, then —
//! after demands, ingredient decay, and salvage prices realize — decide what
//! to produce, what to sell off, and what to repurchase at late prices.
//!
//! The second stage is a linear program; its dual is bounded after adding the
//! redundant cap `w ≤ c^p` on the demand multipliers, which makes the whole
//! problem fit [`TwoStageInstance`]. Uncertainty enters through a vector
//! `ξ = (demands, unit block)` where the unit block holds the decay fractions
//! of perishable ingredients and the (rescaled) salvage prices of the rest.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::conic::{solve_lp, LinearProgram, LpOutcome};
use crate::par;
use crate::polybasis::Polynomial;
use crate::relax::{DecisionBox, TwoStageInstance};
use crate::rng::SplitMix64;

#[derive(Debug, Error)]
pub enum ProductionError {
    #[error("need at least 2 ingredients and 2 products, got {ingredients} and {products}")]
    TooSmall { ingredients: usize, products: usize },
    #[error("capacity must be positive and scale nonnegative, got D={capacity}, sigma={sigma}")]
    BadParameter { capacity: f64, sigma: f64 },
    #[error("recourse LP failed on evaluation sample {sample}")]
    Evaluation { sample: usize },
}

/// Problem data: dimensions, prices, the recipe matrix, and the demand law.
///
/// Price ramps are linear in the index; the recipe needs a lot of ingredient
/// `t` for products `s ≥ t` and a little for earlier ones. Odd ingredients
/// (first, third, …) are perishable: they decay by a random fraction but
/// their salvage price is fixed. Even ones never decay but salvage at a
/// random price.
#[derive(Clone, Debug)]
pub struct ProductionConfig {
    pub ingredients: usize,
    pub products: usize,
    pub capacity: f64,
    /// lognormal scale of the demands
    pub sigma: f64,
    /// upper bound of the uniform decay fraction
    pub decay_cap: f64,
    /// unit ingredient costs, first stage
    pub unit_cost: Vec<f64>,
    /// late repurchase costs, second stage
    pub late_cost: Vec<f64>,
    /// product sale prices
    pub sale_price: Vec<f64>,
    /// salvage price caps
    pub salvage_cap: Vec<f64>,
    /// median demands
    pub mean_demand: Vec<f64>,
    /// recipe: `recipe[t][s]` units of ingredient `t` per unit of product `s`
    pub recipe: Vec<Vec<f64>>,
    /// which ingredients decay
    pub perishable: Vec<bool>,
    /// optional box on demands appended to the support, as a multiple of the
    /// median demand; `None` leaves the demand support unbounded
    pub demand_cap: Option<f64>,
}

/// One realization of the random parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintySample {
    /// product demands, positive
    pub demands: Vec<f64>,
    /// decay fractions; exactly 1 for ingredients that never decay
    pub decay: Vec<f64>,
    /// salvage prices; exactly the cap for perishable ingredients
    pub salvage: Vec<f64>,
}

impl UncertaintySample {
    /// Concatenated uncertainty vector: demands first, then one `[0, 1]`
    /// coordinate per ingredient (decay fraction or rescaled salvage price).
    pub fn to_xi(&self, config: &ProductionConfig) -> Vec<f64> {
        let mut xi = self.demands.clone();
        for t in 0..config.ingredients {
            if config.perishable[t] {
                xi.push(self.decay[t] / config.decay_cap);
            } else {
                xi.push(self.salvage[t] / config.salvage_cap[t]);
            }
        }
        xi
    }
}

/// Standard parameter ramps for a benchmark of the given size.
pub fn default_config(
    ingredients: usize,
    products: usize,
    capacity: f64,
    sigma: f64,
) -> Result<ProductionConfig, ProductionError> {
    if ingredients < 2 || products < 2 {
        return Err(ProductionError::TooSmall {
            ingredients,
            products,
        });
    }
    if !(capacity > 0.0) || !(sigma >= 0.0) {
        return Err(ProductionError::BadParameter { capacity, sigma });
    }
    let ramp = |lo: f64, hi: f64, i: usize, n: usize| lo + (hi - lo) * i as f64 / (n - 1) as f64;
    let unit_cost: Vec<f64> = (0..ingredients)
        .map(|t| ramp(2.0, 5.0, t, ingredients))
        .collect();
    let late_cost: Vec<f64> = unit_cost.iter().map(|c| 3.0 * c).collect();
    let sale_price: Vec<f64> = (0..products).map(|s| ramp(10.0, 6.0, s, products)).collect();
    let salvage_cap: Vec<f64> = (0..ingredients)
        .map(|t| ramp(5.0, 2.0, t, ingredients))
        .collect();
    let mean_demand: Vec<f64> = (0..products).map(|s| ramp(2.0, 1.0, s, products)).collect();
    // row t (zero-based): light use 1/(10t) for products before t, heavy use
    // 9/(10t) from t on; the first row has no "before", so it is 9/10 flat
    let recipe: Vec<Vec<f64>> = (0..ingredients)
        .map(|t| {
            let denom = 10.0 * (t.max(1)) as f64;
            (0..products)
                .map(|s| if s < t { 1.0 / denom } else { 9.0 / denom })
                .collect()
        })
        .collect();
    let perishable: Vec<bool> = (0..ingredients).map(|t| t % 2 == 0).collect();
    Ok(ProductionConfig {
        ingredients,
        products,
        capacity,
        sigma,
        decay_cap: 1.0,
        unit_cost,
        late_cost,
        sale_price,
        salvage_cap,
        mean_demand,
        recipe,
        perishable,
        demand_cap: None,
    })
}

/// Draw `count` independent scenarios. Sample `i` depends only on
/// `(seed, i)`, so enlarging `count` never reshuffles earlier samples.
pub fn sample_uncertainty(
    config: &ProductionConfig,
    seed: u64,
    count: usize,
) -> Vec<UncertaintySample> {
    (0..count)
        .map(|i| {
            let mut rng = SplitMix64::stream(seed, i as u64);
            let demands: Vec<f64> = config
                .mean_demand
                .iter()
                .map(|&med| med * (config.sigma * rng.normal()).exp())
                .collect();
            let mut decay = Vec::with_capacity(config.ingredients);
            let mut salvage = Vec::with_capacity(config.ingredients);
            for t in 0..config.ingredients {
                let z = rng.unit();
                if config.perishable[t] {
                    decay.push(config.decay_cap * z);
                    salvage.push(config.salvage_cap[t]);
                } else {
                    decay.push(1.0);
                    salvage.push(config.salvage_cap[t] * z);
                }
            }
            UncertaintySample {
                demands,
                decay,
                salvage,
            }
        })
        .collect()
}

/// Decay fraction of ingredient `t` as a polynomial in `ξ`.
fn decay_poly(config: &ProductionConfig, t: usize) -> Polynomial {
    let n0 = config.products + config.ingredients;
    if config.perishable[t] {
        Polynomial::variable(n0, config.products + t).scale(config.decay_cap)
    } else {
        Polynomial::constant(n0, 1.0)
    }
}

/// Salvage price of ingredient `t` as a polynomial in `ξ`.
fn salvage_poly(config: &ProductionConfig, t: usize) -> Polynomial {
    let n0 = config.products + config.ingredients;
    if config.perishable[t] {
        Polynomial::constant(n0, config.salvage_cap[t])
    } else {
        Polynomial::variable(n0, config.products + t).scale(config.salvage_cap[t])
    }
}

/// Build the two-stage instance for the given training scenarios.
///
/// The recourse dual has variables `u = (v, w)` with `v` priced between the
/// salvage and late-purchase costs of each ingredient and `w` between zero
/// and the sale prices; its objective is `-(diag(decay)·x, demands)ᵀu`.
pub fn to_instance(
    config: &ProductionConfig,
    samples: &[UncertaintySample],
) -> TwoStageInstance {
    let n1 = config.ingredients;
    let np = config.products;
    let n0 = np + n1;
    let n2 = n1 + np;
    let m2 = 2 * n1 + 3 * np;

    let f = (0..n1).fold(Polynomial::zero(n1), |acc, t| {
        acc.add(&Polynomial::variable(n1, t).scale(config.unit_cost[t]))
    });

    // dual constraint columns: v ≥ salvage, v ≤ late cost, recipeᵀv + w ≥
    // sale price, w ≥ 0, w ≤ sale price
    let mut recourse_a = DMatrix::zeros(n2, m2);
    let mut affine_c = Vec::with_capacity(m2);
    for t in 0..n1 {
        recourse_a[(t, t)] = -1.0;
        affine_c.push(salvage_poly(config, t).scale(-1.0));
    }
    for t in 0..n1 {
        recourse_a[(t, n1 + t)] = 1.0;
        affine_c.push(Polynomial::constant(n0, config.late_cost[t]));
    }
    for s in 0..np {
        let j = 2 * n1 + s;
        for t in 0..n1 {
            recourse_a[(t, j)] = -config.recipe[t][s];
        }
        recourse_a[(n1 + s, j)] = -1.0;
        affine_c.push(Polynomial::constant(n0, -config.sale_price[s]));
    }
    for s in 0..np {
        recourse_a[(n1 + s, 2 * n1 + np + s)] = -1.0;
        affine_c.push(Polynomial::zero(n0));
    }
    for s in 0..np {
        recourse_a[(n1 + s, 2 * n1 + 2 * np + s)] = 1.0;
        affine_c.push(Polynomial::constant(n0, config.sale_price[s]));
    }

    let mut recourse_b = vec![vec![Polynomial::zero(n0); n1]; n2];
    for t in 0..n1 {
        recourse_b[t][t] = decay_poly(config, t).scale(-1.0);
    }
    let affine_b: Vec<Polynomial> = (0..n2)
        .map(|j| {
            if j < n1 {
                Polynomial::zero(n0)
            } else {
                Polynomial::variable(n0, j - n1).scale(-1.0)
            }
        })
        .collect();

    let mut support = Vec::new();
    for s in 0..np {
        support.push(Polynomial::variable(n0, s));
    }
    if let Some(cap) = config.demand_cap {
        for s in 0..np {
            support.push(
                Polynomial::constant(n0, cap * config.mean_demand[s])
                    .sub(&Polynomial::variable(n0, s)),
            );
        }
    }
    for t in 0..n1 {
        support.push(Polynomial::variable(n0, np + t));
        support.push(Polynomial::constant(n0, 1.0).sub(&Polynomial::variable(n0, np + t)));
    }

    TwoStageInstance {
        n1,
        n0,
        n2,
        m2,
        f,
        recourse_a,
        recourse_b,
        affine_b,
        affine_c,
        offset_d: Polynomial::zero(n0),
        support,
        samples: samples.iter().map(|s| s.to_xi(config)).collect(),
        norm_matrix: DMatrix::identity(n0, n0),
        wasserstein_p: 2,
        decision_box: DecisionBox {
            lo: vec![0.0; n1],
            hi: vec![config.capacity; n1],
        },
    }
}

/// Second-stage cost at `(x, scenario)` by solving the primal recourse LP:
/// choose production, salvage, and late purchases subject to the ingredient
/// balance and demand caps. Always feasible (do nothing, salvage nothing).
pub fn recourse_cost(
    config: &ProductionConfig,
    x: &[f64],
    sample: &UncertaintySample,
) -> Option<f64> {
    let n1 = config.ingredients;
    let np = config.products;
    // variables (production, leftover, late purchase), all nonnegative
    let n = np + 2 * n1;
    let mut cost = DVector::zeros(n);
    for s in 0..np {
        cost[s] = -config.sale_price[s];
    }
    for t in 0..n1 {
        cost[np + t] = -sample.salvage[t];
        cost[np + n1 + t] = config.late_cost[t];
    }
    // leftover − late = decayed inventory − recipe · production
    let mut a_eq = DMatrix::zeros(n1, n);
    let mut b_eq = DVector::zeros(n1);
    for t in 0..n1 {
        for s in 0..np {
            a_eq[(t, s)] = config.recipe[t][s];
        }
        a_eq[(t, np + t)] = 1.0;
        a_eq[(t, np + n1 + t)] = -1.0;
        b_eq[t] = sample.decay[t] * x[t];
    }
    // production ≤ demand, everything ≥ 0
    let mut a_ub = DMatrix::zeros(np + n, n);
    let mut b_ub = DVector::zeros(np + n);
    for s in 0..np {
        a_ub[(s, s)] = 1.0;
        b_ub[s] = sample.demands[s];
    }
    for j in 0..n {
        a_ub[(np + j, j)] = -1.0;
    }
    let lp = LinearProgram {
        minimize: cost,
        a_ub,
        b_ub,
        a_eq,
        b_eq,
    };
    match solve_lp(&lp).ok()? {
        LpOutcome::Optimal(sol) => Some(sol.value),
        _ => None,
    }
}

/// Summary statistics of a batch of evaluations. Quantiles are nearest-rank
/// order statistics (no interpolation); the deviation is the population one,
/// so a single evaluation reports zero spread.
#[derive(Clone, Debug)]
pub struct OutOfSampleStats {
    pub mean: f64,
    pub median: f64,
    pub q10: f64,
    pub q90: f64,
    pub std: f64,
}

/// Nearest-rank quantile of already-sorted data.
fn nearest_rank(sorted: &[f64], level: f64) -> f64 {
    let n = sorted.len();
    let rank = ((level * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

pub fn summarize(values: &[f64]) -> OutOfSampleStats {
    assert!(!values.is_empty());
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    OutOfSampleStats {
        mean,
        median: nearest_rank(&sorted, 0.5),
        q10: nearest_rank(&sorted, 0.1),
        q90: nearest_rank(&sorted, 0.9),
        std: var.sqrt(),
    }
}

/// Total costs `f(x) + recourse` on `count` fresh scenarios, in sample order.
pub fn evaluate_values(
    config: &ProductionConfig,
    x: &[f64],
    eval_seed: u64,
    count: usize,
) -> Result<Vec<f64>, ProductionError> {
    let first_stage: f64 = config
        .unit_cost
        .iter()
        .zip(x.iter())
        .map(|(c, xt)| c * xt)
        .sum();
    let samples = sample_uncertainty(config, eval_seed, count);
    let costs = par::map_range(count, |i| recourse_cost(config, x, &samples[i]));
    costs
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            c.map(|v| first_stage + v)
                .ok_or(ProductionError::Evaluation { sample: i })
        })
        .collect()
}

/// Out-of-sample performance of a first-stage decision.
pub fn evaluate_out_of_sample(
    config: &ProductionConfig,
    x: &[f64],
    eval_seed: u64,
    count: usize,
) -> Result<OutOfSampleStats, ProductionError> {
    let values = evaluate_values(config, x, eval_seed, count)?;
    Ok(summarize(&values))
}
