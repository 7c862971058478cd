//! Truncated moment sequences (tms) and the structured matrices built from
//! them. A tms `y` indexes pseudo-moments `y_α` by the graded-lex basis; the
//! moment matrix `M_k[y]` and localizing matrices `L_q[y]` are the linear
//! images whose positive semidefiniteness defines the relaxation feasible set:
//! `vec(a)ᵀ L_q[y] vec(b) = ⟨q·a·b, y⟩` for polynomials `a, b` of degree
//! `≤ k − ⌈deg(q)/2⌉`.

use std::sync::Arc;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::polybasis::{MonomialBasis, MultiIndex, Polynomial};

#[derive(Debug, Error, PartialEq)]
pub enum MomentError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("tms degree {got} too low, need at least {needed}")]
    DegreeTooLow { needed: u32, got: u32 },
    #[error("atom weights must be finite and nonnegative")]
    BadWeights,
    #[error("polynomial degree {0} exceeds the tms degree {1}")]
    PairDegree(u32, u32),
}

/// A truncated moment sequence: one value per basis monomial.
#[derive(Clone, Debug)]
pub struct Tms {
    basis: Arc<MonomialBasis>,
    values: Vec<f64>,
}

impl Tms {
    pub fn new(basis: Arc<MonomialBasis>, values: Vec<f64>) -> Result<Self, MomentError> {
        if values.len() != basis.len() {
            return Err(MomentError::DimensionMismatch {
                expected: basis.len(),
                got: values.len(),
            });
        }
        Ok(Tms { basis, values })
    }

    /// Moments of the point mass at `point`.
    pub fn dirac(basis: Arc<MonomialBasis>, point: &[f64]) -> Self {
        let values = basis.eval_vector(point);
        Tms { basis, values }
    }

    /// Moments of the atomic measure `Σ_j weights[j] · δ_{points[j]}`.
    pub fn from_atoms(
        basis: Arc<MonomialBasis>,
        points: &[Vec<f64>],
        weights: &[f64],
    ) -> Result<Self, MomentError> {
        if points.len() != weights.len() {
            return Err(MomentError::DimensionMismatch {
                expected: points.len(),
                got: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(MomentError::BadWeights);
        }
        let mut values = vec![0.0; basis.len()];
        for (z, &w) in points.iter().zip(weights) {
            if z.len() != basis.nvars() {
                return Err(MomentError::DimensionMismatch {
                    expected: basis.nvars(),
                    got: z.len(),
                });
            }
            for (i, m) in basis.iter().enumerate() {
                values[i] += w * m.eval(z);
            }
        }
        Ok(Tms { basis, values })
    }

    pub fn basis(&self) -> &Arc<MonomialBasis> {
        &self.basis
    }

    pub fn nvars(&self) -> usize {
        self.basis.nvars()
    }

    pub fn degree(&self) -> u32 {
        self.basis.max_degree()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, exps: &[u32]) -> Option<f64> {
        self.basis
            .index_of(&MultiIndex(exps.to_vec()))
            .map(|i| self.values[i])
    }

    /// `y_0`, the mass of the pseudo-measure.
    pub fn mass(&self) -> f64 {
        self.values[0]
    }

    /// `⟨p, y⟩ = Σ_α p_α y_α`.
    pub fn pair(&self, p: &Polynomial) -> Result<f64, MomentError> {
        if p.nvars() != self.nvars() {
            return Err(MomentError::DimensionMismatch {
                expected: self.nvars(),
                got: p.nvars(),
            });
        }
        let mut acc = 0.0;
        for (m, &c) in p.terms() {
            match self.basis.index_of(m) {
                Some(i) => acc += c * self.values[i],
                None => return Err(MomentError::PairDegree(m.degree(), self.degree())),
            }
        }
        Ok(acc)
    }
}

/// `M_k[y]`, the moment matrix of order `k`.
pub fn moment_matrix(y: &Tms, k: u32) -> Result<DMatrix<f64>, MomentError> {
    localizing_matrix(&Polynomial::constant(y.nvars(), 1.0), y, k)
}

/// `L_q[y]`, the localizing matrix of the generator `q` at order `k`.
pub fn localizing_matrix(q: &Polynomial, y: &Tms, k: u32) -> Result<DMatrix<f64>, MomentError> {
    let template = LocalizerTemplate::new(q, y.basis(), k)?;
    Ok(template.apply(y.values()))
}

fn tri_len(dim: usize) -> usize {
    dim * (dim + 1) / 2
}

#[inline]
fn tri_index(dim: usize, i: usize, j: usize) -> usize {
    // upper triangle, row-major, i <= j
    i * dim - i * (i + 1) / 2 + j
}

///// Precompiled localizing matrix: for each entry `(i, j)` the sparse linear
/// functional `y ↦ Σ coeff · y[idx]` over a fixed tms layout. Compiling once
/// lets the solver re-evaluate the matrix and its adjoint cheaply.
#[derive(Clone, Debug)]
pub struct LocalizerTemplate {
    dim: usize,
    /// upper-triangle entries, `tri_index` layout
    entries: Vec<Vec<(usize, f64)>>,
    generator_degree: u32,
}

impl LocalizerTemplate {
    /// Compile `L_q` at order `k` against a tms basis of degree `2k`.
    pub fn new(
        q: &Polynomial,
        tms_basis: &Arc<MonomialBasis>,
        k: u32,
    ) -> Result<Self, MomentError> {
        if q.nvars() != tms_basis.nvars() {
            return Err(MomentError::DimensionMismatch {
                expected: tms_basis.nvars(),
                got: q.nvars(),
            });
        }
        if tms_basis.max_degree() < 2 * k {
            return Err(MomentError::DegreeTooLow {
                needed: 2 * k,
                got: tms_basis.max_degree(),
            });
        }
        let half = q.degree().div_ceil(2);
        if k < half {
            return Err(MomentError::DegreeTooLow {
                needed: half,
                got: k,
            });
        }
        let row_basis = MonomialBasis::new(q.nvars(), k - half);
        let dim = row_basis.len();
        let mut entries = vec![Vec::new(); tri_len(dim)];
        for i in 0..dim {
            for j in i..dim {
                let prod = row_basis.at(i).sum(row_basis.at(j));
                let terms = &mut entries[tri_index(dim, i, j)];
                for (gamma, &c) in q.terms() {
                    let mono = prod.sum(gamma);
                    let idx = tms_basis
                        .index_of(&mono)
                        .expect("entry degree bounded by 2k");
                    terms.push((idx, c));
                }
            }
        }
        Ok(LocalizerTemplate {
            dim,
            entries,
            generator_degree: q.degree(),
        })
    }

    /// Assemble a template directly from per-entry sparse functionals
    /// (upper triangle, row-major). Escape hatch for matrix constraints that
    /// do not come from a localizing construction.
    pub fn from_entries(dim: usize, upper: Vec<Vec<(usize, f64)>>) -> Result<Self, MomentError> {
        if upper.len() != tri_len(dim) {
            return Err(MomentError::DimensionMismatch {
                expected: tri_len(dim),
                got: upper.len(),
            });
        }
        Ok(LocalizerTemplate {
            dim,
            entries: upper,
            generator_degree: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn generator_degree(&self) -> u32 {
        self.generator_degree
    }

    /// Entry `(i, j)` (upper triangle) as a sparse functional of the tms.
    pub fn entry(&self, i: usize, j: usize) -> &[(usize, f64)] {
        debug_assert!(i <= j);
        &self.entries[tri_index(self.dim, i, j)]
    }

    /// Evaluate against raw tms values (symmetric dense result).
    pub fn apply(&self, values: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for i in 0..self.dim {
            for j in i..self.dim {
                let v: f64 = self
                    .entry(i, j)
                    .iter()
                    .map(|&(idx, c)| c * values[idx])
                    .sum();
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }
}
