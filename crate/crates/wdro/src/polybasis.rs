//! Monomial bookkeeping: multi-indices in graded lexicographic order,
//! dense enumeration of truncated bases, and sparse multivariate polynomials
//! with exactly the arithmetic the relaxation builders need.

use std::collections::{BTreeMap, HashMap};

use nalgebra::DMatrix;
use thiserror::Error;

/// Coefficients with magnitude below this are dropped after arithmetic.
pub const COEFF_EPS: f64 = 1e-14;

#[derive(Debug, Error, PartialEq)]
pub enum PolyError {
    #[error("dimension mismatch: expected {expected} variables, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("wasserstein order must be even and >= 2, got {0}")]
    OddPower(u32),
    #[error("norm matrix is not symmetric")]
    NotSymmetric,
    #[error("norm matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("monomial of degree {degree} exceeds basis degree {max}")]
    DegreeTooHigh { degree: u32, max: u32 },
    #[error("polynomial parse error at byte {at}: {msg}")]
    Parse { at: usize, msg: String },
}

/// Exponent vector of one monomial.
///
/// The ordering is graded lexicographic: lower total degree first; within a
/// degree, ties are broken so that variable 1 outranks variable 2, and so on.
/// For two variables and degree two this enumerates
/// `1, z1, z2, z1^2, z1*z2, z2^2`.
#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub struct MultiIndex(pub Vec<u32>);

impl MultiIndex {
    pub fn zero(nvars: usize) -> Self {
        MultiIndex(vec![0; nvars])
    }

    pub fn unit(nvars: usize, var: usize) -> Self {
        let mut e = vec![0; nvars];
        e[var] = 1;
        MultiIndex(e)
    }

    pub fn nvars(&self) -> usize {
        self.0.len()
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn sum(&self, other: &MultiIndex) -> MultiIndex {
        debug_assert_eq!(self.nvars(), other.nvars());
        MultiIndex(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    /// `point^alpha`.
    pub fn eval(&self, point: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(point)
            .map(|(&e, &x)| x.powi(e as i32))
            .product()
    }
}

impl PartialOrd for MultiIndex {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for MultiIndex {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Grade by total degree, then reverse-lex on exponents so that a
        // higher power of an earlier variable comes first.
        self.degree()
            .cmp(&other.degree())
            .then_with(|| other.0.cmp(&self.0))
    }
}

/// All monomials in `nvars` variables of total degree at most `max_degree`,
/// listed in graded-lex order with an index lookup.
#[derive(Clone, Debug)]
pub struct MonomialBasis {
    nvars: usize,
    max_degree: u32,
    list: Vec<MultiIndex>,
    index: HashMap<MultiIndex, usize>,
}

impl MonomialBasis {
    pub fn new(nvars: usize, max_degree: u32) -> Self {
        let mut list = Vec::new();
        for deg in 0..=max_degree {
            enumerate_degree(nvars, deg, &mut Vec::new(), &mut list);
        }
        let index = list
            .iter()
            .enumerate()
            .map(|(i, m)| (m.clone(), i))
            .collect();
        MonomialBasis {
            nvars,
            max_degree,
            list,
            index,
        }
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn max_degree(&self) -> u32 {
        self.max_degree
    }

    pub fn len(&self) -> usize {
        self.list.len()
    }

    pub fn is_empty(&self) -> bool {
        self.list.is_empty()
    }

    pub fn at(&self, i: usize) -> &MultiIndex {
        &self.list[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &MultiIndex> {
        self.list.iter()
    }

    pub fn index_of(&self, m: &MultiIndex) -> Option<usize> {
        self.index.get(m).copied()
    }

    /// Coefficients of `p` on this basis, zero-padded.
    pub fn coeff_vector(&self, p: &Polynomial) -> Result<Vec<f64>, PolyError> {
        if p.nvars() != self.nvars {
            return Err(PolyError::DimensionMismatch {
                expected: self.nvars,
                got: p.nvars(),
            });
        }
        let mut c = vec![0.0; self.len()];
        for (m, &coeff) in p.terms() {
            match self.index_of(m) {
                Some(i) => c[i] = coeff,
                None => {
                    return Err(PolyError::DegreeTooHigh {
                        degree: m.degree(),
                        max: self.max_degree,
                    })
                }
            }
        }
        Ok(c)
    }

    /// `[point]_t`: the basis evaluated entrywise at a point.
    pub fn eval_vector(&self, point: &[f64]) -> Vec<f64> {
        self.list.iter().map(|m| m.eval(point)).collect()
    }
}

fn enumerate_degree(nvars: usize, deg: u32, prefix: &mut Vec<u32>, out: &mut Vec<MultiIndex>) {
    if nvars == 1 {
        let mut e = prefix.clone();
        e.push(deg);
        out.push(MultiIndex(e));
        return;
    }
    for e in (0..=deg).rev() {
        prefix.push(e);
        enumerate_degree(nvars - 1, deg - e, prefix, out);
        prefix.pop();
    }
}

/// Sparse multivariate polynomial with `f64` coefficients.
///
/// Terms are kept in a map ordered by the graded-lex monomial order; the zero
/// polynomial has no terms and degree 0 by convention.
#[derive(Clone, Debug, PartialEq)]
pub struct Polynomial {
    nvars: usize,
    terms: BTreeMap<MultiIndex, f64>,
}

impl Polynomial {
    pub fn zero(nvars: usize) -> Self {
        Polynomial {
            nvars,
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(nvars: usize, c: f64) -> Self {
        let mut p = Polynomial::zero(nvars);
        if c.abs() > COEFF_EPS {
            p.terms.insert(MultiIndex::zero(nvars), c);
        }
        p
    }

    pub fn variable(nvars: usize, var: usize) -> Self {
        assert!(var < nvars, "variable index out of range");
        let mut p = Polynomial::zero(nvars);
        p.terms.insert(MultiIndex::unit(nvars, var), 1.0);
        p
    }

    pub fn from_terms(
        nvars: usize,
        terms: impl IntoIterator<Item = (Vec<u32>, f64)>,
    ) -> Result<Self, PolyError> {
        let mut p = Polynomial::zero(nvars);
        for (exps, coeff) in terms {
            if exps.len() != nvars {
                return Err(PolyError::DimensionMismatch {
                    expected: nvars,
                    got: exps.len(),
                });
            }
            p.add_term(MultiIndex(exps), coeff);
        }
        p.prune();
        Ok(p)
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn terms(&self) -> impl Iterator<Item = (&MultiIndex, &f64)> {
        self.terms.iter()
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Total degree; 0 for the zero polynomial.
    pub fn degree(&self) -> u32 {
        self.terms.keys().map(MultiIndex::degree).max().unwrap_or(0)
    }

    pub fn coeff(&self, exps: &[u32]) -> f64 {
        self.terms
            .get(&MultiIndex(exps.to_vec()))
            .copied()
            .unwrap_or(0.0)
    }

    fn add_term(&mut self, m: MultiIndex, coeff: f64) {
        let entry = self.terms.entry(m).or_insert(0.0);
        *entry += coeff;
    }

    fn prune(&mut self) {
        self.terms.retain(|_, c| c.abs() > COEFF_EPS);
    }

    pub fn eval(&self, point: &[f64]) -> f64 {
        debug_assert_eq!(point.len(), self.nvars);
        self.terms.iter().map(|(m, &c)| c * m.eval(point)).sum()
    }

    pub fn add(&self, other: &Polynomial) -> Polynomial {
        debug_assert_eq!(self.nvars, other.nvars);
        let mut out = self.clone();
        for (m, &c) in &other.terms {
            out.add_term(m.clone(), c);
        }
        out.prune();
        out
    }

    pub fn sub(&self, other: &Polynomial) -> Polynomial {
        self.add(&other.scale(-1.0))
    }

    pub fn scale(&self, s: f64) -> Polynomial {
        let mut out = self.clone();
        for c in out.terms.values_mut() {
            *c *= s;
        }
        out.prune();
        out
    }

    pub fn mul(&self, other: &Polynomial) -> Polynomial {
        debug_assert_eq!(self.nvars, other.nvars);
        let mut out = Polynomial::zero(self.nvars);
        for (ma, &ca) in &self.terms {
            for (mb, &cb) in &other.terms {
                out.add_term(ma.sum(mb), ca * cb);
            }
        }
        out.prune();
        out
    }

    pub fn pow(&self, e: u32) -> Polynomial {
        let mut out = Polynomial::constant(self.nvars, 1.0);
        for _ in 0..e {
            out = out.mul(self);
        }
        out
    }

    /// Partial derivative with respect to variable `var`.
    pub fn derivative(&self, var: usize) -> Polynomial {
        let mut out = Polynomial::zero(self.nvars);
        for (m, &c) in &self.terms {
            let e = m.0[var];
            if e > 0 {
                let mut d = m.clone();
                d.0[var] = e - 1;
                out.add_term(d, c * e as f64);
            }
        }
        out.prune();
        out
    }

    /// Substitute numeric values for the first `vals.len()` variables,
    /// returning a polynomial in the remaining trailing variables.
    pub fn substitute_prefix(&self, vals: &[f64]) -> Polynomial {
        let k = vals.len();
        assert!(k <= self.nvars);
        let rest = self.nvars - k;
        let mut out = Polynomial::zero(rest);
        for (m, &c) in &self.terms {
            let factor: f64 = m.0[..k]
                .iter()
                .zip(vals)
                .map(|(&e, &v)| v.powi(e as i32))
                .product();
            if factor == 0.0 {
                continue;
            }
            out.add_term(MultiIndex(m.0[k..].to_vec()), c * factor);
        }
        out.prune();
        out
    }

    /// Reinterpret in a larger variable space; existing variables keep their
    /// indices (new variables are appended with exponent zero).
    pub fn extend_vars(&self, new_nvars: usize) -> Polynomial {
        assert!(new_nvars >= self.nvars);
        let mut out = Polynomial::zero(new_nvars);
        for (m, &c) in &self.terms {
            let mut e = m.0.clone();
            e.resize(new_nvars, 0);
            out.terms.insert(MultiIndex(e), c);
        }
        out
    }

    pub fn gradient(&self) -> Vec<Polynomial> {
        (0..self.nvars).map(|v| self.derivative(v)).collect()
    }
}

/// Render a polynomial in the text form used by configs: a sum of terms
/// `coeff * v^e * ...`, with the flat variable space split into named blocks.
/// Each `(prefix, count)` pair names `count` consecutive variables
/// `prefix1 .. prefix<count>`; the blocks must cover `p.nvars()` exactly.
///
/// Coefficients print through the shortest round-trip form, so
/// `parse_polynomial` recovers the polynomial bit for bit.
pub fn format_polynomial(p: &Polynomial, blocks: &[(&str, usize)]) -> String {
    let total: usize = blocks.iter().map(|(_, c)| c).sum();
    assert_eq!(total, p.nvars(), "blocks must cover every variable");
    if p.is_zero() {
        return "0".to_string();
    }
    let mut names = Vec::with_capacity(total);
    for (prefix, count) in blocks {
        for i in 1..=*count {
            names.push(format!("{prefix}{i}"));
        }
    }
    let mut out = String::new();
    for (m, &c) in p.terms() {
        if out.is_empty() {
            if c < 0.0 {
                out.push('-');
            }
        } else {
            out.push_str(if c < 0.0 { " - " } else { " + " });
        }
        out.push_str(&format!("{}", c.abs()));
        for (v, &e) in m.0.iter().enumerate() {
            if e == 0 {
                continue;
            }
            out.push_str(" * ");
            out.push_str(&names[v]);
            if e > 1 {
                out.push_str(&format!("^{e}"));
            }
        }
    }
    out
}

/// Parse the text form produced by [`format_polynomial`]: signed terms joined
/// by `+`/`-`, each a `*`-product of numeric literals and variables `v^e`
/// (exponent `1` may be omitted; repeated variables multiply). Variable names
/// resolve against the same `(prefix, count)` block layout.
pub fn parse_polynomial(text: &str, blocks: &[(&str, usize)]) -> Result<Polynomial, PolyError> {
    let nvars: usize = blocks.iter().map(|(_, c)| c).sum();
    let err = |at: usize, msg: String| PolyError::Parse { at, msg };
    let bytes = text.as_bytes();
    let mut pos = 0usize;
    let skip_ws = |pos: &mut usize| {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
    };
    // number literal: digits with optional fraction and exponent
    let number = |pos: &mut usize| -> Option<f64> {
        let start = *pos;
        let mut end = *pos;
        while end < bytes.len() && (bytes[end].is_ascii_digit() || bytes[end] == b'.') {
            end += 1;
        }
        if end == start {
            return None;
        }
        if end < bytes.len() && (bytes[end] == b'e' || bytes[end] == b'E') {
            let mut exp = end + 1;
            if exp < bytes.len() && (bytes[exp] == b'+' || bytes[exp] == b'-') {
                exp += 1;
            }
            let digits = exp;
            while exp < bytes.len() && bytes[exp].is_ascii_digit() {
                exp += 1;
            }
            if exp > digits {
                end = exp;
            }
        }
        match text[start..end].parse::<f64>() {
            Ok(v) => {
                *pos = end;
                Some(v)
            }
            Err(_) => None,
        }
    };
    // variable: alphabetic prefix then a 1-based index, resolved to a flat slot
    let variable = |pos: &mut usize| -> Result<Option<usize>, PolyError> {
        let rest = &text[*pos..];
        let alpha: String = rest.chars().take_while(|c| c.is_alphabetic()).collect();
        if alpha.is_empty() {
            return Ok(None);
        }
        let after = *pos + alpha.len();
        let digits: String = text[after..]
            .chars()
            .take_while(|c| c.is_ascii_digit())
            .collect();
        if digits.is_empty() {
            return Err(err(*pos, format!("variable `{alpha}` needs a 1-based index")));
        }
        let idx: usize = digits
            .parse()
            .map_err(|_| err(after, format!("bad variable index `{digits}`")))?;
        let mut offset = 0usize;
        for (prefix, count) in blocks {
            if alpha == *prefix {
                if idx == 0 || idx > *count {
                    return Err(err(
                        *pos,
                        format!("`{alpha}{idx}` out of range (this block has {count})"),
                    ));
                }
                *pos = after + digits.len();
                return Ok(Some(offset + idx - 1));
            }
            offset += count;
        }
        Err(err(*pos, format!("unknown variable prefix `{alpha}`")))
    };
    let mut poly = Polynomial::zero(nvars);
    skip_ws(&mut pos);
    if pos == bytes.len() {
        return Err(err(0, "empty polynomial".to_string()));
    }
    loop {
        // sign, then a product of factors
        let mut coeff = 1.0;
        skip_ws(&mut pos);
        if pos < bytes.len() && (bytes[pos] == b'+' || bytes[pos] == b'-') {
            if bytes[pos] == b'-' {
                coeff = -1.0;
            }
            pos += 1;
        }
        let mut exps = vec![0u32; nvars];
        let mut factors = 0usize;
        loop {
            skip_ws(&mut pos);
            let at = pos;
            if let Some(v) = number(&mut pos) {
                coeff *= v;
            } else if let Some(slot) = variable(&mut pos)? {
                let mut e = 1u32;
                skip_ws(&mut pos);
                if pos < bytes.len() && bytes[pos] == b'^' {
                    pos += 1;
                    skip_ws(&mut pos);
                    let estart = pos;
                    let ev = number(&mut pos)
                        .ok_or_else(|| err(estart, "exponent must be an integer".to_string()))?;
                    if ev.fract() != 0.0 || ev < 0.0 || ev > u32::MAX as f64 {
                        return Err(err(estart, format!("exponent {ev} is not a nonnegative integer")));
                    }
                    e = ev as u32;
                }
                exps[slot] += e;
            } else {
                return Err(err(at, "expected a coefficient or variable".to_string()));
            }
            factors += 1;
            skip_ws(&mut pos);
            if pos < bytes.len() && bytes[pos] == b'*' {
                pos += 1;
                continue;
            }
            break;
        }
        if factors == 0 {
            return Err(err(pos, "empty term".to_string()));
        }
        poly.add_term(MultiIndex(exps), coeff);
        skip_ws(&mut pos);
        if pos == bytes.len() {
            break;
        }
        if bytes[pos] != b'+' && bytes[pos] != b'-' {
            let ch = text[pos..].chars().next().unwrap();
            return Err(err(pos, format!("unexpected `{ch}`")));
        }
    }
    poly.prune();
    Ok(poly)
}

/// Compose `p` with the shift `z ↦ z + shift` (exact binomial expansion).
/// Total degree is preserved.
pub fn translate(p: &Polynomial, shift: &[f64]) -> Polynomial {
    assert_eq!(p.nvars(), shift.len());
    let n = p.nvars();
    // cache (var, power) -> (z_var + shift_var)^power
    let mut cache: HashMap<(usize, u32), Polynomial> = HashMap::new();
    let mut out = Polynomial::zero(n);
    for (m, &c) in &p.terms {
        let mut term = Polynomial::constant(n, c);
        for (var, &e) in m.0.iter().enumerate() {
            if e == 0 {
                continue;
            }
            let factor = cache.entry((var, e)).or_insert_with(|| {
                Polynomial::variable(n, var)
                    .add(&Polynomial::constant(n, shift[var]))
                    .pow(e)
            });
            term = term.mul(factor);
        }
        out = out.add(&term);
    }
    out
}

/// `((ξ − center)ᵀ H (ξ − center))^{p/2}` for even `p ≥ 2` and `H ≻ 0`.
///
/// This is the polynomial penalty induced by the `H`-weighted norm raised to
/// the transport order; positive definiteness is checked by attempting a
/// Cholesky factorization.
pub fn distance_power(
    center: &[f64],
    norm_matrix: &DMatrix<f64>,
    p: u32,
) -> Result<Polynomial, PolyError> {
    let n = center.len();
    if norm_matrix.nrows() != n || norm_matrix.ncols() != n {
        return Err(PolyError::DimensionMismatch {
            expected: n,
            got: norm_matrix.nrows(),
        });
    }
    if p < 2 || p % 2 != 0 {
        return Err(PolyError::OddPower(p));
    }
    let sym_err = (norm_matrix - norm_matrix.transpose()).abs().max();
    if sym_err > 1e-10 {
        return Err(PolyError::NotSymmetric);
    }
    if norm_matrix.clone().cholesky().is_none() {
        return Err(PolyError::NotPositiveDefinite);
    }
    // quadratic form in (ξ - center)
    let mut q = Polynomial::zero(n);
    for a in 0..n {
        for b in 0..n {
            let h = norm_matrix[(a, b)];
            if h == 0.0 {
                continue;
            }
            let da = Polynomial::variable(n, a).add(&Polynomial::constant(n, -center[a]));
            let db = Polynomial::variable(n, b).add(&Polynomial::constant(n, -center[b]));
            q = q.add(&da.mul(&db).scale(h));
        }
    }
    Ok(q.pow(p / 2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random_poly(rng: &mut SplitMix64, nvars: usize, deg: u32, terms: usize) -> Polynomial {
        let basis = MonomialBasis::new(nvars, deg);
        let mut p = Polynomial::zero(nvars);
        for _ in 0..terms {
            let i = rng.index(basis.len());
            p.add_term(basis.at(i).clone(), rng.uniform(-2.0, 2.0));
        }
        p.prune();
        p
    }

    fn random_point(rng: &mut SplitMix64, nvars: usize) -> Vec<f64> {
        (0..nvars).map(|_| rng.uniform(-1.5, 1.5)).collect()
    }

    #[test]
    fn basis_order_matches_worked_two_var_layout() {
        let b = MonomialBasis::new(2, 2);
        let got: Vec<Vec<u32>> = b.iter().map(|m| m.0.clone()).collect();
        assert_eq!(
            got,
            vec![
                vec![0, 0],
                vec![1, 0],
                vec![0, 1],
                vec![2, 0],
                vec![1, 1],
                vec![0, 2]
            ]
        );
    }

    #[test]
    fn basis_sizes_are_binomial() {
        let binom = |n: u64, k: u64| -> u64 {
            let mut r = 1u64;
            for i in 0..k {
                r = r * (n - i) / (i + 1);
            }
            r
        };
        for &(n, t) in &[(1usize, 4u32), (2, 2), (2, 4), (3, 2), (3, 3), (4, 3)] {
            let b = MonomialBasis::new(n, t);
            assert_eq!(b.len() as u64, binom((n as u64) + (t as u64), t as u64));
        }
    }

    #[test]
    fn order_is_graded_and_strict() {
        let b = MonomialBasis::new(3, 4);
        for i in 1..b.len() {
            assert!(b.at(i - 1) < b.at(i), "basis must be strictly increasing");
        }
        // round-trip through the index map
        for (i, m) in b.iter().enumerate() {
            assert_eq!(b.index_of(m), Some(i));
        }
    }

    #[test]
    fn amgm_cost_vanishes_at_ones_and_is_nonpositive_on_orthant() {
        // 3ξ1ξ2ξ3 − ξ1²ξ2 − ξ1ξ2² − ξ3³ equals 0 at (1,1,1) and is ≤ 0 on ξ ≥ 0.
        let f = Polynomial::from_terms(
            3,
            vec![
                (vec![1, 1, 1], 3.0),
                (vec![2, 1, 0], -1.0),
                (vec![1, 2, 0], -1.0),
                (vec![0, 0, 3], -1.0),
            ],
        )
        .unwrap();
        assert!(f.eval(&[1.0, 1.0, 1.0]).abs() < 1e-12);
        let mut rng = SplitMix64::new(7);
        for _ in 0..500 {
            let p: Vec<f64> = (0..3).map(|_| rng.uniform(0.0, 3.0)).collect();
            assert!(f.eval(&p) <= 1e-9, "AM-GM violated at {p:?}");
        }
    }

    #[test]
    fn mul_matches_pointwise_products() {
        let mut rng = SplitMix64::new(11);
        for _ in 0..50 {
            let p = random_poly(&mut rng, 2, 3, 4);
            let q = random_poly(&mut rng, 2, 2, 3);
            let prod = p.mul(&q);
            for _ in 0..10 {
                let z = random_point(&mut rng, 2);
                let want = p.eval(&z) * q.eval(&z);
                assert!((prod.eval(&z) - want).abs() <= 1e-10 * (1.0 + want.abs()));
            }
        }
    }

    #[test]
    fn translate_is_exact_shift() {
        // (z+1)² = z² + 2z + 1
        let p = Polynomial::from_terms(1, vec![(vec![2], 1.0)]).unwrap();
        let t = translate(&p, &[1.0]);
        assert_eq!(t.coeff(&[0]), 1.0);
        assert_eq!(t.coeff(&[1]), 2.0);
        assert_eq!(t.coeff(&[2]), 1.0);

        let mut rng = SplitMix64::new(13);
        for _ in 0..50 {
            let p = random_poly(&mut rng, 3, 3, 5);
            let s = random_point(&mut rng, 3);
            let t = translate(&p, &s);
            assert!(t.degree() <= p.degree());
            for _ in 0..5 {
                let z = random_point(&mut rng, 3);
                let shifted: Vec<f64> = z.iter().zip(&s).map(|(a, b)| a + b).collect();
                let want = p.eval(&shifted);
                assert!((t.eval(&z) - want).abs() <= 1e-9 * (1.0 + want.abs()));
            }
        }
    }

    #[test]
    fn distance_power_univariate_scalings() {
        // H = I, p = 2: ξ²
        let q = distance_power(&[0.0], &DMatrix::identity(1, 1), 2).unwrap();
        assert_eq!(q.coeff(&[2]), 1.0);
        assert_eq!(q.num_terms(), 1);
        // H = 4, p = 4: (4ξ²)² = 16ξ⁴
        let h = DMatrix::from_element(1, 1, 4.0);
        let q = distance_power(&[0.0], &h, 4).unwrap();
        assert_eq!(q.coeff(&[4]), 16.0);
        assert_eq!(q.num_terms(), 1);
    }

    #[test]
    fn distance_power_expands_centered_quadratic() {
        // H = I, center (1,1): ξ1²+ξ2²−2ξ1−2ξ2+2
        let q = distance_power(&[1.0, 1.0], &DMatrix::identity(2, 2), 2).unwrap();
        assert_eq!(q.coeff(&[2, 0]), 1.0);
        assert_eq!(q.coeff(&[0, 2]), 1.0);
        assert_eq!(q.coeff(&[1, 0]), -2.0);
        assert_eq!(q.coeff(&[0, 1]), -2.0);
        assert_eq!(q.coeff(&[0, 0]), 2.0);
    }

    #[test]
    fn distance_power_matches_matrix_arithmetic() {
        let mut rng = SplitMix64::new(17);
        for _ in 0..20 {
            let n = 1 + rng.index(3);
            // random PD matrix H = LLᵀ + I
            let l = DMatrix::from_fn(n, n, |i, j| {
                if i >= j {
                    rng.uniform(-1.0, 1.0)
                } else {
                    0.0
                }
            });
            let h = &l * l.transpose() + DMatrix::identity(n, n);
            let center: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let p = if rng.index(2) == 0 { 2 } else { 4 };
            let q = distance_power(&center, &h, p).unwrap();
            assert_eq!(q.degree(), p);
            for _ in 0..10 {
                let z = random_point(&mut rng, n);
                let d = nalgebra::DVector::from_iterator(
                    n,
                    z.iter().zip(&center).map(|(a, b)| a - b),
                );
                let quad = (d.transpose() * &h * &d)[(0, 0)];
                let want = quad.powi((p / 2) as i32);
                assert!((q.eval(&z) - want).abs() <= 1e-9 * (1.0 + want.abs()));
            }
        }
    }

    #[test]
    fn distance_power_rejects_bad_inputs() {
        let id = DMatrix::identity(1, 1);
        assert_eq!(
            distance_power(&[0.0], &id, 3).unwrap_err(),
            PolyError::OddPower(3)
        );
        assert_eq!(
            distance_power(&[0.0], &id, 0).unwrap_err(),
            PolyError::OddPower(0)
        );
        let indef = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert_eq!(
            distance_power(&[0.0, 0.0], &indef, 2).unwrap_err(),
            PolyError::NotPositiveDefinite
        );
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.5, 1.0]);
        assert_eq!(
            distance_power(&[0.0, 0.0], &asym, 2).unwrap_err(),
            PolyError::NotSymmetric
        );
    }

    #[test]
    fn degree_conventions() {
        assert_eq!(Polynomial::zero(2).degree(), 0);
        assert_eq!(Polynomial::constant(2, 3.0).degree(), 0);
        let p = Polynomial::from_terms(2, vec![(vec![1, 2], 1.0)]).unwrap();
        assert_eq!(p.degree(), 3);
        // cancellation prunes to zero
        let q = p.sub(&p);
        assert!(q.is_zero());
        assert_eq!(q.degree(), 0);
    }

    #[test]
    fn derivative_matches_difference_quotient() {
        let mut rng = SplitMix64::new(23);
        for _ in 0..20 {
            let p = random_poly(&mut rng, 2, 4, 6);
            let z = random_point(&mut rng, 2);
            for v in 0..2 {
                let d = p.derivative(v);
                let h = 1e-5;
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[v] += h;
                zm[v] -= h;
                let fd = (p.eval(&zp) - p.eval(&zm)) / (2.0 * h);
                assert!((d.eval(&z) - fd).abs() <= 1e-5 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn substitute_prefix_fixes_leading_block() {
        // F(x, ξ) = x1²ξ + 2x1 − ξ² over (x, ξ); at x1 = 3: 9ξ + 6 − ξ²
        let f = Polynomial::from_terms(2, vec![(vec![2, 1], 1.0), (vec![1, 0], 2.0), (vec![0, 2], -1.0)])
            .unwrap();
        let g = f.substitute_prefix(&[3.0]);
        assert_eq!(g.nvars(), 1);
        assert_eq!(g.coeff(&[1]), 9.0);
        assert_eq!(g.coeff(&[0]), 6.0);
        assert_eq!(g.coeff(&[2]), -1.0);
    }

    #[test]
    fn text_form_round_trips_random_polynomials() {
        let blocks: &[(&str, usize)] = &[("x", 1), ("xi", 2)];
        let mut rng = SplitMix64::new(31);
        for _ in 0..100 {
            let p = random_poly(&mut rng, 3, 4, 6);
            let text = format_polynomial(&p, blocks);
            let q = parse_polynomial(&text, blocks).unwrap();
            assert_eq!(p, q, "round trip changed `{text}`");
        }
    }

    #[test]
    fn parse_accepts_hand_written_forms() {
        let blocks: &[(&str, usize)] = &[("xi", 2)];
        // bare constant, implicit coefficient, repeated factors, scientific
        let p = parse_polynomial("xi1^3 + xi2", blocks).unwrap();
        assert_eq!(p.coeff(&[3, 0]), 1.0);
        assert_eq!(p.coeff(&[0, 1]), 1.0);
        let p = parse_polynomial("-xi1 * xi1 + 2", blocks).unwrap();
        assert_eq!(p.coeff(&[2, 0]), -1.0);
        assert_eq!(p.coeff(&[0, 0]), 2.0);
        let p = parse_polynomial("1.5e-3 * xi2^2 * 2", blocks).unwrap();
        assert_eq!(p.coeff(&[0, 2]), 3.0e-3);
        assert!(parse_polynomial("0", blocks).unwrap().is_zero());
        // cancellation prunes
        assert!(parse_polynomial("xi1 - xi1", blocks).unwrap().is_zero());
    }

    #[test]
    fn parse_rejects_malformed_text() {
        let blocks: &[(&str, usize)] = &[("x", 1), ("xi", 2)];
        for bad in [
            "", "y1", "xi", "xi0", "xi3", "x1 +", "x1 ^", "x1^2.5", "x1 x1", "* x1",
            "x1^-2", "2 ** x1",
        ] {
            assert!(
                matches!(parse_polynomial(bad, blocks), Err(PolyError::Parse { .. })),
                "`{bad}` should fail to parse"
            );
        }
    }

    #[test]
    fn format_names_variables_by_block() {
        let blocks: &[(&str, usize)] = &[("x", 1), ("xi", 2)];
        let p = Polynomial::from_terms(
            3,
            vec![(vec![1, 0, 2], -2.5), (vec![0, 1, 0], 1.0), (vec![0, 0, 0], 3.0)],
        )
        .unwrap();
        assert_eq!(format_polynomial(&p, blocks), "3 + 1 * xi1 - 2.5 * x1 * xi2^2");
        assert_eq!(format_polynomial(&Polynomial::zero(3), blocks), "0");
    }

    #[test]
    fn extend_vars_keeps_indices() {
        let p = Polynomial::from_terms(2, vec![(vec![1, 2], 5.0)]).unwrap();
        let q = p.extend_vars(4);
        assert_eq!(q.nvars(), 4);
        assert_eq!(q.coeff(&[1, 2, 0, 0]), 5.0);
        assert_eq!(q.eval(&[2.0, 1.0, 9.0, -4.0]), p.eval(&[2.0, 1.0]));
    }
}
