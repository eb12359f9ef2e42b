//! Absorbed chains on a finite state space and the one-step semigroup actions.
//!
//! A chain lives on `{0, .., d-1}` plus an implicit cemetery. Only the
//! sub-stochastic transition kernel between live states is stored; the
//! one-step absorption probability of a state is its row defect.

use std::fmt;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};

/// Tolerance on row sums: rows summing to at most `1 + ROW_SUM_TOL` are accepted.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Largest magnitude tolerated by [`iterate_measure`] / [`iterate_function`].
pub const OVERFLOW_GUARD: f64 = 1e300;

/// One structural problem found while validating transition data.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    NegativeEntry { row: usize, col: usize, value: f64 },
    NonFiniteEntry { row: usize, col: usize },
    IndexOutOfRange { row: usize, col: usize, d: usize },
    RowSumExceeded { row: usize, sum: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NegativeEntry { row, col, value } => {
                write!(f, "negative entry p({row},{col}) = {value}")
            }
            Violation::NonFiniteEntry { row, col } => write!(f, "non-finite entry p({row},{col})"),
            Violation::IndexOutOfRange { row, col, d } => {
                write!(f, "entry ({row},{col}) out of range for d={d}")
            }
            Violation::RowSumExceeded { row, sum } => {
                write!(f, "row {row} sums to {sum} > 1")
            }
        }
    }
}

/// Outcome of [`validate`].
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub d: usize,
    pub violations: Vec<Violation>,
    /// States with no transition in or out other than a self-loop.
    pub isolated: Vec<usize>,
    /// Rows whose sum fell in `(1, 1 + ROW_SUM_TOL]` and were rescaled to 1.
    pub renormalized: Vec<usize>,
    /// `(from, to)` pairs that appeared more than once and were summed.
    pub duplicates: Vec<(usize, usize)>,
    /// One-step absorption probability per state (empty when invalid).
    pub absorption: Vec<f64>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks raw `(from, to, prob)` triplets against the sub-stochastic invariants.
pub fn validate(d: usize, triplets: &[(usize, usize, f64)]) -> Result<ValidationReport> {
    build(d, triplets).map(|(_, report)| report)
}

fn build(d: usize, triplets: &[(usize, usize, f64)]) -> Result<(Vec<Vec<(usize, f64)>>, ValidationReport)> {
    if d == 0 {
        return Err(Error::EmptyStateSpace);
    }
    let mut violations = Vec::new();
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); d];
    for &(row, col, value) in triplets {
        if row >= d || col >= d {
            violations.push(Violation::IndexOutOfRange { row, col, d });
            continue;
        }
        if !value.is_finite() {
            violations.push(Violation::NonFiniteEntry { row, col });
            continue;
        }
        if value < 0.0 {
            violations.push(Violation::NegativeEntry { row, col, value });
            continue;
        }
        rows[row].push((col, value));
    }

    let mut duplicates = Vec::new();
    for (x, row) in rows.iter_mut().enumerate() {
        row.sort_by_key(|&(c, _)| c);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(row.len());
        for &(c, v) in row.iter() {
            match merged.last_mut() {
                Some(last) if last.0 == c => {
                    last.1 += v;
                    if duplicates.last() != Some(&(x, c)) {
                        duplicates.push((x, c));
                    }
                }
                _ => merged.push((c, v)),
            }
        }
        merged.retain(|&(_, v)| v > 0.0);
        *row = merged;
    }

    let mut renormalized = Vec::new();
    for (x, row) in rows.iter_mut().enumerate() {
        let sum: f64 = row.iter().map(|&(_, v)| v).sum();
        if sum > 1.0 + ROW_SUM_TOL {
            violations.push(Violation::RowSumExceeded { row: x, sum });
        } else if sum > 1.0 {
            for entry in row.iter_mut() {
                entry.1 /= sum;
            }
            renormalized.push(x);
        }
    }

    let mut touched = vec![false; d];
    for (x, row) in rows.iter().enumerate() {
        for &(y, _) in row {
            if x != y {
                touched[x] = true;
                touched[y] = true;
            }
        }
    }
    let isolated = (0..d).filter(|&x| !touched[x]).collect();

    let absorption = if violations.is_empty() {
        rows.iter()
            .map(|row| (1.0 - row.iter().map(|&(_, v)| v).sum::<f64>()).max(0.0))
            .collect()
    } else {
        Vec::new()
    };

    Ok((
        rows,
        ValidationReport { d, violations, isolated, renormalized, duplicates, absorption },
    ))
}

/// A validated sub-stochastic kernel on `d` live states.
///
/// Immutable after construction; rows are stored sparsely, sorted by column,
/// with strictly positive entries only.
#[derive(Debug, Clone, PartialEq)]
pub struct AbsorbedChain {
    d: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl AbsorbedChain {
    /// Builds a chain from triplets, summing duplicates. Fails on any violation.
    pub fn from_triplets(d: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let (rows, report) = build(d, triplets)?;
        if !report.is_valid() {
            return Err(Error::InvalidChain(report.violations));
        }
        Ok(Self { d, rows })
    }

    /// Like [`AbsorbedChain::from_triplets`] but also hands back the validation report.
    pub fn with_report(d: usize, triplets: &[(usize, usize, f64)]) -> Result<(Self, ValidationReport)> {
        let (rows, report) = build(d, triplets)?;
        if !report.is_valid() {
            return Err(Error::InvalidChain(report.violations));
        }
        Ok((Self { d, rows }, report))
    }

    pub fn from_dense(matrix: &[Vec<f64>]) -> Result<Self> {
        let d = matrix.len();
        let mut triplets = Vec::new();
        for (x, row) in matrix.iter().enumerate() {
            if row.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: row.len() });
            }
            for (y, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    triplets.push((x, y, v));
                }
            }
        }
        Self::from_triplets(d, &triplets)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Positive entries of row `x`, sorted by column.
    pub fn row(&self, x: usize) -> &[(usize, f64)] {
        &self.rows[x]
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        match self.rows[x].binary_search_by_key(&y, |&(c, _)| c) {
            Ok(i) => self.rows[x][i].1,
            Err(_) => 0.0,
        }
    }

    pub fn row_sum(&self, x: usize) -> f64 {
        self.rows[x].iter().map(|&(_, v)| v).sum()
    }

    /// One-step absorption probability `1 - sum_y p(x, y)`.
    pub fn absorption(&self, x: usize) -> f64 {
        (1.0 - self.row_sum(x)).max(0.0)
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(x, row)| row.iter().map(move |&(y, v)| (x, y, v)))
            .collect()
    }

    /// The chain killed on leaving `states`; returned indices follow the order of `states`.
    pub fn restrict(&self, states: &[usize]) -> Result<AbsorbedChain> {
        let local = self.local_index(states)?;
        let mut triplets = Vec::new();
        for (i, &x) in states.iter().enumerate() {
            for &(y, v) in &self.rows[x] {
                if let Some(j) = local[y] {
                    triplets.push((i, j, v));
                }
            }
        }
        AbsorbedChain::from_triplets(states.len(), &triplets)
    }

    /// Rows restricted to `states` and re-indexed by position in `states`.
    pub fn sub_rows(&self, states: &[usize]) -> Result<Vec<Vec<(usize, f64)>>> {
        let local = self.local_index(states)?;
        Ok(states
            .iter()
            .map(|&x| self.rows[x].iter().filter_map(|&(y, p)| local[y].map(|j| (j, p))).collect())
            .collect())
    }

    /// Dense `|rows| x |cols|` block of the kernel.
    pub fn dense_block(&self, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
        let mut col_pos = vec![usize::MAX; self.d];
        for (j, &y) in cols.iter().enumerate() {
            col_pos[y] = j;
        }
        let mut m = DMatrix::zeros(rows.len(), cols.len());
        for (i, &x) in rows.iter().enumerate() {
            for &(y, v) in &self.rows[x] {
                if col_pos[y] != usize::MAX {
                    m[(i, col_pos[y])] = v;
                }
            }
        }
        m
    }

    fn local_index(&self, states: &[usize]) -> Result<Vec<Option<usize>>> {
        let mut local = vec![None; self.d];
        for (i, &x) in states.iter().enumerate() {
            if x >= self.d {
                return Err(Error::IndexOutOfRange { index: x, d: self.d });
            }
            local[x] = Some(i);
        }
        Ok(local)
    }
}

/// A finite signed measure on the live states.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct MeasureVector(pub Vec<f64>);

/// A function on the live states (extended by 0 at the cemetery).
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct FunctionVector(pub Vec<f64>);

impl MeasureVector {
    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn dirac(d: usize, x: usize) -> Self {
        let mut v = vec![0.0; d];
        v[x] = 1.0;
        Self(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn mass(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn is_positive(&self) -> bool {
        self.0.iter().all(|&v| v >= 0.0)
    }

    /// `mu(f) = sum_x mu(x) f(x)`.
    pub fn integrate(&self, f: &FunctionVector) -> f64 {
        self.0.iter().zip(&f.0).map(|(a, b)| a * b).sum()
    }

    /// Total variation norm `sum_x |mu(x)|`.
    pub fn tv_norm(&self) -> f64 {
        self.0.iter().map(|v| v.abs()).sum()
    }

    /// Weighted norm `sum_x |mu(x)| W(x)`.
    pub fn weighted_norm(&self, weight: &FunctionVector) -> f64 {
        self.0.iter().zip(&weight.0).map(|(a, w)| a.abs() * w).sum()
    }

    pub fn tv_distance(&self, other: &MeasureVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b).abs()).sum()
    }

    pub fn normalized(&self) -> Option<MeasureVector> {
        let m = self.mass();
        (m > 0.0).then(|| MeasureVector(self.0.iter().map(|v| v / m).collect()))
    }
}

impl FunctionVector {
    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn ones(d: usize) -> Self {
        Self(vec![1.0; d])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sup_norm(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `||f||_W = max_x |f(x)| / W(x)`; every weight must be at least 1.
    pub fn weighted_sup_norm(&self, weight: &FunctionVector) -> Result<f64> {
        if weight.len() != self.len() {
            return Err(Error::DimensionMismatch { expected: self.len(), got: weight.len() });
        }
        if let Some(w) = weight.0.iter().find(|&&w| !(w >= 1.0)) {
            return Err(Error::NonFinite(format!("weight {w} below 1")));
        }
        Ok(self.0.iter().zip(&weight.0).fold(0.0, |m, (f, w)| m.max(f.abs() / w)))
    }
}

fn check_len(chain: &AbsorbedChain, len: usize) -> Result<()> {
    if len != chain.d() {
        return Err(Error::DimensionMismatch { expected: chain.d(), got: len });
    }
    Ok(())
}

/// Left action `mu S_1`.
pub fn step_measure(chain: &AbsorbedChain, mu: &MeasureVector) -> Result<MeasureVector> {
    check_len(chain, mu.len())?;
    let mut out = vec![0.0; chain.d()];
    for (x, row) in chain.rows().iter().enumerate() {
        let m = mu.0[x];
        if m == 0.0 {
            continue;
        }
        for &(y, p) in row {
            out[y] += m * p;
        }
    }
    Ok(MeasureVector(out))
}

/// Right action `S_1 f`.
pub fn step_function(chain: &AbsorbedChain, f: &FunctionVector) -> Result<FunctionVector> {
    check_len(chain, f.len())?;
    let out = chain
        .rows()
        .iter()
        .map(|row| row.iter().map(|&(y, p)| p * f.0[y]).sum())
        .collect();
    Ok(FunctionVector(out))
}

fn guard(values: &[f64], step: usize) -> Result<()> {
    if values.iter().any(|v| !(v.abs() <= OVERFLOW_GUARD)) {
        return Err(Error::Overflow { step });
    }
    Ok(())
}

/// `v_k = theta^{-k} mu S_k` for `k = 0..=n`, by repeated stepping.
pub fn iterate_measure(chain: &AbsorbedChain, mu: &MeasureVector, n: usize, theta: f64) -> Result<Vec<MeasureVector>> {
    if !(theta > 0.0) {
        return Err(Error::NonFinite(format!("rescale factor must be positive, got {theta}")));
    }
    check_len(chain, mu.len())?;
    let mut out = Vec::with_capacity(n + 1);
    out.push(mu.clone());
    for k in 1..=n {
        let mut next = step_measure(chain, &out[k - 1])?;
        next.0.iter_mut().for_each(|v| *v /= theta);
        guard(&next.0, k)?;
        out.push(next);
    }
    Ok(out)
}

/// `g_k = theta^{-k} S_k f` for `k = 0..=n`.
pub fn iterate_function(chain: &AbsorbedChain, f: &FunctionVector, n: usize, theta: f64) -> Result<Vec<FunctionVector>> {
    if !(theta > 0.0) {
        return Err(Error::NonFinite(format!("rescale factor must be positive, got {theta}")));
    }
    check_len(chain, f.len())?;
    let mut out = Vec::with_capacity(n + 1);
    out.push(f.clone());
    for k in 1..=n {
        let mut next = step_function(chain, &out[k - 1])?;
        next.0.iter_mut().for_each(|v| *v /= theta);
        guard(&next.0, k)?;
        out.push(next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn chain_a() -> AbsorbedChain {
        AbsorbedChain::from_triplets(2, &[(0, 0, 0.5), (1, 0, 0.3), (1, 1, 0.5)]).unwrap()
    }

    #[test]
    fn validate_chain_a() {
        let r = validate(2, &[(0, 0, 0.5), (1, 0, 0.3), (1, 1, 0.5)]).unwrap();
        assert!(r.is_valid());
        assert!((r.absorption[0] - 0.5).abs() < 1e-15);
        assert!((r.absorption[1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn super_stochastic_row_is_rejected() {
        let r = validate(2, &[(0, 0, 0.5), (1, 0, 0.8), (1, 1, 0.5)]).unwrap();
        assert_eq!(r.violations.len(), 1);
        match &r.violations[0] {
            Violation::RowSumExceeded { row, sum } => {
                assert_eq!(*row, 1);
                assert!((sum - 1.3).abs() < 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(AbsorbedChain::from_triplets(2, &[(1, 0, 0.8), (1, 1, 0.5)]).is_err());
    }

    #[test]
    fn empty_state_space() {
        assert!(matches!(validate(0, &[]), Err(Error::EmptyStateSpace)));
    }

    #[test]
    fn negative_and_out_of_range_entries() {
        let r = validate(2, &[(0, 1, -0.1), (0, 2, 0.1)]).unwrap();
        assert_eq!(r.violations.len(), 2);
    }

    #[test]
    fn rounding_rows_are_renormalized() {
        let c = AbsorbedChain::from_triplets(1, &[(0, 0, 1.0 + 5e-13)]).unwrap();
        assert_eq!(c.row_sum(0), 1.0);
        assert!(AbsorbedChain::from_triplets(1, &[(0, 0, 1.0 + 1e-11)]).is_err());
    }

    #[test]
    fn duplicates_are_summed() {
        let (c, r) = AbsorbedChain::with_report(2, &[(0, 1, 0.2), (0, 1, 0.3)]).unwrap();
        assert_eq!(c.get(0, 1), 0.5);
        assert_eq!(r.duplicates, vec![(0, 1)]);
    }

    #[test]
    fn step_measure_examples() {
        let a = chain_a();
        let out = step_measure(&a, &MeasureVector::dirac(2, 1)).unwrap();
        assert_eq!(out.0, vec![0.3, 0.5]);
        let zero = step_measure(&a, &MeasureVector::zeros(2)).unwrap();
        assert_eq!(zero.0, vec![0.0, 0.0]);

        let b = AbsorbedChain::from_triplets(2, &[(0, 0, 0.5), (0, 1, 0.2), (1, 1, 0.2)]).unwrap();
        let nu = MeasureVector(vec![0.6, 0.4]);
        let out = step_measure(&b, &nu).unwrap();
        assert!((out.0[0] - 0.3).abs() < 1e-15);
        assert!((out.0[1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn step_function_examples() {
        let a = chain_a();
        let s = step_function(&a, &FunctionVector::ones(2)).unwrap();
        assert_eq!(s.0, vec![0.5, 0.8]);
        let s = step_function(&a, &FunctionVector(vec![1.0, 0.6])).unwrap();
        assert!((s.0[0] - 0.5).abs() < 1e-15);
        assert!((s.0[1] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn iterate_examples() {
        let a = chain_a();
        let v = iterate_measure(&a, &MeasureVector::dirac(2, 1), 3, 0.5).unwrap();
        assert!((v[3].mass() - 2.8).abs() < 1e-12);
        let mu = MeasureVector(vec![0.25, 0.75]);
        let v = iterate_measure(&a, &mu, 0, 1.0).unwrap();
        assert_eq!(v[0], mu);

        let sub = AbsorbedChain::from_triplets(2, &[(0, 0, 0.4), (0, 1, 0.5), (1, 0, 0.9)]).unwrap();
        let v = iterate_measure(&sub, &MeasureVector(vec![0.5, 0.5]), 200, 1.0).unwrap();
        for w in v.windows(2) {
            assert!(w[1].mass() <= w[0].mass());
        }
        assert!(v[200].mass() < 1e-5);
    }

    #[test]
    fn overflow_guard() {
        let c = AbsorbedChain::from_triplets(1, &[(0, 0, 1.0)]).unwrap();
        let err = iterate_measure(&c, &MeasureVector(vec![1.0]), 2000, 0.5).unwrap_err();
        assert!(matches!(err, Error::Overflow { .. }));
    }

    #[test]
    fn restrict_kills_outside_mass() {
        let a = chain_a();
        let r = a.restrict(&[1]).unwrap();
        assert_eq!(r.d(), 1);
        assert_eq!(r.get(0, 0), 0.5);
    }

    fn arb_chain() -> impl Strategy<Value = AbsorbedChain> {
        (1usize..7).prop_flat_map(|d| {
            proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, d), d).prop_map(move |rows| {
                let dense: Vec<Vec<f64>> = rows
                    .into_iter()
                    .map(|r| {
                        let s: f64 = r.iter().sum::<f64>() + 0.1;
                        r.into_iter().map(|v| v / s).collect()
                    })
                    .collect();
                AbsorbedChain::from_dense(&dense).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn actions_are_adjoint(chain in arb_chain(), seed in proptest::collection::vec(-1.0f64..1.0, 14)) {
            let d = chain.d();
            let mu = MeasureVector(seed[..d].to_vec());
            let f = FunctionVector(seed[7..7 + d].to_vec());
            let lhs = step_measure(&chain, &mu).unwrap().integrate(&f);
            let rhs = mu.integrate(&step_function(&chain, &f).unwrap());
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs().max(rhs.abs())));
        }

        #[test]
        fn actions_are_linear(chain in arb_chain(), a in -2.0f64..2.0, b in -2.0f64..2.0,
                              seed in proptest::collection::vec(-1.0f64..1.0, 14)) {
            let d = chain.d();
            let m1 = MeasureVector(seed[..d].to_vec());
            let m2 = MeasureVector(seed[7..7 + d].to_vec());
            let comb = MeasureVector(m1.0.iter().zip(&m2.0).map(|(x, y)| a * x + b * y).collect());
            let lhs = step_measure(&chain, &comb).unwrap();
            let s1 = step_measure(&chain, &m1).unwrap();
            let s2 = step_measure(&chain, &m2).unwrap();
            for k in 0..d {
                prop_assert!((lhs.0[k] - (a * s1.0[k] + b * s2.0[k])).abs() < 1e-12);
            }
            let f1 = FunctionVector(m1.0.clone());
            let f2 = FunctionVector(m2.0.clone());
            let fc = FunctionVector(comb.0.clone());
            let lhs = step_function(&chain, &fc).unwrap();
            let g1 = step_function(&chain, &f1).unwrap();
            let g2 = step_function(&chain, &f2).unwrap();
            for k in 0..d {
                prop_assert!((lhs.0[k] - (a * g1.0[k] + b * g2.0[k])).abs() < 1e-12);
            }
        }

        #[test]
        fn positive_mass_is_non_increasing(chain in arb_chain(), seed in proptest::collection::vec(0.0f64..1.0, 7)) {
            let mu = MeasureVector(seed[..chain.d()].to_vec());
            let v = iterate_measure(&chain, &mu, 30, 1.0).unwrap();
            for w in v.windows(2) {
                prop_assert!(w[1].mass() <= w[0].mass() * (1.0 + 1e-14) + 1e-300);
            }
        }
    }
}
