//! Perron data of single communication classes: rate, left and right
//! eigenvectors, period and second-modulus ratio.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::chain::AbsorbedChain;
use crate::classes::find_classes;
use crate::error::{Error, Result};

/// Classes up to this size use a dense eigen-solve before polishing.
pub const DENSE_LIMIT: usize = 64;

/// Larger classes that defeat power iteration fall back to the dense solve up to this size.
pub const DENSE_FALLBACK_LIMIT: usize = 1024;
const MAX_POWER_ITERS: usize = 2_000_000;
/// Iteration budget before falling back to the dense solve.
const FALLBACK_BUDGET: usize = 100_000;
const POWER_TOL: f64 = 1e-14;
const STALL_LEVEL: f64 = 1e-12;
const RESIDUAL_TOL: f64 = 1e-10;
const SLOW_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct ClassSpectrum {
    /// Member states, in the order used by `nu` and `eta`.
    pub states: Vec<usize>,
    pub theta: f64,
    /// Left Perron vector, a probability on the class.
    pub nu: Vec<f64>,
    /// Right Perron vector with `nu . eta = 1`.
    pub eta: Vec<f64>,
    pub period: usize,
    /// `|lambda_2| / theta`; 0 for single states.
    pub gap: f64,
    /// Second modulus within `1e-6` of the rate; the envelope is then not geometric.
    pub slow: bool,
    /// Loop-free singleton: `eta` carries no information.
    pub eta_arbitrary: bool,
    pub warnings: Vec<String>,
}

impl ClassSpectrum {
    pub fn is_aperiodic(&self) -> bool {
        self.period == 1
    }
}

fn local_rows(chain: &AbsorbedChain, states: &[usize]) -> Result<Vec<Vec<(usize, f64)>>> {
    chain.sub_rows(states)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Gcd of cycle lengths through any state of the class; 1 for a loop-free singleton.
pub fn period(chain: &AbsorbedChain, states: &[usize]) -> Result<usize> {
    let rows = local_rows(chain, states)?;
    Ok(period_local(&rows))
}

fn period_local(rows: &[Vec<(usize, f64)>]) -> usize {
    let n = rows.len();
    if n == 0 {
        return 1;
    }
    let mut level = vec![usize::MAX; n];
    level[0] = 0;
    let mut queue = std::collections::VecDeque::from([0usize]);
    while let Some(u) = queue.pop_front() {
        for &(v, _) in &rows[u] {
            if level[v] == usize::MAX {
                level[v] = level[u] + 1;
                queue.push_back(v);
            }
        }
    }
    let mut g = 0;
    for u in 0..n {
        if level[u] == usize::MAX {
            continue;
        }
        for &(v, _) in &rows[u] {
            if level[v] != usize::MAX {
                g = gcd(g, (level[u] + 1).abs_diff(level[v]));
            }
        }
    }
    if g == 0 {
        1
    } else {
        g
    }
}

fn apply_left(rows: &[Vec<(usize, f64)>], v: &[f64], shift: f64) -> Vec<f64> {
    let mut out: Vec<f64> = v.iter().map(|x| shift * x).collect();
    for (x, row) in rows.iter().enumerate() {
        let m = v[x];
        if m != 0.0 {
            for &(y, p) in row {
                out[y] += m * p;
            }
        }
    }
    out
}

fn apply_right(rows: &[Vec<(usize, f64)>], v: &[f64], shift: f64) -> Vec<f64> {
    rows.iter()
        .enumerate()
        .map(|(x, row)| shift * v[x] + row.iter().map(|&(y, p)| p * v[y]).sum::<f64>())
        .collect()
}

/// Power iteration on `P + shift I`, normalizing to unit sum (left) or unit max (right).
///
/// Stops when the componentwise relative change, extrapolated with the observed
/// contraction ratio, is below `POWER_TOL` or at rounding level.
fn power_iterate(rows: &[Vec<(usize, f64)>], left: bool, shift: f64, start: Vec<f64>, max_iters: usize) -> Result<Vec<f64>> {
    let mut v = start;
    let mut prev_change = f64::INFINITY;
    let mut best = f64::INFINITY;
    let mut stall = 0usize;
    for it in 0..max_iters {
        let mut w = if left { apply_left(rows, &v, shift) } else { apply_right(rows, &v, shift) };
        let scale = if left { w.iter().sum::<f64>() } else { w.iter().fold(0.0, |m: f64, x| m.max(*x)) };
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::NoConvergence { iterations: it, residual: f64::NAN });
        }
        w.iter_mut().for_each(|x| *x /= scale);
        let change = w
            .iter()
            .zip(&v)
            .filter(|(a, _)| **a > 1e-290)
            .map(|(a, b)| (a - b).abs() / a)
            .fold(0.0, f64::max);
        v = w;
        if change <= 4.0 * f64::EPSILON {
            return Ok(v);
        }
        if it > 2 && prev_change.is_finite() && prev_change > 0.0 {
            let r = (change / prev_change).min(1.0 - 1e-9);
            if change * r / (1.0 - r) <= POWER_TOL {
                return Ok(v);
            }
        }
        // Rounding floor: the change stopped shrinking at a small level.
        if change < 0.999 * best {
            best = change;
            stall = 0;
        } else {
            stall += 1;
            if stall > 200 && best <= STALL_LEVEL {
                return Ok(v);
            }
        }
        prev_change = change;
    }
    Err(Error::NoConvergence { iterations: max_iters, residual: prev_change })
}

/// Null vector of `theta I - A` with first coordinate 1, by replacing one equation.
fn dense_null(a: &DMatrix<f64>, theta: f64) -> Option<Vec<f64>> {
    let n = a.nrows();
    let mut m = DMatrix::<f64>::identity(n, n) * theta - a;
    for c in 0..n {
        m[(0, c)] = if c == 0 { 1.0 } else { 0.0 };
    }
    let mut rhs = DVector::zeros(n);
    rhs[0] = 1.0;
    let sol = m.lu().solve(&rhs)?;
    sol.iter().all(|v| v.is_finite()).then(|| sol.iter().map(|v| v.abs()).collect())
}

fn normalize_pair(nu: &mut [f64], eta: &mut [f64]) {
    let s: f64 = nu.iter().sum();
    nu.iter_mut().for_each(|v| *v /= s);
    let dot: f64 = nu.iter().zip(eta.iter()).map(|(a, b)| a * b).sum();
    eta.iter_mut().for_each(|v| *v /= dot);
}

fn deflated_gap(rows: &[Vec<(usize, f64)>], theta: f64, nu: &[f64], eta: &[f64]) -> f64 {
    let n = rows.len();
    let mut w: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.7071 + 0.3).sin()).collect();
    let project = |w: &mut Vec<f64>| {
        let c: f64 = nu.iter().zip(w.iter()).map(|(a, b)| a * b).sum();
        w.iter_mut().zip(eta).for_each(|(x, e)| *x -= c * e);
    };
    project(&mut w);
    let steps = 4000;
    let mut logs = Vec::with_capacity(steps);
    let mut acc = 0.0;
    for _ in 0..steps {
        w = apply_right(rows, &w, 0.0);
        project(&mut w);
        let norm = w.iter().fold(0.0, |m: f64, x| m.max(x.abs()));
        if norm == 0.0 {
            return 0.0;
        }
        acc += norm.ln();
        w.iter_mut().for_each(|x| *x /= norm);
        logs.push(acc);
    }
    let half = steps / 2;
    let rate = ((logs[steps - 1] - logs[half - 1]) / (steps - half) as f64).exp();
    (rate / theta).min(1.0)
}

/// Perron data of the class `states` (must be one communication class).
pub fn perron(chain: &AbsorbedChain, states: &[usize]) -> Result<ClassSpectrum> {
    let rows = local_rows(chain, states)?;
    let n = rows.len();
    if n == 0 {
        return Err(Error::EmptyStateSpace);
    }
    if n == 1 {
        let p = rows[0].first().map_or(0.0, |&(_, p)| p);
        return Ok(ClassSpectrum {
            states: states.to_vec(),
            theta: p,
            nu: vec![1.0],
            eta: vec![1.0],
            period: 1,
            gap: 0.0,
            slow: false,
            eta_arbitrary: p == 0.0,
            warnings: Vec::new(),
        });
    }

    let period = period_local(&rows);
    let mut warnings = Vec::new();
    if period > 1 {
        warnings.push(format!("class is periodic with period {period}; Perron data computed from the lazy kernel"));
    }

    let dense = |warnings: &mut Vec<String>| {
        let (theta, nu, eta, gap) = dense_start(chain, states);
        if n > DENSE_LIMIT {
            warnings.push(format!("power iteration too slow on {n} states; used the dense solve"));
        }
        (Some(theta), nu, eta, Some(gap))
    };
    let mut start = if n <= DENSE_LIMIT { dense(&mut warnings) } else { (None, None, None, None) };
    let budget = if n > DENSE_LIMIT && n <= DENSE_FALLBACK_LIMIT { FALLBACK_BUDGET } else { MAX_POWER_ITERS };
    let (nu, eta) = loop {
        let (theta0, nu0, eta0, _) = &start;
        let shift = if period > 1 {
            theta0.unwrap_or_else(|| rows.iter().map(|r| r.iter().map(|e| e.1).sum::<f64>()).fold(0.0, f64::max))
        } else {
            0.0
        };
        let nu_start = nu0.clone().map(normalize_sum).unwrap_or_else(|| vec![1.0 / n as f64; n]);
        let eta_start = eta0.clone().map(normalize_max).unwrap_or_else(|| vec![1.0; n]);
        let pair = power_iterate(&rows, true, shift, nu_start, budget)
            .and_then(|nu| power_iterate(&rows, false, shift, eta_start, budget).map(|eta| (nu, eta)));
        match pair {
            Ok(p) => break p,
            Err(Error::NoConvergence { .. }) if start.0.is_none() && n <= DENSE_FALLBACK_LIMIT => {
                start = dense(&mut warnings);
            }
            Err(e) => return Err(e),
        }
    };
    let (mut nu, mut eta) = (nu, eta);
    let dense_gap = start.3;
    let theta = apply_left(&rows, &nu, 0.0).iter().sum::<f64>();
    normalize_pair(&mut nu, &mut eta);

    let res_nu: f64 = apply_left(&rows, &nu, 0.0).iter().zip(&nu).map(|(a, b)| (a - theta * b).abs()).sum();
    let eta_sup = eta.iter().fold(0.0, |m: f64, x| m.max(*x));
    let res_eta = apply_right(&rows, &eta, 0.0)
        .iter()
        .zip(&eta)
        .fold(0.0, |m: f64, (a, b)| m.max((a - theta * b).abs()));
    let scale = theta.max(f64::MIN_POSITIVE);
    if res_nu > RESIDUAL_TOL * scale || res_eta > RESIDUAL_TOL * scale * eta_sup.max(1.0) {
        return Err(Error::NoConvergence { iterations: budget, residual: res_nu.max(res_eta) });
    }

    let gap = if period > 1 { 1.0 } else { dense_gap.unwrap_or_else(|| deflated_gap(&rows, theta, &nu, &eta)) };
    let slow = gap >= 1.0 - SLOW_MARGIN;
    let gap = if slow { 1.0 } else { gap };
    Ok(ClassSpectrum { states: states.to_vec(), theta, nu, eta, period, gap, slow, eta_arbitrary: false, warnings })
}

/// Rate from the dense eigenvalues, vectors from the bordered null-space solve.
fn dense_start(chain: &AbsorbedChain, states: &[usize]) -> (f64, Option<Vec<f64>>, Option<Vec<f64>>, f64) {
    let a = chain.dense_block(states, states);
    let eig = a.complex_eigenvalues();
    let mut moduli: Vec<f64> = eig.iter().map(|z| z.norm()).collect();
    moduli.sort_by(|a, b| b.total_cmp(a));
    let theta = moduli[0];
    let second = moduli.get(1).copied().unwrap_or(0.0);
    let eta = dense_null(&a, theta);
    let nu = dense_null(&a.transpose(), theta);
    let gap = if theta > 0.0 { (second / theta).min(1.0) } else { 0.0 };
    (theta, nu, eta, gap)
}

fn normalize_sum(mut v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

fn normalize_max(mut v: Vec<f64>) -> Vec<f64> {
    let s = v.iter().fold(0.0, |m: f64, x| m.max(*x));
    v.iter_mut().for_each(|x| *x /= s);
    v
}

/// Spectral radius of the chain restricted to an arbitrary state set.
pub fn spectral_radius(chain: &AbsorbedChain, states: &[usize]) -> Result<f64> {
    if states.is_empty() {
        return Ok(0.0);
    }
    let sub = chain.restrict(states)?;
    let graph = find_classes(&sub);
    let mut rho: f64 = 0.0;
    for class in &graph.classes {
        rho = rho.max(perron(&sub, class)?.theta);
    }
    Ok(rho)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(d: usize, t: &[(usize, usize, f64)]) -> AbsorbedChain {
        AbsorbedChain::from_triplets(d, t).unwrap()
    }

    #[test]
    fn scalar_block() {
        let s = perron(&chain(1, &[(0, 0, 0.5)]), &[0]).unwrap();
        assert_eq!(s.theta, 0.5);
        assert_eq!((s.nu.clone(), s.eta.clone(), s.period, s.gap), (vec![1.0], vec![1.0], 1, 0.0));
    }

    #[test]
    fn symmetric_block() {
        let s = perron(&chain(2, &[(0, 0, 0.3), (0, 1, 0.2), (1, 0, 0.2), (1, 1, 0.3)]), &[0, 1]).unwrap();
        assert!((s.theta - 0.5).abs() < 1e-15);
        for i in 0..2 {
            assert!((s.nu[i] - 0.5).abs() < 1e-14);
            assert!((s.eta[i] - 1.0).abs() < 1e-14);
        }
        assert!((s.gap - 0.2).abs() < 1e-12);
    }

    #[test]
    fn two_cycle_is_periodic() {
        let s = perron(&chain(2, &[(0, 1, 0.5), (1, 0, 0.5)]), &[0, 1]).unwrap();
        assert!((s.theta - 0.5).abs() < 1e-14);
        assert_eq!(s.period, 2);
        assert!(s.slow);
        assert!(!s.warnings.is_empty());
    }

    #[test]
    fn periods() {
        assert_eq!(period(&chain(1, &[(0, 0, 0.5)]), &[0]).unwrap(), 1);
        assert_eq!(period(&chain(2, &[(0, 1, 0.5), (1, 0, 0.5)]), &[0, 1]).unwrap(), 2);
        let tri = chain(3, &[(0, 1, 0.5), (1, 2, 0.5), (2, 0, 0.4), (2, 2, 0.1)]);
        assert_eq!(period(&tri, &[0, 1, 2]).unwrap(), 1);
        let tri = chain(3, &[(0, 1, 0.5), (1, 2, 0.5), (2, 0, 0.4)]);
        assert_eq!(period(&tri, &[0, 1, 2]).unwrap(), 3);
    }

    #[test]
    fn loop_free_singleton() {
        let s = perron(&chain(2, &[(0, 1, 0.5)]), &[0]).unwrap();
        assert_eq!(s.theta, 0.0);
        assert!(s.eta_arbitrary);
    }

    fn birth_death(n: usize, up: f64, down: f64, stay0: f64) -> AbsorbedChain {
        let mut t = vec![(0, 0, stay0)];
        for x in 0..n {
            if x + 1 < n {
                t.push((x, x + 1, up));
            }
            if x > 0 {
                t.push((x, x - 1, down));
            }
        }
        chain(n, &t)
    }

    #[test]
    fn dense_and_iterative_paths_agree() {
        let c = birth_death(60, 0.2, 0.7, 0.4);
        let states: Vec<usize> = (0..60).collect();
        let dense = perron(&c, &states).unwrap();
        let rows = local_rows(&c, &states).unwrap();
        let nu = power_iterate(&rows, true, 0.0, vec![1.0 / 60.0; 60], MAX_POWER_ITERS).unwrap();
        for (a, b) in dense.nu.iter().zip(&nu) {
            assert!((a - b).abs() <= 1e-11 * b, "{a} vs {b}");
        }
    }

    #[test]
    fn large_class_residuals() {
        let c = birth_death(300, 0.2, 0.7, 0.4);
        let states: Vec<usize> = (0..300).collect();
        let s = perron(&c, &states).unwrap();
        assert!((s.nu.iter().sum::<f64>() - 1.0).abs() < 1e-13);
        assert!(s.gap > 0.0 && s.gap < 1.0);
        let g = crate::chain::iterate_function(&c, &crate::chain::FunctionVector::ones(300), 200, s.theta).unwrap();
        for x in [0, 10] {
            assert!((g[200].0[x] - s.eta[x]).abs() <= 10.0 * s.gap.powi(200) + 1e-8);
        }
    }

    #[test]
    fn empirical_limit_matches_eta() {
        let c = chain(3, &[(0, 0, 0.3), (0, 1, 0.3), (1, 2, 0.4), (2, 0, 0.5), (1, 1, 0.2)]);
        let s = perron(&c, &[0, 1, 2]).unwrap();
        let g = crate::chain::iterate_function(&c, &crate::chain::FunctionVector::ones(3), 200, s.theta).unwrap();
        let ones_mass: f64 = s.nu.iter().sum();
        for x in 0..3 {
            assert!((g[200].0[x] - s.eta[x] * ones_mass).abs() <= 10.0 * s.gap.powi(200) + 1e-8);
        }
    }

    #[test]
    fn spectral_radius_of_reducible_set() {
        let c = chain(3, &[(0, 0, 0.5), (1, 1, 0.3), (1, 0, 0.2), (2, 2, 0.7)]);
        assert!((spectral_radius(&c, &[0, 1]).unwrap() - 0.5).abs() < 1e-15);
        assert!((spectral_radius(&c, &[1, 2]).unwrap() - 0.7).abs() < 1e-15);
    }
}
