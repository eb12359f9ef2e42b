//! Finite-dimensional checks of the polynomial-decay calculus for block
//! triangular operators.
//!
//! Matrices act on column vectors and the norm is the induced 1-norm (max
//! column absolute sum). A block operator is stored as
//! `S = [[P, 0], [Q, R]]` so that `Q` maps the first block into the second
//! and `S^n` has lower-left block `sum_k R^(n-k) Q P^(k-1)`.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::oracle::Status;

/// Tolerance for the fixed-point identities `ME = EM = E`.
pub const IDENTITY_TOL: f64 = 1e-10;
/// Predicted and fitted limits must agree to this operator norm.
pub const LIMIT_TOL: f64 = 1e-6;
const RADIUS_TOL: f64 = 1e-9;
const ROTATION_MODULUS: f64 = 1.0 - 1e-7;
const ROTATION_ARG: f64 = 1e-6;
/// A defective eigenvalue 1 of index `k` is split by about `eps^(1/k)` in the
/// eigen-solve; anything this close to 1 is taken to be 1.
const UNIT_CLUSTER: f64 = 1e-4;
const J_ROUNDING: f64 = 0.2;
const SERIES_CAP: usize = 1_000_000;

pub fn op_norm(m: &DMatrix<f64>) -> f64 {
    (0..m.ncols())
        .map(|c| m.column(c).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.clone().complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Operator data `(M, J, E, alpha)` with `|n^-J M^n - E| <= alpha_n`.
#[derive(Debug, Clone)]
pub struct HOperator {
    pub matrix: DMatrix<f64>,
    pub j: usize,
    /// Unrounded dyadic growth exponent.
    pub j_raw: f64,
    pub e: DMatrix<f64>,
    /// `alpha[n]` for `n = 0..=n_max`; `alpha[0] = 1`, non-increasing afterwards.
    pub alpha: Vec<f64>,
    /// Raw residuals `|n^-J M^n - E|`, index 0 unused.
    pub residuals: Vec<f64>,
    /// Limit is zero, so the growth exponent is not identifiable.
    pub degenerate: bool,
    pub warnings: Vec<String>,
}

impl HOperator {
    pub fn n_max(&self) -> usize {
        self.alpha.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// `max(|ME - E|, |EM - E|)`.
    pub fn identity_error(&self) -> f64 {
        let me = &self.matrix * &self.e - &self.e;
        let em = &self.e * &self.matrix - &self.e;
        op_norm(&me).max(op_norm(&em))
    }

    /// Largest `|E x - 1_{J=0} x| / |x|` over a basis of fixed vectors of `M`.
    pub fn eigen_error(&self) -> f64 {
        let d = self.dim();
        let shifted = &self.matrix - DMatrix::<f64>::identity(d, d);
        let scale = op_norm(&self.matrix).max(1.0);
        let svd = shifted.svd(false, true);
        let Some(v_t) = svd.v_t else { return f64::NAN };
        let mut worst: f64 = 0.0;
        for (i, s) in svd.singular_values.iter().enumerate() {
            if *s > 1e-9 * scale {
                continue;
            }
            let x = v_t.row(i).transpose();
            let target = if self.j == 0 { x.clone() } else { x.clone() * 0.0 };
            let err = (&self.e * &x - target).iter().map(|v| v.abs()).sum::<f64>();
            worst = worst.max(err / x.iter().map(|v| v.abs()).sum::<f64>());
        }
        worst
    }
}

fn check_square(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() == 0 {
        return Err(Error::EmptyStateSpace);
    }
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch { expected: m.nrows(), got: m.ncols() });
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("operator matrix".into()));
    }
    Ok(())
}

/// Refuses radius above one and unit-modulus eigenvalues other than 1.
fn check_spectrum(m: &DMatrix<f64>) -> Result<()> {
    let eig = m.clone().complex_eigenvalues();
    let off_unit = |z: &&nalgebra::Complex<f64>| (*z - 1.0).norm() > UNIT_CLUSTER;
    let rho = eig.iter().filter(off_unit).map(|z| z.norm()).fold(0.0, f64::max);
    if rho > 1.0 + RADIUS_TOL {
        return Err(Error::Hypothesis {
            class: None,
            detail: format!("spectral radius {rho:.12} exceeds 1; normalize by the leading eigenvalue first"),
        });
    }
    let rotating = eig
        .iter()
        .filter(off_unit)
        .filter(|z| z.norm() >= ROTATION_MODULUS && z.arg().abs() > ROTATION_ARG)
        .max_by(|a, b| a.norm().total_cmp(&b.norm()).then(a.arg().abs().total_cmp(&b.arg().abs())));
    if let Some(z) = rotating {
        return Err(Error::RotatingEigenvalue { modulus: z.norm(), argument: z.arg().abs() });
    }
    Ok(())
}

fn powers(m: &DMatrix<f64>, n_max: usize) -> Vec<DMatrix<f64>> {
    let d = m.nrows();
    let mut out = Vec::with_capacity(n_max + 1);
    out.push(DMatrix::identity(d, d));
    for n in 1..=n_max {
        let next = m * &out[n - 1];
        out.push(next);
    }
    out
}

/// Extrapolates `n^-J M^n` to `n = infinity`. On the leading block the
/// sequence is a polynomial of degree `J` in `1/n`, so `J + 1` nodes in the
/// last quarter remove it exactly; the rest decays geometrically.
fn extrapolate_limit(pows: &[DMatrix<f64>], j: usize) -> DMatrix<f64> {
    let n_max = pows.len() - 1;
    let scaled = |n: usize| &pows[n] / (n as f64).powi(j as i32);
    if j == 0 {
        return scaled(n_max);
    }
    let span = (n_max / 4).max(j);
    let nodes: Vec<usize> = (0..=j).map(|i| n_max - i * span / j).collect();
    let xs: Vec<f64> = nodes.iter().map(|&n| 1.0 / n as f64).collect();
    let d = pows[0].nrows();
    let mut e = DMatrix::zeros(d, d);
    for (i, &n) in nodes.iter().enumerate() {
        let mut w = 1.0;
        for (k, &xk) in xs.iter().enumerate() {
            if k != i {
                w *= xk / (xk - xs[i]);
            }
        }
        e += scaled(n) * w;
    }
    e
}

fn growth_exponent(pows: &[DMatrix<f64>]) -> f64 {
    let n_max = pows.len() - 1;
    let hi = op_norm(&pows[n_max]);
    let lo = op_norm(&pows[n_max / 2]);
    if hi == 0.0 || lo == 0.0 {
        return f64::NEG_INFINITY;
    }
    (hi / lo).log2()
}

/// Fits `(J, E, alpha)` to `M` from its first `n_max` powers.
pub fn fit_h(m: &DMatrix<f64>, n_max: usize) -> Result<HOperator> {
    check_square(m)?;
    check_spectrum(m)?;
    let n_max = n_max.max(8);
    let pows = powers(m, n_max);
    let j_raw = growth_exponent(&pows);
    let j = if j_raw > 0.0 { j_raw.round() as usize } else { 0 };
    let mut h = finish_fit(m, &pows, j)?;
    h.j_raw = j_raw;
    if j_raw.is_finite() && j_raw > -0.5 && (j_raw - j as f64).abs() > J_ROUNDING {
        h.warnings.push(format!("growth exponent {j_raw:.3} is more than {J_ROUNDING} from an integer"));
    }
    Ok(h)
}

/// Same as [`fit_h`] with the exponent imposed.
pub fn fit_h_with_j(m: &DMatrix<f64>, j: usize, n_max: usize) -> Result<HOperator> {
    check_square(m)?;
    check_spectrum(m)?;
    let pows = powers(m, n_max.max(8));
    let mut h = finish_fit(m, &pows, j)?;
    h.j_raw = growth_exponent(&pows);
    Ok(h)
}

fn finish_fit(m: &DMatrix<f64>, pows: &[DMatrix<f64>], j: usize) -> Result<HOperator> {
    let n_max = pows.len() - 1;
    let e = extrapolate_limit(pows, j);
    let e_norm = op_norm(&e);
    let mut residuals = vec![0.0; n_max + 1];
    for n in 1..=n_max {
        let scaled = &pows[n] / (n as f64).powi(j as i32);
        residuals[n] = op_norm(&(scaled - &e));
    }
    let mut alpha = residuals.clone();
    for n in (1..n_max).rev() {
        alpha[n] = alpha[n].max(alpha[n + 1]);
    }
    alpha[0] = 1.0;
    let h = HOperator {
        matrix: m.clone(),
        j,
        j_raw: j as f64,
        degenerate: e_norm <= 1e-12,
        e,
        alpha,
        residuals,
        warnings: Vec::new(),
    };

    let scale = e_norm.max(1.0);
    let id_err = h.identity_error();
    if id_err > IDENTITY_TOL * scale {
        return Err(Error::NoConvergence { iterations: n_max, residual: id_err });
    }
    // The residual must still be shrinking over the last doubling.
    let last = h.residuals[n_max];
    let mid = h.residuals[n_max / 2];
    if last > 1e-10 * scale && last > 0.75 * mid {
        return Err(Error::NoConvergence { iterations: n_max, residual: last });
    }
    for n in 1..=n_max {
        let bound = (h.alpha[n] + e_norm) * (n as f64).powi(j as i32);
        if op_norm(&pows[n]) > bound * (1.0 + 1e-9) + 1e-12 {
            return Err(Error::Internal(format!("power bound violated at n={n}")));
        }
    }
    Ok(h)
}

/// `S = [[P, 0], [Q, R]]` on the direct sum of the two blocks.
#[derive(Debug, Clone)]
pub struct BlockTriangular {
    pub p: DMatrix<f64>,
    /// Cross block, `d2 x d1`.
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl BlockTriangular {
    pub fn new(p: DMatrix<f64>, q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        check_square(&p)?;
        check_square(&r)?;
        if q.nrows() != r.nrows() {
            return Err(Error::DimensionMismatch { expected: r.nrows(), got: q.nrows() });
        }
        if q.ncols() != p.ncols() {
            return Err(Error::DimensionMismatch { expected: p.ncols(), got: q.ncols() });
        }
        Ok(BlockTriangular { p, q, r })
    }

    pub fn d1(&self) -> usize {
        self.p.nrows()
    }

    pub fn d2(&self) -> usize {
        self.r.nrows()
    }

    pub fn assemble(&self) -> DMatrix<f64> {
        let (d1, d2) = (self.d1(), self.d2());
        let mut s = DMatrix::zeros(d1 + d2, d1 + d2);
        s.view_mut((0, 0), (d1, d1)).copy_from(&self.p);
        s.view_mut((d1, 0), (d2, d1)).copy_from(&self.q);
        s.view_mut((d1, d1), (d2, d2)).copy_from(&self.r);
        s
    }

    /// Embeds a limit living on one block.
    fn embed(&self, block: (usize, usize), m: &DMatrix<f64>) -> DMatrix<f64> {
        let d = self.d1() + self.d2();
        let mut s = DMatrix::zeros(d, d);
        s.view_mut(block, (m.nrows(), m.ncols())).copy_from(m);
        s
    }

    /// Largest entry gap between `S^n` and its block formula, `1 <= n <= n_max`.
    pub fn power_identity_error(&self, n_max: usize) -> f64 {
        let s = self.assemble();
        let pp = powers(&self.p, n_max);
        let rp = powers(&self.r, n_max);
        let (d1, d2) = (self.d1(), self.d2());
        let mut sn = DMatrix::identity(d1 + d2, d1 + d2);
        let mut worst: f64 = 0.0;
        for n in 1..=n_max {
            sn = &s * &sn;
            let mut cross = DMatrix::zeros(d2, d1);
            for k in 1..=n {
                cross += &rp[n - k] * &self.q * &pp[k - 1];
            }
            let mut expected = DMatrix::zeros(d1 + d2, d1 + d2);
            expected.view_mut((0, 0), (d1, d1)).copy_from(&pp[n]);
            expected.view_mut((d1, 0), (d2, d1)).copy_from(&cross);
            expected.view_mut((d1, d1), (d2, d2)).copy_from(&rp[n]);
            worst = worst.max((&sn - expected).amax());
        }
        worst
    }
}

/// Norms `|M^k|` for `k < len` and their tails `sum_{k >= n} |M^k|` for `n < len`.
fn norm_series(m: &DMatrix<f64>, len: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = m.nrows();
    let mut norms = Vec::with_capacity(len);
    let mut pow = DMatrix::<f64>::identity(d, d);
    let mut tail_after = 0.0;
    let mut k = 0;
    loop {
        let g = op_norm(&pow);
        if k < len {
            norms.push(g);
        } else {
            tail_after += g;
            if g <= 1e-18 * tail_after.max(1e-300) || g == 0.0 {
                break;
            }
        }
        k += 1;
        if k > SERIES_CAP {
            return Err(Error::Hypothesis { class: None, detail: "power norms are not summable".into() });
        }
        pow = m * pow;
    }
    let mut tails = vec![0.0; len];
    let mut acc = tail_after;
    for n in (0..len).rev() {
        acc += norms[n];
        tails[n] = acc;
    }
    Ok((norms, tails))
}

fn solve_identity_minus(m: &DMatrix<f64>, rhs: &DMatrix<f64>, right: bool) -> Result<DMatrix<f64>> {
    let d = m.nrows();
    let a = DMatrix::<f64>::identity(d, d) - m;
    if right {
        // X (I - M) = rhs  <=>  (I - M)^T X^T = rhs^T
        let lu = a.transpose().lu();
        lu.solve(&rhs.transpose()).map(|x| x.transpose())
    } else {
        a.lu().solve(rhs)
    }
    .ok_or_else(|| Error::Hypothesis { class: None, detail: "I - M is singular".into() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LabCase {
    /// Second block summable.
    #[serde(rename = "1")]
    One,
    /// First block summable.
    #[serde(rename = "2")]
    Two,
    /// Both blocks carry a limit, first with exponent 0.
    #[serde(rename = "3")]
    Three,
}

impl LabCase {
    pub fn from_number(k: u32) -> Option<LabCase> {
        match k {
            1 => Some(LabCase::One),
            2 => Some(LabCase::Two),
            3 => Some(LabCase::Three),
            _ => None,
        }
    }

    pub fn number(self) -> u32 {
        match self {
            LabCase::One => 1,
            LabCase::Two => 2,
            LabCase::Three => 3,
        }
    }
}

/// Predicted limit data of a composed operator and how it compares with a direct fit.
#[derive(Debug, Clone)]
pub struct Composition {
    pub case: LabCase,
    pub predicted_j: usize,
    pub predicted_e: DMatrix<f64>,
    /// Explicit envelope, when the constant is known (cases 1 and 2).
    pub predicted_alpha: Option<Vec<f64>>,
    pub fitted: HOperator,
    /// `|E_predicted - E_fitted|`, with the fit taken at the predicted exponent.
    pub e_error: f64,
    /// Fitted exponent matches, or the predicted limit is zero.
    pub j_ok: bool,
    /// Predicted limit is zero.
    pub degenerate: bool,
    /// Residual against the predicted limit stays under the predicted
    /// envelope (cases 1, 2) or keeps an O(1/n) shape (case 3).
    pub rate: Status,
    pub residuals: Vec<f64>,
}

fn finish_composition(
    block: &BlockTriangular,
    case: LabCase,
    predicted_j: usize,
    predicted_e: DMatrix<f64>,
    predicted_alpha: Option<Vec<f64>>,
    n_max: usize,
) -> Result<Composition> {
    let s = block.assemble();
    let fitted = fit_h(&s, n_max)?;
    let degenerate = op_norm(&predicted_e) <= 1e-12;
    let at_j = if fitted.j == predicted_j { fitted.clone() } else { fit_h_with_j(&s, predicted_j, n_max)? };
    let e_error = op_norm(&(&at_j.e - &predicted_e));
    let j_ok = fitted.j == predicted_j || degenerate;

    let pows = powers(&s, n_max);
    let mut residuals = vec![0.0; n_max + 1];
    for n in 1..=n_max {
        residuals[n] = op_norm(&(&pows[n] / (n as f64).powi(predicted_j as i32) - &predicted_e));
    }
    let rate = match &predicted_alpha {
        Some(alpha) => Status::from_bool(
            (1..=n_max).all(|n| residuals[n] <= alpha[n] * (1.0 + 1e-9) + 1e-12),
        ),
        None => {
            let half = n_max / 2;
            let first = (1..=half).map(|n| n as f64 * residuals[n]).fold(0.0, f64::max);
            let second = (half..=n_max).map(|n| n as f64 * residuals[n]).fold(0.0, f64::max);
            Status::from_bool(second <= 2.0 * first + 1e-9)
        }
    };
    Ok(Composition { case, predicted_j, predicted_e, predicted_alpha, fitted, e_error, j_ok, degenerate, rate, residuals })
}

fn alpha_at(alpha: &[f64], n: usize) -> f64 {
    alpha.get(n).copied().unwrap_or(*alpha.last().unwrap_or(&1.0))
}

/// First block carries the limit, second block is summable.
pub fn compose_case1(p_h: &HOperator, q: &DMatrix<f64>, r: &DMatrix<f64>, n_max: usize) -> Result<Composition> {
    let block = BlockTriangular::new(p_h.matrix.clone(), q.clone(), r.clone())?;
    let rho = spectral_radius(r);
    if rho >= 1.0 - RADIUS_TOL {
        return Err(Error::Hypothesis {
            class: None,
            detail: format!("second block has spectral radius {rho:.6}; its powers must be summable"),
        });
    }
    let qe = q * &p_h.e;
    let lower = solve_identity_minus(r, &qe, false)?;
    let mut e = block.embed((0, 0), &p_h.e);
    e.view_mut((block.d1(), 0), (block.d2(), block.d1())).copy_from(&lower);

    let (gamma, big_gamma) = norm_series(r, n_max + 1)?;
    let (nq, nqe, ne) = (op_norm(q), op_norm(&qe), op_norm(&p_h.e));
    let c = 1.0f64.max(2.0 * (nq + nqe)).max(nq * ne.max(1.0));
    let jp = p_h.j as f64;
    let mut alpha = vec![1.0; n_max + 1];
    for n in 1..=n_max {
        let mut sum = 0.0;
        for k in 0..n {
            let a = alpha_at(&p_h.alpha, n - k - 1);
            sum += gamma[k] * ((a + 1.0) * jp * (k + 1) as f64 / n as f64 + a);
        }
        alpha[n] = alpha_at(&p_h.alpha, n) + c * big_gamma[n] + c * sum;
    }
    finish_composition(&block, LabCase::One, p_h.j, e, Some(alpha), n_max)
}

/// First block is summable, second block carries the limit.
pub fn compose_case2(p: &DMatrix<f64>, q: &DMatrix<f64>, r_h: &HOperator, n_max: usize) -> Result<Composition> {
    let block = BlockTriangular::new(p.clone(), q.clone(), r_h.matrix.clone())?;
    let rho = spectral_radius(p);
    if rho >= 1.0 - RADIUS_TOL {
        return Err(Error::Hypothesis {
            class: None,
            detail: format!("first block has spectral radius {rho:.6}; its powers must be summable"),
        });
    }
    let erq = &r_h.e * q;
    let lower = solve_identity_minus(p, &erq, true)?;
    let mut e = block.embed((block.d1(), block.d1()), &r_h.e);
    e.view_mut((block.d1(), 0), (block.d2(), block.d1())).copy_from(&lower);

    let (theta, big_theta) = norm_series(p, n_max + 1)?;
    let (nq, nerq) = (op_norm(q), op_norm(&erq));
    let js = r_h.j as f64;
    let mut alpha = vec![1.0; n_max + 1];
    for n in 1..=n_max {
        let mut conv = 0.0;
        let mut drift = 0.0;
        for k in 0..n {
            conv += alpha_at(&r_h.alpha, n - k - 1) * theta[k];
            drift += js * k as f64 / n as f64 * theta[k];
        }
        alpha[n] = alpha_at(&r_h.alpha, n) + nq * conv + (nerq + 1.0) * big_theta[n] + nerq * drift;
    }
    finish_composition(&block, LabCase::Two, r_h.j, e, Some(alpha), n_max)
}

/// Both blocks carry limits and the first has exponent 0; the exponent grows by one.
pub fn compose_case3(p_h: &HOperator, q: &DMatrix<f64>, r_h: &HOperator, n_max: usize) -> Result<Composition> {
    if p_h.j != 0 {
        return Err(Error::Hypothesis {
            class: None,
            detail: format!("first block has exponent {}; this composition needs 0", p_h.j),
        });
    }
    let block = BlockTriangular::new(p_h.matrix.clone(), q.clone(), r_h.matrix.clone())?;
    let js = 1 + r_h.j;
    let lower = &r_h.e * q * &p_h.e / js as f64;
    let mut e = DMatrix::zeros(block.d1() + block.d2(), block.d1() + block.d2());
    e.view_mut((block.d1(), 0), (block.d2(), block.d1())).copy_from(&lower);
    finish_composition(&block, LabCase::Three, js, e, None, n_max)
}

/// Sub-stochastic matrix with entries in `[0.1, 1]` before row scaling.
fn random_substochastic(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let mut m = DMatrix::from_fn(d, d, |_, _| rng.random_range(0.1..1.0));
    for i in 0..d {
        let mass: f64 = rng.random_range(0.5..1.0);
        let s: f64 = m.row(i).sum();
        for j in 0..d {
            m[(i, j)] *= mass / s;
        }
    }
    m
}

/// Positive matrix rescaled so that its Perron root is exactly the unit.
fn random_perron(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let m = random_substochastic(rng, d);
    let rho = spectral_radius(&m);
    m / rho
}

fn random_cross(rng: &mut ChaCha8Rng, d2: usize, d1: usize) -> DMatrix<f64> {
    DMatrix::from_fn(d2, d1, |_, _| rng.random_range(0.0..1.0))
}

/// One randomly generated block operator; `stream` selects the ChaCha stream.
#[derive(Debug, Clone)]
pub struct LabInstance {
    pub block: BlockTriangular,
    pub seed: u64,
    pub stream: u64,
    pub j_r: usize,
}

/// Draws instance `stream` of a case. Case 3 alternates between a plain second
/// block and a nested one that is itself a case-3 composition (exponent 1).
pub fn random_instance(case: LabCase, seed: u64, stream: u64) -> LabInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let d1 = rng.random_range(2..=4);
    let d2 = rng.random_range(2..=4);
    let (p, r, j_r) = match case {
        LabCase::One => (random_perron(&mut rng, d1), random_substochastic(&mut rng, d2) * 0.4, 0),
        LabCase::Two => (random_substochastic(&mut rng, d1) * 0.4, random_perron(&mut rng, d2), 0),
        LabCase::Three => {
            let p = random_perron(&mut rng, d1);
            if stream % 2 == 1 {
                let a = random_perron(&mut rng, d2);
                let da = rng.random_range(2..=4);
                let b = random_perron(&mut rng, da);
                let cross = random_cross(&mut rng, da, d2);
                let inner = BlockTriangular { p: a, q: cross, r: b };
                (p, inner.assemble(), 1)
            } else {
                (p, random_perron(&mut rng, d2), 0)
            }
        }
    };
    let q = random_cross(&mut rng, r.nrows(), d1);
    LabInstance { block: BlockTriangular { p, q, r }, seed, stream, j_r }
}

/// Per-instance outcome of a lab batch.
#[derive(Debug, Clone, Serialize)]
pub struct InstanceReport {
    pub stream: u64,
    pub d1: usize,
    pub d2: usize,
    pub j_p: usize,
    pub j_r: usize,
    pub predicted_j: usize,
    pub fitted_j: usize,
    pub fitted_j_raw: f64,
    pub e_error: f64,
    pub identity_error: f64,
    pub eigen_error: f64,
    pub power_identity_error: f64,
    pub degenerate: bool,
    pub rate: Status,
    pub status: Status,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LabBatch {
    pub case: LabCase,
    pub seed: u64,
    pub n_max: usize,
    pub instances: Vec<InstanceReport>,
    pub max_e_error: f64,
    pub max_identity_error: f64,
    pub status: Status,
}

fn run_instance(case: LabCase, inst: &LabInstance, n_max: usize) -> Result<InstanceReport> {
    let b = &inst.block;
    let (comp, j_p, j_r) = match case {
        LabCase::One => {
            let p_h = fit_h(&b.p, n_max)?;
            let j = p_h.j;
            (compose_case1(&p_h, &b.q, &b.r, n_max)?, j, 0)
        }
        LabCase::Two => {
            let r_h = fit_h(&b.r, n_max)?;
            let j = r_h.j;
            (compose_case2(&b.p, &b.q, &r_h, n_max)?, 0, j)
        }
        LabCase::Three => {
            let p_h = fit_h(&b.p, n_max)?;
            let r_h = fit_h(&b.r, n_max)?;
            let (jp, jr) = (p_h.j, r_h.j);
            (compose_case3(&p_h, &b.q, &r_h, n_max)?, jp, jr)
        }
    };
    let identity_error = comp.fitted.identity_error();
    let eigen_error = comp.fitted.eigen_error();
    let power_identity_error = b.power_identity_error(10);
    let scale = op_norm(&comp.fitted.e).max(1.0);
    let ok = comp.e_error <= LIMIT_TOL
        && comp.j_ok
        && identity_error <= IDENTITY_TOL * scale
        && eigen_error <= IDENTITY_TOL * scale
        && power_identity_error <= 1e-12
        && comp.rate != Status::Fail;
    Ok(InstanceReport {
        stream: inst.stream,
        d1: b.d1(),
        d2: b.d2(),
        j_p,
        j_r,
        predicted_j: comp.predicted_j,
        fitted_j: comp.fitted.j,
        fitted_j_raw: comp.fitted.j_raw,
        e_error: comp.e_error,
        identity_error,
        eigen_error,
        power_identity_error,
        degenerate: comp.degenerate,
        rate: comp.rate,
        status: Status::from_bool(ok),
        error: None,
    })
}

/// Runs `instances` seeded random instances of one case in parallel.
pub fn run_batch(case: LabCase, seed: u64, instances: usize, n_max: usize) -> LabBatch {
    let reports: Vec<InstanceReport> = (0..instances as u64)
        .into_par_iter()
        .map(|stream| {
            let inst = random_instance(case, seed, stream);
            run_instance(case, &inst, n_max).unwrap_or_else(|e| InstanceReport {
                stream,
                d1: inst.block.d1(),
                d2: inst.block.d2(),
                j_p: 0,
                j_r: inst.j_r,
                predicted_j: 0,
                fitted_j: 0,
                fitted_j_raw: f64::NAN,
                e_error: f64::NAN,
                identity_error: f64::NAN,
                eigen_error: f64::NAN,
                power_identity_error: f64::NAN,
                degenerate: false,
                rate: Status::Skipped,
                status: Status::Fail,
                error: Some(e.to_string()),
            })
        })
        .collect();
    let max_e_error = reports.iter().map(|r| r.e_error).fold(0.0, |a: f64, b| if b.is_nan() { f64::NAN } else { a.max(b) });
    let max_identity_error = reports.iter().map(|r| r.identity_error).fold(0.0, |a: f64, b| if b.is_nan() { f64::NAN } else { a.max(b) });
    let status = reports.iter().fold(Status::Skipped, |s, r| s.and(r.status));
    LabBatch { case, seed, n_max, instances: reports, max_e_error, max_identity_error, status }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows.len(), rows[0].len(), &rows.iter().flat_map(|r| r.iter().copied()).collect::<Vec<_>>())
    }

    #[test]
    fn projector_like_operator() {
        // Column-stochastic positive matrix: limit is the rank-one Perron projector.
        let a = m(&[&[0.6, 0.3], &[0.4, 0.7]]);
        let h = fit_h(&a, 400).unwrap();
        assert_eq!(h.j, 0);
        // Left eigenvector (1,1), right eigenvector (3,4)/7.
        let expected = m(&[&[3.0 / 7.0, 3.0 / 7.0], &[4.0 / 7.0, 4.0 / 7.0]]);
        assert!(op_norm(&(&h.e - expected)) < 1e-12);
        assert!(h.residuals[50] < 1e-10);
        assert!(h.identity_error() < 1e-12);
        assert!(h.eigen_error() < 1e-10);
    }

    #[test]
    fn jordan_block_limit() {
        let a = m(&[&[1.0, 1.0], &[0.0, 1.0]]);
        let h = fit_h(&a, 400).unwrap();
        assert_eq!(h.j, 1);
        assert!((h.j_raw - 1.0).abs() < 0.01);
        assert!(op_norm(&(&h.e - m(&[&[0.0, 1.0], &[0.0, 0.0]]))) < 1e-12);
        // n^-1 M^n - E = I / n
        assert!((h.residuals[10] - 0.1).abs() < 1e-12);
        assert!(h.eigen_error() < 1e-12);
    }

    #[test]
    fn rotations_are_refused() {
        for a in [m(&[&[-1.0, 0.0], &[0.0, -1.0]]), m(&[&[0.0, 1.0], &[1.0, 0.0]])] {
            match fit_h(&a, 100) {
                Err(Error::RotatingEigenvalue { modulus, argument }) => {
                    assert!((modulus - 1.0).abs() < 1e-12);
                    assert!((argument - std::f64::consts::PI).abs() < 1e-9);
                }
                other => panic!("expected refusal, got {other:?}"),
            }
        }
    }

    #[test]
    fn radius_above_one_is_refused() {
        assert!(matches!(fit_h(&m(&[&[1.5]]), 50), Err(Error::Hypothesis { .. })));
    }

    #[test]
    fn block_power_identity() {
        let inst = random_instance(LabCase::Three, 7, 3);
        assert!(inst.block.power_identity_error(10) < 1e-12);
    }

    #[test]
    fn case1_decoupled() {
        let p_h = fit_h(&m(&[&[0.6, 0.3], &[0.4, 0.7]]), 400).unwrap();
        let c = compose_case1(&p_h, &DMatrix::zeros(2, 2), &m(&[&[0.2, 0.1], &[0.0, 0.3]]), 400).unwrap();
        let mut expected = DMatrix::zeros(4, 4);
        expected.view_mut((0, 0), (2, 2)).copy_from(&p_h.e);
        assert!(op_norm(&(&c.predicted_e - expected)) < 1e-14);
        assert!(c.e_error < 1e-10);
        assert_eq!(c.rate, Status::Pass);
    }

    #[test]
    fn case1_nilpotent_series_is_exact() {
        let p_h = fit_h(&m(&[&[0.6, 0.3], &[0.4, 0.7]]), 400).unwrap();
        let r = m(&[&[0.0, 0.5, 0.2], &[0.0, 0.0, 0.7], &[0.0, 0.0, 0.0]]);
        let q = m(&[&[0.3, 0.1], &[0.2, 0.2], &[0.5, 0.4]]);
        let c = compose_case1(&p_h, &q, &r, 400).unwrap();
        // Finite Neumann sum (I + R + R^2) Q E_P.
        let s = DMatrix::identity(3, 3) + &r + &r * &r;
        let lower = s * &q * &p_h.e;
        let got = c.predicted_e.view((2, 0), (3, 2)).clone_owned();
        assert!(op_norm(&(got - lower)) < 1e-14);
        assert!(c.e_error < 1e-12);
    }

    #[test]
    fn case1_rejects_unit_radius_second_block() {
        let p_h = fit_h(&m(&[&[1.0]]), 50).unwrap();
        assert!(compose_case1(&p_h, &m(&[&[1.0]]), &m(&[&[1.0]]), 50).is_err());
    }

    #[test]
    fn case2_decoupled_and_nested() {
        let r_h = fit_h(&m(&[&[0.5, 0.5], &[0.5, 0.5]]), 400).unwrap();
        let c = compose_case2(&m(&[&[0.3]]), &DMatrix::zeros(2, 1), &r_h, 400).unwrap();
        assert!(op_norm(&c.predicted_e.view((0, 0), (1, 3)).clone_owned()) == 0.0);
        assert!(c.e_error < 1e-10);

        // Second block with exponent 1 built from a case-3 composition.
        let inner = BlockTriangular::new(m(&[&[1.0]]), m(&[&[0.5]]), m(&[&[1.0]])).unwrap();
        let r_h = fit_h(&inner.assemble(), 400).unwrap();
        assert_eq!(r_h.j, 1);
        let c = compose_case2(&m(&[&[0.4, 0.1], &[0.2, 0.3]]), &m(&[&[0.3, 0.2], &[0.1, 0.6]]), &r_h, 400).unwrap();
        assert_eq!(c.predicted_j, 1);
        assert_eq!(c.fitted.j, 1);
        assert!(c.e_error < 1e-8, "{}", c.e_error);
        assert_eq!(c.rate, Status::Pass);
    }

    #[test]
    fn case3_exponents_and_nesting() {
        let a = m(&[&[0.6, 0.3], &[0.4, 0.7]]);
        let p_h = fit_h(&a, 400).unwrap();
        let r_h = fit_h(&a, 400).unwrap();
        let q = m(&[&[0.2, 0.1], &[0.3, 0.3]]);
        let c = compose_case3(&p_h, &q, &r_h, 400).unwrap();
        assert_eq!(c.fitted.j, 1);
        assert!(c.e_error < 1e-9, "{}", c.e_error);
        assert_eq!(c.rate, Status::Pass);

        let c2 = compose_case3(&p_h, &m(&[&[0.1, 0.2], &[0.0, 0.1], &[0.3, 0.3], &[0.2, 0.2]]), &c.fitted, 400).unwrap();
        assert_eq!(c2.predicted_j, 2);
        assert_eq!(c2.fitted.j, 2);
        assert!(c2.e_error < 1e-8, "{}", c2.e_error);

        assert!(compose_case3(&c.fitted, &DMatrix::zeros(2, 4), &p_h, 400).is_err());
    }

    #[test]
    fn case3_zero_coupling_is_degenerate() {
        let a = m(&[&[0.6, 0.3], &[0.4, 0.7]]);
        let p_h = fit_h(&a, 400).unwrap();
        let c = compose_case3(&p_h, &DMatrix::zeros(2, 2), &p_h, 400).unwrap();
        assert!(c.degenerate);
        assert_eq!(c.fitted.j, 0);
        assert!(c.j_ok);
        assert!(c.e_error < 1e-6);
    }

    #[test]
    fn small_batches_pass() {
        for case in [LabCase::One, LabCase::Two, LabCase::Three] {
            let b = run_batch(case, 1, 6, 400);
            for r in &b.instances {
                assert_eq!(r.status, Status::Pass, "{case:?} {r:?}");
            }
        }
    }
}
