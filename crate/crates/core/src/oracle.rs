//! Brute-force checks of a certificate: empirical rates and exponents, limit
//! residuals against the rate envelope, structural invariants, conditioned laws
//! and a Monte Carlo cross-check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::chain::{step_function, step_measure, AbsorbedChain, FunctionVector, MeasureVector};
use crate::error::{Error, Result};
use crate::synthesis::{Envelope, QsdCertificate};

const J_FLAG_DISTANCE: f64 = 0.2;
const INVARIANT_TOL: f64 = 1e-10;
const FLOOR_REL: f64 = 1e-12;
const MC_BATCH: u64 = 1 << 16;
/// Allowed growth of the fitted constant between the calibration and test halves.
pub const ENVELOPE_SLACK: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    Skipped,
}

impl Status {
    pub fn from_bool(ok: bool) -> Self {
        if ok {
            Status::Pass
        } else {
            Status::Fail
        }
    }

    /// Fail dominates, then pass; skipped only if everything was skipped.
    pub fn and(self, other: Status) -> Status {
        match (self, other) {
            (Status::Fail, _) | (_, Status::Fail) => Status::Fail,
            (Status::Pass, _) | (_, Status::Pass) => Status::Pass,
            _ => Status::Skipped,
        }
    }
}

/// `log[n][x] = log P_x(n < tau)`, `-inf` once the state has surely died.
#[derive(Debug, Clone)]
pub struct LogSurvival {
    pub log: Vec<Vec<f64>>,
}

/// Log-survival curves of every state up to `n_max`.
pub fn log_survival(chain: &AbsorbedChain, n_max: usize) -> Result<LogSurvival> {
    log_survival_every(chain, n_max, 1)
}

/// Same curves, renormalizing the iterate only every `every` steps.
pub fn log_survival_every(chain: &AbsorbedChain, n_max: usize, every: usize) -> Result<LogSurvival> {
    let d = chain.d();
    let every = every.max(1);
    let mut g = FunctionVector::ones(d);
    let mut offset = 0.0;
    let mut log = Vec::with_capacity(n_max + 1);
    log.push(vec![0.0; d]);
    for n in 1..=n_max {
        g = step_function(chain, &g)?;
        if n % every == 0 {
            let m = g.sup_norm();
            if m > 0.0 {
                g.0.iter_mut().for_each(|v| *v /= m);
                offset += m.ln();
            }
        }
        log.push(g.0.iter().map(|&v| if v > 0.0 { v.ln() + offset } else { f64::NEG_INFINITY }).collect());
    }
    Ok(LogSurvival { log })
}

impl LogSurvival {
    pub fn n_max(&self) -> usize {
        self.log.len() - 1
    }

    /// `exp` of the least-squares slope of `log P_x(n < tau)` over `[n_max/2, n_max]`.
    pub fn theta_hat(&self, x: usize) -> f64 {
        let n_max = self.n_max();
        let pts: Vec<(f64, f64)> =
            (n_max / 2..=n_max).map(|n| (n as f64, self.log[n][x])).filter(|p| p.1.is_finite()).collect();
        if pts.len() < 2 || !self.log[n_max][x].is_finite() {
            return 0.0;
        }
        let k = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
        let cov: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let var: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        (cov / var).exp()
    }

    /// Dyadic log-ratio exponent of `m_n = theta^{-n} P_x(n < tau)` at `n_max`.
    pub fn j_hat(&self, x: usize, theta: f64) -> JEstimate {
        let n = self.n_max();
        let (a, b) = (self.log[n][x], self.log[n / 2][x]);
        if !a.is_finite() || !b.is_finite() || n < 2 {
            return JEstimate { j_hat: 0, unrounded: None, off_integer: false, decaying: true };
        }
        let log_m = |l: f64, k: usize| l - k as f64 * theta.ln();
        let u = (log_m(a, n) - log_m(b, n / 2)) / std::f64::consts::LN_2;
        let decaying = u < -0.5;
        let j_hat = if decaying { 0 } else { u.round().max(0.0) as usize };
        JEstimate { j_hat, unrounded: Some(u), off_integer: (u - u.round()).abs() > J_FLAG_DISTANCE, decaying }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JEstimate {
    pub j_hat: usize,
    pub unrounded: Option<f64>,
    /// Unrounded value farther than 0.2 from an integer.
    pub off_integer: bool,
    /// The rescaled survival decays: the state does not see the leading rate.
    pub decaying: bool,
}

pub fn estimate_theta(chain: &AbsorbedChain, x: usize, n_max: usize) -> Result<f64> {
    check_state(chain, x)?;
    Ok(log_survival(chain, n_max)?.theta_hat(x))
}

pub fn estimate_j(chain: &AbsorbedChain, x: usize, theta: f64, n_max: usize) -> Result<JEstimate> {
    check_state(chain, x)?;
    if !(theta > 0.0) {
        return Err(Error::NonFinite(format!("rate must be positive, got {theta}")));
    }
    Ok(log_survival(chain, n_max)?.j_hat(x, theta))
}

fn check_state(chain: &AbsorbedChain, x: usize) -> Result<()> {
    if x >= chain.d() {
        return Err(Error::IndexOutOfRange { index: x, d: chain.d() });
    }
    Ok(())
}

/// Envelope value at step `n >= 1`.
pub fn envelope_at(envelope: Envelope, n: usize) -> f64 {
    let n = n as f64;
    match envelope {
        Envelope::Geometric { ratio } => (n + 1.0) * ratio.powf(n),
        Envelope::Polynomial | Envelope::Slow => 1.0 / n,
    }
}

/// Result of fitting `r_n <= C e_n` on the first half and testing the second half.
#[derive(Debug, Clone, Serialize)]
pub struct EnvelopeFit {
    pub constant: f64,
    /// Largest `r_n / (slack C e_n + floor)` over the test half.
    pub worst_ratio: f64,
    pub floor: f64,
    pub diverging: bool,
    /// First step of the test half that broke the bound.
    pub witness: Option<usize>,
    pub status: Status,
}

/// Fits the envelope constant on `n in [1, n_max/2]` and tests `(n_max/2, n_max]`
/// against `ENVELOPE_SLACK` times the fitted bound.
///
/// `residuals[n]` is the residual at step `n`; index 0 is ignored.
pub fn fit_envelope(residuals: &[f64], envelope: Envelope, floor: f64) -> EnvelopeFit {
    let n_max = residuals.len().saturating_sub(1);
    let half = n_max / 2;
    let mut constant: f64 = 0.0;
    for n in 1..=half {
        let e = envelope_at(envelope, n);
        if residuals[n] > floor && e > 0.0 {
            constant = constant.max(residuals[n] / e);
        }
    }
    let mut worst: f64 = 0.0;
    let mut witness = None;
    for n in half + 1..=n_max {
        let bound = ENVELOPE_SLACK * constant * envelope_at(envelope, n) + floor;
        let ratio = residuals[n] / bound;
        if !(ratio <= 1.0) && witness.is_none() {
            witness = Some(n);
        }
        worst = worst.max(if ratio.is_nan() { f64::INFINITY } else { ratio });
    }
    let late = n_max * 9 / 10;
    let diverging = n_max >= 10 && residuals[n_max] > floor && residuals[n_max] > 2.0 * residuals[late];
    let status = Status::from_bool(witness.is_none() && !diverging);
    EnvelopeFit { constant, worst_ratio: worst, floor, diverging, witness, status }
}

/// Log-spaced samples of a curve indexed by step.
pub fn sample_curve(curve: &[f64], points: usize) -> Vec<(usize, f64)> {
    let n_max = curve.len().saturating_sub(1);
    if n_max == 0 {
        return Vec::new();
    }
    let mut ns: Vec<usize> = (0..points)
        .map(|k| ((n_max as f64).powf(k as f64 / (points - 1).max(1) as f64)).round() as usize)
        .map(|n| n.clamp(1, n_max))
        .collect();
    ns.dedup();
    ns.into_iter().map(|n| (n, curve[n])).collect()
}

/// Limit residual of one state for one test function.
#[derive(Debug, Clone, Serialize)]
pub struct LimitCheck {
    pub x: usize,
    pub n_max: usize,
    pub limit: f64,
    pub envelope: Envelope,
    pub fit: EnvelopeFit,
    pub curve: Vec<(usize, f64)>,
    /// Full residual sequence `r_n`, index 0 unused.
    #[serde(skip)]
    pub residuals: Vec<f64>,
}

/// `r_n(x) = |theta^{-n} n^{-j(x)} S_n f(x) - sum_i eta_i(x) nu_i(f)|` for every domain state.
pub fn check_limit_all(chain: &AbsorbedChain, cert: &QsdCertificate, f: &FunctionVector, n_max: usize) -> Result<Vec<LimitCheck>> {
    if f.len() != chain.d() {
        return Err(Error::DimensionMismatch { expected: chain.d(), got: f.len() });
    }
    let theta = cert.theta_bar;
    let limits: Vec<f64> = (0..chain.d())
        .map(|x| cert.eta.iter().zip(&cert.nu).map(|(e, n)| e.0[x] * n.integrate(f)).sum())
        .collect();
    let domain = &cert.domain;
    let mut res = vec![vec![f64::NAN; n_max + 1]; domain.len()];
    let mut scale: Vec<f64> = domain.iter().map(|&x| limits[x].abs().max(f.0[x].abs()).max(1.0)).collect();
    let mut g = f.clone();
    for n in 1..=n_max {
        g = step_function(chain, &g)?;
        g.0.iter_mut().for_each(|v| *v /= theta);
        if g.0.iter().any(|v| !(v.abs() <= crate::chain::OVERFLOW_GUARD)) {
            return Err(Error::Overflow { step: n });
        }
        for (k, &x) in domain.iter().enumerate() {
            let m = g.0[x] / (n as f64).powi(cert.j_state[x] as i32);
            scale[k] = scale[k].max(m.abs());
            res[k][n] = (m - limits[x]).abs();
        }
    }
    Ok(domain
        .iter()
        .enumerate()
        .map(|(k, &x)| {
            let floor = FLOOR_REL * scale[k] * (1.0 + n_max as f64 / 1000.0);
            let residuals = std::mem::take(&mut res[k]);
            LimitCheck {
                x,
                n_max,
                limit: limits[x],
                envelope: cert.envelope,
                fit: fit_envelope(&residuals, cert.envelope, floor),
                curve: sample_curve(&residuals, 40),
                residuals,
            }
        })
        .collect())
}

pub fn check_limit(chain: &AbsorbedChain, cert: &QsdCertificate, x: usize, f: &FunctionVector, n_max: usize) -> Result<LimitCheck> {
    check_limit_all(chain, cert, f, n_max)?
        .into_iter()
        .find(|c| c.x == x)
        .ok_or(Error::IndexOutOfRange { index: x, d: chain.d() })
}

/// Measured geometric decay ratio of a residual curve, from the part above `floor`.
pub fn measured_ratio(residuals: &[f64], floor: f64) -> Option<f64> {
    let pts: Vec<(f64, f64)> = residuals
        .iter()
        .enumerate()
        .skip(1)
        .take_while(|(_, &r)| r > 100.0 * floor)
        .map(|(n, &r)| (n as f64, r.ln()))
        .collect();
    if pts.len() < 4 {
        return None;
    }
    // Skip the transient at the start.
    let pts = &pts[pts.len() / 2..];
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let cov: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let var: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    (var > 0.0).then(|| (cov / var).exp())
}

#[derive(Debug, Clone, Serialize)]
pub struct InvariantCheck {
    pub status: Status,
    pub max_error: f64,
    pub witness: Option<String>,
}

impl InvariantCheck {
    fn new() -> Self {
        Self { status: Status::Pass, max_error: 0.0, witness: None }
    }

    fn record(&mut self, err: f64, ok: bool, witness: impl FnOnce() -> String) {
        self.max_error = self.max_error.max(err);
        if !ok && self.status == Status::Pass {
            self.status = Status::Fail;
            self.witness = Some(witness());
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct InvariantReport {
    /// No support edge increases the exponent.
    pub support_monotone: InvariantCheck,
    /// `S_n(eta 1_{j = j(x)})(x) = theta^n eta(x)` for `n` up to the probe length.
    pub masked_eigen: InvariantCheck,
    /// `nu_i(eta_k) = delta_ik`, unit mass, and no mass where the exponent is positive.
    pub normalization: InvariantCheck,
    /// `nu_i S_1 = theta nu_i`.
    pub fixed_point: InvariantCheck,
}

impl InvariantReport {
    pub fn status(&self) -> Status {
        [&self.support_monotone, &self.masked_eigen, &self.normalization, &self.fixed_point]
            .iter()
            .fold(Status::Skipped, |s, c| s.and(c.status))
    }
}

pub fn check_invariants(chain: &AbsorbedChain, cert: &QsdCertificate, n_steps: usize) -> Result<InvariantReport> {
    let d = chain.d();
    let in_domain = cert.domain_mask();
    let j = &cert.j_state;

    let mut support = InvariantCheck::new();
    for &x in &cert.domain {
        for &(y, _) in chain.row(x) {
            if in_domain[y] {
                let ok = j[y] <= j[x];
                support.record(j[y].saturating_sub(j[x]) as f64, ok, || format!("edge {x} -> {y} raises the exponent from {} to {}", j[x], j[y]));
            }
        }
    }

    let eta = cert.eta_total();
    let mut masked = InvariantCheck::new();
    let levels: std::collections::BTreeSet<usize> = cert.domain.iter().map(|&x| j[x]).collect();
    for level in levels {
        let mut h = FunctionVector((0..d).map(|x| if in_domain[x] && j[x] == level { eta.0[x] } else { 0.0 }).collect());
        for n in 1..=n_steps {
            h = step_function(chain, &h)?;
            h.0.iter_mut().for_each(|v| *v /= cert.theta_bar);
            for &x in &cert.domain {
                if j[x] != level {
                    continue;
                }
                let err = (h.0[x] - eta.0[x]).abs();
                let rel = if eta.0[x] > 0.0 { err / eta.0[x] } else { err };
                masked.record(rel, rel <= INVARIANT_TOL, || format!("state {x}, step {n}: {} vs {}", h.0[x], eta.0[x]));
            }
        }
    }

    let mut norm = InvariantCheck::new();
    for (i, nu) in cert.nu.iter().enumerate() {
        let mass_err = (nu.mass() - 1.0).abs();
        norm.record(mass_err, mass_err <= INVARIANT_TOL, || format!("law {i} has mass {}", nu.mass()));
        for (k, e) in cert.eta.iter().enumerate() {
            let target = if i == k { 1.0 } else { 0.0 };
            let err = (nu.integrate(e) - target).abs();
            norm.record(err, err <= INVARIANT_TOL, || format!("law {i} integrates weight {k} to {}", nu.integrate(e)));
        }
        if let Some(x) = (0..d).find(|&x| nu.0[x] != 0.0 && j[x] > 0) {
            norm.record(nu.0[x].abs(), false, || format!("law {i} charges state {x} with exponent {}", j[x]));
        }
    }

    let mut fixed = InvariantCheck::new();
    for (i, nu) in cert.nu.iter().enumerate() {
        let next = step_measure(chain, nu)?;
        let err: f64 = next.0.iter().zip(&nu.0).map(|(a, b)| (a - cert.theta_bar * b).abs()).sum();
        fixed.record(err, err <= INVARIANT_TOL, || format!("law {i}: |nu S_1 - theta nu| = {err:e}"));
    }

    Ok(InvariantReport { support_monotone: support, masked_eigen: masked, normalization: norm, fixed_point: fixed })
}

/// Law of `X_n` under `P_mu` conditioned on survival.
pub fn exact_conditional_law(chain: &AbsorbedChain, mu: &MeasureVector, n: usize) -> Result<MeasureVector> {
    Ok(conditional_laws(chain, mu, n)?.pop().expect("at least the initial law"))
}

fn conditional_laws(chain: &AbsorbedChain, mu: &MeasureVector, n_max: usize) -> Result<Vec<MeasureVector>> {
    let mut cur = mu.normalized().ok_or_else(|| Error::NonFinite("initial law has no mass".into()))?;
    let mut out = Vec::with_capacity(n_max + 1);
    out.push(cur.clone());
    for n in 1..=n_max {
        let next = step_measure(chain, &cur)?;
        cur = next
            .normalized()
            .ok_or_else(|| Error::NonFinite(format!("conditioned law undefined: survival vanished at step {n}")))?;
        out.push(cur.clone());
    }
    Ok(out)
}

/// Mixture `sum_i mu(n^j eta_i) nu_i`, normalized.
fn predicted_law(cert: &QsdCertificate, mu: &MeasureVector, n: usize) -> Option<MeasureVector> {
    let weights: Vec<f64> = cert
        .eta
        .iter()
        .map(|e| (0..cert.d).map(|x| mu.0[x] * (n as f64).powi(cert.j_state[x] as i32) * e.0[x]).sum())
        .collect();
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let mut out = vec![0.0; cert.d];
    for (w, nu) in weights.iter().zip(&cert.nu) {
        out.iter_mut().zip(&nu.0).for_each(|(o, v)| *o += w / total * v);
    }
    Some(MeasureVector(out))
}

#[derive(Debug, Clone, Serialize)]
pub struct ConditionalLaw {
    pub n: usize,
    pub law: MeasureVector,
    pub prediction: MeasureVector,
    /// `sum_x |law(x) - prediction(x)|`.
    pub tv: f64,
}

pub fn conditional_law(chain: &AbsorbedChain, cert: &QsdCertificate, mu: &MeasureVector, n: usize) -> Result<ConditionalLaw> {
    let law = exact_conditional_law(chain, mu, n)?;
    let prediction = predicted_law(cert, mu, n.max(1))
        .ok_or_else(|| Error::Hypothesis { class: None, detail: "initial law does not charge the weight functions".into() })?;
    let tv = law.tv_distance(&prediction);
    Ok(ConditionalLaw { n, law, prediction, tv })
}

#[derive(Debug, Clone, Serialize)]
pub struct ConditionalCheck {
    pub n_max: usize,
    pub fit: EnvelopeFit,
    pub curve: Vec<(usize, f64)>,
    #[serde(skip)]
    pub tv: Vec<f64>,
}

/// Total-variation curve of the conditioned law against the certificate's mixture.
pub fn check_conditional(chain: &AbsorbedChain, cert: &QsdCertificate, mu: &MeasureVector, n_max: usize) -> Result<ConditionalCheck> {
    let laws = conditional_laws(chain, mu, n_max)?;
    let mut tv = vec![f64::NAN; n_max + 1];
    for n in 1..=n_max {
        let p = predicted_law(cert, mu, n)
            .ok_or_else(|| Error::Hypothesis { class: None, detail: "initial law does not charge the weight functions".into() })?;
        tv[n] = laws[n].tv_distance(&p);
    }
    let fit = fit_envelope(&tv, cert.envelope, FLOOR_REL * (1.0 + n_max as f64 / 1000.0));
    Ok(ConditionalCheck { n_max, fit, curve: sample_curve(&tv, 40), tv })
}

#[derive(Debug, Clone, Serialize)]
pub struct MonteCarlo {
    pub x: usize,
    pub n: usize,
    pub samples: u64,
    pub seed: u64,
    pub survivors: u64,
    pub counts: Vec<u64>,
    pub empirical: MeasureVector,
}

fn cumulative_rows(chain: &AbsorbedChain) -> Vec<Vec<(usize, f64)>> {
    chain
        .rows()
        .iter()
        .map(|row| {
            let mut acc = 0.0;
            row.iter()
                .map(|&(y, p)| {
                    acc += p;
                    (y, acc)
                })
                .collect()
        })
        .collect()
}

/// Simulates `samples` trajectories from `x` for `n` steps and keeps the survivors.
///
/// Batch `b` draws from `ChaCha8Rng::seed_from_u64(seed)` on stream `b`, so the
/// result does not depend on thread scheduling.
pub fn monte_carlo_conditional(chain: &AbsorbedChain, x: usize, n: usize, samples: u64, seed: u64) -> Result<MonteCarlo> {
    check_state(chain, x)?;
    if samples == 0 {
        return Err(Error::ZeroSurvivors { samples, steps: n });
    }
    let d = chain.d();
    let cum = cumulative_rows(chain);
    let batches = samples.div_ceil(MC_BATCH);
    let per_batch: Vec<Vec<u64>> = (0..batches)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b);
            let count = MC_BATCH.min(samples - b * MC_BATCH);
            let mut counts = vec![0u64; d];
            'walk: for _ in 0..count {
                let mut s = x;
                for _ in 0..n {
                    let u: f64 = rng.random();
                    let row = &cum[s];
                    let k = row.partition_point(|&(_, c)| c <= u);
                    match row.get(k) {
                        Some(&(y, _)) => s = y,
                        None => continue 'walk,
                    }
                }
                counts[s] += 1;
            }
            counts
        })
        .collect();
    let mut counts = vec![0u64; d];
    for batch in per_batch {
        counts.iter_mut().zip(batch).for_each(|(c, b)| *c += b);
    }
    let survivors: u64 = counts.iter().sum();
    if survivors == 0 {
        return Err(Error::ZeroSurvivors { samples, steps: n });
    }
    let empirical = MeasureVector(counts.iter().map(|&c| c as f64 / survivors as f64).collect());
    Ok(MonteCarlo { x, n, samples, seed, survivors, counts, empirical })
}

#[derive(Debug, Clone, Serialize)]
pub struct McComparison {
    /// Largest `|empirical - exact| / se` over states with a nondegenerate standard error.
    pub max_z: f64,
    pub worst_state: Option<usize>,
    pub status: Status,
}

/// Per-state comparison within three binomial standard errors.
pub fn compare_monte_carlo(mc: &MonteCarlo, exact: &MeasureVector) -> McComparison {
    let m = mc.survivors as f64;
    let mut max_z: f64 = 0.0;
    let mut worst = None;
    let mut ok = true;
    for (x, (&e, &p)) in mc.empirical.0.iter().zip(&exact.0).enumerate() {
        let se = (p * (1.0 - p) / m).sqrt();
        let dev = (e - p).abs();
        let z = if se > 0.0 {
            dev / se
        } else if dev <= 1e-12 {
            0.0
        } else {
            f64::INFINITY
        };
        if z > max_z {
            max_z = z;
            worst = Some(x);
        }
        ok &= z <= 3.0;
    }
    McComparison { max_z, worst_state: worst, status: Status::from_bool(ok) }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct VerifyOptions {
    pub n_max: usize,
    pub samples: u64,
    pub seed: u64,
    pub mc_steps: usize,
    pub invariant_steps: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { n_max: 4000, samples: 0, seed: 0, mc_steps: 20, invariant_steps: 50 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StateEstimate {
    pub x: usize,
    pub theta_hat: f64,
    pub j: JEstimate,
    /// Certified exponent range; absent where the state does not see the leading rate.
    pub expected_j: Option<(usize, usize)>,
    pub status: Status,
}

#[derive(Debug, Clone, Serialize)]
pub struct MonteCarloCheck {
    pub run: MonteCarlo,
    pub exact: MeasureVector,
    pub comparison: McComparison,
}

#[derive(Debug, Clone, Serialize)]
pub struct Verification {
    pub options: VerifyOptions,
    pub estimates: Vec<StateEstimate>,
    pub limit_ones: Vec<LimitCheck>,
    pub limit_random: Vec<LimitCheck>,
    pub invariants: InvariantReport,
    pub conditional: Option<ConditionalCheck>,
    pub monte_carlo: Option<MonteCarloCheck>,
    pub status: Status,
}

impl Verification {
    pub fn theta_hat(&self) -> Vec<f64> {
        self.estimates.iter().map(|e| e.theta_hat).collect()
    }

    pub fn j_hat(&self) -> Vec<usize> {
        self.estimates.iter().map(|e| e.j.j_hat).collect()
    }
}

/// Runs every oracle against a full-domain certificate.
pub fn verify(chain: &AbsorbedChain, cert: &QsdCertificate, opts: VerifyOptions) -> Result<Verification> {
    let d = chain.d();
    let eta = cert.eta_total();
    let (left, right) = rayon::join(
        || -> Result<_> {
            let ls = log_survival(chain, opts.n_max)?;
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let random = FunctionVector((0..d).map(|_| rng.random::<f64>()).collect());
            let (ones, rand) = rayon::join(
                || check_limit_all(chain, cert, &FunctionVector::ones(d), opts.n_max),
                || check_limit_all(chain, cert, &random, opts.n_max),
            );
            Ok((ls, ones?, rand?))
        },
        || -> Result<_> {
            let inv = check_invariants(chain, cert, opts.invariant_steps)?;
            let uniform = MeasureVector(vec![1.0 / d as f64; d]);
            let cond = if uniform.integrate(&eta) > 0.0 {
                Some(check_conditional(chain, cert, &uniform, opts.n_max)?)
            } else {
                None
            };
            Ok((inv, cond))
        },
    );
    let (ls, limit_ones, limit_random) = left?;
    let (invariants, conditional) = right?;

    let estimates: Vec<StateEstimate> = (0..d)
        .map(|x| {
            let theta_hat = ls.theta_hat(x);
            let j = ls.j_hat(x, cert.theta_bar);
            let expected_j = (eta.0[x] > 0.0).then(|| (cert.j_lower[x], cert.j_state[x]));
            let status = match expected_j {
                Some((lo, hi)) => Status::from_bool(
                    (lo..=hi).contains(&j.j_hat) && (theta_hat - cert.theta_bar).abs() <= 1e-3 && !j.off_integer,
                ),
                None => Status::Skipped,
            };
            StateEstimate { x, theta_hat, j, expected_j, status }
        })
        .collect();

    let monte_carlo = if opts.samples > 0 {
        let x = (0..d).max_by_key(|&x| (cert.j_state[x], std::cmp::Reverse(x))).unwrap_or(0);
        let run = monte_carlo_conditional(chain, x, opts.mc_steps, opts.samples, opts.seed)?;
        let exact = exact_conditional_law(chain, &MeasureVector::dirac(d, x), opts.mc_steps)?;
        let comparison = compare_monte_carlo(&run, &exact);
        Some(MonteCarloCheck { run, exact, comparison })
    } else {
        None
    };

    let mut status = invariants.status();
    for e in &estimates {
        status = status.and(e.status);
    }
    for c in limit_ones.iter().chain(&limit_random) {
        status = status.and(c.fit.status);
    }
    if let Some(c) = &conditional {
        status = status.and(c.fit.status);
    }
    if let Some(m) = &monte_carlo {
        status = status.and(m.comparison.status);
    }
    Ok(Verification { options: opts, estimates, limit_ones, limit_random, invariants, conditional, monte_carlo, status })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthesis::synthesize;

    fn chain(d: usize, t: &[(usize, usize, f64)]) -> AbsorbedChain {
        AbsorbedChain::from_triplets(d, t).unwrap()
    }
    fn chain_a() -> AbsorbedChain {
        chain(2, &[(0, 0, 0.5), (1, 0, 0.3), (1, 1, 0.5)])
    }
    fn chain_b() -> AbsorbedChain {
        chain(2, &[(0, 0, 0.5), (0, 1, 0.2), (1, 1, 0.2)])
    }

    #[test]
    fn theta_and_j_on_chain_a() {
        let a = chain_a();
        assert!((estimate_theta(&a, 1, 2000).unwrap() - 0.5).abs() < 1e-3);
        let j = estimate_j(&a, 1, 0.5, 4000).unwrap();
        assert_eq!(j.j_hat, 1);
        assert!((j.unrounded.unwrap() - 1.0).abs() < 0.05);
        assert_eq!(estimate_j(&a, 0, 0.5, 4000).unwrap().j_hat, 0);
        assert!((estimate_theta(&chain_b(), 0, 2000).unwrap() - 0.5).abs() < 1e-3);
    }

    #[test]
    fn dead_state_has_zero_rate() {
        let c = chain(2, &[(0, 0, 0.5)]);
        assert_eq!(estimate_theta(&c, 1, 100).unwrap(), 0.0);
    }

    #[test]
    fn renormalization_frequency_does_not_matter() {
        let a = chain(3, &[(0, 0, 0.5), (1, 1, 0.5), (2, 2, 0.5), (2, 1, 0.25), (1, 0, 0.25)]);
        let one = log_survival_every(&a, 500, 1).unwrap();
        let two = log_survival_every(&a, 500, 2).unwrap();
        for n in 0..=500 {
            for x in 0..3 {
                let (u, v) = (one.log[n][x], two.log[n][x]);
                assert!((u - v).abs() <= 1e-12 * u.abs().max(1.0));
            }
        }
    }

    #[test]
    fn chain_a_limit_residual_is_one_over_n() {
        let a = chain_a();
        let cert = synthesize(&a).unwrap();
        let c = check_limit(&a, &cert, 1, &FunctionVector::ones(2), 2000).unwrap();
        for n in [10, 100, 1000, 2000] {
            assert!((c.residuals[n] - 1.0 / n as f64).abs() < 1e-12);
        }
        assert_eq!(c.fit.status, Status::Pass);
        assert!((c.fit.constant - 1.0).abs() < 1e-9);
    }

    #[test]
    fn chain_b_limit_is_geometric() {
        let b = chain_b();
        let cert = synthesize(&b).unwrap();
        let f = FunctionVector(vec![0.3, 0.9]);
        for c in check_limit_all(&b, &cert, &f, 400).unwrap() {
            assert_eq!(c.fit.status, Status::Pass, "state {}", c.x);
        }
    }

    #[test]
    fn corrupted_eta_is_refuted() {
        let a = chain_a();
        let mut cert = synthesize(&a).unwrap();
        cert.eta[0].0[1] = 0.7;
        let c = check_limit(&a, &cert, 1, &FunctionVector::ones(2), 4000).unwrap();
        assert_eq!(c.fit.status, Status::Fail);
        assert!(c.fit.witness.is_some());
    }

    #[test]
    fn invariants_on_fixtures() {
        for c in [chain_a(), chain(3, &[(0, 0, 0.5), (1, 1, 0.5), (2, 2, 0.5), (2, 1, 0.25), (1, 0, 0.25)])] {
            let cert = synthesize(&c).unwrap();
            let r = check_invariants(&c, &cert, 50).unwrap();
            assert_eq!(r.status(), Status::Pass, "{r:?}");
        }
        let a = chain_a();
        let cert = synthesize(&a).unwrap();
        assert!((cert.nu[0].integrate(&cert.eta_total()) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn corrupted_nu_breaks_normalization_and_fixed_point() {
        let a = chain_a();
        let mut cert = synthesize(&a).unwrap();
        cert.nu[0] = MeasureVector(vec![0.9, 0.1]);
        let r = check_invariants(&a, &cert, 50).unwrap();
        assert_eq!(r.normalization.status, Status::Fail);
        assert_eq!(r.fixed_point.status, Status::Fail);
    }

    #[test]
    fn conditional_law_chain_a() {
        let a = chain_a();
        let cert = synthesize(&a).unwrap();
        let n = 1000;
        let c = conditional_law(&a, &cert, &MeasureVector::dirac(2, 1), n).unwrap();
        let m = 1.0 + 0.6 * n as f64;
        assert!((c.law.0[1] - 1.0 / m).abs() < 1e-14);
        assert!((c.tv - 2.0 / m).abs() < 1e-12);
        let q = conditional_law(&a, &cert, &cert.nu[0], 37).unwrap();
        assert!(q.tv < 1e-15);
        let chk = check_conditional(&a, &cert, &MeasureVector::dirac(2, 1), 1000).unwrap();
        assert_eq!(chk.fit.status, Status::Pass);
    }

    #[test]
    fn monte_carlo_basics() {
        let a = chain_a();
        let mc = monte_carlo_conditional(&a, 1, 0, 10, 0).unwrap();
        assert_eq!(mc.empirical.0, vec![0.0, 1.0]);
        let dead = chain(1, &[]);
        assert!(matches!(monte_carlo_conditional(&dead, 0, 1, 100, 0), Err(Error::ZeroSurvivors { .. })));
        let r1 = monte_carlo_conditional(&a, 1, 20, 200_000, 7).unwrap();
        let r2 = monte_carlo_conditional(&a, 1, 20, 200_000, 7).unwrap();
        assert_eq!(r1.counts, r2.counts);
        let exact = exact_conditional_law(&a, &MeasureVector::dirac(2, 1), 20).unwrap();
        assert_eq!(compare_monte_carlo(&r1, &exact).status, Status::Pass);
    }

    #[test]
    fn verify_chain_a() {
        let a = chain_a();
        let cert = synthesize(&a).unwrap();
        let v = verify(&a, &cert, VerifyOptions { samples: 100_000, ..Default::default() }).unwrap();
        assert_eq!(v.j_hat(), vec![0, 1]);
        assert_eq!(v.status, Status::Pass, "{v:#?}");
    }
}
