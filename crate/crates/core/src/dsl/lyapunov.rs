use rayon::prelude::*;
use serde::Serialize;

use super::truncation::{transitions, weight_at};
use super::{build_truncation, Expr, RuleSet, TruncatedChain, TruncationError};
use crate::chain::MeasureVector;
use crate::oracle::Status;
use crate::synthesis::{analyze, synthesize_from, Analysis};

/// Consecutive certificates must end closer than this in weighted total variation.
pub const STABILITY_TOL: f64 = 1e-8;
/// Distances below this are rounding noise and do not count as an increase.
const DISTANCE_FLOOR: f64 = 1e-12;
const CURVE_POINTS: usize = 40;

/// Drift ratio `E_x(V(X_1); survive) / V(x)` on the tail of the larger window,
/// compared with the leading rate, plus the structural side conditions.
#[derive(Debug, Clone, Serialize)]
pub struct LyapunovReport {
    pub n_small: usize,
    pub n_large: usize,
    /// First state of the tail window, `n_small / 2`.
    pub tail_start: usize,
    pub tail_sup: f64,
    pub tail_sup_at: usize,
    pub tail_inf: f64,
    /// Reference rate the tail ratio must stay below.
    pub theta_ref: f64,
    /// `"given"` or `"certificate"` (leading rate of the larger truncation).
    pub theta_ref_source: String,
    /// `(x, ratio)` samples over the tail window.
    pub ratio_curve: Vec<(usize, f64)>,
    pub drift: Status,
    /// A state that returns to itself with positive probability.
    pub return_state: Option<usize>,
    pub cycle: Status,
    pub leading_aperiodic: Status,
    pub status: Status,
    pub conclusion: String,
    pub diagnostics: Vec<String>,
}

fn drift_ratio(rules: &RuleSet, v: &Expr, x: usize) -> Result<f64, TruncationError> {
    let mut acc = 0.0;
    for (t, p, _) in transitions(rules, x)? {
        acc += p * weight_at(v, t)?;
    }
    Ok(acc / weight_at(v, x)?)
}

fn lyapunov_from(
    rules: &RuleSet,
    v: &Expr,
    n_small: usize,
    n_large: usize,
    analysis: Option<&Analysis>,
    theta_ref: Option<f64>,
) -> Result<LyapunovReport, TruncationError> {
    let tail_start = n_small / 2;
    let xs: Vec<usize> = (tail_start..n_large).collect();
    let ratios = xs.par_iter().map(|&x| drift_ratio(rules, v, x)).collect::<Result<Vec<f64>, _>>()?;
    let (mut tail_sup, mut tail_sup_at, mut tail_inf) = (f64::NEG_INFINITY, tail_start, f64::INFINITY);
    for (&x, &r) in xs.iter().zip(&ratios) {
        if r > tail_sup {
            tail_sup = r;
            tail_sup_at = x;
        }
        tail_inf = tail_inf.min(r);
    }
    let step = (ratios.len() / CURVE_POINTS).max(1);
    let mut ratio_curve: Vec<(usize, f64)> = (0..ratios.len()).step_by(step).map(|k| (xs[k], ratios[k])).collect();
    if let (Some(&x), Some(&r)) = (xs.last(), ratios.last()) {
        if ratio_curve.last().map(|p| p.0) != Some(x) {
            ratio_curve.push((x, r));
        }
    }

    let mut diagnostics = Vec::new();
    let (return_state, leading_aperiodic, cert_theta) = match analysis {
        Some(a) => {
            let ret = (0..a.graph.len()).find(|&c| a.graph.has_cycle[c]).map(|c| a.graph.classes[c][0]);
            let periodic: Vec<(usize, usize)> =
                a.strat.fbar.iter().filter(|&&c| a.spectra[c].period > 1).map(|&c| (c, a.spectra[c].period)).collect();
            for (c, p) in &periodic {
                diagnostics.push(format!("leading class starting at state {} has period {p}", a.graph.classes[*c][0]));
            }
            (ret, Status::from_bool(periodic.is_empty()), Some(a.strat.theta_bar))
        }
        None => (None, Status::Skipped, None),
    };
    if return_state.is_none() {
        diagnostics.push("no x_0 with positive return probability; the Lyapunov existence criterion is inapplicable".into());
    }
    let (theta_ref, theta_ref_source) = match (theta_ref, cert_theta) {
        (Some(t), _) => (t, "given"),
        (None, Some(t)) => (t, "certificate"),
        (None, None) => (0.0, "certificate"),
    };
    let drift = Status::from_bool(tail_sup < theta_ref);
    if drift == Status::Fail {
        diagnostics.push(format!(
            "tail drift ratio {tail_sup:.6} at x = {tail_sup_at} is not below the leading rate {theta_ref:.6}"
        ));
    }
    let cycle = Status::from_bool(return_state.is_some());
    let status = drift.and(cycle).and(leading_aperiodic);
    let conclusion = if status == Status::Pass {
        "consistent with the Lyapunov existence criterion".to_string()
    } else {
        "Lyapunov existence criterion not established on this window".to_string()
    };
    Ok(LyapunovReport {
        n_small,
        n_large,
        tail_start,
        tail_sup,
        tail_sup_at,
        tail_inf,
        theta_ref,
        theta_ref_source: theta_ref_source.to_string(),
        ratio_curve,
        drift,
        return_state,
        cycle,
        leading_aperiodic,
        status,
        conclusion,
        diagnostics,
    })
}

fn check_windows(n_small: usize, n_large: usize) -> Result<(), TruncationError> {
    if n_small == 0 || n_small >= n_large {
        return Err(TruncationError::BadWindows(format!("need 0 < N_1 < N_2, got {n_small} and {n_large}")));
    }
    Ok(())
}

/// Checks the drift criterion on `{n_small/2 .. n_large-1}` using the exact
/// (untruncated) rules. Without `theta_ref` the leading rate of the
/// `n_large` truncation is used.
pub fn lyapunov_check(
    rules: &RuleSet,
    v: &Expr,
    n_small: usize,
    n_large: usize,
    theta_ref: Option<f64>,
) -> Result<LyapunovReport, TruncationError> {
    check_windows(n_small, n_large)?;
    let trunc = build_truncation(rules, n_large, v)?;
    let analysis = analyze(&trunc.chain).ok();
    lyapunov_from(rules, v, n_small, n_large, analysis.as_ref(), theta_ref)
}

/// Per-window outcome of the stability sweep.
#[derive(Debug, Clone, Serialize)]
pub struct TruncationSummary {
    pub n: usize,
    pub theta_bar: Option<f64>,
    pub j_state: Vec<usize>,
    /// Smallest state of each minimal leading class; used to match laws across windows.
    pub signatures: Vec<usize>,
    /// Mass of each extreme law beyond the middle of the window.
    pub upper_half_mass: Vec<f64>,
    pub boundary_loss: f64,
    pub warnings: Vec<String>,
    pub error: Option<String>,
    #[serde(skip)]
    pub nu: Vec<MeasureVector>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PairComparison {
    pub n_from: usize,
    pub n_to: usize,
    /// Largest weighted total variation between matched extreme laws.
    pub nu_distance: f64,
    pub theta_drift: f64,
    /// States of the smaller window whose exponent changed.
    pub j_changes: usize,
    pub structure_change: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilityReport {
    pub windows: Vec<usize>,
    pub lyapunov: LyapunovReport,
    pub truncations: Vec<TruncationSummary>,
    pub pairs: Vec<PairComparison>,
    pub stable: Status,
    pub status: Status,
    pub conclusion: String,
    pub diagnostics: Vec<String>,
}

fn summarize(trunc: &TruncatedChain, analysis: &Result<Analysis, crate::Error>) -> TruncationSummary {
    let n = trunc.n;
    let mut summary = TruncationSummary {
        n,
        theta_bar: None,
        j_state: Vec::new(),
        signatures: Vec::new(),
        upper_half_mass: Vec::new(),
        boundary_loss: trunc.boundary_loss.iter().copied().fold(0.0, f64::max),
        warnings: trunc.warnings.clone(),
        error: None,
        nu: Vec::new(),
    };
    let cert = analysis.as_ref().map_err(|e| e.to_string()).and_then(|a| {
        synthesize_from(&trunc.chain, a).map(|c| (a, c)).map_err(|e| e.to_string())
    });
    match cert {
        Ok((a, c)) => {
            summary.theta_bar = Some(c.theta_bar);
            summary.signatures = c.index_set.iter().map(|&k| a.graph.classes[k][0]).collect();
            summary.upper_half_mass = c.nu.iter().map(|m| m.0[n / 2..].iter().sum()).collect();
            summary.warnings.extend(c.warnings.iter().cloned());
            summary.j_state = c.j_state;
            summary.nu = c.nu;
        }
        Err(e) => summary.error = Some(e),
    }
    summary
}

fn weighted_tv(a: &MeasureVector, b: &MeasureVector, v: &[f64]) -> f64 {
    (0..v.len())
        .map(|x| (a.0.get(x).copied().unwrap_or(0.0) - b.0.get(x).copied().unwrap_or(0.0)).abs() * v[x])
        .sum()
}

fn compare(a: &TruncationSummary, b: &TruncationSummary, v: &[f64]) -> PairComparison {
    let structure_change = a.error.is_some() || b.error.is_some() || a.signatures != b.signatures;
    let nu_distance = if structure_change {
        f64::INFINITY
    } else {
        a.nu.iter().zip(&b.nu).map(|(p, q)| weighted_tv(p, q, v)).fold(0.0, f64::max)
    };
    let theta_drift = match (a.theta_bar, b.theta_bar) {
        (Some(s), Some(t)) => (s - t).abs(),
        _ => f64::INFINITY,
    };
    let j_changes = a.j_state.iter().zip(&b.j_state).filter(|(p, q)| p != q).count();
    PairComparison { n_from: a.n, n_to: b.n, nu_distance, theta_drift, j_changes, structure_change }
}

/// Synthesizes a certificate on each window and checks that consecutive
/// certificates settle; also runs [`lyapunov_check`] on the two largest windows.
pub fn qsd_stability(rules: &RuleSet, v: &Expr, windows: &[usize]) -> Result<StabilityReport, TruncationError> {
    let mut ns = windows.to_vec();
    ns.sort_unstable();
    ns.dedup();
    if ns.len() < 2 || ns[0] == 0 {
        return Err(TruncationError::BadWindows(format!("need at least two positive window sizes, got {windows:?}")));
    }
    let truncs = ns.par_iter().map(|&n| build_truncation(rules, n, v)).collect::<Result<Vec<_>, _>>()?;
    let analyses: Vec<Result<Analysis, crate::Error>> = truncs.par_iter().map(|t| analyze(&t.chain)).collect();
    let summaries: Vec<TruncationSummary> =
        truncs.par_iter().zip(analyses.par_iter()).map(|(t, a)| summarize(t, a)).collect();

    let last = truncs.len() - 1;
    let lyapunov = lyapunov_from(rules, v, ns[last - 1], ns[last], analyses[last].as_ref().ok(), None)?;

    let pairs: Vec<PairComparison> =
        (1..summaries.len()).map(|k| compare(&summaries[k - 1], &summaries[k], &truncs[k].v.0)).collect();

    let mut diagnostics = Vec::new();
    for s in &summaries {
        if let Some(e) = &s.error {
            diagnostics.push(format!("N = {}: {e}", s.n));
        }
    }
    for p in &pairs {
        if p.structure_change {
            diagnostics.push(format!("leading classes change between N = {} and N = {}", p.n_from, p.n_to));
        }
    }
    let decreasing = pairs.windows(2).all(|w| w[1].nu_distance <= w[0].nu_distance.max(DISTANCE_FLOOR));
    if !decreasing {
        diagnostics.push("distances between consecutive certificates do not decrease".into());
    }
    let last_gap = pairs.last().map_or(f64::INFINITY, |p| p.nu_distance);
    if !(last_gap <= STABILITY_TOL) {
        diagnostics.push(format!("last weighted distance {last_gap:.3e} exceeds {STABILITY_TOL:.0e}"));
    }
    for s in &summaries {
        if s.upper_half_mass.iter().any(|&m| m > 0.5) {
            diagnostics.push(format!("N = {}: the quasi-stationary law sits near the truncation boundary (mass escapes)", s.n));
        }
    }
    let stable = Status::from_bool(
        pairs.iter().all(|p| !p.structure_change) && decreasing && last_gap <= STABILITY_TOL,
    );
    let status = stable.and(lyapunov.status);
    let conclusion = match (stable, lyapunov.status) {
        (Status::Pass, Status::Pass) => "truncations settle; consistent with convergence to a quasi-stationary distribution",
        (Status::Pass, _) => "truncations settle, but the Lyapunov criterion is not established on this window",
        _ => "truncations do not settle; no evidence of a limiting quasi-stationary distribution",
    };
    Ok(StabilityReport {
        windows: ns,
        lyapunov,
        truncations: summaries,
        pairs,
        stable,
        status,
        conclusion: conclusion.to_string(),
        diagnostics,
    })
}
