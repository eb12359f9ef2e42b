use std::fmt;

use super::{EvalError, Expr, RuleSet};
use crate::chain::{AbsorbedChain, FunctionVector, ROW_SUM_TOL};
use crate::error::Error;

/// Targets further than this from an integer trigger a rounding warning.
const TARGET_ROUNDING_TOL: f64 = 1e-9;

#[derive(Debug)]
pub enum TruncationError {
    Eval { line: Option<usize>, source: EvalError },
    NegativeProbability { line: usize, x: usize, value: f64 },
    NonFinite { line: Option<usize>, x: usize, what: &'static str },
    NegativeTarget { line: usize, x: usize, value: f64 },
    RowSum { x: usize, sum: f64 },
    EmptyWindow,
    BadWindows(String),
    Chain(Error),
}

impl fmt::Display for TruncationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let at = |line: &Option<usize>| line.map_or("weight".to_string(), |l| format!("rule on line {l}"));
        match self {
            TruncationError::Eval { line, source } => write!(f, "{}: {source}", at(line)),
            TruncationError::NegativeProbability { line, x, value } => {
                write!(f, "rule on line {line}: negative probability {value} at x = {x}")
            }
            TruncationError::NonFinite { line, x, what } => write!(f, "{}: non-finite {what} at x = {x}", at(line)),
            TruncationError::NegativeTarget { line, x, value } => {
                write!(f, "rule on line {line}: target {value} at x = {x} is not a nonnegative state")
            }
            TruncationError::RowSum { x, sum } => write!(f, "probabilities sum to {sum} > 1 at x = {x}"),
            TruncationError::EmptyWindow => write!(f, "truncation size must be at least 1"),
            TruncationError::BadWindows(m) => write!(f, "{m}"),
            TruncationError::Chain(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for TruncationError {}

/// Finite window `{0..n-1}` of a rule-defined chain; mass leaving the window is killed.
#[derive(Debug, Clone)]
pub struct TruncatedChain {
    pub n: usize,
    pub chain: AbsorbedChain,
    /// Lyapunov weight, clipped below at 1.
    pub v: FunctionVector,
    /// Probability of jumping past the window, per state.
    pub boundary_loss: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Evaluated transitions of state `x` before truncation: `(target, prob, line)`.
pub(crate) fn transitions(rules: &RuleSet, x: usize) -> Result<Vec<(usize, f64, usize)>, TruncationError> {
    transitions_with_warnings(rules, x, &mut Vec::new())
}

fn transitions_with_warnings(
    rules: &RuleSet,
    x: usize,
    warnings: &mut Vec<(usize, String)>,
) -> Result<Vec<(usize, f64, usize)>, TruncationError> {
    let xf = x as f64;
    let mut out = Vec::with_capacity(rules.rules.len());
    let mut sum = 0.0;
    for rule in &rules.rules {
        let line = rule.line;
        let p = rule.prob.eval(xf).map_err(|source| TruncationError::Eval { line: Some(line), source })?;
        if !p.is_finite() {
            return Err(TruncationError::NonFinite { line: Some(line), x, what: "probability" });
        }
        if p < 0.0 {
            return Err(TruncationError::NegativeProbability { line, x, value: p });
        }
        sum += p;
        if p == 0.0 {
            continue;
        }
        let t = rule.target.eval(xf).map_err(|source| TruncationError::Eval { line: Some(line), source })?;
        if !t.is_finite() {
            return Err(TruncationError::NonFinite { line: Some(line), x, what: "target" });
        }
        let r = t.round_ties_even();
        if r < 0.0 {
            return Err(TruncationError::NegativeTarget { line, x, value: t });
        }
        if (t - r).abs() > TARGET_ROUNDING_TOL && !warnings.iter().any(|(l, _)| *l == line) {
            warnings.push((line, format!("rule on line {line}: target {t} at x = {x} rounded to {r}")));
        }
        out.push((r as usize, p, line));
    }
    if sum > 1.0 + ROW_SUM_TOL {
        return Err(TruncationError::RowSum { x, sum });
    }
    Ok(out)
}

/// Weight at `x`, clipped below at 1.
pub(crate) fn weight_at(v: &Expr, x: usize) -> Result<f64, TruncationError> {
    let w = v.eval(x as f64).map_err(|source| TruncationError::Eval { line: None, source })?;
    if w.is_nan() {
        return Err(TruncationError::NonFinite { line: None, x, what: "weight" });
    }
    Ok(w.max(1.0))
}

/// Restricts the rules to `{0..n-1}`, killing every jump that leaves the window.
pub fn build_truncation(rules: &RuleSet, n: usize, v: &Expr) -> Result<TruncatedChain, TruncationError> {
    if n == 0 {
        return Err(TruncationError::EmptyWindow);
    }
    let mut triplets = Vec::new();
    let mut boundary_loss = vec![0.0; n];
    let mut weights = Vec::with_capacity(n);
    let mut rounding = Vec::new();
    for x in 0..n {
        for (t, p, _) in transitions_with_warnings(rules, x, &mut rounding)? {
            if t < n {
                triplets.push((x, t, p));
            } else {
                boundary_loss[x] += p;
            }
        }
        weights.push(weight_at(v, x)?);
    }
    let chain = AbsorbedChain::from_triplets(n, &triplets).map_err(TruncationError::Chain)?;
    Ok(TruncatedChain {
        n,
        chain,
        v: FunctionVector(weights),
        boundary_loss,
        warnings: rounding.into_iter().map(|(_, w)| w).collect(),
    })
}
