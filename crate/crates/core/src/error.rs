use thiserror::Error;

use crate::chain::Violation;

/// Errors raised by the numerical core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty state space")]
    EmptyStateSpace,

    #[error("invalid chain: {}", summarize(.0))]
    InvalidChain(Vec<Violation>),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("state index {index} out of range for d={d}")]
    IndexOutOfRange { index: usize, d: usize },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("overflow guard tripped at step {step} (|entry| > 1e300)")]
    Overflow { step: usize },

    #[error("eigen-solver did not converge after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("hypothesis failed{}: {detail}", class_suffix(.class))]
    Hypothesis { class: Option<usize>, detail: String },

    #[error("leading class {class} is periodic with period {period}; quasi-limiting analysis needs aperiodic leading classes")]
    PeriodicLeadingClass { class: usize, period: usize },

    #[error("no state returns to itself with positive probability; the leading rate is 0")]
    NoCycle,

    #[error("zero survivors after {steps} steps out of {samples} samples; use more samples or fewer steps")]
    ZeroSurvivors { samples: u64, steps: usize },

    #[error("no limit: eigenvalue of modulus {modulus:.6} and argument {argument:.6} rad sits on the unit circle away from 1")]
    RotatingEigenvalue { modulus: f64, argument: f64 },

    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, Error>;

fn summarize(violations: &[Violation]) -> String {
    let shown: Vec<String> = violations.iter().take(5).map(|v| v.to_string()).collect();
    let mut s = shown.join("; ");
    if violations.len() > 5 {
        s.push_str(&format!("; ... ({} more)", violations.len() - 5));
    }
    s
}

fn class_suffix(class: &Option<usize>) -> String {
    match class {
        Some(c) => format!(" for class {c}"),
        None => String::new(),
    }
}
