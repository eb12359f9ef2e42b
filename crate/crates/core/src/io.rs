//! Text format for chains.
//!
//! ```text
//! qsd-chain v1 d=2
//! # from to prob
//! 0 0 0.5
//! 1 0 0.3
//! 1 1 0.5
//! weight 1 2.0
//! ```
//!
//! Indices are 0-based. Repeated `(from, to)` pairs are summed with a warning.
//! `weight` lines are optional; unlisted states get weight 1.

use std::fmt::{self, Write as _};

use crate::chain::{AbsorbedChain, FunctionVector, ValidationReport, Violation};
use crate::error::Error;

pub const CHAIN_HEADER: &str = "qsd-chain v1";

/// Problem with an input file, with the 1-based line where it was found.
#[derive(Debug, Clone, PartialEq)]
pub struct InputError {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

impl std::error::Error for InputError {}

fn at(line: usize, message: impl Into<String>) -> InputError {
    InputError { line: Some(line), message: message.into() }
}

#[derive(Debug, Clone)]
pub struct ChainFile {
    pub chain: AbsorbedChain,
    pub validation: ValidationReport,
    /// Present when the file has at least one `weight` line.
    pub weights: Option<FunctionVector>,
    pub warnings: Vec<String>,
}

fn parse_header(line: &str) -> Option<usize> {
    let rest = line.strip_prefix(CHAIN_HEADER)?;
    let d = rest.trim().strip_prefix("d=")?;
    d.parse().ok()
}

fn parse_index(tok: &str, what: &str, d: usize, line: usize) -> Result<usize, InputError> {
    let i: usize = tok.parse().map_err(|_| at(line, format!("{what} '{tok}' is not a nonnegative integer")))?;
    if i >= d {
        return Err(at(line, format!("{what} {i} out of range for d={d}")));
    }
    Ok(i)
}

fn parse_value(tok: &str, what: &str, line: usize) -> Result<f64, InputError> {
    match tok.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(at(line, format!("{what} '{tok}' is not a finite decimal number"))),
    }
}

/// Parses and validates a chain file.
pub fn parse_chain(text: &str) -> Result<ChainFile, InputError> {
    let mut d = None;
    let mut triplets = Vec::new();
    let mut first_line_of_row: Vec<Option<usize>> = Vec::new();
    let mut weights: Option<Vec<f64>> = None;
    let mut weight_lines: Vec<Option<usize>> = Vec::new();

    for (k, raw) in text.lines().enumerate() {
        let line_no = k + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some(d) = d else {
            let n = parse_header(line)
                .ok_or_else(|| at(line_no, format!("expected header '{CHAIN_HEADER} d=<int>', found '{line}'")))?;
            if n == 0 {
                return Err(at(line_no, "d must be at least 1"));
            }
            d = Some(n);
            first_line_of_row = vec![None; n];
            weight_lines = vec![None; n];
            continue;
        };
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks[0] == "weight" {
            if toks.len() != 3 {
                return Err(at(line_no, "expected 'weight <state> <value>'"));
            }
            let x = parse_index(toks[1], "state", d, line_no)?;
            let w = parse_value(toks[2], "weight", line_no)?;
            if w < 1.0 {
                return Err(at(line_no, format!("weight {w} of state {x} is below 1")));
            }
            if let Some(prev) = weight_lines[x] {
                return Err(at(line_no, format!("second weight for state {x} (first on line {prev})")));
            }
            weight_lines[x] = Some(line_no);
            weights.get_or_insert_with(|| vec![1.0; d])[x] = w;
            continue;
        }
        if toks.len() != 3 {
            return Err(at(line_no, format!("expected '<from> <to> <prob>', found {} fields", toks.len())));
        }
        let from = parse_index(toks[0], "from-state", d, line_no)?;
        let to = parse_index(toks[1], "to-state", d, line_no)?;
        let p = parse_value(toks[2], "probability", line_no)?;
        if p < 0.0 {
            return Err(at(line_no, format!("negative probability {p} for {from} -> {to}")));
        }
        first_line_of_row[from].get_or_insert(line_no);
        triplets.push((from, to, p));
    }

    let Some(d) = d else {
        return Err(InputError { line: None, message: format!("missing header '{CHAIN_HEADER} d=<int>'") });
    };
    match AbsorbedChain::with_report(d, &triplets) {
        Ok((chain, validation)) => {
            let warnings = validation
                .duplicates
                .iter()
                .map(|(x, y)| format!("entries for {x} -> {y} appear more than once and were summed"))
                .chain(validation.renormalized.iter().map(|x| format!("row {x} exceeded 1 by rounding and was rescaled")))
                .collect();
            Ok(ChainFile { chain, validation, weights: weights.map(FunctionVector), warnings })
        }
        Err(Error::InvalidChain(violations)) => {
            let v = &violations[0];
            let line = match v {
                Violation::RowSumExceeded { row, .. } => first_line_of_row[*row],
                _ => None,
            };
            Err(InputError { line, message: Error::InvalidChain(violations).to_string() })
        }
        Err(e) => Err(InputError { line: None, message: e.to_string() }),
    }
}

/// Canonical text form; [`parse_chain`] reads it back to the same chain.
pub fn write_chain(chain: &AbsorbedChain, weights: Option<&FunctionVector>) -> String {
    let mut s = format!("{CHAIN_HEADER} d={}\n", chain.d());
    for (x, y, p) in chain.triplets() {
        let _ = writeln!(s, "{x} {y} {p:?}");
    }
    if let Some(w) = weights {
        for (x, v) in w.0.iter().enumerate() {
            let _ = writeln!(s, "weight {x} {v:?}");
        }
    }
    s
}
