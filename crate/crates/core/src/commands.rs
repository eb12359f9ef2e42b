//! Whole-command report builders shared by the CLI and the Python module.
//!
//! Each builder takes input text rather than a path, so front ends only read
//! files. Unusable input comes back as [`InputError`]; a check that runs and
//! fails is a report with status `fail`.

use serde_json::json;
use sha2::{Digest, Sha256};

use crate::dsl::{parse_expr, parse_rules, qsd_stability};
use crate::io::{parse_chain, InputError};
use crate::oplab::{run_batch, LabCase};
use crate::oracle::{verify, Status, VerifyOptions};
use crate::report::{self, Provenance, Report};
use crate::synthesis::{analyze, synthesize_from};

/// How far the chain pipeline runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Depth {
    Classes,
    Certificate,
    Verification,
}

impl Depth {
    pub fn command(self) -> &'static str {
        match self {
            Depth::Classes => "analyze",
            Depth::Certificate => "qsd",
            Depth::Verification => "verify",
        }
    }
}

/// Lowercase hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn provenance(hash: Option<String>, seeds: Vec<u64>, parameters: serde_json::Value) -> Provenance {
    Provenance { input_sha256: hash, seeds, version: env!("CARGO_PKG_VERSION").to_string(), parameters }
}

fn plain(e: impl std::fmt::Display) -> InputError {
    InputError { line: None, message: e.to_string() }
}

/// `opts` is only read at [`Depth::Verification`].
pub fn chain_report(text: &str, depth: Depth, opts: VerifyOptions) -> Result<Report, InputError> {
    let file = parse_chain(text)?;
    let (seeds, params) = match depth {
        Depth::Verification => (
            vec![opts.seed],
            json!({"n": opts.n_max, "samples": opts.samples, "seed": opts.seed, "mc_steps": opts.mc_steps}),
        ),
        _ => (vec![], json!({})),
    };
    let mut rep = Report::new(depth.command(), provenance(Some(sha256_hex(text.as_bytes())), seeds, params));
    rep.section("validation", report::validation_section(&file.validation, &file.warnings));
    let chain = &file.chain;

    let analysis = match analyze(chain) {
        Ok(a) => a,
        Err(e) => {
            rep.diagnostic(e.to_string());
            rep.record(Status::Fail);
            return Ok(rep);
        }
    };
    rep.section("classes", report::classes_section(&analysis));
    if depth == Depth::Classes {
        rep.record(Status::Pass);
        return Ok(rep);
    }

    let cert = match synthesize_from(chain, &analysis) {
        Ok(c) => c,
        Err(e) => {
            rep.diagnostic(e.to_string());
            rep.record(Status::Fail);
            return Ok(rep);
        }
    };
    rep.section("certificate", report::certificate_section(&cert, file.weights.as_ref()));
    if depth == Depth::Certificate {
        rep.record(Status::Pass);
        return Ok(rep);
    }

    match verify(chain, &cert, opts) {
        Ok(v) => {
            rep.record(v.status);
            rep.section("verification", report::verification_section(&v));
        }
        Err(e) => {
            rep.diagnostic(e.to_string());
            rep.record(Status::Fail);
        }
    }
    Ok(rep)
}

pub fn lab_report(case: u32, seed: u64, instances: usize, n_max: usize) -> Result<Report, InputError> {
    let case = LabCase::from_number(case).ok_or_else(|| plain(format!("case must be 1, 2 or 3, got {case}")))?;
    let batch = run_batch(case, seed, instances, n_max);
    let params = json!({"case": case.number(), "seed": seed, "instances": instances, "n_max": n_max});
    let mut rep = Report::new("operator-lab", provenance(None, vec![seed], params));
    rep.record(batch.status);
    rep.section("operator_lab", report::to_value(&batch));
    Ok(rep)
}

/// `weight` overrides the `V =` line of the rule file.
pub fn lyapunov_report(text: &str, weight: Option<&str>, windows: &[usize]) -> Result<Report, InputError> {
    let rules = parse_rules(text).map_err(plain)?;
    let weight = match weight {
        Some(src) => parse_expr(src).map_err(|e| plain(format!("weight expression: {e}")))?,
        None => rules.weight.clone().ok_or_else(|| plain("no 'V =' line and no weight given"))?,
    };
    let stability = qsd_stability(&rules, &weight, windows).map_err(plain)?;

    let params = json!({"V": weight.to_string(), "N": stability.windows});
    let mut rep = Report::new("lyapunov", provenance(Some(sha256_hex(text.as_bytes())), vec![], params));
    rep.record(stability.status);
    rep.section("rules", json!({"text": rules.to_string(), "weight": weight.to_string()}));
    rep.section("lyapunov", report::to_value(&stability.lyapunov));
    let mut s = report::to_value(&stability);
    if let Some(m) = s.as_object_mut() {
        m.remove("lyapunov");
    }
    rep.section("stability", s);
    for d in stability.lyapunov.diagnostics.iter().chain(&stability.diagnostics) {
        rep.diagnostic(d.clone());
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    const CHAIN_A: &str = "qsd-chain v1 d=2\n0 0 0.5\n1 0 0.3\n1 1 0.5\n";

    #[test]
    fn depth_controls_sections() {
        let a = chain_report(CHAIN_A, Depth::Classes, VerifyOptions::default()).unwrap().to_value();
        assert!(a.get("classes").is_some() && a.get("certificate").is_none());
        let q = chain_report(CHAIN_A, Depth::Certificate, VerifyOptions::default()).unwrap().to_value();
        assert!(q.get("certificate").is_some() && q.get("verification").is_none());
        assert_eq!(q["provenance"]["input_sha256"], sha256_hex(CHAIN_A.as_bytes()));
    }

    #[test]
    fn known_digest() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn bad_case_is_input_error() {
        assert!(lab_report(0, 0, 1, 50).is_err());
    }
}
