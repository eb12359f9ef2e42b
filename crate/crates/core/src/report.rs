//! Machine-readable reports.
//!
//! A report is one JSON object: `schema_version`, `command`, `status`, the
//! sections the command produced, `diagnostics` and `provenance`. Floats are
//! written with 17 significant digits so they read back bit-exact; NaN and
//! infinities become `null`. Key order is fixed by construction, so equal
//! inputs give byte-identical output.

use std::fmt::Write as _;

use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::chain::{FunctionVector, ValidationReport};
use crate::oracle::{Status, Verification};
use crate::synthesis::{Analysis, QsdCertificate};

pub const SCHEMA_VERSION: u64 = 1;

/// The schema every report validates against.
pub const REPORT_SCHEMA: &str = include_str!("../schema/report.schema.json");

#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    /// SHA-256 of the input file, hex; absent for commands without one.
    pub input_sha256: Option<String>,
    pub seeds: Vec<u64>,
    pub version: String,
    /// Effective parameters after defaults.
    pub parameters: Value,
}

#[derive(Debug, Clone)]
pub struct Report {
    command: String,
    status: Status,
    sections: Map<String, Value>,
    diagnostics: Vec<String>,
    provenance: Provenance,
}

impl Report {
    pub fn new(command: &str, provenance: Provenance) -> Self {
        Self {
            command: command.to_string(),
            status: Status::Skipped,
            sections: Map::new(),
            diagnostics: Vec::new(),
            provenance,
        }
    }

    pub fn section(&mut self, name: &str, value: Value) {
        self.sections.insert(name.to_string(), value);
    }

    /// Folds a check outcome into the overall status.
    pub fn record(&mut self, status: Status) {
        self.status = self.status.and(status);
    }

    pub fn diagnostic(&mut self, message: impl Into<String>) {
        self.diagnostics.push(message.into());
    }

    pub fn status(&self) -> Status {
        self.status
    }

    pub fn to_value(&self) -> Value {
        let mut m = Map::new();
        m.insert("schema_version".into(), json!(SCHEMA_VERSION));
        m.insert("command".into(), json!(self.command));
        m.insert("status".into(), to_value(&self.status));
        for (k, v) in &self.sections {
            m.insert(k.clone(), v.clone());
        }
        m.insert("diagnostics".into(), json!(self.diagnostics));
        m.insert("provenance".into(), to_value(&self.provenance));
        Value::Object(m)
    }

    pub fn to_json(&self) -> String {
        write_json(&self.to_value())
    }
}

/// Serializes through serde; the report types cannot fail to serialize.
pub fn to_value<T: Serialize + ?Sized>(v: &T) -> Value {
    serde_json::to_value(v).expect("report types serialize")
}

pub fn validation_section(v: &ValidationReport, warnings: &[String]) -> Value {
    json!({
        "d": v.d,
        "valid": v.is_valid(),
        "violations": v.violations.iter().map(|x| x.to_string()).collect::<Vec<_>>(),
        "isolated": v.isolated,
        "renormalized": v.renormalized,
        "duplicates": v.duplicates,
        "absorption": v.absorption,
        "warnings": warnings,
    })
}

pub fn classes_section(a: &Analysis) -> Value {
    let g = &a.graph;
    let s = &a.strat;
    let classes: Vec<Value> = (0..g.len())
        .map(|c| {
            let sp = &a.spectra[c];
            json!({
                "id": c,
                "states": g.classes[c],
                "theta": sp.theta,
                "period": sp.period,
                "gap": sp.gap,
                "slow": sp.slow,
                "has_cycle": g.has_cycle[c],
                "leading": s.in_fbar(c),
                "j": s.j_class[c],
                "nu": sp.nu,
                "eta": sp.eta,
                "warnings": sp.warnings,
            })
        })
        .collect();
    json!({
        "count": g.len(),
        "theta_bar": s.theta_bar,
        "classes": classes,
        "order": g.order_pairs().iter().map(|&(upper, lower)| json!({"upper": upper, "lower": lower})).collect::<Vec<_>>(),
        "successors": g.successors,
        "strata": {
            "fbar": s.fbar,
            "fbar_levels": s.fbar_levels,
            "jbar_levels": s.jbar_levels,
            "rest": s.rest,
        },
        "warnings": s.warnings,
    })
}

pub fn certificate_section(cert: &QsdCertificate, file_weights: Option<&FunctionVector>) -> Value {
    let mut v = json!({
        "theta_bar": cert.theta_bar,
        "domain": cert.domain,
        "index_set": cert.index_set,
        "j": cert.j_state,
        "j_lower": cert.j_lower,
        "exact_j": cert.exact_j,
        "nu": cert.nu.iter().map(|m| &m.0).collect::<Vec<_>>(),
        "eta": cert.eta.iter().map(|f| &f.0).collect::<Vec<_>>(),
        "weight": cert.weight.0,
        "envelope": to_value(&cert.envelope),
        "steps": to_value(&cert.steps),
        "warnings": cert.warnings,
    });
    if let Some(w) = file_weights {
        let norms: Vec<f64> = cert.nu.iter().map(|m| m.weighted_norm(w)).collect();
        v["file_weight_norms"] = json!(norms);
    }
    v
}

pub fn verification_section(ver: &Verification) -> Value {
    let mut v = to_value(ver);
    let m = v.as_object_mut().expect("verification serializes to an object");
    let mut out = Map::new();
    out.insert("theta_hat".into(), json!(ver.theta_hat()));
    out.insert("j_hat".into(), json!(ver.j_hat()));
    out.insert("invariant_status".into(), to_value(&ver.invariants.status()));
    out.append(m);
    Value::Object(out)
}

/// Pretty JSON with 2-space indentation. Arrays of scalars stay on one line.
pub fn write_json(v: &Value) -> String {
    let mut s = String::new();
    write_value(&mut s, v, 0);
    s.push('\n');
    s
}

fn write_number(s: &mut String, n: &serde_json::Number) {
    if let Some(u) = n.as_u64() {
        let _ = write!(s, "{u}");
    } else if let Some(i) = n.as_i64() {
        let _ = write!(s, "{i}");
    } else {
        match n.as_f64() {
            Some(f) if f.is_finite() => {
                let _ = write!(s, "{f:.16e}");
            }
            _ => s.push_str("null"),
        }
    }
}

fn is_scalar(v: &Value) -> bool {
    !matches!(v, Value::Array(_) | Value::Object(_))
}

fn indent(s: &mut String, level: usize) {
    for _ in 0..level {
        s.push_str("  ");
    }
}

fn write_value(s: &mut String, v: &Value, level: usize) {
    match v {
        Value::Null => s.push_str("null"),
        Value::Bool(b) => s.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => write_number(s, n),
        Value::String(t) => s.push_str(&serde_json::to_string(t).expect("strings serialize")),
        Value::Array(items) if items.is_empty() => s.push_str("[]"),
        Value::Array(items) if items.iter().all(is_scalar) => {
            s.push('[');
            for (k, item) in items.iter().enumerate() {
                if k > 0 {
                    s.push_str(", ");
                }
                write_value(s, item, level);
            }
            s.push(']');
        }
        Value::Array(items) => {
            s.push_str("[\n");
            for (k, item) in items.iter().enumerate() {
                indent(s, level + 1);
                write_value(s, item, level + 1);
                s.push_str(if k + 1 < items.len() { ",\n" } else { "\n" });
            }
            indent(s, level);
            s.push(']');
        }
        Value::Object(m) if m.is_empty() => s.push_str("{}"),
        Value::Object(m) => {
            s.push_str("{\n");
            for (k, (key, item)) in m.iter().enumerate() {
                indent(s, level + 1);
                s.push_str(&serde_json::to_string(key).expect("strings serialize"));
                s.push_str(": ");
                write_value(s, item, level + 1);
                s.push_str(if k + 1 < m.len() { ",\n" } else { "\n" });
            }
            indent(s, level);
            s.push('}');
        }
    }
}
