//! Two-block compositions and the full certificate assembly over the class DAG.
//!
//! A certificate lives on a `domain` of states; the chain is implicitly killed
//! on leaving it. Composition steps glue a certificate on one block to a new
//! block that only feeds into it (or is only fed by it), in three regimes:
//!
//! * [`Case::A1`]: the new block is slower and sits downstream;
//! * [`Case::A2`]: the new block is slower and sits upstream;
//! * [`Case::A3`]: both blocks share the leading rate and the upstream block
//!   raises the polynomial exponent by one.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::Serialize;

use crate::chain::{AbsorbedChain, FunctionVector, MeasureVector};
use crate::classes::{find_classes, stratify, ClassGraph, Stratification, THETA_TOL};
use crate::error::{Error, Result};
use crate::linalg::{resolvent_left, resolvent_right};
use crate::spectral::{perron, spectral_radius, ClassSpectrum};

/// Margin added to a spectral radius to obtain the certified decay bound.
pub const GAMMA_MARGIN: f64 = 1e-12;

/// Shape of the convergence-rate envelope attached to a certificate.
///
/// Constants in front of the envelope are existential; the oracle fits them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Envelope {
    /// `C * ratio^n`.
    Geometric { ratio: f64 },
    /// `C / n`.
    Polynomial,
    /// A class whose second modulus ties with its rate: no geometric bound.
    Slow,
}

impl Envelope {
    fn rank(&self) -> u8 {
        match self {
            Envelope::Geometric { .. } => 0,
            Envelope::Polynomial => 1,
            Envelope::Slow => 2,
        }
    }

    /// The weaker of two envelopes.
    pub fn combine(self, other: Envelope) -> Envelope {
        match (self, other) {
            (Envelope::Geometric { ratio: a }, Envelope::Geometric { ratio: b }) => Envelope::Geometric { ratio: a.max(b) },
            _ if self.rank() >= other.rank() => self,
            _ => other,
        }
    }

    pub fn is_geometric(&self) -> bool {
        matches!(self, Envelope::Geometric { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Case {
    A1,
    A2,
    A3,
}

/// Envelope of a composed certificate from the envelope of its certified input.
///
/// `gamma_ratio` is the certified decay of the slower block relative to the
/// leading rate (unused in case A3).
pub fn rate_envelope(case: Case, input_j_zero: bool, input: Envelope, gamma_ratio: f64) -> Envelope {
    match case {
        Case::A1 | Case::A2 if input_j_zero => input.combine(Envelope::Geometric { ratio: gamma_ratio }),
        Case::A1 | Case::A2 => input.combine(Envelope::Polynomial),
        Case::A3 => input.combine(Envelope::Polynomial),
    }
}

/// Split of a state set into `d1` and `d2` with no transition from `d2` into `d1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TwoBlockDecomposition {
    pub d1: Vec<usize>,
    pub d2: Vec<usize>,
}

impl TwoBlockDecomposition {
    pub fn new(chain: &AbsorbedChain, d1: &[usize], d2: &[usize]) -> Result<Self> {
        let d = chain.d();
        let mut side = vec![0u8; d];
        for (tag, set) in [(1u8, d1), (2u8, d2)] {
            for &x in set {
                if x >= d {
                    return Err(Error::IndexOutOfRange { index: x, d });
                }
                if side[x] != 0 {
                    return Err(Error::Hypothesis { class: None, detail: format!("state {x} lies in both blocks") });
                }
                side[x] = tag;
            }
        }
        for &y in d2 {
            if let Some(&(x, p)) = chain.row(y).iter().find(|&&(x, _)| side[x] == 1) {
                return Err(Error::Hypothesis {
                    class: None,
                    detail: format!("transition {y} -> {x} with probability {p} goes from the second block back into the first"),
                });
            }
        }
        let mut d1 = d1.to_vec();
        let mut d2 = d2.to_vec();
        d1.sort_unstable();
        d2.sort_unstable();
        Ok(Self { d1, d2 })
    }
}

/// Outcome of the entry-level computation used by case A3.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LStar {
    pub value: usize,
    /// Every quasi-stationary law of the first block enters the top level with positive weight.
    pub positive: bool,
    /// No entry into the second block is possible.
    pub vacuous: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompositionStep {
    pub case: Case,
    pub d1: Vec<usize>,
    pub d2: Vec<usize>,
    pub gamma: Option<f64>,
    pub lstar: Option<LStar>,
}

/// Quasi-stationary certificate for the chain killed outside `domain`.
///
/// All vectors have full length `d`; entries outside the domain are zero.
#[derive(Debug, Clone, Serialize)]
pub struct QsdCertificate {
    pub d: usize,
    pub domain: Vec<usize>,
    pub theta_bar: f64,
    /// Polynomial exponent per state (an upper bound where `j_lower` differs).
    pub j_state: Vec<usize>,
    pub j_lower: Vec<usize>,
    pub exact_j: bool,
    /// Class ids indexing the extreme quasi-stationary laws.
    pub index_set: Vec<usize>,
    pub nu: Vec<MeasureVector>,
    pub eta: Vec<FunctionVector>,
    pub weight: FunctionVector,
    pub envelope: Envelope,
    pub steps: Vec<CompositionStep>,
    pub warnings: Vec<String>,
}

impl QsdCertificate {
    /// `eta_S = sum_i eta_{S,i}`.
    pub fn eta_total(&self) -> FunctionVector {
        let mut out = vec![0.0; self.d];
        for e in &self.eta {
            out.iter_mut().zip(&e.0).for_each(|(o, v)| *o += v);
        }
        FunctionVector(out)
    }

    pub fn j_max(&self) -> usize {
        self.domain.iter().map(|&x| self.j_state[x]).max().unwrap_or(0)
    }

    pub fn domain_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.d];
        self.domain.iter().for_each(|&x| m[x] = true);
        m
    }

    fn weight_level(&self) -> f64 {
        self.domain.first().map_or(0.0, |&x| self.weight.0[x])
    }

    fn check_domain(&self, states: &[usize], role: &str) -> Result<()> {
        if self.domain != states {
            return Err(Error::Hypothesis {
                class: None,
                detail: format!("certificate for {role} is defined on a different state set"),
            });
        }
        Ok(())
    }
}

/// Certificate of a single aperiodic class from its Perron data.
pub fn leaf_certificate(d: usize, class_id: usize, spectrum: &ClassSpectrum) -> QsdCertificate {
    let mut nu = vec![0.0; d];
    let mut eta = vec![0.0; d];
    let mut weight = vec![0.0; d];
    for (k, &x) in spectrum.states.iter().enumerate() {
        nu[x] = spectrum.nu[k];
        eta[x] = spectrum.eta[k];
        weight[x] = 1.0;
    }
    let mut domain = spectrum.states.clone();
    domain.sort_unstable();
    QsdCertificate {
        d,
        domain,
        theta_bar: spectrum.theta,
        j_state: vec![0; d],
        j_lower: vec![0; d],
        exact_j: true,
        index_set: vec![class_id],
        nu: vec![MeasureVector(nu)],
        eta: vec![FunctionVector(eta)],
        weight: FunctionVector(weight),
        envelope: if spectrum.slow { Envelope::Slow } else { Envelope::Geometric { ratio: spectrum.gap } },
        steps: Vec::new(),
        warnings: spectrum.warnings.clone(),
    }
}

/// Certificate of one class of `chain`, computing its Perron data.
pub fn class_certificate(chain: &AbsorbedChain, states: &[usize], class_id: usize) -> Result<QsdCertificate> {
    let spectrum = perron(chain, states)?;
    if !spectrum.is_aperiodic() {
        return Err(Error::PeriodicLeadingClass { class: class_id, period: spectrum.period });
    }
    Ok(leaf_certificate(chain.d(), class_id, &spectrum))
}

/// Block-diagonal union of certificates on non-interacting domains with tied rates.
fn union(mut certs: Vec<QsdCertificate>) -> Result<QsdCertificate> {
    let mut out = certs.remove(0);
    for c in certs {
        let scale = out.theta_bar.max(c.theta_bar);
        if (out.theta_bar - c.theta_bar).abs() > THETA_TOL * scale {
            return Err(Error::Internal("union of certificates with different rates".into()));
        }
        out.theta_bar = scale;
        out.domain.extend(&c.domain);
        for &x in &c.domain {
            out.j_state[x] = c.j_state[x];
            out.j_lower[x] = c.j_lower[x];
            out.weight.0[x] = c.weight.0[x];
        }
        out.exact_j &= c.exact_j;
        out.index_set.extend(c.index_set);
        out.nu.extend(c.nu);
        out.eta.extend(c.eta);
        out.envelope = out.envelope.combine(c.envelope);
        out.steps.extend(c.steps);
        out.warnings.extend(c.warnings);
    }
    out.domain.sort_unstable();
    let w: f64 = out.index_set.len() as f64;
    for &x in &out.domain {
        out.weight.0[x] = w;
    }
    Ok(out)
}

fn mask(d: usize, states: &[usize]) -> Vec<bool> {
    let mut m = vec![false; d];
    states.iter().for_each(|&x| m[x] = true);
    m
}

/// For each state of `d1`, the largest `level(y)` over states `y` of the second
/// block enterable from it (moving inside `d1` first). `None` if no entry.
fn reachable_entry_max(chain: &AbsorbedChain, d1: &[usize], in_d2: &[bool], level: &[usize]) -> Vec<Option<usize>> {
    let d = chain.d();
    let in_d1 = mask(d, d1);
    let mut val: Vec<Option<usize>> = vec![None; d];
    let mut preds: Vec<Vec<usize>> = vec![Vec::new(); d];
    let mut work = Vec::new();
    for &x in d1 {
        for &(y, _) in chain.row(x) {
            if in_d2[y] {
                val[x] = val[x].max(Some(level[y]));
            } else if in_d1[y] {
                preds[y].push(x);
            }
        }
        if val[x].is_some() {
            work.push(x);
        }
    }
    while let Some(x) = work.pop() {
        for &p in &preds[x] {
            if val[p] < val[x] {
                val[p] = val[x];
                work.push(p);
            }
        }
    }
    val
}

/// Mass that `mu` sends from `d1` into each state of the second block in one step.
fn entry_measure(chain: &AbsorbedChain, d1: &[usize], in_d2: &[bool], mu: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; chain.d()];
    for &x in d1 {
        if mu[x] == 0.0 {
            continue;
        }
        for &(y, p) in chain.row(x) {
            if in_d2[y] {
                out[y] += mu[x] * p;
            }
        }
    }
    out
}

fn count_classes(chain: &AbsorbedChain, states: &[usize]) -> Result<usize> {
    Ok(find_classes(&chain.restrict(states)?).len())
}

fn merged_domain(dec: &TwoBlockDecomposition) -> Vec<usize> {
    let mut dom: Vec<usize> = dec.d1.iter().chain(&dec.d2).copied().collect();
    dom.sort_unstable();
    dom
}

/// Case A1: the downstream block `d2` decays strictly faster than the certified block `d1`.
pub fn compose_case_a1(chain: &AbsorbedChain, dec: &TwoBlockDecomposition, cert_p: &QsdCertificate) -> Result<QsdCertificate> {
    let rho_r = spectral_radius(chain, &dec.d2)?;
    let k2 = count_classes(chain, &dec.d2)?;
    a1_with(chain, dec, cert_p, rho_r, k2)
}

fn a1_with(chain: &AbsorbedChain, dec: &TwoBlockDecomposition, cert_p: &QsdCertificate, rho_r: f64, k2: usize) -> Result<QsdCertificate> {
    cert_p.check_domain(&dec.d1, "the first block")?;
    let theta = cert_p.theta_bar;
    if rho_r >= theta * (1.0 - THETA_TOL) {
        return Err(Error::Hypothesis {
            class: None,
            detail: format!("case A1 inapplicable: spectral radius {rho_r} of the downstream block is not below {theta}"),
        });
    }
    let gamma = (rho_r + GAMMA_MARGIN).min(0.5 * (rho_r + theta));
    let d = chain.d();
    let in_d2 = mask(d, &dec.d2);
    let r_rows = chain.sub_rows(&dec.d2)?;

    let mut out = cert_p.clone();
    for (nu, eta) in out.nu.iter_mut().zip(out.eta.iter_mut()) {
        let entry = entry_measure(chain, &dec.d1, &in_d2, &nu.0);
        let b: Vec<f64> = dec.d2.iter().map(|&y| entry[y] / theta).collect();
        let tail = resolvent_left(&r_rows, theta, &b)?;
        let mass = 1.0 + tail.iter().sum::<f64>();
        for (k, &y) in dec.d2.iter().enumerate() {
            nu.0[y] = tail[k];
        }
        nu.0.iter_mut().for_each(|v| *v /= mass);
        eta.0.iter_mut().for_each(|v| *v *= mass);
    }
    let j_zero = dec.d1.iter().all(|&x| cert_p.j_state[x] == 0);
    out.envelope = rate_envelope(Case::A1, j_zero, cert_p.envelope, gamma / theta);
    let w = cert_p.weight_level() + k2 as f64;
    out.domain = merged_domain(dec);
    for &x in &out.domain {
        out.weight.0[x] = w;
    }
    out.steps.push(CompositionStep { case: Case::A1, d1: dec.d1.clone(), d2: dec.d2.clone(), gamma: Some(gamma), lstar: None });
    Ok(out)
}

/// Case A2: the upstream block `d1` decays strictly faster than the certified block `d2`.
pub fn compose_case_a2(chain: &AbsorbedChain, dec: &TwoBlockDecomposition, cert_r: &QsdCertificate) -> Result<QsdCertificate> {
    let rho_p = spectral_radius(chain, &dec.d1)?;
    let k1 = count_classes(chain, &dec.d1)?;
    a2_with(chain, dec, cert_r, rho_p, k1)
}

fn a2_with(chain: &AbsorbedChain, dec: &TwoBlockDecomposition, cert_r: &QsdCertificate, rho_p: f64, k1: usize) -> Result<QsdCertificate> {
    cert_r.check_domain(&dec.d2, "the second block")?;
    let theta = cert_r.theta_bar;
    if rho_p >= theta * (1.0 - THETA_TOL) {
        return Err(Error::Hypothesis {
            class: None,
            detail: format!("case A2 inapplicable: spectral radius {rho_p} of the upstream block is not below {theta}"),
        });
    }
    let gamma = (rho_p + GAMMA_MARGIN).min(0.5 * (rho_p + theta));
    let d = chain.d();
    let in_d2 = mask(d, &dec.d2);
    let p_rows = chain.sub_rows(&dec.d1)?;
    let levels: BTreeSet<usize> = dec.d2.iter().map(|&y| cert_r.j_state[y]).collect();

    let entry = reachable_entry_max(chain, &dec.d1, &in_d2, &cert_r.j_state);
    let entry_lo = reachable_entry_max(chain, &dec.d1, &in_d2, &cert_r.j_lower);

    let mut out = cert_r.clone();
    for eta in out.eta.iter_mut() {
        for &level in &levels {
            let rhs: Vec<f64> = dec
                .d1
                .iter()
                .map(|&x| {
                    chain
                        .row(x)
                        .iter()
                        .filter(|&&(y, _)| in_d2[y] && cert_r.j_state[y] == level)
                        .map(|&(y, p)| p * eta.0[y])
                        .sum::<f64>()
                        / theta
                })
                .collect();
            let h = resolvent_right(&p_rows, theta, &rhs)?;
            for (k, &x) in dec.d1.iter().enumerate() {
                if entry[x] == Some(level) {
                    eta.0[x] = h[k];
                }
            }
        }
    }
    for &x in &dec.d1 {
        out.j_state[x] = entry[x].unwrap_or(0);
        out.j_lower[x] = entry_lo[x].unwrap_or(0);
    }
    let j_zero = dec.d2.iter().all(|&y| cert_r.j_state[y] == 0);
    out.envelope = rate_envelope(Case::A2, j_zero, cert_r.envelope, gamma / theta);
    let w = cert_r.weight_level() + k1 as f64;
    out.domain = merged_domain(dec);
    for &x in &out.domain {
        out.weight.0[x] = w;
    }
    out.steps.push(CompositionStep { case: Case::A2, d1: dec.d1.clone(), d2: dec.d2.clone(), gamma: Some(gamma), lstar: None });
    Ok(out)
}

/// Largest exponent level of the second block enterable from the first block.
pub fn lstar(chain: &AbsorbedChain, dec: &TwoBlockDecomposition, cert_p: &QsdCertificate, cert_r: &QsdCertificate) -> LStar {
    let in_d2 = mask(chain.d(), &dec.d2);
    let entry = reachable_entry_max(chain, &dec.d1, &in_d2, &cert_r.j_state);
    let top = dec.d1.iter().filter_map(|&x| entry[x]).max();
    let value = top.unwrap_or(0);
    let eta_r = cert_r.eta_total();
    let positive = top.is_some()
        && cert_p.nu.iter().all(|nu| {
            let e = entry_measure(chain, &dec.d1, &in_d2, &nu.0);
            dec.d2
                .iter()
                .any(|&y| e[y] > 0.0 && cert_r.j_state[y] == value && eta_r.0[y] > 0.0)
        });
    LStar { value, positive, vacuous: top.is_none() }
}

/// Case A3: both blocks share the leading rate; the upstream block has exponent 0.
pub fn compose_case_a3(
    chain: &AbsorbedChain,
    dec: &TwoBlockDecomposition,
    cert_p: &QsdCertificate,
    cert_r: &QsdCertificate,
) -> Result<QsdCertificate> {
    cert_p.check_domain(&dec.d1, "the first block")?;
    cert_r.check_domain(&dec.d2, "the second block")?;
    let theta = cert_r.theta_bar;
    let scale = theta.max(cert_p.theta_bar);
    if (cert_p.theta_bar - theta).abs() > THETA_TOL * scale {
        return Err(Error::Hypothesis {
            class: None,
            detail: format!("case A3 needs equal rates, got {} and {theta}", cert_p.theta_bar),
        });
    }
    if let Some(&x) = dec.d1.iter().find(|&&x| cert_p.j_state[x] != 0) {
        return Err(Error::Hypothesis {
            class: None,
            detail: format!("case A3 needs exponent 0 on the first block, state {x} has {}", cert_p.j_state[x]),
        });
    }
    let ls = lstar(chain, dec, cert_p, cert_r);
    let eta_p = cert_p.eta_total();
    let eta_p_positive = dec.d1.iter().all(|&x| eta_p.0[x] > 0.0);
    let d = chain.d();
    let in_d2 = mask(d, &dec.d2);
    let jump = 1 + ls.value;

    // c[k][i] = (nu_{P,k} Q)(eta_{R,i} 1_{j_R = lstar})
    let coupling: Vec<Vec<f64>> = cert_p
        .nu
        .iter()
        .map(|nu| {
            let e = entry_measure(chain, &dec.d1, &in_d2, &nu.0);
            cert_r
                .eta
                .iter()
                .map(|eta| {
                    dec.d2
                        .iter()
                        .filter(|&&y| cert_r.j_state[y] == ls.value)
                        .map(|&y| e[y] * eta.0[y])
                        .sum()
                })
                .collect()
        })
        .collect();

    let mut out = cert_r.clone();
    let factor = 1.0 / (theta * jump as f64);
    for (i, eta) in out.eta.iter_mut().enumerate() {
        for &x in &dec.d1 {
            eta.0[x] = factor * cert_p.eta.iter().zip(&coupling).map(|(ep, c)| ep.0[x] * c[i]).sum::<f64>();
        }
    }
    let eta_s = out.eta_total();
    let corollary = !(ls.positive && eta_p_positive);
    let entry_lo = reachable_entry_max(chain, &dec.d1, &in_d2, &cert_r.j_lower);
    for &x in &dec.d1 {
        out.j_state[x] = jump;
        out.j_lower[x] = if !corollary || eta_s.0[x] > 0.0 { jump } else { entry_lo[x].unwrap_or(0) };
    }
    if corollary {
        out.exact_j = out.exact_j && dec.d1.iter().all(|&x| out.j_lower[x] == jump);
        let why = if !eta_p_positive { "the first block's weight function vanishes somewhere" } else { "some quasi-stationary law of the first block never enters the top level" };
        out.warnings.push(format!("upper-bound mode on {} states: {why}; exponents there are reported as intervals", dec.d1.len()));
    }
    out.envelope = rate_envelope(Case::A3, false, cert_p.envelope.combine(cert_r.envelope), 0.0);
    let w = cert_p.weight_level() + cert_r.weight_level();
    out.domain = merged_domain(dec);
    for &x in &out.domain {
        out.weight.0[x] = w;
    }
    out.warnings.extend(cert_p.warnings.iter().cloned());
    let mut steps = cert_p.steps.clone();
    steps.append(&mut out.steps);
    steps.push(CompositionStep { case: Case::A3, d1: dec.d1.clone(), d2: dec.d2.clone(), gamma: None, lstar: Some(ls) });
    out.steps = steps;
    Ok(out)
}

/// Classes, their Perron data and the leading-rate stratification.
#[derive(Debug, Clone, Serialize)]
pub struct Analysis {
    pub graph: ClassGraph,
    pub spectra: Vec<ClassSpectrum>,
    pub strat: Stratification,
}

pub fn analyze(chain: &AbsorbedChain) -> Result<Analysis> {
    let graph = find_classes(chain);
    let spectra = graph.classes.par_iter().map(|c| perron(chain, c)).collect::<Result<Vec<_>>>()?;
    let theta: Vec<f64> = spectra.iter().map(|s| s.theta).collect();
    let strat = stratify(&graph, &theta)?;
    Ok(Analysis { graph, spectra, strat })
}

/// Full certificate for a validated chain.
pub fn synthesize(chain: &AbsorbedChain) -> Result<QsdCertificate> {
    let analysis = analyze(chain)?;
    synthesize_from(chain, &analysis)
}

fn level_certificate(chain: &AbsorbedChain, a: &Analysis, level: usize) -> Result<QsdCertificate> {
    let d = chain.d();
    let leaves: Vec<QsdCertificate> =
        a.strat.fbar_levels[level].iter().map(|&c| leaf_certificate(d, c, &a.spectra[c])).collect();
    let mut cur = union(leaves)?;
    let mut others: Vec<usize> =
        a.strat.jbar_levels[level].iter().copied().filter(|c| !a.strat.fbar_levels[level].contains(c)).collect();
    let topo_pos = {
        let mut pos = vec![0; a.graph.len()];
        a.graph.topo_order.iter().enumerate().for_each(|(k, &c)| pos[c] = k);
        pos
    };
    // Downstream classes first, so each new block only feeds the current domain.
    others.sort_by_key(|&c| std::cmp::Reverse(topo_pos[c]));
    for c in others {
        let dec = TwoBlockDecomposition::new(chain, &a.graph.classes[c], &cur.domain)?;
        cur = a2_with(chain, &dec, &cur, a.spectra[c].theta, 1).map_err(|e| tag_class(e, c))?;
    }
    Ok(cur)
}

fn tag_class(err: Error, class: usize) -> Error {
    match err {
        Error::Hypothesis { class: None, detail } => Error::Hypothesis { class: Some(class), detail },
        other => other,
    }
}

pub fn synthesize_from(chain: &AbsorbedChain, a: &Analysis) -> Result<QsdCertificate> {
    let strat = &a.strat;
    if strat.theta_bar == 0.0 {
        return Err(Error::NoCycle);
    }
    for &c in &strat.fbar {
        if a.spectra[c].period > 1 {
            return Err(Error::PeriodicLeadingClass { class: c, period: a.spectra[c].period });
        }
    }

    let levels = (0..strat.fbar_levels.len())
        .into_par_iter()
        .map(|l| level_certificate(chain, a, l))
        .collect::<Result<Vec<_>>>()?;

    let mut iter = levels.into_iter();
    let mut cur = iter.next().ok_or_else(|| Error::Internal("no leading level".into()))?;
    for (offset, upper) in iter.enumerate() {
        let dec = TwoBlockDecomposition::new(chain, &upper.domain, &cur.domain)?;
        cur = compose_case_a3(chain, &dec, &upper, &cur)?;
        if let Some(CompositionStep { lstar: Some(ls), .. }) = cur.steps.last() {
            if ls.value != offset {
                cur.warnings.push(format!("level {} entered level {} instead of {offset}", offset + 1, ls.value));
            }
        }
    }

    if !strat.rest.is_empty() {
        let d2 = a.graph.states_of(&strat.rest);
        let rho = strat.rest.iter().map(|&c| a.spectra[c].theta).fold(0.0, f64::max);
        let dec = TwoBlockDecomposition::new(chain, &cur.domain, &d2)?;
        cur = a1_with(chain, &dec, &cur, rho, strat.rest.len())?;
    }

    for x in 0..chain.d() {
        let expected = strat.j_class[a.graph.class_of[x]];
        if cur.j_state[x] != expected {
            return Err(Error::Internal(format!(
                "exponent mismatch at state {x}: composition gives {}, class graph gives {expected}",
                cur.j_state[x]
            )));
        }
    }
    if cur.index_set != strat.fbar_levels[0] {
        return Err(Error::Internal("index set differs from the minimal leading classes".into()));
    }
    let mut warnings = strat.warnings.clone();
    for (c, s) in a.spectra.iter().enumerate() {
        if !strat.in_fbar(c) {
            warnings.extend(s.warnings.iter().map(|w| format!("class {c}: {w}")));
        }
    }
    warnings.append(&mut cur.warnings);
    cur.warnings = warnings;
    Ok(cur)
}

/// One level of the quasi-stationary family.
#[derive(Debug, Clone, Serialize)]
pub struct SimplexLevel {
    pub theta: f64,
    pub states: Vec<usize>,
    pub extreme_points: Vec<MeasureVector>,
}

/// Quasi-stationary laws at the leading rate, and optionally those of the
/// slower remainder that cannot reach any leading class.
#[derive(Debug, Clone, Serialize)]
pub struct QsdSimplex {
    pub levels: Vec<SimplexLevel>,
}

impl QsdSimplex {
    /// Convex combination of the leading extreme points.
    pub fn combination(&self, weights: &[f64]) -> Result<MeasureVector> {
        let top = &self.levels[0];
        if weights.len() != top.extreme_points.len() {
            return Err(Error::DimensionMismatch { expected: top.extreme_points.len(), got: weights.len() });
        }
        if weights.iter().any(|&w| !(w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::Hypothesis { class: None, detail: "weights must form a probability vector".into() });
        }
        let d = top.extreme_points[0].len();
        let mut out = vec![0.0; d];
        for (w, nu) in weights.iter().zip(&top.extreme_points) {
            out.iter_mut().zip(&nu.0).for_each(|(o, v)| *o += w * v);
        }
        Ok(MeasureVector(out))
    }
}

pub fn qsd_simplex(chain: &AbsorbedChain, cert: &QsdCertificate, recursive: bool) -> Result<QsdSimplex> {
    let mut levels = vec![SimplexLevel { theta: cert.theta_bar, states: cert.domain.clone(), extreme_points: cert.nu.clone() }];
    if recursive {
        let mut states = cert.domain.clone();
        loop {
            let sub = chain.restrict(&states)?;
            let a = analyze(&sub)?;
            if a.strat.rest.is_empty() {
                break;
            }
            let rest = a.graph.states_of(&a.strat.rest);
            let rest_global: Vec<usize> = rest.iter().map(|&k| states[k]).collect();
            let inner = chain.restrict(&rest_global)?;
            let inner_cert = match synthesize(&inner) {
                Ok(c) => c,
                Err(Error::NoCycle) => break,
                Err(e) => return Err(e),
            };
            let embed = |m: &MeasureVector| {
                let mut v = vec![0.0; chain.d()];
                for (k, &x) in rest_global.iter().enumerate() {
                    v[x] = m.0[k];
                }
                MeasureVector(v)
            };
            levels.push(SimplexLevel {
                theta: inner_cert.theta_bar,
                states: rest_global.clone(),
                extreme_points: inner_cert.nu.iter().map(embed).collect(),
            });
            states = rest_global;
        }
    }
    Ok(QsdSimplex { levels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::step_measure;

    fn chain(d: usize, t: &[(usize, usize, f64)]) -> AbsorbedChain {
        AbsorbedChain::from_triplets(d, t).unwrap()
    }

    fn chain_a() -> AbsorbedChain {
        chain(2, &[(0, 0, 0.5), (1, 0, 0.3), (1, 1, 0.5)])
    }
    fn chain_b() -> AbsorbedChain {
        chain(2, &[(0, 0, 0.5), (0, 1, 0.2), (1, 1, 0.2)])
    }
    fn chain_c() -> AbsorbedChain {
        chain(2, &[(0, 0, 0.2), (0, 1, 0.5), (1, 1, 0.5)])
    }
    fn chain_d() -> AbsorbedChain {
        chain(3, &[(0, 0, 0.5), (1, 1, 0.5), (2, 2, 0.5), (2, 1, 0.25), (1, 0, 0.25)])
    }

    #[test]
    fn case_a1_chain_b() {
        let c = chain_b();
        let p = class_certificate(&c, &[0], 0).unwrap();
        let dec = TwoBlockDecomposition::new(&c, &[0], &[1]).unwrap();
        let s = compose_case_a1(&c, &dec, &p).unwrap();
        assert!((s.nu[0].0[0] - 0.6).abs() < 1e-15);
        assert!((s.nu[0].0[1] - 0.4).abs() < 1e-15);
        assert!((s.eta[0].0[0] - 5.0 / 3.0).abs() < 1e-14);
        assert_eq!(s.eta[0].0[1], 0.0);
        assert_eq!(s.envelope, Envelope::Geometric { ratio: (0.2 + GAMMA_MARGIN) / 0.5 });
    }

    #[test]
    fn case_a1_without_coupling() {
        let c = chain(2, &[(0, 0, 0.5), (1, 1, 0.2)]);
        let p = class_certificate(&c, &[0], 0).unwrap();
        let dec = TwoBlockDecomposition::new(&c, &[0], &[1]).unwrap();
        let s = compose_case_a1(&c, &dec, &p).unwrap();
        assert_eq!(s.nu[0].0, vec![1.0, 0.0]);
        assert_eq!(s.eta[0].0, vec![1.0, 0.0]);
        assert_eq!(s.j_state, vec![0, 0]);
    }

    #[test]
    fn case_a1_refuses_faster_downstream() {
        let c = chain(2, &[(0, 0, 0.5), (0, 1, 0.2), (1, 1, 0.6)]);
        let p = class_certificate(&c, &[0], 0).unwrap();
        let dec = TwoBlockDecomposition::new(&c, &[0], &[1]).unwrap();
        assert!(matches!(compose_case_a1(&c, &dec, &p), Err(Error::Hypothesis { .. })));
    }

    #[test]
    fn backwards_mass_is_rejected() {
        assert!(TwoBlockDecomposition::new(&chain_a(), &[0], &[1]).is_err());
    }

    #[test]
    fn case_a2_chain_c() {
        let c = chain_c();
        let r = class_certificate(&c, &[1], 1).unwrap();
        let dec = TwoBlockDecomposition::new(&c, &[0], &[1]).unwrap();
        let s = compose_case_a2(&c, &dec, &r).unwrap();
        assert!((s.eta[0].0[0] - 5.0 / 3.0).abs() < 1e-14);
        assert_eq!(s.j_state, vec![0, 0]);
        assert_eq!(s.nu[0].0, vec![0.0, 1.0]);
    }

    #[test]
    fn case_a2_without_access() {
        let c = chain(2, &[(0, 0, 0.2), (1, 1, 0.5)]);
        let r = class_certificate(&c, &[1], 1).unwrap();
        let dec = TwoBlockDecomposition::new(&c, &[0], &[1]).unwrap();
        let s = compose_case_a2(&c, &dec, &r).unwrap();
        assert_eq!(s.eta[0].0[0], 0.0);
        assert_eq!(s.j_state[0], 0);
    }

    #[test]
    fn case_a2_masks_unreachable_levels() {
        // D2 = chain A on states {1, 2} (levels 0, 1); state 0 only enters state 1.
        let c = chain(3, &[(1, 1, 0.5), (2, 1, 0.3), (2, 2, 0.5), (0, 0, 0.1), (0, 1, 0.4)]);
        let r = synthesize(&c.restrict(&[1, 2]).unwrap()).unwrap();
        let mut lifted = leaf_like(&r, &[1, 2], 3);
        lifted.index_set = r.index_set.clone();
        let dec = TwoBlockDecomposition::new(&c, &[0], &[1, 2]).unwrap();
        let s = compose_case_a2(&c, &dec, &lifted).unwrap();
        assert_eq!(s.j_state, vec![0, 0, 1]);
        // h_0 = (0.4 / 0.5) / (1 - 0.1 / 0.5)
        assert!((s.eta[0].0[0] - 1.0).abs() < 1e-14);
    }

    /// Re-embeds a certificate computed on a restricted chain.
    fn leaf_like(c: &QsdCertificate, states: &[usize], d: usize) -> QsdCertificate {
        let lift = |v: &[f64]| {
            let mut out = vec![0.0; d];
            states.iter().enumerate().for_each(|(k, &x)| out[x] = v[k]);
            out
        };
        let lift_j = |v: &[usize]| {
            let mut out = vec![0; d];
            states.iter().enumerate().for_each(|(k, &x)| out[x] = v[k]);
            out
        };
        QsdCertificate {
            d,
            domain: states.to_vec(),
            theta_bar: c.theta_bar,
            j_state: lift_j(&c.j_state),
            j_lower: lift_j(&c.j_lower),
            exact_j: c.exact_j,
            index_set: c.index_set.clone(),
            nu: c.nu.iter().map(|m| MeasureVector(lift(&m.0))).collect(),
            eta: c.eta.iter().map(|f| FunctionVector(lift(&f.0))).collect(),
            weight: FunctionVector(lift(&c.weight.0)),
            envelope: c.envelope,
            steps: Vec::new(),
            warnings: Vec::new(),
        }
    }

    #[test]
    fn case_a3_chain_a() {
        let c = chain_a();
        let p = class_certificate(&c, &[1], 1).unwrap();
        let r = class_certificate(&c, &[0], 0).unwrap();
        let dec = TwoBlockDecomposition::new(&c, &[1], &[0]).unwrap();
        let ls = lstar(&c, &dec, &p, &r);
        assert_eq!(ls, LStar { value: 0, positive: true, vacuous: false });
        let s = compose_case_a3(&c, &dec, &p, &r).unwrap();
        assert_eq!(s.j_state, vec![0, 1]);
        assert!((s.eta[0].0[1] - 0.6).abs() < 1e-15);
        assert_eq!(s.nu[0].0, vec![1.0, 0.0]);
        assert_eq!(s.envelope, Envelope::Polynomial);
    }

    #[test]
    fn lstar_vacuous_without_coupling() {
        let c = chain(2, &[(0, 0, 0.5), (1, 1, 0.5)]);
        let p = class_certificate(&c, &[1], 1).unwrap();
        let r = class_certificate(&c, &[0], 0).unwrap();
        let dec = TwoBlockDecomposition::new(&c, &[1], &[0]).unwrap();
        assert_eq!(lstar(&c, &dec, &p, &r), LStar { value: 0, positive: false, vacuous: true });
        let s = compose_case_a3(&c, &dec, &p, &r).unwrap();
        assert!(!s.exact_j);
        assert_eq!((s.j_lower[1], s.j_state[1]), (0, 1));
    }

    #[test]
    fn chain_d_outer_step() {
        let c = chain_d();
        let inner = synthesize(&c.restrict(&[0, 1]).unwrap()).unwrap();
        let r = leaf_like(&inner, &[0, 1], 3);
        let p = class_certificate(&c, &[2], 2).unwrap();
        let dec = TwoBlockDecomposition::new(&c, &[2], &[0, 1]).unwrap();
        let ls = lstar(&c, &dec, &p, &r);
        assert_eq!((ls.value, ls.positive), (1, true));
        let s = compose_case_a3(&c, &dec, &p, &r).unwrap();
        assert_eq!(s.j_state, vec![0, 1, 2]);
    }

    #[test]
    fn lstar_masks_unreachable_top_level() {
        // D2 = chain A on {0, 1} plus an isolated entry; D1 = {2} enters only state 0 (level 0).
        let c = chain(3, &[(0, 0, 0.5), (1, 0, 0.3), (1, 1, 0.5), (2, 2, 0.5), (2, 0, 0.1)]);
        let inner = synthesize(&c.restrict(&[0, 1]).unwrap()).unwrap();
        let r = leaf_like(&inner, &[0, 1], 3);
        let p = class_certificate(&c, &[2], 2).unwrap();
        let dec = TwoBlockDecomposition::new(&c, &[2], &[0, 1]).unwrap();
        assert_eq!(lstar(&c, &dec, &p, &r).value, 0);
        let s = compose_case_a3(&c, &dec, &p, &r).unwrap();
        assert_eq!(s.j_state[2], 1);
    }

    #[test]
    fn synthesize_fixtures() {
        let a = synthesize(&chain_a()).unwrap();
        assert_eq!(a.theta_bar, 0.5);
        assert_eq!(a.j_state, vec![0, 1]);
        assert!((a.eta[0].0[1] - 0.6).abs() < 1e-15);

        let d = synthesize(&chain_d()).unwrap();
        assert_eq!(d.j_state, vec![0, 1, 2]);
        assert_eq!(d.index_set, vec![0]);
        assert!(d.eta[0].0.iter().all(|&v| v > 0.0));
        assert!((d.eta[0].0[1] - 0.5).abs() < 1e-14);
        assert!((d.eta[0].0[2] - 0.125).abs() < 1e-14);

        let four = chain(4, &[(0, 0, 0.5), (1, 1, 0.3), (2, 2, 0.3), (2, 0, 0.2), (3, 3, 0.5), (3, 2, 0.2), (3, 1, 0.2)]);
        let s = synthesize(&four).unwrap();
        assert_eq!(s.j_state, vec![0, 0, 0, 1]);
        let eta = &s.eta[0].0;
        assert!((eta[0] - 1.0).abs() < 1e-15 && eta[1] == 0.0 && (eta[2] - 1.0).abs() < 1e-14 && (eta[3] - 0.4).abs() < 1e-14);
    }

    #[test]
    fn disconnected_leading_classes() {
        let c = chain(3, &[(0, 0, 0.5), (1, 1, 0.5), (2, 2, 0.3), (2, 0, 0.2), (2, 1, 0.3)]);
        let s = synthesize(&c).unwrap();
        assert_eq!(s.index_set, vec![0, 1]);
        let simplex = qsd_simplex(&c, &s, false).unwrap();
        for w in 0..=10 {
            let t = w as f64 / 10.0;
            let mu = simplex.combination(&[t, 1.0 - t]).unwrap();
            let next = step_measure(&c, &mu).unwrap();
            let res: f64 = next.0.iter().zip(&mu.0).map(|(a, b)| (a - 0.5 * b).abs()).sum();
            assert!(res < 1e-12);
        }
    }

    #[test]
    fn recursive_simplex_chain_b() {
        let c = chain_b();
        let s = synthesize(&c).unwrap();
        let simplex = qsd_simplex(&c, &s, true).unwrap();
        assert_eq!(simplex.levels.len(), 2);
        assert!((simplex.levels[1].theta - 0.2).abs() < 1e-15);
        assert_eq!(simplex.levels[1].extreme_points[0].0, vec![0.0, 1.0]);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(synthesize(&chain(2, &[(0, 1, 0.5)])), Err(Error::NoCycle)));
        assert!(matches!(
            synthesize(&chain(2, &[(0, 1, 0.5), (1, 0, 0.5)])),
            Err(Error::PeriodicLeadingClass { period: 2, .. })
        ));
    }

    #[test]
    fn envelope_shapes() {
        let geo = Envelope::Geometric { ratio: 0.3 };
        assert_eq!(rate_envelope(Case::A1, true, geo, 0.4), Envelope::Geometric { ratio: 0.4 });
        assert_eq!(rate_envelope(Case::A3, true, geo, 0.4), Envelope::Polynomial);
        assert_eq!(rate_envelope(Case::A1, false, geo, 0.4), Envelope::Polynomial);
    }
}
