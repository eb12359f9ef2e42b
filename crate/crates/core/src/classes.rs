//! Communication classes, the accessibility order between them, and the
//! stratification of leading classes that drives the polynomial exponent.
//!
//! Classes are numbered by their smallest state so that output ordering is
//! deterministic and follows the input labelling.

use serde::Serialize;

use crate::chain::AbsorbedChain;
use crate::error::{Error, Result};

/// Relative tolerance used to decide that two class rates are tied.
pub const THETA_TOL: f64 = 1e-9;

/// Classes whose rate lies within this relative distance of the maximum but
/// outside [`THETA_TOL`] trigger a fragile-stratification warning.
const NEAR_TIE: f64 = 1e-6;

/// Strongly connected components of the support graph and their reachability.
///
/// Reachability is stored as one bitset per class, so memory grows as `k^2 / 8` bytes.
#[derive(Debug, Clone, Serialize)]
pub struct ClassGraph {
    /// Sorted member states of each class.
    pub classes: Vec<Vec<usize>>,
    pub class_of: Vec<usize>,
    /// Direct successors in the condensation DAG (one support edge away).
    pub successors: Vec<Vec<usize>>,
    /// Whether the class contains a cycle (false only for loop-free singletons).
    pub has_cycle: Vec<bool>,
    /// Bit `b` of `reach[a]`: class `b` is reachable from class `a` (reflexive).
    #[serde(skip)]
    reach: Vec<Vec<u64>>,
    /// Classes in topological order (sources first).
    pub topo_order: Vec<usize>,
}

impl ClassGraph {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// `lower ≺ upper`: class `lower` is accessible from class `upper`, `lower != upper`.
    pub fn precedes(&self, lower: usize, upper: usize) -> bool {
        lower != upper && self.reaches(upper, lower)
    }

    fn reaches(&self, from: usize, to: usize) -> bool {
        self.reach[from][to / 64] >> (to % 64) & 1 == 1
    }

    /// `upper ≽ lower`.
    pub fn succeeds_eq(&self, upper: usize, lower: usize) -> bool {
        self.reaches(upper, lower)
    }

    /// All `(upper, lower)` pairs with `lower ≺ upper`, sorted.
    pub fn order_pairs(&self) -> Vec<(usize, usize)> {
        let k = self.len();
        let mut out = Vec::new();
        for a in 0..k {
            for b in 0..k {
                if self.precedes(b, a) {
                    out.push((a, b));
                }
            }
        }
        out
    }

    /// Whether the state lies in a class that reaches `class`.
    pub fn state_reaches(&self, x: usize, class: usize) -> bool {
        self.reaches(self.class_of[x], class)
    }

    /// Sorted union of the member states of `classes`.
    pub fn states_of(&self, classes: &[usize]) -> Vec<usize> {
        let mut out: Vec<usize> = classes.iter().flat_map(|&c| self.classes[c].iter().copied()).collect();
        out.sort_unstable();
        out
    }
}

/// Iterative Tarjan over the support graph.
fn tarjan(chain: &AbsorbedChain) -> Vec<Vec<usize>> {
    let d = chain.d();
    const UNSEEN: usize = usize::MAX;
    let mut index = vec![UNSEEN; d];
    let mut low = vec![0usize; d];
    let mut on_stack = vec![false; d];
    let mut stack = Vec::new();
    let mut components = Vec::new();
    let mut next = 0usize;
    let mut call: Vec<(usize, usize)> = Vec::new();

    for root in 0..d {
        if index[root] != UNSEEN {
            continue;
        }
        call.push((root, 0));
        while let Some(top) = call.len().checked_sub(1) {
            let (v, pos) = call[top];
            if pos == 0 && index[v] == UNSEEN {
                index[v] = next;
                low[v] = next;
                next += 1;
                stack.push(v);
                on_stack[v] = true;
            }
            let row = chain.row(v);
            if pos < row.len() {
                let w = row[pos].0;
                call[top].1 += 1;
                if index[w] == UNSEEN {
                    call.push((w, 0));
                } else if on_stack[w] {
                    low[v] = low[v].min(index[w]);
                }
                continue;
            }
            call.pop();
            if let Some(&(parent, _)) = call.last() {
                low[parent] = low[parent].min(low[v]);
            }
            if low[v] == index[v] {
                let mut comp = Vec::new();
                loop {
                    let w = stack.pop().expect("tarjan stack underflow");
                    on_stack[w] = false;
                    comp.push(w);
                    if w == v {
                        break;
                    }
                }
                comp.sort_unstable();
                components.push(comp);
            }
        }
    }
    components
}

/// Communication classes and the reachability closure `≺`.
pub fn find_classes(chain: &AbsorbedChain) -> ClassGraph {
    let d = chain.d();
    let mut classes = tarjan(chain);
    classes.sort_by_key(|c| c[0]);
    let k = classes.len();
    let mut class_of = vec![0; d];
    for (c, members) in classes.iter().enumerate() {
        for &x in members {
            class_of[x] = c;
        }
    }

    let mut successors = vec![Vec::new(); k];
    let mut has_cycle = vec![false; k];
    for x in 0..d {
        let cx = class_of[x];
        for &(y, _) in chain.row(x) {
            let cy = class_of[y];
            if cy == cx {
                has_cycle[cx] = true;
            } else {
                successors[cx].push(cy);
            }
        }
    }
    for s in successors.iter_mut() {
        s.sort_unstable();
        s.dedup();
    }

    // Kahn's algorithm; ties broken by class index.
    let mut indeg = vec![0usize; k];
    for s in &successors {
        for &t in s {
            indeg[t] += 1;
        }
    }
    let mut ready: std::collections::BTreeSet<usize> = (0..k).filter(|&c| indeg[c] == 0).collect();
    let mut topo_order = Vec::with_capacity(k);
    while let Some(c) = ready.pop_first() {
        topo_order.push(c);
        for &t in &successors[c] {
            indeg[t] -= 1;
            if indeg[t] == 0 {
                ready.insert(t);
            }
        }
    }
    debug_assert_eq!(topo_order.len(), k, "condensation graph must be acyclic");

    let words = k.div_ceil(64);
    let mut reach = vec![vec![0u64; words]; k];
    for &c in topo_order.iter().rev() {
        let mut bits = vec![0u64; words];
        bits[c / 64] |= 1 << (c % 64);
        for &t in &successors[c] {
            for (b, r) in bits.iter_mut().zip(&reach[t]) {
                *b |= r;
            }
        }
        reach[c] = bits;
    }

    ClassGraph { classes, class_of, successors, has_cycle, reach, topo_order }
}

/// Leading-rate stratification of a [`ClassGraph`].
#[derive(Debug, Clone, Serialize)]
pub struct Stratification {
    pub theta: Vec<f64>,
    pub theta_bar: f64,
    /// Classes whose rate ties with the maximum.
    pub fbar: Vec<usize>,
    /// `fbar_levels[l]`: minimal elements of what remains of `fbar` after levels `< l`.
    pub fbar_levels: Vec<Vec<usize>>,
    /// `jbar_levels[l]`: classes above some class of `fbar_levels[l]` and no higher level.
    pub jbar_levels: Vec<Vec<usize>>,
    /// Classes in no `jbar_levels[l]`.
    pub rest: Vec<usize>,
    /// Polynomial exponent per class.
    pub j_class: Vec<usize>,
    pub warnings: Vec<String>,
}

impl Stratification {
    pub fn top_level(&self) -> usize {
        self.fbar_levels.len().saturating_sub(1)
    }

    pub fn in_fbar(&self, class: usize) -> bool {
        self.fbar.binary_search(&class).is_ok()
    }

    pub fn leading(&self) -> &[usize] {
        self.fbar_levels.first().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Forms the leading set, its levels, and the per-class exponent.
pub fn stratify(graph: &ClassGraph, theta: &[f64]) -> Result<Stratification> {
    let k = graph.len();
    if theta.len() != k {
        return Err(Error::DimensionMismatch { expected: k, got: theta.len() });
    }
    if let Some(t) = theta.iter().find(|t| !t.is_finite() || **t < 0.0) {
        return Err(Error::NonFinite(format!("class rate {t}")));
    }
    let theta_bar = theta.iter().copied().fold(0.0, f64::max);
    let cut = theta_bar * (1.0 - THETA_TOL);
    // With every rate at zero all classes tie.
    let fbar: Vec<usize> = (0..k).filter(|&c| theta[c] >= cut).collect();

    let mut warnings = Vec::new();
    for c in 0..k {
        if theta[c] < cut && theta[c] >= theta_bar * (1.0 - NEAR_TIE) {
            warnings.push(format!(
                "class {c} rate {} is within {NEAR_TIE:e} of the maximum {theta_bar} but outside the tie tolerance; stratification is fragile",
                theta[c]
            ));
        }
    }

    let mut remaining = fbar.clone();
    let mut fbar_levels = Vec::new();
    while !remaining.is_empty() {
        let level: Vec<usize> = remaining
            .iter()
            .copied()
            .filter(|&i| !remaining.iter().any(|&o| graph.precedes(o, i)))
            .collect();
        if level.is_empty() {
            return Err(Error::Internal("no minimal element in leading set".into()));
        }
        remaining.retain(|c| !level.contains(c));
        fbar_levels.push(level);
    }

    let levels = fbar_levels.len();
    let mut assigned = vec![false; k];
    let mut jbar_levels = vec![Vec::new(); levels];
    for l in (0..levels).rev() {
        for c in 0..k {
            if !assigned[c] && fbar_levels[l].iter().any(|&f| graph.succeeds_eq(c, f)) {
                assigned[c] = true;
                jbar_levels[l].push(c);
            }
        }
    }
    let rest = (0..k).filter(|&c| !assigned[c]).collect();

    let in_fbar: Vec<bool> = (0..k).map(|c| fbar.binary_search(&c).is_ok()).collect();
    let j_class = polynomial_parameter(graph, &in_fbar)?;

    Ok(Stratification { theta: theta.to_vec(), theta_bar, fbar, fbar_levels, jbar_levels, rest, j_class, warnings })
}

/// Longest-path count of leading classes over complete paths ending in the leading set.
///
/// `g(c)` is the largest number of leading classes on a path from `c` whose last
/// class is leading; the exponent is `g(c) - 1`, or 0 when no such path exists.
pub fn polynomial_parameter(graph: &ClassGraph, in_fbar: &[bool]) -> Result<Vec<usize>> {
    let k = graph.len();
    if graph.topo_order.len() != k {
        return Err(Error::Internal("cycle in condensation graph".into()));
    }
    let mut g: Vec<Option<usize>> = vec![None; k];
    for &c in graph.topo_order.iter().rev() {
        let below = graph.successors[c].iter().filter_map(|&s| g[s]).max();
        let own = usize::from(in_fbar[c]);
        g[c] = match below {
            Some(b) => Some(b + own),
            None if in_fbar[c] => Some(1),
            None => None,
        };
    }
    Ok(g.into_iter().map(|v| v.map_or(0, |v| v - 1)).collect())
}
