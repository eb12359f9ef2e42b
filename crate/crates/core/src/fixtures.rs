//! Reference chains with closed-form answers, a seeded generator of random
//! reducible chains, and rule files for the truncation workflow.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::chain::AbsorbedChain;

fn build(d: usize, t: &[(usize, usize, f64)]) -> AbsorbedChain {
    AbsorbedChain::from_triplets(d, t).expect("fixture is a valid chain")
}

/// Two states: 0 keeps mass 0.5; 1 keeps 0.5 and feeds 0.3 into 0. Rates tie, so state 1 has exponent 1.
pub fn chain_a() -> AbsorbedChain {
    build(2, &[(0, 0, 0.5), (1, 0, 0.3), (1, 1, 0.5)])
}

/// Leading state 0 (rate 0.5) feeds a slower state 1 (rate 0.2).
pub fn chain_b() -> AbsorbedChain {
    build(2, &[(0, 0, 0.5), (0, 1, 0.2), (1, 1, 0.2)])
}

/// Slower state 0 (rate 0.2) feeds the leading state 1 (rate 0.5).
pub fn chain_c() -> AbsorbedChain {
    build(2, &[(0, 0, 0.2), (0, 1, 0.5), (1, 1, 0.5)])
}

/// Three tied states in a row, 2 -> 1 -> 0, each passing 0.25.
pub fn chain_d() -> AbsorbedChain {
    build(3, &[(0, 0, 0.5), (1, 1, 0.5), (2, 2, 0.5), (2, 1, 0.25), (1, 0, 0.25)])
}

/// Four singleton classes; rates (0.5, 0.3, 0.3, 0.5), edges 2 -> 0, 3 -> 2, 3 -> 1.
pub fn four_class() -> AbsorbedChain {
    build(4, &[(0, 0, 0.5), (1, 1, 0.3), (2, 2, 0.3), (2, 0, 0.2), (3, 3, 0.5), (3, 2, 0.2), (3, 1, 0.2)])
}

/// Two unconnected leading states 0 and 1 (rate 0.5), both fed by state 2.
pub fn disconnected() -> AbsorbedChain {
    build(3, &[(0, 0, 0.5), (1, 1, 0.5), (2, 2, 0.3), (2, 0, 0.2), (2, 1, 0.3)])
}

/// The named fixtures, for sweeping.
pub fn named() -> Vec<(&'static str, AbsorbedChain)> {
    vec![
        ("chain_a", chain_a()),
        ("chain_b", chain_b()),
        ("chain_c", chain_c()),
        ("chain_d", chain_d()),
        ("four_class", four_class()),
        ("disconnected", disconnected()),
    ]
}

/// Random reducible chain with 2-5 classes and at most 30 states.
///
/// Classes get a spanning cycle plus a self-loop (so they are aperiodic),
/// and about half of them copy the internal kernel of an earlier class of
/// the same size, which makes rates tie exactly and exercises nonzero
/// exponents. Cross edges only go from later to earlier classes; labels are
/// shuffled at the end.
pub fn random_reducible(seed: u64) -> AbsorbedChain {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(2..=5);
    let mut sizes: Vec<usize> = Vec::with_capacity(k);
    let mut kernels: Vec<Vec<(usize, usize, f64)>> = Vec::with_capacity(k);
    for c in 0..k {
        let copy_from = if c > 0 && rng.random_bool(0.5) { Some(rng.random_range(0..c)) } else { None };
        if let Some(src) = copy_from {
            sizes.push(sizes[src]);
            kernels.push(kernels[src].clone());
            continue;
        }
        let size = rng.random_range(1..=6);
        let mut local = Vec::new();
        if size == 1 {
            if rng.random_bool(0.8) {
                local.push((0, 0, rng.random_range(0.2..0.7)));
            }
        } else {
            let mut order: Vec<usize> = (0..size).collect();
            order.shuffle(&mut rng);
            let mut edges: Vec<(usize, usize)> = (0..size).map(|i| (order[i], order[(i + 1) % size])).collect();
            edges.push((order[0], order[0]));
            for _ in 0..rng.random_range(0..=size) {
                edges.push((rng.random_range(0..size), rng.random_range(0..size)));
            }
            edges.sort_unstable();
            edges.dedup();
            for x in 0..size {
                let row: Vec<(usize, usize)> = edges.iter().copied().filter(|e| e.0 == x).collect();
                let mass = rng.random_range(0.3..0.7);
                let w: Vec<f64> = row.iter().map(|_| rng.random_range(0.1..1.0)).collect();
                let total: f64 = w.iter().sum();
                for (e, wi) in row.iter().zip(&w) {
                    local.push((e.0, e.1, mass * wi / total));
                }
            }
        }
        sizes.push(size);
        kernels.push(local);
    }

    let mut offsets = vec![0; k];
    for c in 1..k {
        offsets[c] = offsets[c - 1] + sizes[c - 1];
    }
    let d: usize = sizes.iter().sum();
    let mut triplets = Vec::new();
    for c in 0..k {
        for &(x, y, p) in &kernels[c] {
            triplets.push((offsets[c] + x, offsets[c] + y, p));
        }
    }
    // Internal mass is below 0.7, so up to 0.25 more leaves each row safely.
    for a in 1..k {
        for b in 0..a {
            if rng.random_bool(0.5) {
                for _ in 0..rng.random_range(1..=2) {
                    let x = offsets[a] + rng.random_range(0..sizes[a]);
                    let y = offsets[b] + rng.random_range(0..sizes[b]);
                    triplets.push((x, y, rng.random_range(0.01..0.25) / k as f64));
                }
            }
        }
    }
    let mut perm: Vec<usize> = (0..d).collect();
    perm.shuffle(&mut rng);
    let relabeled: Vec<(usize, usize, f64)> = triplets.iter().map(|&(x, y, p)| (perm[x], perm[y], p)).collect();
    build(d, &relabeled)
}

/// Birth-death chain drifting toward 0: up 0.2, down 0.7, killed 0.1; at 0 it stays with 0.4.
pub const DOWNWARD_DRIFT: &str = "\
# downward drift on the nonnegative integers
to = x+1 ; p = 0.2
to = max(x-1, 0) ; p = 0.7*min(1, x)
to = x ; p = 0.4*max(0, 1-x)
V = pow(1.5, x)
";

/// Same chain drifting upward: up 0.7, down 0.2. Conditioned mass escapes to infinity.
pub const UPWARD_DRIFT: &str = "\
# upward drift: no Lyapunov control
to = x+1 ; p = 0.7
to = max(x-1, 0) ; p = 0.2*min(1, x)
to = x ; p = 0.2*max(0, 1-x)
V = pow(1.5, x)
";

/// Two copies of the downward-drift chain interleaved: lane A on even
/// states, lane B on odd states. Lane B moves 0.05 (0.2 at its bottom)
/// into the neighbouring lane-A state in place of part of its killing, so
/// both lanes have the same kernel and lane B gets exponent 1.
pub const TWO_LANE: &str = "\
# lane A = even states, lane B = odd states; pow(-1, x) tells them apart
to = x+2 ; p = 0.2
to = max(x-2, 0) ; p = 0.7*min(1, max(0, x-1))
to = x ; p = 0.4*max(0, min(1, 2-x))
to = max(x-1, 0) ; p = (1 - pow(-1, x))/2 * (0.05 + 0.15*max(0, min(1, 2-x)))
V = pow(1.2, x)
";

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classes::find_classes;

    #[test]
    fn random_chains_are_reducible_and_small() {
        for seed in 0..50 {
            let c = random_reducible(seed);
            let g = find_classes(&c);
            assert!(c.d() <= 30);
            assert!((2..=5).contains(&g.len()), "seed {seed}: {} classes", g.len());
        }
    }

    #[test]
    fn random_chains_are_deterministic() {
        assert_eq!(random_reducible(3).triplets(), random_reducible(3).triplets());
    }
}
