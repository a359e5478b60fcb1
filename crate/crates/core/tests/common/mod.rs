//! Brute-force oracles and generators shared by the integration tests.
#![allow(dead_code)]

use std::collections::HashSet;

use agnostic_rl::mdp::LayeredMdp;
use agnostic_rl::mrp::{Mrp, MrpFlavor};
use agnostic_rl::policy::{ClassTag, Policy, PolicyClass};
use agnostic_rl::universe::{StateId, Universe};
use rand::Rng;

/// Per-layer maximum of reachable (state, action) pairs over every
/// deterministic MDP on the class universe.
///
/// Walks all start states and, layer by layer, every assignment of a next
/// state to each pair that some member actually uses. Pairs nobody uses
/// cannot affect any count, so this covers all transition functions.
pub fn brute_capacity(class: &PolicyClass) -> Vec<u64> {
    let u = class.universe();
    let mut best = vec![0u64; u.horizon()];
    for s in 0..u.layer_size(1) {
        let pos = vec![s; class.len()];
        descend(class, 1, &pos, &mut best);
    }
    best
}

fn descend(class: &PolicyClass, h: usize, pos: &[usize], best: &mut [u64]) {
    let u = class.universe();
    let mut pairs: Vec<(usize, usize)> =
        class.members().iter().zip(pos).map(|(p, &s)| (s, p.action_at(h, s))).collect();
    pairs.sort();
    pairs.dedup();
    best[h - 1] = best[h - 1].max(pairs.len() as u64);
    if h == u.horizon() {
        return;
    }
    let width = u.layer_size(h + 1);
    let mut choice = vec![0usize; pairs.len()];
    loop {
        let next: Vec<usize> = class
            .members()
            .iter()
            .zip(pos)
            .map(|(p, &s)| {
                let i = pairs.binary_search(&(s, p.action_at(h, s))).unwrap();
                choice[i]
            })
            .collect();
        descend(class, h + 1, &next, best);
        let mut i = 0;
        while i < choice.len() {
            choice[i] += 1;
            if choice[i] < width {
                break;
            }
            choice[i] = 0;
            i += 1;
        }
        if i == choice.len() {
            return;
        }
    }
}

/// Every state path of `pi` with its probability and expected return.
pub fn enumerate_paths(mdp: &LayeredMdp, pi: &Policy) -> Vec<(f64, Vec<usize>, f64)> {
    let h_max = mdp.horizon();
    let mut out = Vec::new();
    let mut stack: Vec<(f64, Vec<usize>, f64)> =
        mdp.init().iter().enumerate().filter(|(_, &p)| p > 0.0).map(|(s, &p)| (p, vec![s], 0.0)).collect();
    while let Some((p, path, ret)) = stack.pop() {
        let h = path.len();
        let s = StateId::new(h, path[h - 1]);
        let a = pi.action(s);
        let ret = ret + mdp.reward(s, a).mean();
        if h == h_max {
            out.push((p, path, ret));
            continue;
        }
        for (n, &q) in mdp.transition(s, a).iter().enumerate() {
            if q > 0.0 {
                let mut next = path.clone();
                next.push(n);
                stack.push((p * q, next, ret));
            }
        }
    }
    out
}

pub fn random_universe<R: Rng>(rng: &mut R, max_width: usize, max_h: usize, actions: usize) -> Universe {
    let h = rng.gen_range(1..=max_h);
    let sizes = (0..h).map(|_| rng.gen_range(1..=max_width)).collect();
    Universe::new(sizes, actions).unwrap()
}

pub fn random_policy<R: Rng>(rng: &mut R, u: &Universe) -> Policy {
    Policy::from_layers(
        u.layer_sizes().iter().map(|&n| (0..n).map(|_| rng.gen_range(0..u.actions()) as u16).collect()).collect(),
    )
}

pub fn random_class<R: Rng>(rng: &mut R, u: &Universe, max_members: usize) -> PolicyClass {
    let n = rng.gen_range(1..=max_members);
    let members = (0..n).map(|_| random_policy(rng, u)).collect();
    PolicyClass::dedup(u.clone(), members, ClassTag::Explicit).unwrap()
}

/// Random nodes per layer of an `H`-horizon MRP (start and end nodes implicit).
fn random_nodes<R: Rng>(rng: &mut R, h_max: usize) -> Vec<StateId> {
    let mut nodes = Vec::new();
    for h in 1..=h_max {
        for i in 0..3 {
            if rng.gen_bool(0.5) {
                nodes.push(StateId::new(h, i));
            }
        }
    }
    nodes
}

fn later<'a>(nodes: &'a [StateId], s: StateId, h_max: usize) -> Vec<StateId> {
    let mut v: Vec<StateId> = nodes.iter().copied().filter(|t| t.layer > s.layer).collect();
    v.push(StateId::bottom(h_max));
    v
}

fn simplex<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() + 1e-3).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|x| x / s).collect()
}

/// An exact MRP and a perturbed estimate on the same nodes.
///
/// Edge rewards stay below `1/(H+1)` and perturbed rows are sub-stochastic,
/// so every path return on either side is at most 1.
pub fn random_mrp_pair<R: Rng>(rng: &mut R, h_max: usize, noise: f64) -> (Mrp, Mrp) {
    let nodes = random_nodes(rng, h_max);
    let cap = 1.0 / (h_max + 1) as f64;
    let mut exact = Mrp::builder(h_max, MrpFlavor::Exact);
    let mut est = Mrp::builder(h_max, MrpFlavor::Empirical { k: 1 });
    for &s in std::iter::once(&StateId::TOP).chain(&nodes) {
        exact.node(s);
        est.node(s);
        let targets = later(&nodes, s, h_max);
        let p = simplex(rng, targets.len());
        let shrink = 1.0 - rng.gen::<f64>() * noise;
        let q = simplex(rng, targets.len());
        for (i, &t) in targets.iter().enumerate() {
            let r = rng.gen::<f64>() * cap;
            exact.edge(s, t, p[i], r);
            let mix = (1.0 - noise) * p[i] + noise * q[i];
            let r_hat = (r + noise * cap * (rng.gen::<f64>() - 0.5)).clamp(0.0, cap);
            est.edge(s, t, shrink * mix, r_hat);
        }
    }
    (exact.build().unwrap(), est.build().unwrap())
}

/// Probability that `pi` visits `target` before any state of `avoid`, by path enumeration.
pub fn avoid_reach(mdp: &LayeredMdp, pi: &Policy, target: StateId, avoid: &HashSet<StateId>) -> f64 {
    enumerate_paths(mdp, pi)
        .into_iter()
        .filter(|(_, path, _)| {
            for (i, &s) in path.iter().enumerate() {
                let id = StateId::new(i + 1, s);
                if id == target {
                    return true;
                }
                if avoid.contains(&id) {
                    return false;
                }
            }
            false
        })
        .map(|(p, _, _)| p)
        .sum()
}
