//! Markov reward processes over a subset of layered states plus the
//! virtual start (layer 0) and end (layer `H+1`) nodes.
//!
//! Edge rewards are the expected reward collected along the edge given that
//! the edge is taken, so a node's value is `sum_s' P(s->s') (r(s->s') + V(s'))`.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::universe::StateId;
use crate::PROB_TOL;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MrpFlavor {
    /// Population MRP: every non-terminal row sums to 1.
    Exact,
    /// Importance-weighted estimate: edge values in `[0, k]`, rows unconstrained.
    Empirical { k: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub to: usize,
    pub p: f64,
    pub r: f64,
}

#[derive(Clone, Debug)]
pub struct Mrp {
    horizon: usize,
    flavor: MrpFlavor,
    nodes: Vec<StateId>,
    edges: Vec<Vec<Edge>>,
}

#[derive(Clone, Debug)]
pub struct MrpBuilder {
    horizon: usize,
    flavor: MrpFlavor,
    nodes: BTreeSet<StateId>,
    edges: BTreeMap<(StateId, StateId), (f64, f64)>,
}

impl MrpBuilder {
    pub fn new(horizon: usize, flavor: MrpFlavor) -> Self {
        let mut nodes = BTreeSet::new();
        nodes.insert(StateId::TOP);
        nodes.insert(StateId::bottom(horizon));
        MrpBuilder { horizon, flavor, nodes, edges: BTreeMap::new() }
    }

    pub fn node(&mut self, s: StateId) -> &mut Self {
        self.nodes.insert(s);
        self
    }

    /// Adds or overwrites an edge; both endpoints become nodes.
    pub fn edge(&mut self, from: StateId, to: StateId, p: f64, r: f64) -> &mut Self {
        self.nodes.insert(from);
        self.nodes.insert(to);
        self.edges.insert((from, to), (p, r));
        self
    }

    pub fn build(&self) -> Result<Mrp> {
        let h = self.horizon;
        if h == 0 {
            return Err(Error::invalid("MRP horizon must be positive"));
        }
        let bot = StateId::bottom(h);
        for s in &self.nodes {
            if s.layer > h + 1 || ((s.layer == 0 || s.layer == h + 1) && s.index != 0) {
                return Err(Error::invalid(format!("node {s} outside layers 0..={}", h + 1)));
            }
        }
        let cap = match self.flavor {
            MrpFlavor::Exact => 1.0,
            MrpFlavor::Empirical { k } => k as f64,
        };
        let nodes: Vec<StateId> = self.nodes.iter().copied().collect();
        let pos = |s: StateId| nodes.binary_search(&s).expect("endpoint registered as node");
        let mut edges = vec![Vec::new(); nodes.len()];
        for (&(from, to), &(p, r)) in &self.edges {
            if from == bot {
                if to == bot {
                    continue;
                }
                return Err(Error::invalid("the end node has no outgoing edges"));
            }
            if to.layer <= from.layer {
                return Err(Error::invalid(format!("edge {from} -> {to} does not move forward")));
            }
            let ok = |x: f64, hi: f64| x.is_finite() && x >= -PROB_TOL && x <= hi + PROB_TOL;
            let r_cap = if matches!(self.flavor, MrpFlavor::Exact) { 1.0 } else { cap };
            if !ok(p, cap) || !ok(r, r_cap) {
                return Err(Error::invalid(format!("edge {from} -> {to} has value out of range (p={p}, r={r})")));
            }
            edges[pos(from)].push(Edge { to: pos(to), p: p.max(0.0), r: r.max(0.0) });
        }
        if self.flavor == MrpFlavor::Exact {
            for (i, row) in edges.iter_mut().enumerate() {
                if nodes[i] == bot {
                    continue;
                }
                let sum: f64 = row.iter().map(|e| e.p).sum();
                if (sum - 1.0).abs() > PROB_TOL {
                    return Err(Error::invalid(format!("row of {} sums to {sum}", nodes[i])));
                }
                if (sum - 1.0).abs() > 1e-12 {
                    row.iter_mut().for_each(|e| e.p /= sum);
                }
            }
        }
        let b = pos(bot);
        edges[b] = vec![Edge { to: b, p: 1.0, r: 0.0 }];
        Ok(Mrp { horizon: h, flavor: self.flavor, nodes, edges })
    }
}

impl Mrp {
    pub fn builder(horizon: usize, flavor: MrpFlavor) -> MrpBuilder {
        MrpBuilder::new(horizon, flavor)
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn flavor(&self) -> MrpFlavor {
        self.flavor
    }

    /// Nodes in (layer, index) order; the first is the start node, the last the end node.
    pub fn nodes(&self) -> &[StateId] {
        &self.nodes
    }

    pub fn position(&self, s: StateId) -> Option<usize> {
        self.nodes.binary_search(&s).ok()
    }

    /// Outgoing edges of `s` as (target, p, r), including the end node's self-loop.
    pub fn edges_from(&self, s: StateId) -> Vec<(StateId, f64, f64)> {
        self.position(s)
            .map(|i| self.edges[i].iter().map(|e| (self.nodes[e.to], e.p, e.r)).collect())
            .unwrap_or_default()
    }

    pub fn edge(&self, from: StateId, to: StateId) -> Option<(f64, f64)> {
        let i = self.position(from)?;
        let j = self.position(to)?;
        self.edges[i].iter().find(|e| e.to == j).map(|e| (e.p, e.r))
    }

    fn sweep<F: Fn(usize, &Edge, &[f64]) -> f64>(&self, mut v: Vec<f64>, fixed: Option<usize>, term: F) -> Vec<f64> {
        for _ in 0..=self.horizon {
            let next: Vec<f64> = (0..self.nodes.len())
                .map(|i| {
                    if Some(i) == fixed {
                        v[i]
                    } else {
                        self.edges[i].iter().map(|e| term(i, e, &v)).sum()
                    }
                })
                .collect();
            v = next;
        }
        v
    }

    /// Value of the start node after `H+1` synchronous backward sweeps.
    pub fn value(&self) -> f64 {
        let v = self.sweep(vec![0.0; self.nodes.len()], None, |_, e, v| e.p * (e.r + v[e.to]));
        v[0]
    }

    /// Probability of visiting `target`, with `V(target) = 1` held fixed.
    pub fn reach_prob(&self, target: StateId) -> Result<f64> {
        let t = self
            .position(target)
            .ok_or_else(|| Error::invalid(format!("target {target} is not an MRP node")))?;
        let mut v = vec![0.0; self.nodes.len()];
        v[t] = 1.0;
        let v = self.sweep(v, Some(t), |_, e, v| e.p * v[e.to]);
        Ok(v[0])
    }

    /// Visit probability of every node by one forward pass in layer order.
    pub fn visit_probs(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.nodes.len()];
        d[0] = 1.0;
        for i in 0..self.nodes.len() {
            for e in &self.edges[i] {
                if e.to != i {
                    d[e.to] += d[i] * e.p;
                }
            }
        }
        d
    }
}

/// Returns `(|V - V_hat|, sum_s d(s) * sum_s' (|P - P_hat| + |r - r_hat|))`,
/// with `d` the visit probabilities of `exact`.
pub fn simulation_gap_bound(exact: &Mrp, estimated: &Mrp) -> Result<(f64, f64)> {
    if exact.nodes != estimated.nodes {
        return Err(Error::invalid("MRPs have different node sets"));
    }
    let gap = (exact.value() - estimated.value()).abs();
    let d = exact.visit_probs();
    let mut bound = 0.0;
    for i in 0..exact.nodes.len() {
        let mut row: BTreeMap<usize, ((f64, f64), (f64, f64))> = BTreeMap::new();
        for e in exact.edges[i].iter().filter(|e| e.to != i) {
            row.entry(e.to).or_default().0 = (e.p, e.r);
        }
        for e in estimated.edges[i].iter().filter(|e| e.to != i) {
            row.entry(e.to).or_default().1 = (e.p, e.r);
        }
        let diff: f64 = row.values().map(|((p, r), (q, t))| (p - q).abs() + (r - t).abs()).sum();
        bound += d[i] * diff;
    }
    Ok((gap, bound))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_edge_value() {
        let mut b = Mrp::builder(2, MrpFlavor::Exact);
        b.edge(StateId::TOP, StateId::bottom(2), 1.0, 0.37);
        let m = b.build().unwrap();
        assert!((m.value() - 0.37).abs() < 1e-15);
        assert_eq!(m.reach_prob(StateId::TOP).unwrap(), 1.0);
        assert_eq!(m.reach_prob(StateId::bottom(2)).unwrap(), 1.0);
    }

    #[test]
    fn two_hop_chain() {
        let x = StateId::new(1, 0);
        let mut b = Mrp::builder(3, MrpFlavor::Exact);
        b.edge(StateId::TOP, x, 1.0, 0.2).edge(x, StateId::bottom(3), 1.0, 0.3);
        let m = b.build().unwrap();
        assert!((m.value() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn unreached_target_has_zero_probability() {
        let x = StateId::new(1, 0);
        let y = StateId::new(2, 1);
        let mut b = Mrp::builder(2, MrpFlavor::Exact);
        b.edge(StateId::TOP, x, 1.0, 0.0).edge(x, StateId::bottom(2), 1.0, 0.0);
        b.edge(y, StateId::bottom(2), 1.0, 0.0);
        let m = b.build().unwrap();
        assert_eq!(m.reach_prob(y).unwrap(), 0.0);
        assert!(m.reach_prob(StateId::new(2, 5)).is_err());
    }

    #[test]
    fn validation() {
        let x = StateId::new(2, 0);
        let mut b = Mrp::builder(2, MrpFlavor::Exact);
        b.edge(x, StateId::new(1, 0), 1.0, 0.0);
        assert!(b.build().is_err());
        let mut b = Mrp::builder(2, MrpFlavor::Exact);
        b.edge(StateId::TOP, x, 0.5, 0.0);
        assert!(b.build().is_err());
        let mut b = Mrp::builder(2, MrpFlavor::Empirical { k: 3 });
        b.edge(StateId::TOP, x, 2.5, 0.0);
        assert!(b.build().is_ok());
    }

    #[test]
    fn identical_mrps_have_zero_gap() {
        let x = StateId::new(1, 0);
        let mut b = Mrp::builder(1, MrpFlavor::Exact);
        b.edge(StateId::TOP, x, 1.0, 0.1).edge(x, StateId::bottom(1), 1.0, 0.4);
        let m = b.build().unwrap();
        assert_eq!(simulation_gap_bound(&m, &m).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn single_perturbed_edge() {
        let x = StateId::new(1, 0);
        let y = StateId::new(1, 1);
        let bot = StateId::bottom(1);
        let mut b = Mrp::builder(1, MrpFlavor::Exact);
        b.edge(StateId::TOP, x, 0.5, 0.2).edge(StateId::TOP, y, 0.5, 0.2);
        b.edge(x, bot, 1.0, 0.6).edge(y, bot, 1.0, 0.1);
        let exact = b.build().unwrap();
        let mut e = Mrp::builder(1, MrpFlavor::Empirical { k: 1 });
        e.edge(StateId::TOP, x, 0.6, 0.2).edge(StateId::TOP, y, 0.5, 0.2);
        e.edge(x, bot, 1.0, 0.6).edge(y, bot, 1.0, 0.1);
        let est = e.build().unwrap();
        let (gap, bound) = simulation_gap_bound(&exact, &est).unwrap();
        assert!((bound - 0.1).abs() < 1e-12);
        assert!(gap <= bound + 1e-12);
    }
}
