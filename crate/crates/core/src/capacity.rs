//! Spanning capacity, cumulative reachability and coverability.
//!
//! Spanning capacity maximizes reachable pairs over deterministic MDPs on the
//! class's own state space, so distinct paths may merge into one state. The
//! looser tree variant, where every node of the depth-`h` tree picks its own
//! state, only depends on the action profile of the members reaching a node
//! and serves as the pruning bound.

use std::collections::{HashMap, HashSet};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mdp::{LayeredMdp, MdpBuilder};
use crate::policy::PolicyClass;
use crate::universe::StateId;

pub const DEFAULT_NODE_BUDGET: usize = 10_000_000;

#[derive(Clone, Debug, Serialize)]
pub struct CapacityResult {
    pub value: u64,
    /// `per_layer[h-1]` is the capacity at layer `h`.
    pub per_layer: Vec<u64>,
    pub nodes_expanded: u64,
    /// False when the budget ran out and some values are lower bounds.
    pub exact: bool,
    #[serde(skip)]
    pub witness: Option<Witness>,
}

/// A deterministic MDP on the class universe attaining the capacity at `layer`.
///
/// Zero rewards; transitions off the reached pairs go to state 0.
#[derive(Clone, Debug)]
pub struct Witness {
    pub layer: usize,
    pub mdp: LayeredMdp,
}

type Bits = Box<[u64]>;

fn bits_of(v: &[u32], words: usize) -> Bits {
    let mut b = vec![0u64; words].into_boxed_slice();
    for &m in v {
        b[m as usize / 64] |= 1 << (m % 64);
    }
    b
}

struct Search<'a> {
    class: &'a PolicyClass,
    target: usize,
    words: usize,
    budget: usize,
    memo: HashMap<(Bits, usize), u64>,
    expanded: u64,
    exhausted: bool,
}

/// Distinct action-profile columns of layer `layer` over `v`, sorted, with
/// the lowest state index realizing each.
fn columns(class: &PolicyClass, v: &[u32], layer: usize) -> Vec<(Vec<u16>, usize)> {
    let mut seen: HashMap<Vec<u16>, usize> = HashMap::new();
    for i in 0..class.universe().layer_size(layer) {
        let col: Vec<u16> = v.iter().map(|&m| class.member(m as usize).action_at(layer, i) as u16).collect();
        seen.entry(col).or_insert(i);
    }
    let mut cols: Vec<(Vec<u16>, usize)> = seen.into_iter().collect();
    cols.sort();
    cols
}

/// Splits `v` by the action each member plays in `column`, in action order.
fn split(v: &[u32], column: &[u16], actions: usize) -> Vec<Vec<u32>> {
    let mut groups = vec![Vec::new(); actions];
    for (&m, &a) in v.iter().zip(column) {
        groups[a as usize].push(m);
    }
    groups
}

fn distinct(column: &[u16]) -> u64 {
    let mut seen = [false; 256];
    let mut extra = HashSet::new();
    let mut n = 0;
    for &a in column {
        let fresh = if (a as usize) < 256 {
            !std::mem::replace(&mut seen[a as usize], true)
        } else {
            extra.insert(a)
        };
        n += u64::from(fresh);
    }
    n
}

impl<'a> Search<'a> {
    fn new(class: &'a PolicyClass, target: usize, budget: usize) -> Self {
        Search {
            class,
            target,
            words: class.len().div_ceil(64),
            budget,
            memo: HashMap::new(),
            expanded: 0,
            exhausted: false,
        }
    }

    fn upper(&self, v: &[u32], layer: usize) -> u64 {
        let depth = (self.target - layer + 1) as u32;
        let pow = (self.class.actions() as u64).checked_pow(depth).unwrap_or(u64::MAX);
        pow.min(v.len() as u64)
    }

    fn best(&mut self, v: &[u32], layer: usize) -> u64 {
        if v.len() == 1 {
            return 1;
        }
        if layer == self.target {
            return columns(self.class, v, layer).iter().map(|(c, _)| distinct(c)).max().unwrap_or(0);
        }
        let key = (bits_of(v, self.words), layer);
        if let Some(&x) = self.memo.get(&key) {
            return x;
        }
        if self.memo.len() >= self.budget {
            self.exhausted = true;
            return self.greedy(v, layer);
        }
        self.expanded += 1;
        let ub = self.upper(v, layer);
        let mut best = 0;
        for (col, _) in columns(self.class, v, layer) {
            let total: u64 = split(v, &col, self.class.actions())
                .iter()
                .filter(|g| !g.is_empty())
                .map(|g| self.best(g, layer + 1))
                .sum();
            best = best.max(total);
            if best == ub {
                break;
            }
        }
        self.memo.insert(key, best);
        best
    }

    /// Lower bound: follow the column with the most branches at every node.
    fn greedy(&self, v: &[u32], layer: usize) -> u64 {
        if v.len() == 1 {
            return 1;
        }
        let cols = columns(self.class, v, layer);
        let (col, _) = cols.iter().max_by_key(|(c, _)| distinct(c)).expect("layer is nonempty");
        if layer == self.target {
            return distinct(col);
        }
        split(v, col, self.class.actions())
            .iter()
            .filter(|g| !g.is_empty())
            .map(|g| self.greedy(g, layer + 1))
            .sum()
    }
}

/// Capacity when every node of the depth-`h` tree may pick its own state
/// (paths never merge). Upper bound on [`spanning_capacity`].
pub fn tree_capacity(class: &PolicyClass, node_budget: usize) -> (Vec<u64>, bool) {
    let all: Vec<u32> = (0..class.len() as u32).collect();
    let runs: Vec<(u64, bool)> = (1..=class.horizon())
        .into_par_iter()
        .map(|target| {
            let mut s = Search::new(class, target, node_budget);
            (s.best(&all, 1), !s.exhausted)
        })
        .collect();
    (runs.iter().map(|r| r.0).collect(), runs.iter().all(|r| r.1))
}

type Config = Vec<(usize, Vec<u32>)>;

/// Members at one (state, action) pair of a layer.
struct Group {
    state: usize,
    action: usize,
    members: Vec<u32>,
}

struct Walk {
    best: u64,
    stop_at: u64,
    choice: Vec<usize>,
    best_choice: Option<Vec<usize>>,
    done: bool,
}

impl Walk {
    fn new(best: u64, stop_at: u64) -> Self {
        Walk { best, stop_at, choice: Vec::new(), best_choice: None, done: false }
    }
}

/// Exact search over deterministic MDPs on the class universe for one target layer.
///
/// A node is the placement of members on the states of a layer. Members that
/// agree on every remaining layer are kept once, and states whose action
/// columns coincide over the whole class are interchangeable, so both are
/// quotiented out of the memo key. Children are enumerated by assigning each
/// (state, action) group a next state, with fresh states of a symmetry class
/// taken in order. The tree search bounds what a placement can still reach.
struct Merge<'a> {
    class: &'a PolicyClass,
    target: usize,
    words: usize,
    /// `reps[h-1][m]`: lowest member agreeing with `m` on layers `h..=target`.
    reps: Vec<Vec<u32>>,
    state_class: Vec<Vec<usize>>,
    class_states: Vec<Vec<Vec<usize>>>,
    cap: u64,
    tree: Search<'a>,
    memo: HashMap<(usize, Vec<(usize, Bits)>), u64>,
    budget: usize,
    expanded: u64,
    exhausted: bool,
}

impl<'a> Merge<'a> {
    fn new(class: &'a PolicyClass, target: usize, budget: usize) -> Self {
        let u = class.universe();
        let reps = (1..=target)
            .map(|h| {
                let mut seen: HashMap<&[Vec<u16>], u32> = HashMap::new();
                class
                    .members()
                    .iter()
                    .enumerate()
                    .map(|(m, p)| *seen.entry(&p.layers()[h - 1..target]).or_insert(m as u32))
                    .collect()
            })
            .collect();
        let mut state_class = Vec::new();
        let mut class_states = Vec::new();
        for h in 1..=target {
            let mut ids: HashMap<Vec<u16>, usize> = HashMap::new();
            let mut of_state = Vec::new();
            let mut members: Vec<Vec<usize>> = Vec::new();
            for s in 0..u.layer_size(h) {
                let col: Vec<u16> = class.members().iter().map(|p| p.action_at(h, s) as u16).collect();
                let next = ids.len();
                let id = *ids.entry(col).or_insert(next);
                if id == members.len() {
                    members.push(Vec::new());
                }
                members[id].push(s);
                of_state.push(id);
            }
            state_class.push(of_state);
            class_states.push(members);
        }
        let all: Vec<u32> = (0..class.len() as u32).collect();
        let cap = (0..u.layer_size(target))
            .map(|s| distinct(&all.iter().map(|&m| class.member(m as usize).action_at(target, s) as u16).collect::<Vec<_>>()))
            .sum::<u64>()
            .min(class.len() as u64);
        Merge {
            class,
            target,
            words: class.len().div_ceil(64),
            reps,
            state_class,
            class_states,
            cap,
            tree: Search::new(class, target, budget),
            memo: HashMap::new(),
            budget,
            expanded: 0,
            exhausted: false,
        }
    }

    fn normalize(&self, h: usize, placed: impl IntoIterator<Item = (usize, Vec<u32>)>) -> Config {
        let rep = &self.reps[h - 1];
        let mut cfg: Config = placed
            .into_iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(s, v)| {
                let mut r: Vec<u32> = v.iter().map(|&m| rep[m as usize]).collect();
                r.sort_unstable();
                r.dedup();
                (s, r)
            })
            .collect();
        cfg.sort();
        cfg
    }

    fn key(&self, h: usize, cfg: &Config) -> (usize, Vec<(usize, Bits)>) {
        let mut k: Vec<(usize, Bits)> =
            cfg.iter().map(|(s, v)| (self.state_class[h - 1][*s], bits_of(v, self.words))).collect();
        k.sort();
        (h, k)
    }

    fn column(&self, v: &[u32], h: usize, s: usize) -> Vec<u16> {
        v.iter().map(|&m| self.class.member(m as usize).action_at(h, s) as u16).collect()
    }

    fn groups(&self, h: usize, cfg: &Config) -> Vec<Group> {
        let mut out = Vec::new();
        for (s, v) in cfg {
            for (a, g) in split(v, &self.column(v, h, *s), self.class.actions()).into_iter().enumerate() {
                if !g.is_empty() {
                    out.push(Group { state: *s, action: a, members: g });
                }
            }
        }
        out
    }

    /// Pairs the target can still see from `v` sitting on state `s` of layer `l`.
    fn fixed_bound(&mut self, v: &[u32], l: usize, s: usize) -> u64 {
        let col = self.column(v, l, s);
        if l == self.target {
            return distinct(&col);
        }
        split(v, &col, self.class.actions())
            .iter()
            .filter(|g| !g.is_empty())
            .map(|g| self.tree.best(g, l + 1))
            .sum()
    }

    fn value(&mut self, h: usize, cfg: &Config) -> u64 {
        if h == self.target {
            return cfg.iter().map(|(s, v)| distinct(&self.column(v, h, *s))).sum();
        }
        let key = self.key(h, cfg);
        if let Some(&x) = self.memo.get(&key) {
            return x;
        }
        if self.memo.len() >= self.budget {
            self.exhausted = true;
            return self.greedy(h, cfg);
        }
        self.expanded += 1;
        let groups = self.groups(h, cfg);
        let ub: u64 = groups.iter().map(|g| self.tree.best(&g.members, h + 1)).sum();
        let mut walk = Walk::new(0, ub.min(self.cap));
        self.walk(h, &groups, &mut walk);
        self.memo.insert(key, walk.best);
        walk.best
    }

    /// Next-state options for one group: fresh states first, then occupied ones.
    fn options(&self, layer: usize, used: &[usize]) -> Vec<(usize, usize)> {
        let classes = &self.class_states[layer - 1];
        let mut out: Vec<(usize, usize)> =
            classes.iter().enumerate().filter(|(c, st)| used[*c] < st.len()).map(|(c, st)| (st[used[c]], c)).collect();
        for (c, st) in classes.iter().enumerate() {
            out.extend(st[..used[c]].iter().map(|&s| (s, c)));
        }
        out
    }

    fn walk(&mut self, h: usize, groups: &[Group], w: &mut Walk) {
        let width = self.class.universe().layer_size(h + 1);
        let mut rest = vec![0u64; groups.len() + 1];
        for i in (0..groups.len()).rev() {
            rest[i] = rest[i + 1] + self.tree.best(&groups[i].members, h + 1);
        }
        let mut placed = vec![Vec::new(); width];
        let mut bound = vec![0u64; width];
        let mut used = vec![0usize; self.class_states[h].len()];
        self.place(h, groups, 0, &rest, &mut placed, &mut bound, &mut used, 0, w);
    }

    #[allow(clippy::too_many_arguments)]
    fn place(
        &mut self,
        h: usize,
        groups: &[Group],
        i: usize,
        rest: &[u64],
        placed: &mut Vec<Vec<u32>>,
        bound: &mut Vec<u64>,
        used: &mut Vec<usize>,
        sum: u64,
        w: &mut Walk,
    ) {
        if i == groups.len() {
            let cfg = self.normalize(h + 1, placed.iter().cloned().enumerate());
            let v = self.value(h + 1, &cfg);
            if v > w.best {
                w.best = v;
                w.best_choice = Some(w.choice.clone());
            }
            w.done = w.best >= w.stop_at;
            return;
        }
        for (s, c) in self.options(h + 1, used) {
            let fresh = placed[s].is_empty();
            let len = placed[s].len();
            placed[s].extend_from_slice(&groups[i].members);
            let nb = self.fixed_bound(&placed[s], h + 1, s);
            let total = sum + nb - bound[s];
            if total + rest[i + 1] > w.best {
                let old = std::mem::replace(&mut bound[s], nb);
                used[c] += usize::from(fresh);
                w.choice.push(s);
                self.place(h, groups, i + 1, rest, placed, bound, used, total, w);
                w.choice.pop();
                used[c] -= usize::from(fresh);
                bound[s] = old;
            }
            placed[s].truncate(len);
            if w.done {
                return;
            }
        }
    }

    /// Lower bound: every group takes its first option, all the way down.
    fn greedy(&mut self, h: usize, cfg: &Config) -> u64 {
        let mut cfg = cfg.clone();
        for l in h..self.target {
            let groups = self.groups(l, &cfg);
            let mut placed = vec![Vec::new(); self.class.universe().layer_size(l + 1)];
            let mut used = vec![0usize; self.class_states[l].len()];
            for g in &groups {
                let (s, c) = self.options(l + 1, &used)[0];
                used[c] += usize::from(placed[s].is_empty());
                placed[s].extend_from_slice(&g.members);
            }
            cfg = self.normalize(l + 1, placed.into_iter().enumerate());
        }
        self.value(self.target, &cfg)
    }

    fn start(&self, s: usize) -> Config {
        self.normalize(1, [(s, (0..self.class.len() as u32).collect())])
    }

    /// Best value over start states, and the first start attaining it.
    fn run(&mut self) -> (u64, usize) {
        let mut best = (0, 0);
        let starts: Vec<usize> = self.class_states[0].iter().map(|st| st[0]).collect();
        for s in starts {
            let v = self.value(1, &self.start(s));
            if v > best.0 {
                best = (v, s);
            }
            if best.0 >= self.cap {
                break;
            }
        }
        best
    }

    /// Replays the search from `start` and records the chosen transitions.
    fn witness(&mut self, start: usize) -> Result<Witness> {
        let u = self.class.universe().clone();
        let mut b = MdpBuilder::new(u.clone());
        let mut init = vec![0.0; u.layer_size(1)];
        init[start] = 1.0;
        b.init(init);
        let mut cfg = self.start(start);
        for h in 1..self.target {
            let want = self.value(h, &cfg);
            let groups = self.groups(h, &cfg);
            let mut w = Walk::new(want - 1, want);
            self.walk(h, &groups, &mut w);
            if w.best_choice.is_none() {
                // only after the budget ran out: take the best child there is
                w = Walk::new(0, u64::MAX);
                self.walk(h, &groups, &mut w);
            }
            let choice = w.best_choice.expect("every placement reaches at least one pair");
            let mut placed = vec![Vec::new(); u.layer_size(h + 1)];
            for (g, &next) in groups.iter().zip(&choice) {
                b.goto(StateId::new(h, g.state), g.action, next);
                placed[next].extend_from_slice(&g.members);
            }
            cfg = self.normalize(h + 1, placed.into_iter().enumerate());
        }
        Ok(Witness { layer: self.target, mdp: b.build()? })
    }
}

/// Exact spanning capacity within `node_budget` memo entries per layer.
///
/// Ranges over deterministic MDPs whose states are the class's own universe.
pub fn spanning_capacity(class: &PolicyClass, node_budget: usize) -> Result<CapacityResult> {
    let mut runs: Vec<(Merge, u64, usize)> = (1..=class.horizon())
        .into_par_iter()
        .map(|target| {
            let mut m = Merge::new(class, target, node_budget);
            let (v, start) = m.run();
            (m, v, start)
        })
        .collect();
    let mut per_layer: Vec<u64> = runs.iter().map(|r| r.1).collect();
    let mut exact = runs.iter().all(|r| !r.0.exhausted && !r.0.tree.exhausted);
    let nodes_expanded = runs.iter().map(|r| r.0.expanded).sum();
    let value = *per_layer.iter().max().expect("horizon >= 1");
    let target = per_layer.iter().position(|&x| x == value).expect("max exists") + 1;
    let (m, _, start) = &mut runs[target - 1];
    let witness = m.witness(*start)?;
    exact &= !m.exhausted;
    // after a budget cut the replay can land above the recorded lower bound
    let realized = cumulative_reachability(class, &witness.mdp, target)?;
    per_layer[target - 1] = per_layer[target - 1].max(realized);
    Ok(CapacityResult {
        value: *per_layer.iter().max().expect("horizon >= 1"),
        per_layer,
        nodes_expanded,
        exact,
        witness: Some(witness),
    })
}

fn check_same_universe(class: &PolicyClass, mdp: &LayeredMdp) -> Result<()> {
    if class.universe() != mdp.universe() {
        return Err(Error::invalid("class and MDP live on different universes"));
    }
    Ok(())
}

/// Distinct (state, action) pairs at layer `h` on members' rollouts in a deterministic MDP.
pub fn cumulative_reachability(class: &PolicyClass, det_mdp: &LayeredMdp, h: usize) -> Result<u64> {
    check_same_universe(class, det_mdp)?;
    if !det_mdp.is_deterministic() {
        return Err(Error::invalid("cumulative reachability needs a deterministic MDP"));
    }
    if h < 1 || h > det_mdp.horizon() {
        return Err(Error::invalid(format!("layer {h} out of range")));
    }
    let mut pairs = HashSet::new();
    for p in class.members() {
        let mut s = det_mdp.det_start();
        for _ in 1..h {
            s = det_mdp.det_next(s, p.action(s)).expect("not the last layer");
        }
        pairs.insert((s.index, p.action(s)));
    }
    Ok(pairs.len() as u64)
}

/// Per-layer `sum_{s,a} max_pi d^pi_h(s,a)`.
pub fn coverability_per_layer(class: &PolicyClass, mdp: &LayeredMdp) -> Result<Vec<f64>> {
    check_same_universe(class, mdp)?;
    let a_n = mdp.actions();
    let sup = class
        .members()
        .par_iter()
        .map(|p| mdp.occupancy(p).state_action)
        .reduce_with(|mut x, y| {
            for (lx, ly) in x.iter_mut().zip(&y) {
                for (sx, sy) in lx.iter_mut().zip(ly) {
                    for a in 0..a_n {
                        sx[a] = sx[a].max(sy[a]);
                    }
                }
            }
            x
        })
        .expect("class is nonempty");
    Ok(sup.iter().map(|layer| layer.iter().flatten().sum()).collect())
}

pub fn coverability(class: &PolicyClass, mdp: &LayeredMdp) -> Result<f64> {
    Ok(coverability_per_layer(class, mdp)?.into_iter().fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::*;
    use crate::universe::Universe;

    #[test]
    fn single_policy_class() {
        let u = Universe::uniform(3, 3, 2).unwrap();
        let c = PolicyClass::new(u.clone(), vec![Policy::zeros(&u)], ClassTag::Explicit).unwrap();
        let r = spanning_capacity(&c, DEFAULT_NODE_BUDGET).unwrap();
        assert_eq!(r.value, 1);
        assert_eq!(r.per_layer, vec![1, 1, 1]);
        assert!(r.exact);
    }

    #[test]
    fn singletons_are_h_plus_one() {
        let c = build_singletons(5, 4).unwrap();
        let r = spanning_capacity(&c, DEFAULT_NODE_BUDGET).unwrap();
        assert_eq!(r.value, 5);
        assert_eq!(r.per_layer, vec![2, 3, 4, 5]);
    }

    #[test]
    fn narrow_singletons_saturate() {
        // two states per layer: merged paths cap every layer at K+1
        let c = build_singletons(2, 3).unwrap();
        assert_eq!(spanning_capacity(&c, DEFAULT_NODE_BUDGET).unwrap().per_layer, vec![2, 3, 3]);
        assert_eq!(tree_capacity(&c, DEFAULT_NODE_BUDGET).0, vec![2, 3, 4]);
    }

    #[test]
    fn cb_chain_reaches_full_tree() {
        let c = build_cb_chain(3, 2).unwrap();
        assert_eq!(spanning_capacity(&c, DEFAULT_NODE_BUDGET).unwrap().value, 8);
    }

    #[test]
    fn one_active_is_linear() {
        let c = build_one_active(2, 3).unwrap();
        let r = spanning_capacity(&c, DEFAULT_NODE_BUDGET).unwrap();
        assert!(r.value <= 6);
        assert_eq!(tree_capacity(&c, DEFAULT_NODE_BUDGET).0[2], 8);
    }

    #[test]
    fn witness_attains_capacity() {
        for c in [build_singletons(3, 3).unwrap(), build_one_active(2, 3).unwrap(), build_ltons(2, 3, 2).unwrap()] {
            let r = spanning_capacity(&c, DEFAULT_NODE_BUDGET).unwrap();
            let w = r.witness.unwrap();
            assert!(w.mdp.is_deterministic());
            assert_eq!(cumulative_reachability(&c, &w.mdp, w.layer).unwrap(), r.value);
            assert!((coverability(&c, &w.mdp).unwrap() - r.value as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn tiny_budget_degrades_to_lower_bound() {
        let c = build_all_active(3, 3).unwrap();
        let full = spanning_capacity(&c, DEFAULT_NODE_BUDGET).unwrap();
        let cut = spanning_capacity(&c, 1).unwrap();
        assert!(!cut.exact);
        assert!(cut.value <= full.value);
        assert!(cut.value >= 1);
    }

    #[test]
    fn reachability_needs_deterministic_input() {
        let c = build_singletons(2, 2).unwrap();
        let mut rng = crate::seed::rng_from_seed(0);
        let m = crate::mdp::generate::random_mdp(c.universe(), &mut rng);
        assert!(cumulative_reachability(&c, &m, 1).is_err());
    }

    #[test]
    fn single_member_reaches_one_pair() {
        let u = Universe::uniform(2, 3, 2).unwrap();
        let c = PolicyClass::new(u.clone(), vec![Policy::constant(&u, 1)], ClassTag::Explicit).unwrap();
        let mut rng = crate::seed::rng_from_seed(4);
        let m = crate::mdp::generate::random_det_mdp(&u, &mut rng);
        for h in 1..=3 {
            assert_eq!(cumulative_reachability(&c, &m, h).unwrap(), 1);
        }
        assert!((coverability(&c, &m).unwrap() - 1.0).abs() < 1e-12);
    }
}
