//! Uniform-action importance sampling and trajectory trees under a generative model.

use std::collections::BTreeMap;

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mdp::LayeredMdp;
use crate::policy::PolicyClass;
use crate::popler::argmax;
use crate::universe::StateId;

/// Query access to an MDP: one sampled `(reward, next state)` per call.
#[derive(Debug)]
pub struct GenerativeOracle<'a> {
    mdp: &'a LayeredMdp,
    queries: u64,
}

impl<'a> GenerativeOracle<'a> {
    pub fn new(mdp: &'a LayeredMdp) -> Self {
        GenerativeOracle { mdp, queries: 0 }
    }

    pub fn mdp(&self) -> &LayeredMdp {
        self.mdp
    }

    pub fn queries(&self) -> u64 {
        self.queries
    }

    pub fn query<R: Rng + ?Sized>(&mut self, s: StateId, a: usize, rng: &mut R) -> (f64, Option<usize>) {
        self.queries += 1;
        self.mdp.step(s, a, rng)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EstimateResult {
    pub returned: usize,
    pub v_hat: Vec<f64>,
    /// Episodes for IS, generative queries for trajectory trees.
    pub samples: u64,
}

/// `A^H / n * sum_i 1[pi agrees with tau_i] R(tau_i)` over uniform-action episodes.
pub fn importance_sampling<R: Rng + ?Sized>(mdp: &LayeredMdp, class: &PolicyClass, n: usize, rng: &mut R) -> Result<EstimateResult> {
    if class.universe() != mdp.universe() {
        return Err(Error::invalid("class and MDP live on different universes"));
    }
    if n == 0 {
        return Err(Error::invalid("need at least one episode"));
    }
    let h_max = mdp.horizon();
    let a_n = mdp.actions();
    if h_max as f64 * (a_n as f64).log2() > 40.0 {
        return Err(Error::Guard(format!("A^H = {a_n}^{h_max} exceeds 2^40")));
    }
    let scale = (a_n as f64).powi(h_max as i32) / n as f64;
    let mut v_hat = vec![0.0; class.len()];
    let mut states = vec![0usize; h_max];
    let mut actions = vec![0usize; h_max];
    for _ in 0..n {
        let mut s = mdp.sample_start(rng);
        let mut ret = 0.0;
        for h in 1..=h_max {
            let a = rng.gen_range(0..a_n);
            let (r, next) = mdp.step(StateId::new(h, s), a, rng);
            states[h - 1] = s;
            actions[h - 1] = a;
            ret += r;
            if let Some(x) = next {
                s = x;
            }
        }
        for (v, p) in v_hat.iter_mut().zip(class.members()) {
            if (1..=h_max).all(|h| p.action_at(h, states[h - 1]) == actions[h - 1]) {
                *v += scale * ret;
            }
        }
    }
    Ok(EstimateResult { returned: argmax(&v_hat), v_hat, samples: n as u64 })
}

/// One sampled deterministic sub-MDP covering every pair some member reaches.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryTree {
    pub root: usize,
    /// (state, action) → (reward, next-layer state).
    pub nodes: BTreeMap<(StateId, usize), (f64, Option<usize>)>,
}

impl TrajectoryTree {
    /// Structure without rewards.
    pub fn topology(&self) -> Vec<(StateId, usize, Option<usize>)> {
        self.nodes.iter().map(|(&(s, a), &(_, n))| (s, a, n)).collect()
    }
}

/// Expands layer by layer; within a layer, members are visited in index order.
pub fn build_tree<R: Rng + ?Sized>(oracle: &mut GenerativeOracle<'_>, class: &PolicyClass, rng: &mut R) -> (TrajectoryTree, Vec<f64>) {
    let h_max = oracle.mdp().horizon();
    let root = oracle.mdp().sample_start(rng);
    let mut nodes = BTreeMap::new();
    let mut at = vec![root; class.len()];
    let mut returns = vec![0.0; class.len()];
    for h in 1..=h_max {
        for (m, p) in class.members().iter().enumerate() {
            let s = StateId::new(h, at[m]);
            let a = p.action(s);
            let (r, next) = *nodes.entry((s, a)).or_insert_with(|| oracle.query(s, a, rng));
            returns[m] += r;
            if let Some(n) = next {
                at[m] = n;
            }
        }
    }
    (TrajectoryTree { root, nodes }, returns)
}

#[derive(Clone, Debug, Serialize)]
pub struct TreeRunResult {
    pub returned: usize,
    pub v_hat: Vec<f64>,
    pub queries: u64,
    pub per_tree_queries: Vec<u64>,
}

pub fn trajectory_tree<R: Rng + ?Sized>(
    oracle: &mut GenerativeOracle<'_>,
    class: &PolicyClass,
    n: usize,
    rng: &mut R,
) -> Result<TreeRunResult> {
    if class.universe() != oracle.mdp().universe() {
        return Err(Error::invalid("class and MDP live on different universes"));
    }
    if n == 0 {
        return Err(Error::invalid("need at least one tree"));
    }
    let start = oracle.queries();
    let mut v_hat = vec![0.0; class.len()];
    let mut per_tree_queries = Vec::with_capacity(n);
    for _ in 0..n {
        let before = oracle.queries();
        let (_, returns) = build_tree(oracle, class, rng);
        per_tree_queries.push(oracle.queries() - before);
        for (v, r) in v_hat.iter_mut().zip(&returns) {
            *v += r / n as f64;
        }
    }
    Ok(TreeRunResult { returned: argmax(&v_hat), v_hat, queries: oracle.queries() - start, per_tree_queries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::generate;
    use crate::policy::*;
    use crate::seed::rng_from_seed;
    use crate::universe::Universe;

    #[test]
    fn single_action_is_plain_mean() {
        let u = Universe::uniform(2, 3, 1).unwrap();
        let mut rng = rng_from_seed(9);
        let m = generate::random_mdp(&u, &mut rng);
        let c = PolicyClass::new(u.clone(), vec![Policy::zeros(&u)], ClassTag::Explicit).unwrap();
        let mut r1 = rng_from_seed(1);
        let res = importance_sampling(&m, &c, 500, &mut r1).unwrap();
        // replay the same stream to get the plain mean
        let mut r2 = rng_from_seed(1);
        let mut total = 0.0;
        for _ in 0..500 {
            let mut s = m.sample_start(&mut r2);
            for h in 1..=3 {
                let _ = r2.gen_range(0..1usize);
                let (r, next) = m.step(StateId::new(h, s), 0, &mut r2);
                total += r;
                if let Some(x) = next {
                    s = x;
                }
            }
        }
        assert!((res.v_hat[0] - total / 500.0).abs() < 1e-12);
    }

    #[test]
    fn guard_on_huge_action_space() {
        let u = Universe::uniform(1, 11, 16).unwrap();
        let m = LayeredMdp::builder(u.clone()).build().unwrap();
        let c = PolicyClass::new(u.clone(), vec![Policy::zeros(&u)], ClassTag::Explicit).unwrap();
        assert!(matches!(importance_sampling(&m, &c, 1, &mut rng_from_seed(0)), Err(Error::Guard(_))));
    }

    #[test]
    fn single_policy_tree_is_a_path() {
        let u = Universe::uniform(3, 4, 2).unwrap();
        let mut rng = rng_from_seed(2);
        let m = generate::random_mdp(&u, &mut rng);
        let c = PolicyClass::new(u.clone(), vec![Policy::constant(&u, 1)], ClassTag::Explicit).unwrap();
        let mut oracle = GenerativeOracle::new(&m);
        let res = trajectory_tree(&mut oracle, &c, 20, &mut rng).unwrap();
        assert!(res.per_tree_queries.iter().all(|&q| q == 4));
        assert_eq!(res.queries, 80);
    }

    #[test]
    fn singleton_tree_query_bound() {
        let c = build_singletons(4, 3).unwrap();
        let mut rng = rng_from_seed(3);
        let m = generate::random_mdp(c.universe(), &mut rng);
        let mut oracle = GenerativeOracle::new(&m);
        let res = trajectory_tree(&mut oracle, &c, 200, &mut rng).unwrap();
        assert!(res.per_tree_queries.iter().all(|&q| q <= 12));
    }
}
