//! Layered tabular MDPs: exact evaluation, occupancies and sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::Policy;
use crate::universe::{StateId, Universe};
use crate::PROB_TOL;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum RewardDist {
    Point(f64),
    Bernoulli(f64),
}

impl RewardDist {
    pub fn mean(&self) -> f64 {
        match *self {
            RewardDist::Point(v) | RewardDist::Bernoulli(v) => v,
        }
    }

    /// Largest value in the support.
    pub fn max_support(&self) -> f64 {
        match *self {
            RewardDist::Point(v) => v,
            RewardDist::Bernoulli(p) if p > 0.0 => 1.0,
            RewardDist::Bernoulli(_) => 0.0,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            RewardDist::Point(v) => v,
            RewardDist::Bernoulli(p) => {
                if rng.gen::<f64>() < p {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn valid(&self) -> bool {
        let v = self.mean();
        v.is_finite() && (0.0..=1.0).contains(&v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
}

/// One episode; `steps[h-1]` is the step taken in layer `h`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn state(&self, layer: usize) -> usize {
        self.steps[layer - 1].state
    }

    pub fn action(&self, layer: usize) -> usize {
        self.steps[layer - 1].action
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    /// Sum of rewards collected in layers `from..to` (1-based, `to` exclusive).
    pub fn segment_reward(&self, from: usize, to: usize) -> f64 {
        self.steps[from - 1..to - 1].iter().map(|s| s.reward).sum()
    }

    pub fn visits(&self, s: StateId) -> bool {
        s.layer >= 1 && s.layer <= self.steps.len() && self.state(s.layer) == s.index
    }
}

/// Per-layer state and state-action occupancies of one policy.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyTable {
    /// `state[h-1][s]`
    pub state: Vec<Vec<f64>>,
    /// `state_action[h-1][s][a]`
    pub state_action: Vec<Vec<Vec<f64>>>,
}

impl OccupancyTable {
    pub fn state(&self, s: StateId) -> f64 {
        self.state[s.layer - 1][s.index]
    }

    pub fn state_action(&self, s: StateId, a: usize) -> f64 {
        self.state_action[s.layer - 1][s.index][a]
    }
}

#[derive(Clone, Debug)]
pub struct LayeredMdp {
    universe: Universe,
    /// Indexed by `flat(state) * A + a`; rows of the last layer are empty.
    transitions: Vec<Vec<f64>>,
    rewards: Vec<RewardDist>,
    init: Vec<f64>,
}

/// Validates a probability vector, renormalizing drift within tolerance.
pub(crate) fn normalize(row: &mut [f64], what: &str) -> Result<()> {
    if row.iter().any(|p| !p.is_finite() || *p < -PROB_TOL) {
        return Err(Error::invalid(format!("{what}: negative or non-finite probability")));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > PROB_TOL {
        return Err(Error::invalid(format!("{what}: probabilities sum to {sum}")));
    }
    // rows already summing to 1 up to rounding stay bit-identical, so files round-trip
    let scale = if (sum - 1.0).abs() <= 1e-12 { 1.0 } else { sum };
    for p in row.iter_mut() {
        *p = p.max(0.0) / scale;
    }
    Ok(())
}

/// Inverse-CDF draw from a probability vector.
pub(crate) fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // round-off: fall back to the last state with positive mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

impl LayeredMdp {
    pub fn new(universe: Universe, mut transitions: Vec<Vec<f64>>, rewards: Vec<RewardDist>, mut init: Vec<f64>) -> Result<Self> {
        let a = universe.actions();
        let n = universe.num_states() * a;
        if transitions.len() != n || rewards.len() != n {
            return Err(Error::invalid(format!("expected {n} transition and reward rows")));
        }
        if init.len() != universe.layer_size(1) {
            return Err(Error::invalid("init length must match layer 1"));
        }
        normalize(&mut init, "init")?;
        let h_max = universe.horizon();
        for flat in 0..universe.num_states() {
            let s = universe.state_of(flat);
            for act in 0..a {
                let row = &mut transitions[flat * a + act];
                if s.layer == h_max {
                    if !row.is_empty() {
                        return Err(Error::invalid(format!("last-layer state {s} has a transition row")));
                    }
                } else {
                    if row.len() != universe.layer_size(s.layer + 1) {
                        return Err(Error::invalid(format!("transition row for ({s}, {act}) has wrong length")));
                    }
                    normalize(row, &format!("transition ({s}, {act})"))?;
                }
                if !rewards[flat * a + act].valid() {
                    return Err(Error::invalid(format!("reward for ({s}, {act}) outside [0, 1]")));
                }
            }
        }
        let mdp = LayeredMdp { universe, transitions, rewards, init };
        let worst = mdp.max_path_reward();
        if worst > 1.0 + PROB_TOL {
            return Err(Error::invalid(format!("a trajectory can collect reward {worst} > 1")));
        }
        Ok(mdp)
    }

    /// Builder seeded with a deterministic "go to index 0" skeleton and zero rewards.
    pub fn builder(universe: Universe) -> MdpBuilder {
        MdpBuilder::new(universe)
    }

    pub fn universe(&self) -> &Universe {
        &self.universe
    }

    pub fn horizon(&self) -> usize {
        self.universe.horizon()
    }

    pub fn actions(&self) -> usize {
        self.universe.actions()
    }

    pub fn init(&self) -> &[f64] {
        &self.init
    }

    #[inline]
    fn slot(&self, s: StateId, a: usize) -> usize {
        self.universe.flat(s) * self.universe.actions() + a
    }

    /// Next-layer distribution; empty for the last layer.
    pub fn transition(&self, s: StateId, a: usize) -> &[f64] {
        &self.transitions[self.slot(s, a)]
    }

    pub fn reward(&self, s: StateId, a: usize) -> RewardDist {
        self.rewards[self.slot(s, a)]
    }

    /// Worst-case cumulative reward over all trajectories from any start
    /// state with initial mass, following positive-probability transitions.
    pub fn max_path_reward(&self) -> f64 {
        let h_max = self.horizon();
        let a_n = self.actions();
        let mut best_next: Vec<f64> = vec![0.0; 0];
        for h in (1..=h_max).rev() {
            let best: Vec<f64> = (0..self.universe.layer_size(h))
                .map(|i| {
                    let s = StateId::new(h, i);
                    (0..a_n)
                        .map(|a| {
                            let tail = self
                                .transition(s, a)
                                .iter()
                                .zip(&best_next)
                                .filter(|(p, _)| **p > 0.0)
                                .map(|(_, v)| *v)
                                .fold(0.0, f64::max);
                            self.reward(s, a).max_support() + tail
                        })
                        .fold(0.0, f64::max)
                })
                .collect();
            best_next = best;
        }
        self.init
            .iter()
            .zip(&best_next)
            .filter(|(p, _)| **p > 0.0)
            .map(|(_, v)| *v)
            .fold(0.0, f64::max)
    }

    /// Whether every transition row and the initial distribution are point masses.
    pub fn is_deterministic(&self) -> bool {
        let point = |row: &[f64]| row.iter().filter(|&&p| p > 0.0).count() == 1;
        point(&self.init) && self.transitions.iter().all(|r| r.is_empty() || point(r))
    }

    /// Deterministic successor; `None` for the last layer.
    pub fn det_next(&self, s: StateId, a: usize) -> Option<StateId> {
        let row = self.transition(s, a);
        row.iter().position(|&p| p > 0.0).map(|i| StateId::new(s.layer + 1, i))
    }

    pub fn det_start(&self) -> StateId {
        StateId::new(1, self.init.iter().position(|&p| p > 0.0).unwrap_or(0))
    }

    pub fn sample_start<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_index(&self.init, rng)
    }

    /// Takes `a` in `s`; returns the sampled reward and the next-layer state index.
    pub fn step<R: Rng + ?Sized>(&self, s: StateId, a: usize, rng: &mut R) -> (f64, Option<usize>) {
        let r = self.reward(s, a).sample(rng);
        let row = self.transition(s, a);
        let next = if row.is_empty() { None } else { Some(sample_index(row, rng)) };
        (r, next)
    }

    /// Continues an episode from `state` in `layer`, choosing actions with `policy`.
    pub fn rollout_from<R: Rng + ?Sized>(
        &self,
        traj: &mut Trajectory,
        layer: usize,
        state: usize,
        policy: &Policy,
        rng: &mut R,
    ) {
        let mut s = state;
        for h in layer..=self.horizon() {
            let id = StateId::new(h, s);
            let a = policy.action(id);
            let (r, next) = self.step(id, a, rng);
            traj.steps.push(Step { state: s, action: a, reward: r });
            if let Some(n) = next {
                s = n;
            }
        }
    }

    pub fn sample_trajectory<R: Rng + ?Sized>(&self, policy: &Policy, rng: &mut R) -> Trajectory {
        let mut traj = Trajectory { steps: Vec::with_capacity(self.horizon()) };
        let s = self.sample_start(rng);
        self.rollout_from(&mut traj, 1, s, policy, rng);
        traj
    }

    /// `V^pi` by backward dynamic programming.
    pub fn exact_policy_value(&self, policy: &Policy) -> f64 {
        let mut v_next: Vec<f64> = Vec::new();
        for h in (1..=self.horizon()).rev() {
            v_next = (0..self.universe.layer_size(h))
                .map(|i| {
                    let s = StateId::new(h, i);
                    let a = policy.action(s);
                    let tail: f64 = self.transition(s, a).iter().zip(&v_next).map(|(p, v)| p * v).sum();
                    self.reward(s, a).mean() + tail
                })
                .collect();
        }
        self.init.iter().zip(&v_next).map(|(p, v)| p * v).sum()
    }

    /// Forward occupancy computation.
    pub fn occupancy(&self, policy: &Policy) -> OccupancyTable {
        let h_max = self.horizon();
        let a_n = self.actions();
        let mut state = Vec::with_capacity(h_max);
        let mut state_action = Vec::with_capacity(h_max);
        let mut d = self.init.clone();
        for h in 1..=h_max {
            let mut sa = vec![vec![0.0; a_n]; d.len()];
            let mut next = if h < h_max { vec![0.0; self.universe.layer_size(h + 1)] } else { Vec::new() };
            for (i, &mass) in d.iter().enumerate() {
                let s = StateId::new(h, i);
                let a = policy.action(s);
                sa[i][a] = mass;
                if mass > 0.0 {
                    for (n, p) in next.iter_mut().zip(self.transition(s, a)) {
                        *n += mass * p;
                    }
                }
            }
            state.push(d);
            state_action.push(sa);
            d = next;
        }
        OccupancyTable { state, state_action }
    }
}

/// Incremental construction of a [`LayeredMdp`].
#[derive(Clone, Debug)]
pub struct MdpBuilder {
    universe: Universe,
    transitions: Vec<Vec<f64>>,
    rewards: Vec<RewardDist>,
    init: Vec<f64>,
}

impl MdpBuilder {
    pub fn new(universe: Universe) -> Self {
        let a = universe.actions();
        let h_max = universe.horizon();
        let mut transitions = Vec::with_capacity(universe.num_states() * a);
        for s in universe.states() {
            for _ in 0..a {
                if s.layer == h_max {
                    transitions.push(Vec::new());
                } else {
                    let mut row = vec![0.0; universe.layer_size(s.layer + 1)];
                    row[0] = 1.0;
                    transitions.push(row);
                }
            }
        }
        let mut init = vec![0.0; universe.layer_size(1)];
        init[0] = 1.0;
        let rewards = vec![RewardDist::Point(0.0); universe.num_states() * a];
        MdpBuilder { universe, transitions, rewards, init }
    }

    fn slot(&self, s: StateId, a: usize) -> usize {
        self.universe.flat(s) * self.universe.actions() + a
    }

    pub fn universe(&self) -> &Universe {
        &self.universe
    }

    pub fn transition(&mut self, s: StateId, a: usize, row: Vec<f64>) -> &mut Self {
        let i = self.slot(s, a);
        self.transitions[i] = row;
        self
    }

    /// Deterministic transition to `next` in the following layer.
    pub fn goto(&mut self, s: StateId, a: usize, next: usize) -> &mut Self {
        let mut row = vec![0.0; self.universe.layer_size(s.layer + 1)];
        row[next] = 1.0;
        self.transition(s, a, row)
    }

    pub fn reward(&mut self, s: StateId, a: usize, r: RewardDist) -> &mut Self {
        let i = self.slot(s, a);
        self.rewards[i] = r;
        self
    }

    pub fn init(&mut self, init: Vec<f64>) -> &mut Self {
        self.init = init;
        self
    }

    pub fn build(&self) -> Result<LayeredMdp> {
        LayeredMdp::new(self.universe.clone(), self.transitions.clone(), self.rewards.clone(), self.init.clone())
    }
}

/// Random MDP generators used by tests and experiment recipes.
pub mod generate {
    use super::*;

    fn random_simplex<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
        // sparse-ish rows: each entry survives with probability 0.7, at least one kept
        let keep = rng.gen_range(0..n);
        let mut w: Vec<f64> = (0..n)
            .map(|i| if i == keep || rng.gen_bool(0.7) { rng.gen::<f64>() + 1e-3 } else { 0.0 })
            .collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= s);
        w
    }

    /// Stochastic transitions and init; point rewards in `[0, 1/H]`.
    pub fn random_mdp<R: Rng + ?Sized>(universe: &Universe, rng: &mut R) -> LayeredMdp {
        let h_max = universe.horizon();
        let mut b = MdpBuilder::new(universe.clone());
        b.init(random_simplex(universe.layer_size(1), rng));
        let states: Vec<StateId> = universe.states().collect();
        for s in states {
            for a in 0..universe.actions() {
                if s.layer < h_max {
                    b.transition(s, a, random_simplex(universe.layer_size(s.layer + 1), rng));
                }
                b.reward(s, a, RewardDist::Point(rng.gen::<f64>() / h_max as f64));
            }
        }
        b.build().expect("generator respects invariants")
    }

    /// Point-mass transitions and init; point rewards in `[0, 1/H]`.
    pub fn random_det_mdp<R: Rng + ?Sized>(universe: &Universe, rng: &mut R) -> LayeredMdp {
        let h_max = universe.horizon();
        let mut b = MdpBuilder::new(universe.clone());
        let mut init = vec![0.0; universe.layer_size(1)];
        let start = rng.gen_range(0..init.len());
        init[start] = 1.0;
        b.init(init);
        let states: Vec<StateId> = universe.states().collect();
        for s in states {
            for a in 0..universe.actions() {
                if s.layer < h_max {
                    let n = rng.gen_range(0..universe.layer_size(s.layer + 1));
                    b.goto(s, a, n);
                }
                b.reward(s, a, RewardDist::Point(rng.gen::<f64>() / h_max as f64));
            }
        }
        b.build().expect("generator respects invariants")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;

    fn chain(h: usize, reward: f64) -> LayeredMdp {
        let u = Universe::uniform(2, h, 2).unwrap();
        let mut b = LayeredMdp::builder(u);
        for l in 1..h {
            for i in 0..2 {
                b.goto(StateId::new(l, i), 0, 0).goto(StateId::new(l, i), 1, 1);
            }
        }
        for l in 1..=h {
            b.reward(StateId::new(l, 0), 0, RewardDist::Point(reward));
        }
        b.build().unwrap()
    }

    #[test]
    fn zero_rewards_zero_value() {
        let u = Universe::uniform(2, 3, 2).unwrap();
        let m = LayeredMdp::builder(u.clone()).build().unwrap();
        assert_eq!(m.exact_policy_value(&Policy::zeros(&u)), 0.0);
    }

    #[test]
    fn deterministic_two_layer_path() {
        let m = chain(2, 0.5);
        let u = m.universe().clone();
        assert!((m.exact_policy_value(&Policy::zeros(&u)) - 1.0).abs() < 1e-15);
        let mut rng = rng_from_seed(3);
        let t = m.sample_trajectory(&Policy::zeros(&u), &mut rng);
        assert_eq!(t.steps.iter().map(|s| s.state).collect::<Vec<_>>(), vec![0, 0]);
        assert_eq!(t.total_reward(), 1.0);
    }

    #[test]
    fn single_action_plays_zero() {
        let u = Universe::uniform(2, 3, 1).unwrap();
        let mut rng = rng_from_seed(1);
        let m = generate::random_mdp(&u, &mut rng);
        let t = m.sample_trajectory(&Policy::zeros(&u), &mut rng);
        assert!(t.steps.iter().all(|s| s.action == 0));
    }

    #[test]
    fn reward_audit_rejects_two_bernoullis() {
        let u = Universe::uniform(1, 2, 1).unwrap();
        let mut b = LayeredMdp::builder(u);
        b.reward(StateId::new(1, 0), 0, RewardDist::Bernoulli(0.1));
        b.reward(StateId::new(2, 0), 0, RewardDist::Bernoulli(0.1));
        assert!(b.build().is_err());
    }

    #[test]
    fn normalization_tolerance() {
        let u = Universe::uniform(2, 2, 1).unwrap();
        let mut b = LayeredMdp::builder(u.clone());
        b.init(vec![0.5, 0.5 + 5e-10]);
        assert!(b.build().is_ok());
        b.init(vec![0.5, 0.6]);
        assert!(b.build().is_err());
        b.init(vec![1.0, 0.0]).transition(StateId::new(1, 0), 0, vec![1.2, -0.2]);
        assert!(b.build().is_err());
    }

    #[test]
    fn occupancy_of_path_is_indicator() {
        let m = chain(3, 0.1);
        let u = m.universe().clone();
        let mut p = Policy::zeros(&u);
        p.set(StateId::new(1, 0), 1);
        let occ = m.occupancy(&p);
        assert_eq!(occ.state, vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert_eq!(occ.state_action(StateId::new(1, 0), 1), 1.0);
    }

    #[test]
    fn uniform_transitions_symmetric_occupancy() {
        let u = Universe::uniform(2, 3, 2).unwrap();
        let mut b = LayeredMdp::builder(u.clone());
        b.init(vec![0.5, 0.5]);
        for l in 1..3 {
            for i in 0..2 {
                for a in 0..2 {
                    b.transition(StateId::new(l, i), a, vec![0.5, 0.5]);
                }
            }
        }
        let m = b.build().unwrap();
        let occ = m.occupancy(&Policy::zeros(&u));
        for layer in &occ.state {
            assert_eq!(layer, &vec![0.5, 0.5]);
        }
    }
}
