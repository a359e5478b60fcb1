//! POPLER: petal-state identification followed by evaluation of every
//! member on an importance-weighted, policy-specific MRP.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::capacity::{spanning_capacity, DEFAULT_NODE_BUDGET};
use crate::error::{Error, Result};
use crate::mdp::{LayeredMdp, Trajectory};
use crate::mrp::{Mrp, MrpFlavor};
use crate::policy::{Policy, PolicyClass};
use crate::sunflower::SunflowerCert;
use crate::universe::{StateId, Universe};

/// Trajectories that pass through `anchor`, continued by uniform core policies.
#[derive(Clone, Debug)]
pub struct TrajDataset {
    pub anchor: StateId,
    pub trajectories: Vec<Trajectory>,
    pub requested: usize,
    pub accepted: usize,
}

/// Runs `n` attempts: reach `s` with `reacher`, then switch to a uniformly drawn core member.
pub fn data_collector<R: Rng + ?Sized>(
    mdp: &LayeredMdp,
    s: StateId,
    reacher: Option<&Policy>,
    core: &PolicyClass,
    n: usize,
    rng: &mut R,
) -> Result<TrajDataset> {
    if s.is_top() != reacher.is_none() {
        return Err(Error::invalid("a reacher policy is required exactly for non-start anchors"));
    }
    if !s.is_top() {
        mdp.universe().check(s)?;
    }
    let h_max = mdp.horizon();
    let mut trajectories = Vec::new();
    for _ in 0..n {
        let mut traj = Trajectory { steps: Vec::with_capacity(h_max) };
        let mut state = mdp.sample_start(rng);
        if let Some(reacher) = reacher {
            for h in 1..s.layer {
                let id = StateId::new(h, state);
                let a = reacher.action(id);
                let (r, next) = mdp.step(id, a, rng);
                traj.steps.push(crate::mdp::Step { state, action: a, reward: r });
                state = next.expect("anchor layer is at most H");
            }
            if state != s.index {
                continue;
            }
        }
        let explorer = core.member(rng.gen_range(0..core.len()));
        mdp.rollout_from(&mut traj, s.layer.max(1), state, explorer, rng);
        trajectories.push(traj);
    }
    let accepted = trajectories.len();
    Ok(TrajDataset { anchor: s, trajectories, requested: n, accepted })
}

/// Importance-weighted estimates for every edge out of one anchor.
#[derive(Clone, Debug, Default)]
pub struct RowEstimate {
    /// target → (p_hat, r_hat, contributing trajectories); `r_hat` is the joint estimate.
    pub edges: BTreeMap<StateId, (f64, f64, usize)>,
    /// Trajectories consistent with `pi` on the segment but with no consistent core member.
    pub violations: u64,
    pub empty: bool,
}

fn petal_mask(universe: &Universe, s_pi: &[StateId]) -> Result<Vec<bool>> {
    let mut mask = vec![false; universe.num_states()];
    for &s in s_pi {
        universe.check(s)?;
        mask[universe.flat(s)] = true;
    }
    Ok(mask)
}

/// Estimates all edges `anchor -> s'`, where `s'` is the first petal state after the anchor
/// (or the end node). A trajectory counts toward the edge when `pi` agrees with it on the
/// actions in layers `max(h,1)..h'-1`, with weight `K / #{core members that agree}`.
fn estimate_row(dataset: &TrajDataset, core: &PolicyClass, pi: &Policy, petal: &[bool]) -> RowEstimate {
    let universe = core.universe();
    let h_max = universe.horizon();
    let h = dataset.anchor.layer;
    let k = core.len() as f64;
    let mut row = RowEstimate { empty: dataset.trajectories.is_empty(), ..Default::default() };
    if row.empty {
        return row;
    }
    for tau in &dataset.trajectories {
        let hit = (h + 1..=h_max).find(|&i| petal[universe.flat(StateId::new(i, tau.state(i)))]);
        let end = hit.unwrap_or(h_max + 1);
        let window = h.max(1)..end;
        if !window.clone().all(|i| pi.action_at(i, tau.state(i)) == tau.action(i)) {
            continue;
        }
        let agree = core
            .members()
            .iter()
            .filter(|c| window.clone().all(|i| c.action_at(i, tau.state(i)) == tau.action(i)))
            .count();
        if agree == 0 {
            row.violations += 1;
            continue;
        }
        let w = k / agree as f64;
        let target = match hit {
            Some(i) => StateId::new(i, tau.state(i)),
            None => StateId::bottom(h_max),
        };
        let reward = if window.is_empty() { 0.0 } else { tau.segment_reward(window.start, window.end) };
        let e = row.edges.entry(target).or_insert((0.0, 0.0, 0));
        e.0 += w;
        e.1 += w * reward;
        e.2 += 1;
    }
    let n = dataset.trajectories.len() as f64;
    for e in row.edges.values_mut() {
        e.0 /= n;
        e.1 /= n;
    }
    row
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EdgeEstimate {
    pub p_hat: f64,
    /// Joint estimate of the expected segment reward on the edge event.
    pub r_hat: f64,
    pub violations: u64,
    pub empty: bool,
}

pub fn estimate_edge(
    dataset: &TrajDataset,
    core: &PolicyClass,
    pi: &Policy,
    s_pi: &[StateId],
    s: StateId,
    s_next: StateId,
) -> Result<EdgeEstimate> {
    if s != dataset.anchor {
        return Err(Error::invalid(format!("dataset is anchored at {}, not {s}", dataset.anchor)));
    }
    if s_next.layer <= s.layer {
        return Err(Error::invalid("edge target must lie in a later layer"));
    }
    let petal = petal_mask(core.universe(), s_pi)?;
    let row = estimate_row(dataset, core, pi, &petal);
    let (p_hat, r_hat, _) = row.edges.get(&s_next).copied().unwrap_or_default();
    Ok(EdgeEstimate { p_hat, r_hat, violations: row.violations, empty: row.empty })
}

#[derive(Clone, Debug)]
pub struct EmpiricalMrp {
    pub mrp: Mrp,
    /// Contributing trajectories per edge.
    pub counts: BTreeMap<(StateId, StateId), usize>,
    pub k: usize,
    pub violations: u64,
}

fn split_reached(s_pi: &[StateId], s_rch: &[StateId]) -> (Vec<StateId>, Vec<StateId>) {
    let mut hp = Vec::new();
    let mut rem = Vec::new();
    for &s in s_pi {
        if s_rch.contains(&s) {
            hp.push(s);
        } else {
            rem.push(s);
        }
    }
    (hp, rem)
}

/// Empirical policy-specific MRP: estimated rows for the start node and reached petal
/// states, unreached petal states routed straight to the end node.
pub fn build_empirical_mrp(
    datasets: &BTreeMap<StateId, TrajDataset>,
    core: &PolicyClass,
    pi: &Policy,
    s_pi: &[StateId],
    s_rch: &[StateId],
) -> Result<EmpiricalMrp> {
    let universe = core.universe();
    let h_max = universe.horizon();
    let bot = StateId::bottom(h_max);
    let petal = petal_mask(universe, s_pi)?;
    let (hp, rem) = split_reached(s_pi, s_rch);
    let mut b = Mrp::builder(h_max, MrpFlavor::Empirical { k: core.len() });
    let mut counts = BTreeMap::new();
    let mut violations = 0;
    for &s in std::iter::once(&StateId::TOP).chain(&hp) {
        b.node(s);
        let ds = datasets
            .get(&s)
            .ok_or_else(|| Error::invalid(format!("no dataset for reached state {s}")))?;
        let row = estimate_row(ds, core, pi, &petal);
        violations += row.violations;
        for (t, (p, r, c)) in row.edges {
            let cond = if p > 0.0 { (r / p).min(1.0) } else { 0.0 };
            b.edge(s, t, p, cond);
            counts.insert((s, t), c);
        }
    }
    for &s in &rem {
        b.edge(s, bot, 1.0, 0.0);
    }
    Ok(EmpiricalMrp { mrp: b.build()?, counts, k: core.len(), violations })
}

/// Exact transit distribution from `start` to the first petal state (or the end node).
/// Returns target → (probability, joint reward).
fn exact_row(mdp: &LayeredMdp, pi: &Policy, petal: &[bool], start: StateId) -> BTreeMap<StateId, (f64, f64)> {
    let u = mdp.universe();
    let h_max = u.horizon();
    let mut out: BTreeMap<StateId, (f64, f64)> = BTreeMap::new();
    let (mut layer, mut p) = if start.is_top() {
        (1, mdp.init().to_vec())
    } else {
        let mut p = vec![0.0; u.layer_size(start.layer)];
        p[start.index] = 1.0;
        (start.layer, p)
    };
    let mut m = vec![0.0; p.len()];
    loop {
        if layer > start.layer {
            for i in 0..p.len() {
                let s = StateId::new(layer, i);
                if petal[u.flat(s)] && p[i] > 0.0 {
                    let e = out.entry(s).or_default();
                    e.0 += p[i];
                    e.1 += m[i];
                    p[i] = 0.0;
                    m[i] = 0.0;
                }
            }
        }
        if layer == h_max {
            let mut e = (0.0, 0.0);
            for i in 0..p.len() {
                if p[i] > 0.0 {
                    let s = StateId::new(layer, i);
                    e.0 += p[i];
                    e.1 += m[i] + p[i] * mdp.reward(s, pi.action(s)).mean();
                }
            }
            if e.0 > 0.0 {
                out.insert(StateId::bottom(h_max), e);
            }
            return out;
        }
        let width = u.layer_size(layer + 1);
        let mut p2 = vec![0.0; width];
        let mut m2 = vec![0.0; width];
        for i in 0..p.len() {
            if p[i] == 0.0 {
                continue;
            }
            let s = StateId::new(layer, i);
            let a = pi.action(s);
            let carried = m[i] + p[i] * mdp.reward(s, a).mean();
            for (j, q) in mdp.transition(s, a).iter().enumerate() {
                p2[j] += p[i] * q;
                m2[j] += carried * q;
            }
        }
        p = p2;
        m = m2;
        layer += 1;
    }
}

/// Population policy-specific MRP with the same node and row layout as
/// [`build_empirical_mrp`].
pub fn exact_policy_mrp(mdp: &LayeredMdp, pi: &Policy, s_pi: &[StateId], s_rch: &[StateId]) -> Result<Mrp> {
    let u = mdp.universe();
    if !pi.fits(u) {
        return Err(Error::invalid("policy does not fit the MDP universe"));
    }
    let h_max = u.horizon();
    let petal = petal_mask(u, s_pi)?;
    let (hp, rem) = split_reached(s_pi, s_rch);
    let mut b = Mrp::builder(h_max, MrpFlavor::Exact);
    for &s in std::iter::once(&StateId::TOP).chain(&hp) {
        b.node(s);
        for (t, (p, r)) in exact_row(mdp, pi, &petal, s) {
            b.edge(s, t, p, if p > 0.0 { (r / p).min(1.0) } else { 0.0 });
        }
    }
    for &s in &rem {
        b.edge(s, StateId::bottom(h_max), 1.0, 0.0);
    }
    b.build()
}

/// Exact joint (probability, reward) of one edge; zero when the edge is absent.
pub fn exact_edge(mdp: &LayeredMdp, pi: &Policy, s_pi: &[StateId], s: StateId, s_next: StateId) -> Result<(f64, f64)> {
    let petal = petal_mask(mdp.universe(), s_pi)?;
    Ok(exact_row(mdp, pi, &petal, s).get(&s_next).copied().unwrap_or_default())
}

#[derive(Clone, Debug)]
pub struct PoplerParams {
    pub eps: f64,
    pub delta: f64,
    pub n1: usize,
    pub n2: usize,
    /// Upper bound on the spanning capacity used in the loop cap; computed when absent.
    pub capacity_ub: Option<u64>,
}

/// `C1 (D+1)^4 K^2 log(|Pi|(D+1)/delta) / eps^2`.
pub fn default_n1(c1: f64, d: usize, k: usize, class_size: usize, eps: f64, delta: f64) -> usize {
    let d1 = (d + 1) as f64;
    let k = k as f64;
    (c1 * d1.powi(4) * k * k * ((class_size as f64) * d1 / delta).ln() / (eps * eps)).ceil() as usize
}

/// `C2 D^3 (D+1)^2 K^2 log(|Pi|(D+1)^2/delta) / eps^3`.
pub fn default_n2(c2: f64, d: usize, k: usize, class_size: usize, eps: f64, delta: f64) -> usize {
    let df = d as f64;
    let d1 = (d + 1) as f64;
    let k = k as f64;
    (c2 * df.powi(3) * d1 * d1 * k * k * ((class_size as f64) * d1 * d1 / delta).ln() / eps.powi(3)).ceil() as usize
}

#[derive(Clone, Debug, Serialize)]
pub struct ReachedEntry {
    pub state: StateId,
    pub reacher: Option<usize>,
    pub requested: usize,
    pub accepted: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct PoplerReport {
    pub returned: usize,
    pub v_hat: Vec<f64>,
    pub reached: Vec<ReachedEntry>,
    /// Passes of the identification loop, including the final one that inserts nothing.
    pub iterations: usize,
    pub iteration_cap: f64,
    pub threshold: f64,
    pub capacity_ub: u64,
    /// IS violations while evaluating the final MRPs.
    pub violations: u64,
    /// IS violations summed over every MRP estimate built during identification.
    pub identification_violations: u64,
}

pub fn popler<R: Rng + ?Sized>(
    mdp: &LayeredMdp,
    class: &PolicyClass,
    cert: &SunflowerCert,
    params: &PoplerParams,
    rng: &mut R,
) -> Result<(usize, PoplerReport)> {
    cert.check_covers(class)?;
    if class.universe() != mdp.universe() {
        return Err(Error::invalid("class and MDP live on different universes"));
    }
    if !(params.eps > 0.0) || !(params.delta > 0.0 && params.delta < 1.0) {
        return Err(Error::invalid("need eps > 0 and 0 < delta < 1"));
    }
    if params.n1 == 0 || params.n2 == 0 {
        return Err(Error::invalid("n1 and n2 must be positive"));
    }
    let core = &cert.core;
    let d = cert.d;
    let h_max = mdp.horizon() as f64;
    let capacity_ub = match params.capacity_ub {
        Some(c) => c,
        None => {
            let r = spanning_capacity(class, DEFAULT_NODE_BUDGET)?;
            if r.exact {
                r.value
            } else {
                let pow = (class.actions() as u64).checked_pow(class.horizon() as u32).unwrap_or(u64::MAX);
                pow.min(class.len() as u64)
            }
        }
    };
    let cap = 12.0 * h_max * d as f64 * capacity_ub as f64 / params.eps;
    let threshold = if d == 0 { f64::INFINITY } else { params.eps / (6.0 * d as f64) };

    let mut datasets: BTreeMap<StateId, TrajDataset> = BTreeMap::new();
    let mut reached = vec![(StateId::TOP, None::<usize>)];
    datasets.insert(StateId::TOP, data_collector(mdp, StateId::TOP, None, core, params.n1, rng)?);
    let mut iterations = 0;
    let mut identification_violations = 0;

    if d > 0 {
        loop {
            iterations += 1;
            if iterations as f64 > cap {
                return Err(Error::Budget(format!(
                    "identification loop exceeded {cap:.0} iterations with {} reached states",
                    reached.len()
                )));
            }
            let s_rch: Vec<StateId> = reached.iter().map(|r| r.0).collect();
            let scans: Vec<Result<(Option<StateId>, u64)>> = class
                .members()
                .par_iter()
                .zip(cert.petals.par_iter())
                .map(|(pi, s_pi)| {
                    let rem: Vec<StateId> = s_pi.iter().copied().filter(|s| !s_rch.contains(s)).collect();
                    if rem.is_empty() {
                        return Ok((None, 0));
                    }
                    let emp = build_empirical_mrp(&datasets, core, pi, s_pi, &s_rch)?;
                    for s_bar in rem {
                        if emp.mrp.reach_prob(s_bar)? >= threshold {
                            return Ok((Some(s_bar), emp.violations));
                        }
                    }
                    Ok((None, emp.violations))
                })
                .collect();
            let mut found = None;
            for (m, scan) in scans.into_iter().enumerate() {
                let (hit, v) = scan?;
                identification_violations += v;
                if found.is_none() {
                    found = hit.map(|s| (s, m));
                }
            }
            let Some((s_bar, m)) = found else { break };
            let ds = data_collector(mdp, s_bar, Some(class.member(m)), core, params.n2, rng)?;
            datasets.insert(s_bar, ds);
            reached.push((s_bar, Some(m)));
        }
    }

    let s_rch: Vec<StateId> = reached.iter().map(|r| r.0).collect();
    let evals: Vec<Result<(f64, u64)>> = class
        .members()
        .par_iter()
        .zip(cert.petals.par_iter())
        .map(|(pi, s_pi)| {
            let emp = build_empirical_mrp(&datasets, core, pi, s_pi, &s_rch)?;
            Ok((emp.mrp.value(), emp.violations))
        })
        .collect();
    let mut v_hat = Vec::with_capacity(class.len());
    let mut violations = 0;
    for e in evals {
        let (v, c) = e?;
        v_hat.push(v);
        violations += c;
    }
    let returned = argmax(&v_hat);
    let reached = reached
        .into_iter()
        .map(|(state, reacher)| {
            let ds = &datasets[&state];
            ReachedEntry { state, reacher, requested: ds.requested, accepted: ds.accepted }
        })
        .collect();
    let report = PoplerReport {
        returned,
        v_hat,
        reached,
        iterations,
        iteration_cap: cap,
        threshold,
        capacity_ub,
        violations,
        identification_violations,
    };
    Ok((returned, report))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{RewardDist, Step};
    use crate::policy::{build_singletons, ClassTag};
    use crate::seed::rng_from_seed;

    fn traj(steps: &[(usize, usize, f64)]) -> Trajectory {
        Trajectory { steps: steps.iter().map(|&(state, action, reward)| Step { state, action, reward }).collect() }
    }

    #[test]
    fn start_anchor_keeps_every_attempt() {
        let c = build_singletons(2, 2).unwrap();
        let mut rng = rng_from_seed(1);
        let m = crate::mdp::generate::random_mdp(c.universe(), &mut rng);
        let core = crate::sunflower::layer_core(c.universe()).unwrap();
        let ds = data_collector(&m, StateId::TOP, None, &core, 100, &mut rng).unwrap();
        assert_eq!(ds.accepted, 100);
        assert!(data_collector(&m, StateId::TOP, Some(c.member(0)), &core, 1, &mut rng).is_err());
    }

    #[test]
    fn unreachable_anchor_accepts_nothing() {
        let c = build_singletons(2, 2).unwrap();
        let mut b = LayeredMdp::builder(c.universe().clone());
        b.reward(StateId::new(2, 0), 1, RewardDist::Point(0.5));
        let m = b.build().unwrap();
        let mut rng = rng_from_seed(2);
        let ds = data_collector(&m, StateId::new(2, 1), Some(c.member(0)), &c, 50, &mut rng).unwrap();
        assert_eq!(ds.accepted, 0);
    }

    #[test]
    fn single_core_weights_are_one() {
        let u = Universe::uniform(2, 2, 2).unwrap();
        let pi = Policy::zeros(&u);
        let core = PolicyClass::new(u.clone(), vec![pi.clone()], ClassTag::Explicit).unwrap();
        let ds = TrajDataset {
            anchor: StateId::TOP,
            trajectories: vec![
                traj(&[(0, 0, 0.1), (1, 0, 0.2)]),
                traj(&[(1, 0, 0.0), (1, 0, 0.4)]),
                traj(&[(0, 0, 0.0), (0, 0, 0.0)]),
                traj(&[(1, 0, 0.3), (0, 0, 0.0)]),
            ],
            requested: 4,
            accepted: 4,
        };
        let s_pi = [StateId::new(2, 1)];
        let e = estimate_edge(&ds, &core, &pi, &s_pi, StateId::TOP, StateId::new(2, 1)).unwrap();
        assert!((e.p_hat - 0.5).abs() < 1e-15);
        assert!((e.r_hat - 0.1 / 4.0).abs() < 1e-15);
        assert_eq!(e.violations, 0);
    }

    #[test]
    fn handcrafted_two_member_core() {
        // core plays all-0 or all-1; pi plays 0 on layer 1 and 1 on layer 2
        let u = Universe::uniform(2, 2, 2).unwrap();
        let core = PolicyClass::new(u.clone(), vec![Policy::zeros(&u), Policy::constant(&u, 1)], ClassTag::Explicit).unwrap();
        let pi = Policy::per_layer(&u, &[0, 1]);
        let ds = TrajDataset {
            anchor: StateId::TOP,
            trajectories: vec![
                traj(&[(0, 0, 0.2), (0, 0, 0.0)]), // pi-consistent on layer 1, core 0 agrees: -> (2,0), w=2
                traj(&[(1, 1, 0.0), (0, 1, 0.5)]), // pi disagrees at layer 1
                traj(&[(0, 0, 0.4), (1, 1, 0.3)]), // pi-consistent to the end, no core member agrees
                traj(&[(1, 0, 0.6), (0, 0, 0.0)]), // -> (2,0), w=2
            ],
            requested: 4,
            accepted: 4,
        };
        let s_pi = [StateId::new(2, 0)];
        let e = estimate_edge(&ds, &core, &pi, &s_pi, StateId::TOP, StateId::new(2, 0)).unwrap();
        assert!((e.p_hat - 1.0).abs() < 1e-15);
        assert!((e.r_hat - (2.0 * 0.2 + 2.0 * 0.6) / 4.0).abs() < 1e-15);
        let bot = estimate_edge(&ds, &core, &pi, &s_pi, StateId::TOP, StateId::bottom(2)).unwrap();
        assert_eq!(bot.p_hat, 0.0);
        assert_eq!(bot.violations, 1); // pi-consistent segment with no agreeing core member
    }

    #[test]
    fn empty_dataset_flagged() {
        let u = Universe::uniform(1, 1, 2).unwrap();
        let pi = Policy::zeros(&u);
        let core = PolicyClass::new(u, vec![pi.clone()], ClassTag::Explicit).unwrap();
        let ds = TrajDataset { anchor: StateId::TOP, trajectories: vec![], requested: 0, accepted: 0 };
        let e = estimate_edge(&ds, &core, &pi, &[], StateId::TOP, StateId::bottom(1)).unwrap();
        assert!(e.empty);
        assert_eq!((e.p_hat, e.r_hat), (0.0, 0.0));
    }

    #[test]
    fn exact_mrp_without_petals_is_one_edge() {
        let c = build_singletons(3, 3).unwrap();
        let mut rng = rng_from_seed(5);
        let m = crate::mdp::generate::random_mdp(c.universe(), &mut rng);
        for p in c.members() {
            let mrp = exact_policy_mrp(&m, p, &[], &[]).unwrap();
            let edges = mrp.edges_from(StateId::TOP);
            assert_eq!(edges.len(), 1);
            assert_eq!(edges[0].0, StateId::bottom(3));
            assert!((edges[0].1 - 1.0).abs() < 1e-12);
            assert!((edges[0].2 - m.exact_policy_value(p)).abs() < 1e-12);
            assert!((mrp.value() - m.exact_policy_value(p)).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.1, 0.3, 0.3]), 1);
        assert_eq!(argmax(&[0.5]), 0);
    }

    #[test]
    fn default_sizes_grow_with_d() {
        let a = default_n1(1.0, 1, 3, 12, 0.1, 0.1);
        let b = default_n1(1.0, 2, 3, 12, 0.1, 0.1);
        assert!(b > a);
        assert_eq!(default_n2(1.0, 0, 3, 12, 0.1, 0.1), 0);
    }
}
