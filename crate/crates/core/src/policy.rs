//! Deterministic Markovian policies and finite policy classes.

use std::collections::HashSet;
use std::fmt;

use crate::error::{Error, Result};
use crate::universe::{StateId, Universe};

/// Largest class any builder will materialize.
pub const MAX_CLASS_SIZE: usize = 1_000_000;

/// Dense action table, one vector per layer.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Policy {
    table: Vec<Vec<u16>>,
}

impl Policy {
    pub fn from_layers(table: Vec<Vec<u16>>) -> Self {
        Policy { table }
    }

    pub fn constant(universe: &Universe, action: usize) -> Self {
        Policy {
            table: universe.layer_sizes().iter().map(|&n| vec![action as u16; n]).collect(),
        }
    }

    pub fn zeros(universe: &Universe) -> Self {
        Policy::constant(universe, 0)
    }

    /// Plays `per_layer[h-1]` everywhere in layer `h`.
    pub fn per_layer(universe: &Universe, per_layer: &[usize]) -> Self {
        Policy {
            table: universe
                .layer_sizes()
                .iter()
                .zip(per_layer)
                .map(|(&n, &a)| vec![a as u16; n])
                .collect(),
        }
    }

    #[inline]
    pub fn action(&self, s: StateId) -> usize {
        self.table[s.layer - 1][s.index] as usize
    }

    #[inline]
    pub fn action_at(&self, layer: usize, index: usize) -> usize {
        self.table[layer - 1][index] as usize
    }

    pub fn set(&mut self, s: StateId, action: usize) {
        self.table[s.layer - 1][s.index] = action as u16;
    }

    pub fn layers(&self) -> &[Vec<u16>] {
        &self.table
    }

    /// Actions in layer-major order.
    pub fn flat_actions(&self) -> impl Iterator<Item = usize> + '_ {
        self.table.iter().flatten().map(|&a| a as usize)
    }

    pub fn fits(&self, universe: &Universe) -> bool {
        self.table.len() == universe.horizon()
            && self
                .table
                .iter()
                .zip(universe.layer_sizes())
                .all(|(row, &n)| row.len() == n && row.iter().all(|&a| (a as usize) < universe.actions()))
    }

    /// Whether `pi(s) = a` for every pair. States must be strictly increasing in layer.
    pub fn consistent(&self, universe: &Universe, partial: &[(StateId, usize)]) -> Result<bool> {
        let mut last = 0;
        for (i, &(s, _)) in partial.iter().enumerate() {
            universe.check(s)?;
            if i > 0 && s.layer <= last {
                return Err(Error::invalid("partial trajectory layers must strictly increase"));
            }
            last = s.layer;
        }
        Ok(partial.iter().all(|&(s, a)| self.action(s) == a))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ClassTag {
    Singleton,
    Lton(usize),
    OneActive,
    AllActive,
    Tabular,
    CbChain,
    Threshold,
    Explicit,
    PiEll,
}

impl ClassTag {
    /// Structured tags are regenerated from the universe when parsed.
    pub fn is_structured(&self) -> bool {
        !matches!(self, ClassTag::Explicit | ClassTag::PiEll)
    }
}

impl fmt::Display for ClassTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClassTag::Singleton => write!(f, "singleton"),
            ClassTag::Lton(l) => write!(f, "lton {l}"),
            ClassTag::OneActive => write!(f, "one_active"),
            ClassTag::AllActive => write!(f, "all_active"),
            ClassTag::Tabular => write!(f, "tabular"),
            ClassTag::CbChain => write!(f, "cb_chain"),
            ClassTag::Threshold => write!(f, "threshold"),
            ClassTag::Explicit => write!(f, "explicit"),
            ClassTag::PiEll => write!(f, "pi_ell"),
        }
    }
}

/// A finite, duplicate-free, nonempty list of policies on one universe.
#[derive(Clone, Debug)]
pub struct PolicyClass {
    universe: Universe,
    members: Vec<Policy>,
    tag: ClassTag,
}

impl PolicyClass {
    /// Rejects duplicates and malformed members.
    pub fn new(universe: Universe, members: Vec<Policy>, tag: ClassTag) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::invalid("policy class must be nonempty"));
        }
        let mut seen = HashSet::with_capacity(members.len());
        for (i, m) in members.iter().enumerate() {
            if !m.fits(&universe) {
                return Err(Error::invalid(format!("member {i} does not fit the universe")));
            }
            if !seen.insert(m) {
                return Err(Error::invalid(format!("member {i} duplicates an earlier member")));
            }
        }
        Ok(PolicyClass { universe, members, tag })
    }

    /// Drops later duplicates, keeping first occurrences in order.
    pub fn dedup(universe: Universe, members: Vec<Policy>, tag: ClassTag) -> Result<Self> {
        let mut seen = HashSet::with_capacity(members.len());
        let members: Vec<Policy> = members.into_iter().filter(|m| seen.insert(m.clone())).collect();
        PolicyClass::new(universe, members, tag)
    }

    pub fn universe(&self) -> &Universe {
        &self.universe
    }

    pub fn members(&self) -> &[Policy] {
        &self.members
    }

    pub fn member(&self, i: usize) -> &Policy {
        &self.members[i]
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn tag(&self) -> ClassTag {
        self.tag
    }

    pub fn horizon(&self) -> usize {
        self.universe.horizon()
    }

    pub fn actions(&self) -> usize {
        self.universe.actions()
    }

    pub fn index_of(&self, policy: &Policy) -> Option<usize> {
        self.members.iter().position(|m| m == policy)
    }

    /// Rebuilds a structured class from its tag and universe.
    pub fn from_tag(tag: ClassTag, universe: &Universe) -> Result<Self> {
        let h = universe.horizon();
        let a = universe.actions();
        let k = || {
            universe
                .uniform_width()
                .ok_or_else(|| Error::invalid(format!("tag {tag} needs equal layer sizes")))
        };
        let need_binary = || {
            if a == 2 {
                Ok(())
            } else {
                Err(Error::invalid(format!("tag {tag} needs A = 2")))
            }
        };
        match tag {
            ClassTag::Singleton => {
                need_binary()?;
                build_singletons(k()?, h)
            }
            ClassTag::Lton(l) => {
                need_binary()?;
                build_ltons(k()?, h, l)
            }
            ClassTag::OneActive => {
                need_binary()?;
                build_one_active(k()?, h)
            }
            ClassTag::AllActive => {
                need_binary()?;
                build_all_active(k()?, h)
            }
            ClassTag::Tabular => build_tabular(k()?, h, a),
            ClassTag::CbChain => {
                let class = build_cb_chain(h, a)?;
                if class.universe() != universe {
                    return Err(Error::invalid("cb_chain needs A^(H-1) states per layer"));
                }
                Ok(class)
            }
            ClassTag::Threshold => {
                need_binary()?;
                build_threshold(k()?, h)
            }
            ClassTag::Explicit | ClassTag::PiEll => {
                Err(Error::invalid(format!("tag {tag} carries explicit members")))
            }
        }
    }
}

fn check_kh(k: usize, h: usize) -> Result<()> {
    if k < 1 || h < 1 {
        Err(Error::invalid(format!("need K >= 1 and H >= 1, got K={k} H={h}")))
    } else {
        Ok(())
    }
}

fn guard(count: u128, what: &str) -> Result<()> {
    if count > MAX_CLASS_SIZE as u128 {
        Err(Error::Guard(format!("{what} class would have {count} members (limit {MAX_CLASS_SIZE})")))
    } else {
        Ok(())
    }
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// Policy playing 1 exactly on the listed states.
fn indicator(universe: &Universe, on: &[StateId]) -> Policy {
    let mut p = Policy::zeros(universe);
    for &s in on {
        p.set(s, 1);
    }
    p
}

/// `K*H` members, each playing 1 on a single state. Ordered layer-major.
pub fn build_singletons(k: usize, h: usize) -> Result<PolicyClass> {
    check_kh(k, h)?;
    let u = Universe::uniform(k, h, 2)?;
    let members = u.states().map(|s| indicator(&u, &[s])).collect();
    PolicyClass::new(u, members, ClassTag::Singleton)
}

/// Indicators of every state subset of size at most `ell`, smaller sets first.
pub fn build_ltons(k: usize, h: usize, ell: usize) -> Result<PolicyClass> {
    check_kh(k, h)?;
    let u = Universe::uniform(k, h, 2)?;
    let s = u.num_states();
    let total: u128 = (0..=ell.min(s)).map(|i| binomial(s, i)).sum();
    guard(total, "l-ton")?;
    let states: Vec<StateId> = u.states().collect();
    let mut members = Vec::with_capacity(total as usize);
    for size in 0..=ell.min(s) {
        let mut idx: Vec<usize> = (0..size).collect();
        loop {
            let on: Vec<StateId> = idx.iter().map(|&i| states[i]).collect();
            members.push(indicator(&u, &on));
            // next combination in lexicographic order
            let mut i = size;
            while i > 0 && idx[i - 1] == s - size + i - 1 {
                i -= 1;
            }
            if i == 0 {
                break;
            }
            idx[i - 1] += 1;
            for j in i..size {
                idx[j] = idx[j - 1] + 1;
            }
        }
    }
    PolicyClass::new(u, members, ClassTag::Lton(ell))
}

/// Members free on column `j` only, for every bit pattern `b`.
fn active_column(u: &Universe, j: usize, h: usize) -> Vec<Policy> {
    (0..1usize << h)
        .map(|b| {
            let on: Vec<StateId> = (1..=h).filter(|l| b >> (l - 1) & 1 == 1).map(|l| StateId::new(l, j)).collect();
            indicator(u, &on)
        })
        .collect()
}

pub fn build_one_active(k: usize, h: usize) -> Result<PolicyClass> {
    check_kh(k, h)?;
    guard(1u128 << h.min(100), "one_active")?;
    let u = Universe::uniform(k, h, 2)?;
    let members = active_column(&u, 0, h);
    PolicyClass::new(u, members, ClassTag::OneActive)
}

pub fn build_all_active(k: usize, h: usize) -> Result<PolicyClass> {
    check_kh(k, h)?;
    guard((k as u128) << h.min(100), "all_active")?;
    let u = Universe::uniform(k, h, 2)?;
    let members = (0..k).flat_map(|j| active_column(&u, j, h)).collect();
    PolicyClass::dedup(u, members, ClassTag::AllActive)
}

/// Every policy on `K*H` states, in mixed-radix order.
pub fn build_tabular(k: usize, h: usize, a: usize) -> Result<PolicyClass> {
    check_kh(k, h)?;
    let s = (k * h) as u32;
    let count = (a as u128).checked_pow(s).unwrap_or(u128::MAX);
    guard(count, "tabular")?;
    let u = Universe::uniform(k, h, a)?;
    let members = (0..count as usize)
        .map(|mut code| {
            let mut table = vec![vec![0u16; k]; h];
            for row in table.iter_mut() {
                for slot in row.iter_mut() {
                    *slot = (code % a) as u16;
                    code /= a;
                }
            }
            Policy::from_layers(table)
        })
        .collect();
    PolicyClass::new(u, members, ClassTag::Tabular)
}

/// `A^H` members each playing one action per layer, on `A^(H-1)` states per layer.
///
/// The width is what the full `A`-ary tree needs at its widest layer, so the
/// class reaches `A^H` pairs on a universe-native deterministic MDP.
pub fn build_cb_chain(h: usize, a: usize) -> Result<PolicyClass> {
    check_kh(1, h)?;
    let count = (a as u128).checked_pow(h as u32).unwrap_or(u128::MAX);
    guard(count, "cb_chain")?;
    let width = (a as u128).pow(h as u32 - 1);
    guard(width, "cb_chain width")?;
    let u = Universe::uniform(width as usize, h, a)?;
    let members = (0..count as usize)
        .map(|mut code| {
            let per: Vec<usize> = (0..h)
                .map(|_| {
                    let x = code % a;
                    code /= a;
                    x
                })
                .collect();
            Policy::per_layer(&u, &per)
        })
        .collect();
    PolicyClass::new(u, members, ClassTag::CbChain)
}

/// Stationary thresholds: member `i` plays 1 on state `j` iff `j >= i`.
pub fn build_threshold(k: usize, h: usize) -> Result<PolicyClass> {
    check_kh(k, h)?;
    let u = Universe::uniform(k, h, 2)?;
    let members = (0..k)
        .map(|i| Policy::from_layers(vec![(0..k).map(|j| u16::from(j >= i)).collect(); h]))
        .collect();
    PolicyClass::new(u, members, ClassTag::Threshold)
}

/// One member per root-to-leaf path of the full binary tree of depth `H`.
///
/// Layer `h` has `2^(h-1)` states; node `s` at layer `h` has children
/// `2s` and `2s+1`. Member `b` follows the path whose `h`-th action is bit
/// `h-1` of `b` and plays 0 off the path.
pub fn build_tree_paths(h: usize) -> Result<PolicyClass> {
    check_kh(1, h)?;
    guard(1u128 << h.min(100), "tree path")?;
    let u = Universe::new((0..h).map(|l| 1usize << l).collect(), 2)?;
    let members = (0..1usize << h)
        .map(|b| {
            let mut p = Policy::zeros(&u);
            let mut node = 0;
            for l in 1..=h {
                let a = b >> (l - 1) & 1;
                p.set(StateId::new(l, node), a);
                node = 2 * node + a;
            }
            p
        })
        .collect();
    PolicyClass::new(u, members, ClassTag::Explicit)
}
