//! Sunflower certificates: a small core of Markovian policies plus a petal
//! state set per member, such that every partial trajectory a member can
//! produce either matches some core policy or passes through the member's
//! petal states.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::policy::{ClassTag, Policy, PolicyClass};
use crate::universe::{StateId, Universe};

/// Largest number of maximal state sequences the petal search will walk.
pub const PETAL_SEARCH_GUARD: u128 = 10_000_000;

#[derive(Clone, Debug)]
pub struct SunflowerCert {
    pub core: PolicyClass,
    /// `petals[m]` is the petal set of class member `m`, sorted.
    pub petals: Vec<Vec<StateId>>,
    pub k: usize,
    pub d: usize,
}

impl SunflowerCert {
    pub fn new(core: PolicyClass, mut petals: Vec<Vec<StateId>>, k: usize, d: usize) -> Result<Self> {
        if core.len() > k {
            return Err(Error::invalid(format!("core has {} members, more than K = {k}", core.len())));
        }
        for (m, p) in petals.iter_mut().enumerate() {
            p.sort();
            p.dedup();
            if p.len() > d {
                return Err(Error::invalid(format!("petal of member {m} has {} states, more than D = {d}", p.len())));
            }
            for &s in p.iter() {
                core.universe().check(s)?;
            }
        }
        Ok(SunflowerCert { core, petals, k, d })
    }

    /// Checks the cert has one petal per member on the class universe.
    pub fn check_covers(&self, class: &PolicyClass) -> Result<()> {
        if self.core.universe() != class.universe() {
            return Err(Error::invalid("cert core and class live on different universes"));
        }
        if self.petals.len() != class.len() {
            return Err(Error::invalid(format!(
                "cert has {} petals for a class of {} members",
                self.petals.len(),
                class.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum PetalVerdict {
    Ok,
    /// First failing partial trajectory in lexicographic order.
    Violation(Vec<(StateId, usize)>),
}

impl PetalVerdict {
    pub fn is_ok(&self) -> bool {
        matches!(self, PetalVerdict::Ok)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CertVerdict {
    /// (member index, witness) for every member that is not a petal.
    pub violations: Vec<(usize, Vec<(StateId, usize)>)>,
}

impl CertVerdict {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

fn search_size(universe: &Universe, max_span: usize) -> u128 {
    let h_max = universe.horizon();
    (1..=h_max)
        .map(|h| {
            (h..=h_max.min(h + max_span))
                .map(|i| universe.layer_size(i) as u128)
                .fold(1u128, |a, b| a.saturating_mul(b))
        })
        .fold(0u128, |a, b| a.saturating_add(b))
}

struct PetalSearch<'a> {
    policy: &'a Policy,
    core: &'a PolicyClass,
    petal: Vec<bool>,
    universe: &'a Universe,
    last: usize,
    path: Vec<(StateId, usize)>,
}

impl PetalSearch<'_> {
    /// Extends the current path at `layer`; `mask` holds core members still consistent.
    fn extend(&mut self, layer: usize, mask: &[bool]) -> bool {
        for i in 0..self.universe.layer_size(layer) {
            let s = StateId::new(layer, i);
            let a = self.policy.action(s);
            let first = self.path.is_empty();
            if !first && self.petal[self.universe.flat(s)] {
                // any longer segment through here also hits the petal
                continue;
            }
            let next: Vec<bool> = mask
                .iter()
                .zip(self.core.members())
                .map(|(&ok, c)| ok && c.action(s) == a)
                .collect();
            self.path.push((s, a));
            if !next.iter().any(|&x| x) {
                return true;
            }
            if layer < self.last && self.extend(layer + 1, &next) {
                return true;
            }
            self.path.pop();
        }
        false
    }
}

/// Exhaustive petal check over consecutive-layer segments of at most `max_span + 1` states.
pub fn verify_petal(policy: &Policy, core: &PolicyClass, s_pi: &[StateId], max_span: usize) -> Result<PetalVerdict> {
    let universe = core.universe();
    if !policy.fits(universe) {
        return Err(Error::invalid("policy does not fit the core universe"));
    }
    let size = search_size(universe, max_span);
    if size > PETAL_SEARCH_GUARD {
        return Err(Error::Guard(format!(
            "petal search would walk {size} sequences (limit {PETAL_SEARCH_GUARD})"
        )));
    }
    let mut petal = vec![false; universe.num_states()];
    for &s in s_pi {
        universe.check(s)?;
        petal[universe.flat(s)] = true;
    }
    let h_max = universe.horizon();
    let all = vec![true; core.len()];
    for h in 1..=h_max {
        let mut search = PetalSearch {
            policy,
            core,
            petal: petal.clone(),
            universe,
            last: h_max.min(h + max_span),
            path: Vec::new(),
        };
        if search.extend(h, &all) {
            return Ok(PetalVerdict::Violation(search.path));
        }
    }
    Ok(PetalVerdict::Ok)
}

pub fn verify_cert(class: &PolicyClass, cert: &SunflowerCert, max_span: usize) -> Result<CertVerdict> {
    cert.check_covers(class)?;
    let size = search_size(class.universe(), max_span);
    if size > PETAL_SEARCH_GUARD {
        return Err(Error::Guard(format!(
            "petal search would walk {size} sequences (limit {PETAL_SEARCH_GUARD})"
        )));
    }
    let verdicts: Vec<Result<PetalVerdict>> = class
        .members()
        .par_iter()
        .zip(cert.petals.par_iter())
        .map(|(p, s)| verify_petal(p, &cert.core, s, max_span))
        .collect();
    let mut violations = Vec::new();
    for (m, v) in verdicts.into_iter().enumerate() {
        if let PetalVerdict::Violation(w) = v? {
            violations.push((m, w));
        }
    }
    Ok(CertVerdict { violations })
}

/// `{pi_0} ∪ {pi_h}`: all-zeros plus "play 1 on layer h" for each h.
pub fn layer_core(universe: &Universe) -> Result<PolicyClass> {
    let h_max = universe.horizon();
    let mut members = vec![Policy::zeros(universe)];
    for h in 1..=h_max {
        let mut per = vec![0; h_max];
        per[h - 1] = 1;
        members.push(Policy::per_layer(universe, &per));
    }
    PolicyClass::new(universe.clone(), members, ClassTag::Explicit)
}

fn support(policy: &Policy, universe: &Universe) -> Vec<StateId> {
    universe.states().filter(|&s| policy.action(s) != 0).collect()
}

/// Constructive certificate for structured classes.
pub fn build_cert(class: &PolicyClass) -> Result<SunflowerCert> {
    let u = class.universe();
    let h_max = u.horizon();
    match class.tag() {
        ClassTag::Singleton | ClassTag::Lton(_) => {
            let core = layer_core(u)?;
            let petals: Vec<Vec<StateId>> = class.members().iter().map(|p| support(p, u)).collect();
            let d = match class.tag() {
                ClassTag::Lton(l) => l,
                _ => 1,
            };
            SunflowerCert::new(core, petals, h_max + 1, d)
        }
        ClassTag::OneActive | ClassTag::AllActive => {
            let core = layer_core(u)?;
            let petals = class
                .members()
                .iter()
                .map(|p| {
                    let col = support(p, u).first().map_or(0, |s| s.index);
                    (1..=h_max).map(|h| StateId::new(h, col)).collect()
                })
                .collect();
            SunflowerCert::new(core, petals, h_max + 1, h_max)
        }
        ClassTag::Tabular => {
            let members = (0..u.actions()).map(|a| Policy::constant(u, a)).collect();
            let core = PolicyClass::new(u.clone(), members, ClassTag::Explicit)?;
            let all: Vec<StateId> = u.states().collect();
            let petals = vec![all; class.len()];
            SunflowerCert::new(core, petals, u.actions(), u.num_states())
        }
        ClassTag::CbChain => {
            let core = PolicyClass::new(u.clone(), class.members().to_vec(), ClassTag::Explicit)?;
            SunflowerCert::new(core, vec![Vec::new(); class.len()], class.len(), 0)
        }
        tag => Err(Error::invalid(format!("no constructive certificate for {tag} classes; supply one"))),
    }
}
