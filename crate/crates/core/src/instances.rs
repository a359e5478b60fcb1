//! Small fixed instances shared by tests, recipes and the CLI.

use crate::error::Result;
use crate::mdp::{LayeredMdp, MdpBuilder, RewardDist};
use crate::policy::{build_singletons, PolicyClass};
use crate::sunflower::{build_cert, SunflowerCert};
use crate::universe::StateId;

#[derive(Clone, Debug)]
pub struct PlantedInstance {
    pub mdp: LayeredMdp,
    pub class: PolicyClass,
    pub cert: SunflowerCert,
    /// Exact value of every member.
    pub values: Vec<f64>,
    pub optimal: usize,
}

/// Two-layer singleton instance with a 0.3 gap between the best member and the rest.
///
/// Layer 1 starts uniformly on `K` states. Action 0 leads to `2.0`, action 1
/// to `2.1`. At `2.0` action 0 pays Ber(1/2) and action 1 pays Ber(0.8);
/// everything else pays 0. The member playing 1 on `2.0` is worth 0.8, the
/// other layer-2 members 0.5, and layer-1 members `(K-1)/(2K)`.
pub fn planted_singletons(k: usize) -> Result<PlantedInstance> {
    let class = build_singletons(k, 2)?;
    let u = class.universe().clone();
    let mut b = MdpBuilder::new(u.clone());
    b.init(vec![1.0 / k as f64; k]);
    for i in 0..k {
        let s = StateId::new(1, i);
        b.goto(s, 0, 0);
        b.goto(s, 1, 1.min(k - 1));
    }
    let hub = StateId::new(2, 0);
    b.reward(hub, 0, RewardDist::Bernoulli(0.5));
    b.reward(hub, 1, RewardDist::Bernoulli(0.8));
    let mdp = b.build()?;
    let cert = build_cert(&class)?;
    let values: Vec<f64> = class.members().iter().map(|p| mdp.exact_policy_value(p)).collect();
    let optimal = crate::popler::argmax(&values);
    Ok(PlantedInstance { mdp, class, cert, values, optimal })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planted_values() {
        let inst = planted_singletons(6).unwrap();
        let best = inst.class.index_of(&{
            let mut p = crate::policy::Policy::zeros(inst.class.universe());
            p.set(StateId::new(2, 0), 1);
            p
        });
        assert_eq!(Some(inst.optimal), best);
        assert!((inst.values[inst.optimal] - 0.8).abs() < 1e-12);
        let mut rest: Vec<f64> = inst.values.clone();
        rest.remove(inst.optimal);
        let second = rest.iter().cloned().fold(f64::MIN, f64::max);
        assert!((inst.values[inst.optimal] - second - 0.3).abs() < 1e-12);
        assert!(inst.values[..6].iter().all(|v| (v - 5.0 / 12.0).abs() < 1e-12));
        assert_eq!((inst.cert.k, inst.cert.d), (3, 1));
    }
}
