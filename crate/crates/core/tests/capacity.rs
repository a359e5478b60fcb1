mod common;

use agnostic_rl::capacity::*;
use agnostic_rl::mdp::generate;
use agnostic_rl::policy::*;
use agnostic_rl::seed::rng_from_seed;
use agnostic_rl::sunflower::{build_cert, verify_cert};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{brute_capacity, random_class, random_universe};

fn cap(class: &PolicyClass) -> CapacityResult {
    spanning_capacity(class, DEFAULT_NODE_BUDGET).unwrap()
}

#[test]
fn structured_classes_match_enumeration() {
    for k in 1..=3 {
        for h in 1..=3 {
            for class in [
                build_singletons(k, h).unwrap(),
                build_one_active(k, h).unwrap(),
                build_all_active(k, h).unwrap(),
                build_threshold(k, h).unwrap(),
            ] {
                let r = cap(&class);
                assert!(r.exact);
                assert_eq!(r.per_layer, brute_capacity(&class), "{} K={k} H={h}", class.tag());
            }
        }
    }
}

#[test]
fn ltons_match_enumeration() {
    for (k, h, ell) in [(2, 2, 2), (2, 3, 2), (3, 2, 1), (3, 3, 2)] {
        let class = build_ltons(k, h, ell).unwrap();
        assert_eq!(cap(&class).per_layer, brute_capacity(&class));
    }
}

#[test]
fn contextual_bandit_is_action_count() {
    for a in 2..=4 {
        let class = build_tabular(3, 1, a).unwrap();
        assert_eq!(cap(&class).value, a as u64);
    }
}

#[test]
fn cb_chain_fills_tree() {
    for h in 1..=4 {
        let r = cap(&build_cb_chain(h, 2).unwrap());
        assert_eq!(r.value, 1 << h);
        assert_eq!(r.per_layer, (1..=h).map(|l| 1u64 << l).collect::<Vec<_>>());
    }
}

#[test]
fn tree_paths_pass_cert_and_span_full_tree() {
    for h in 1..=4 {
        let class = build_tree_paths(h).unwrap();
        assert_eq!(cap(&class).value, 1 << h);
    }
    // the layer core with the path states as petals
    let class = build_tree_paths(3).unwrap();
    let u = class.universe();
    let core = agnostic_rl::sunflower::layer_core(u).unwrap();
    let petals = class
        .members()
        .iter()
        .map(|p| {
            let mut node = 0;
            let mut path = Vec::new();
            for l in 1..=3 {
                let s = agnostic_rl::StateId::new(l, node);
                path.push(s);
                node = 2 * node + p.action(s);
            }
            path
        })
        .collect();
    let cert = agnostic_rl::sunflower::SunflowerCert::new(core, petals, 4, 3).unwrap();
    assert!(verify_cert(&class, &cert, 2).unwrap().is_ok());
}

#[test]
fn witness_reaches_the_value_for_structured_classes() {
    for class in [build_singletons(4, 3).unwrap(), build_all_active(3, 3).unwrap(), build_cb_chain(3, 2).unwrap()] {
        let r = cap(&class);
        let w = r.witness.as_ref().unwrap();
        assert_eq!(w.mdp.universe(), class.universe());
        assert_eq!(cumulative_reachability(&class, &w.mdp, w.layer).unwrap(), r.value);
    }
}

#[test]
fn singleton_cert_is_valid_alongside_capacity() {
    let class = build_singletons(3, 3).unwrap();
    let cert = build_cert(&class).unwrap();
    assert!(verify_cert(&class, &cert, 2).unwrap().is_ok());
    assert_eq!(cap(&class).value, 4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn search_matches_enumeration(seed in any::<u64>(), actions in 2usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = random_universe(&mut rng, 3, 3, actions);
        let class = random_class(&mut rng, &u, 32);
        let r = cap(&class);
        prop_assert!(r.exact);
        prop_assert_eq!(&r.per_layer, &brute_capacity(&class));
    }

    #[test]
    fn value_respects_structural_bounds(seed in any::<u64>(), actions in 2usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = random_universe(&mut rng, 4, 4, actions);
        let class = random_class(&mut rng, &u, 48);
        let r = cap(&class);
        let a_h = (actions as u64).pow(u.horizon() as u32);
        let sa = (u.num_states() * actions) as u64;
        prop_assert!(r.value <= a_h.min(class.len() as u64).min(sa));
        prop_assert_eq!(r.value, *r.per_layer.iter().max().unwrap());
        let (tree, _) = tree_capacity(&class, DEFAULT_NODE_BUDGET);
        for (x, t) in r.per_layer.iter().zip(&tree) {
            prop_assert!(x <= t);
        }
    }

    #[test]
    fn coverability_is_dominated(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = random_universe(&mut rng, 3, 3, 2);
        let class = random_class(&mut rng, &u, 24);
        let r = cap(&class);
        for _ in 0..4 {
            let m = generate::random_mdp(&u, &mut rng);
            prop_assert!(coverability(&class, &m).unwrap() <= r.value as f64 + 1e-9);
        }
        let w = r.witness.unwrap();
        prop_assert!((coverability(&class, &w.mdp).unwrap() - r.value as f64).abs() < 1e-9);
    }

    #[test]
    fn coverability_equals_reachability_on_deterministic_mdps(seed in any::<u64>()) {
        let mut rng = rng_from_seed(seed);
        let u = random_universe(&mut rng, 3, 4, 2);
        let class = random_class(&mut rng, &u, 16);
        let m = generate::random_det_mdp(&u, &mut rng);
        let per = coverability_per_layer(&class, &m).unwrap();
        for h in 1..=u.horizon() {
            prop_assert!((per[h - 1] - cumulative_reachability(&class, &m, h).unwrap() as f64).abs() < 1e-12);
        }
    }
}
