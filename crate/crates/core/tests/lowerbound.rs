use agnostic_rl::capacity::{spanning_capacity, DEFAULT_NODE_BUDGET};
use agnostic_rl::lowerbound::*;
use agnostic_rl::policy::Policy;
use agnostic_rl::seed::rng_from_seed;
use proptest::prelude::*;

/// Block search from the row side: some `k` rows share at least `ell` one-columns.
fn has_block_by_rows(rows: &[Vec<bool>], k: usize, ell: usize) -> bool {
    fn go(rows: &[Vec<bool>], start: usize, left: usize, common: &[bool], ell: usize) -> bool {
        if common.iter().filter(|&&b| b).count() < ell {
            return false;
        }
        if left == 0 {
            return true;
        }
        (start..rows.len()).any(|i| {
            let next: Vec<bool> = common.iter().zip(&rows[i]).map(|(a, b)| *a && *b).collect();
            go(rows, i + 1, left - 1, &next, ell)
        })
    }
    let d = rows[0].len();
    go(rows, 0, k, &vec![true; d], ell)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn block_free_agrees_with_row_enumeration(
        rows in prop::collection::vec(prop::collection::vec(any::<bool>(), 5), 1..9),
        k in 1usize..4,
        ell in 1usize..4,
    ) {
        prop_assert_eq!(is_block_free(&rows, k, ell).unwrap(), !has_block_by_rows(&rows, k, ell));
    }
}

fn small_family(seed: u64) -> (BlockFreeMatrix, agnostic_rl::PolicyClass) {
    let mut rng = rng_from_seed(seed);
    let (b, _) = sample_blockfree_matrix(0.25, 2, 16, SamplingMode::ColumnConditioned, &mut rng, 1000).unwrap();
    let class = build_pi_ell(&b, 6, 16).unwrap();
    (b, class)
}

#[test]
fn generated_family_has_its_properties() {
    for seed in 0..5 {
        let (b, class) = small_family(seed);
        assert!(b.check().unwrap().passed());
        assert!(check_pi_ell(&class, 0.25, 16).passed());
        assert_eq!(class.len(), b.n());
    }
}

#[test]
fn hard_values_match_dp_and_formula() {
    let (_, class) = small_family(7);
    let dec = Decoder::sample(16, 6, &mut rng_from_seed(8));
    for pistar in [0, class.len() / 2] {
        let inst = build_hard_mdp(&class, pistar, &dec).unwrap();
        let null = build_null_reward_mdp(&inst).unwrap();
        for (m, p) in class.members().iter().enumerate() {
            let v = exact_value_hard(&inst, p).unwrap();
            assert!((v - inst.mdp.exact_policy_value(p)).abs() < 1e-12);
            let want = if m == pistar { 0.5 + inst.relevant.len() as f64 / 64.0 } else { 0.5 };
            assert!((v - want).abs() < 1e-12, "member {m}");
            assert!((null.exact_policy_value(p) - 0.5).abs() < 1e-12);
        }
        // arbitrary policies off the class agree with the DP too
        let mut rng = rng_from_seed(pistar as u64);
        for _ in 0..20 {
            let u = class.universe();
            let p = Policy::from_layers(
                u.layer_sizes().iter().map(|&n| (0..n).map(|_| rand::Rng::gen_range(&mut rng, 0..2u16)).collect()).collect(),
            );
            assert!((exact_value_hard(&inst, &p).unwrap() - inst.mdp.exact_policy_value(&p)).abs() < 1e-12);
        }
    }
}

#[test]
fn reference_is_half_everywhere() {
    let m0 = build_reference_mdp(16, 6).unwrap();
    let (_, class) = small_family(2);
    for p in class.members() {
        assert!((m0.exact_policy_value(p) - 0.5).abs() < 1e-12);
    }
}

#[test]
fn small_lock_classes_have_modest_capacity() {
    // a few locks keep the exact search cheap
    let mut rng = rng_from_seed(1);
    let (b, _) = sample_blockfree_matrix(0.2, 2, 6, SamplingMode::ColumnConditioned, &mut rng, 1000).unwrap();
    let class = build_pi_ell(&b, 3, 6).unwrap();
    let r = spanning_capacity(&class, DEFAULT_NODE_BUDGET).unwrap();
    assert!(r.exact);
    assert!(r.value <= class.len() as u64);
}

#[test]
fn bandit_embedding_pays_arm_means() {
    let class = agnostic_rl::policy::build_all_active(2, 3).unwrap();
    let cap = spanning_capacity(&class, DEFAULT_NODE_BUDGET).unwrap();
    let w = cap.witness.unwrap();
    let zeros = vec![0.0; cap.value as usize];
    let e = build_bandit_embedding(&class, &w, &zeros).unwrap();
    assert!(class.members().iter().all(|p| e.mdp.exact_policy_value(p) == 0.0));
    for arm in 0..cap.value as usize {
        let mut means = zeros.clone();
        means[arm] = 1.0;
        let e = build_bandit_embedding(&class, &w, &means).unwrap();
        for (m, p) in class.members().iter().enumerate() {
            let want = if e.member_arm[m] == arm { 1.0 } else { 0.0 };
            assert_eq!(e.mdp.exact_policy_value(p), want);
        }
    }
}
