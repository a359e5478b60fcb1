mod common;

use agnostic_rl::format::*;
use agnostic_rl::lowerbound::{sample_blockfree_matrix, Decoder, SamplingMode};
use agnostic_rl::mdp::generate;
use agnostic_rl::popler::exact_policy_mrp;
use agnostic_rl::seed::rng_from_seed;
use agnostic_rl::sunflower::build_cert;
use agnostic_rl::StateId;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mdp_round_trip(seed in any::<u64>(), det in any::<bool>()) {
        let mut rng = rng_from_seed(seed);
        let u = common::random_universe(&mut rng, 4, 4, 3);
        let m = if det { generate::random_det_mdp(&u, &mut rng) } else { generate::random_mdp(&u, &mut rng) };
        let text = write_mdp(&m);
        let back = read_mdp(&text).unwrap();
        prop_assert_eq!(write_mdp(&back), text);
        let p = common::random_policy(&mut rng, &u);
        prop_assert_eq!(back.exact_policy_value(&p), m.exact_policy_value(&p));
    }

    #[test]
    fn class_round_trip(seed in any::<u64>()) {
        let mut rng = rng_from_seed(seed);
        let u = common::random_universe(&mut rng, 4, 4, 3);
        let c = common::random_class(&mut rng, &u, 20);
        let back = read_pclass(&write_pclass(&c)).unwrap();
        prop_assert_eq!(back.members(), c.members());
        prop_assert_eq!(back.universe(), c.universe());
    }

    #[test]
    fn mrp_round_trip(seed in any::<u64>()) {
        let mut rng = rng_from_seed(seed);
        let u = common::random_universe(&mut rng, 3, 4, 2);
        let m = generate::random_mdp(&u, &mut rng);
        let pi = common::random_policy(&mut rng, &u);
        let petals: Vec<StateId> = u.states().filter(|s| s.index == 0).collect();
        let mrp = exact_policy_mrp(&m, &pi, &petals, &petals[..petals.len() / 2]).unwrap();
        let text = write_mrp(&mrp);
        let back = read_mrp(&text).unwrap();
        prop_assert_eq!(write_mrp(&back), text);
        prop_assert_eq!(back.value(), mrp.value());
    }
}

#[test]
fn structured_specs_round_trip() {
    for spec in ["singleton:K=3,H=4", "one_active:K=2,H=3", "all_active:K=2,H=2", "lton:K=2,H=2,L=2", "cb_chain:H=3,A=2"] {
        let c = class_from_spec(spec).unwrap();
        let back = read_pclass(&write_pclass(&c)).unwrap();
        assert_eq!(back.members(), c.members(), "{spec}");
        assert_eq!(back.tag(), c.tag());
    }
}

#[test]
fn cert_matrix_decoder_round_trip() {
    let c = class_from_spec("one_active:K=3,H=3").unwrap();
    let cert = build_cert(&c).unwrap();
    let back = read_cert(&write_cert(&cert)).unwrap();
    assert_eq!(back.core.members(), cert.core.members());
    assert_eq!(back.petals, cert.petals);
    assert_eq!((back.k, back.d), (cert.k, cert.d));

    let mut rng = rng_from_seed(3);
    let (b, _) = sample_blockfree_matrix(0.25, 2, 16, SamplingMode::ColumnConditioned, &mut rng, 1000).unwrap();
    assert_eq!(read_matrix(&write_matrix(&b)).unwrap(), b);
    let dec = Decoder::sample(16, 5, &mut rng);
    assert_eq!(read_decoder(&write_decoder(&dec)).unwrap(), dec);
}

#[test]
fn parse_errors_name_the_line() {
    let err = read_mdp("mdp 2 2\nlayer 1 1\nlayer 2 x\n").unwrap_err();
    assert!(matches!(err, agnostic_rl::Error::Parse { line: 3, .. }), "{err:?}");
    assert!(read_pclass("pclass 2 2 2\n").is_err());
}
