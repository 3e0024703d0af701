//! Checkpoint arithmetic identities and properties.

use layra::arithmetic::{apply, delta, instruct, merge, series};
use layra::model::{init_model, Checkpoint, ModelConfig};
use layra::store::content_hash;
use layra::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_ff: 12,
        vocab_size: 13,
        max_seq_len: 8,
        seed: 0,
    }
}

/// A random checkpoint with entries spread over several binades.
fn random_ckpt(seed: u64) -> Checkpoint {
    let mut c = init_model(ModelConfig { seed, ..config() }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in c.config().param_ids() {
        for v in c.values_mut(id) {
            *v = rng.gen_range(-1.0..1.0) * 2f64.powi(rng.gen_range(-8..3));
        }
    }
    c
}

fn constant_ckpt(value: f64) -> Checkpoint {
    let mut c = init_model(config()).unwrap();
    for id in c.config().param_ids() {
        c.values_mut(id).fill(value);
    }
    c
}

fn bits_equal(a: &Checkpoint, b: &Checkpoint) -> bool {
    a.params().iter().all(|(id, t)| t.bits_eq(b.get(*id)))
}

fn all_values(c: &Checkpoint) -> Vec<f64> {
    c.params().values().flat_map(|t| t.data().to_vec()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn apply_one_recovers_phi(s1 in any::<u64>(), s2 in any::<u64>()) {
        let (theta, phi) = (random_ckpt(s1), random_ckpt(s2));
        let d = delta(&phi, &theta).unwrap();
        prop_assert!(bits_equal(&apply(&theta, &d, 1.0).unwrap(), &phi));
    }

    #[test]
    fn scale_zero_is_identity(s1 in any::<u64>(), s2 in any::<u64>(), s3 in any::<u64>()) {
        let (theta, phi, target) = (random_ckpt(s1), random_ckpt(s2), random_ckpt(s3));
        let d = delta(&phi, &theta).unwrap();
        prop_assert!(bits_equal(&apply(&target, &d, 0.0).unwrap(), &target));
        prop_assert!(bits_equal(&series(&target, &phi, &theta, 0.0).unwrap(), &target));
        prop_assert!(bits_equal(&instruct(&target, &phi, &theta, 0.0).unwrap(), &target));
    }

    #[test]
    fn merge_endpoints_and_swap(s1 in any::<u64>(), s2 in any::<u64>(), mu in 0.0f64..=1.0) {
        let (a, b) = (random_ckpt(s1), random_ckpt(s2));
        prop_assert!(bits_equal(&merge(&a, &b, 1.0).unwrap(), &a));
        prop_assert!(bits_equal(&merge(&a, &b, 0.0).unwrap(), &b));
        let ab = merge(&a, &b, mu).unwrap();
        let ba = merge(&b, &a, 1.0 - mu).unwrap();
        prop_assert!(bits_equal(&ab, &ba));
    }

    #[test]
    fn apply_composes(s1 in any::<u64>(), s2 in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let (theta, phi) = (random_ckpt(s1), random_ckpt(s2));
        let d = delta(&phi, &theta).unwrap();
        let twice = apply(&apply(&theta, &d, a).unwrap(), &d, b).unwrap();
        let once = apply(&theta, &d, a + b).unwrap();
        for (x, y) in all_values(&twice).iter().zip(all_values(&once)) {
            prop_assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn series_with_own_base_at_one_is_new(s1 in any::<u64>(), s2 in any::<u64>()) {
        let (prev, new) = (random_ckpt(s1), random_ckpt(s2));
        prop_assert!(bits_equal(&series(&prev, &new, &prev, 1.0).unwrap(), &new));
    }

    #[test]
    fn self_delta_is_zero_and_self_merge_is_self(s in any::<u64>(), mu in 0.0f64..=1.0) {
        let c = random_ckpt(s);
        prop_assert!(delta(&c, &c).unwrap().nonzero_params().is_empty());
        let m = merge(&c, &c, mu).unwrap();
        for (x, y) in all_values(&m).iter().zip(all_values(&c)) {
            prop_assert!((x - y).abs() <= 1e-15 * y.abs().max(1.0));
        }
    }

    #[test]
    fn perturbation_shows_up_only_where_made(s in any::<u64>(), pick in any::<prop::sample::Index>(), j in any::<prop::sample::Index>()) {
        let theta = random_ckpt(s);
        let ids = theta.config().param_ids();
        let id = ids[pick.index(ids.len())];
        let mut phi = theta.clone();
        let k = j.index(phi.get(id).len());
        phi.values_mut(id)[k] += 0.125;
        prop_assert_eq!(delta(&phi, &theta).unwrap().nonzero_params(), vec![id]);
    }
}

#[test]
fn scalar_worked_examples() {
    let all = |c: &Checkpoint, v: f64| all_values(c).iter().all(|&x| x == v);
    let it = instruct(&constant_ckpt(10.0), &constant_ckpt(4.0), &constant_ckpt(2.0), 0.7).unwrap();
    assert!(all(&it, 11.4));
    let d = delta(&constant_ckpt(4.0), &constant_ckpt(2.0)).unwrap();
    assert!(all(&apply(&constant_ckpt(10.0), &d, 0.7).unwrap(), 11.4));
    let s = series(&constant_ckpt(2.0), &constant_ckpt(6.0), &constant_ckpt(2.0), 0.5).unwrap();
    assert!(all(&s, 4.0));
    assert!(all(&merge(&constant_ckpt(1.0), &constant_ckpt(3.0), 0.5).unwrap(), 2.0));
}

#[test]
fn outputs_record_operands() {
    let (a, b) = (random_ckpt(1), random_ckpt(2));
    let m = merge(&a, &b, 0.25).unwrap();
    assert_eq!(m.provenance["op"], "merge");
    assert_eq!(m.provenance["first"], content_hash(&a).unwrap());
    assert_eq!(m.provenance["second"], content_hash(&b).unwrap());
    assert_eq!(m.provenance["mu"], "0.25");
}

#[test]
fn mu_out_of_range_and_non_finite_scales_rejected() {
    let (a, b) = (random_ckpt(1), random_ckpt(2));
    for mu in [-0.1, 1.5, f64::NAN] {
        assert!(matches!(merge(&a, &b, mu), Err(Error::Config(_))), "mu {mu}");
    }
    let d = delta(&a, &b).unwrap();
    assert!(matches!(apply(&a, &d, f64::INFINITY), Err(Error::Config(_))));
}

#[test]
fn shape_mismatch_names_parameter() {
    let a = random_ckpt(1);
    let other = init_model(ModelConfig { d_ff: 16, ..config() }).unwrap();
    match delta(&a, &other) {
        Err(Error::Incompatible { param, .. }) => assert_eq!(param, "layers.0.w_gate"),
        other => panic!("expected incompatibility, got {other:?}"),
    }
}

#[test]
fn overflowing_result_refused() {
    let a = constant_ckpt(1e308);
    let d = delta(&a, &constant_ckpt(-1e308)).unwrap();
    assert!(matches!(apply(&a, &d, 1.0), Err(Error::NonFinite(_))));
}
