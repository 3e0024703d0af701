//! Training runs, freeze masks and adapter merging.

use layra::adapters::{attach, merge_adapters, AdapterSpec};
use layra::corpora::{desk_language_specs, generate_languages, sample_corpus, Vocabulary};
use layra::model::{forward, init_model, loss, Checkpoint, Component, ModelConfig, ParamId, TokenBatch};
use layra::store::content_hash;
use layra::tensor::Tensor;
use layra::trainer::{train, CorpusBatches, MethodSpec, TrainRunConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;

fn config(vocab: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 4,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: vocab,
        max_seq_len: 32,
        seed: 5,
    }
}

fn corpus() -> Vec<u32> {
    let v = Vocabulary::standard();
    let langs = generate_languages(&desk_language_specs(30), 1).unwrap();
    sample_corpus(&langs["anc"], &v, 20_000, 2)
}

fn run(steps: usize) -> TrainRunConfig {
    TrainRunConfig {
        steps,
        batch_size: 4,
        seq_len: 24,
        lr: 3e-3,
        warmup_steps: 5,
        min_lr_ratio: 0.1,
        grad_clip: 1.0,
        weight_decay: 0.01,
        seed: 9,
        corpora: vec![],
        mixing_weights: vec![],
    }
}

fn train_on(base: &Checkpoint, method: &MethodSpec, steps: usize, tokens: &[u32]) -> Checkpoint {
    let mut src = CorpusBatches::new(&[("anc", tokens)], &[1.0], 4, 24, 9).unwrap();
    train(base, method, &run(steps), &mut src).unwrap().0
}

fn changed(a: &Checkpoint, b: &Checkpoint) -> BTreeSet<ParamId> {
    a.params().iter().filter(|(id, t)| !t.bits_eq(b.get(**id))).map(|(id, _)| *id).collect()
}

fn layer_ids(layers: &[usize], comps: &[Component]) -> BTreeSet<ParamId> {
    layers.iter().flat_map(|&l| comps.iter().map(move |&c| ParamId::layer(l, c))).collect()
}

#[test]
fn zero_steps_returns_base_bitwise() {
    let tokens = corpus();
    let base = init_model(config(Vocabulary::standard().len())).unwrap();
    for method in [MethodSpec::full_cpt(), MethodSpec::layra(4, 1, 1)] {
        let out = train_on(&base, &method, 0, &tokens);
        assert_eq!(content_hash(&out).unwrap(), content_hash(&base).unwrap());
        assert_eq!(out.provenance, base.provenance);
    }
}

#[test]
fn masks_hold_for_every_method() {
    let tokens = corpus();
    let base = init_model(config(Vocabulary::standard().len())).unwrap();
    let tables: BTreeSet<ParamId> = [ParamId::Embedding, ParamId::Head].into();
    let linear = [Component::Wq, Component::Wk, Component::Wv, Component::Wo, Component::WGate, Component::WUp, Component::WDown];
    let cases = [
        ("full", MethodSpec::full_cpt(), base.config().param_ids().into_iter().collect::<BTreeSet<_>>()),
        ("lora", MethodSpec::lora_cpt(4), layer_ids(&[0, 1, 2, 3], &linear)),
        (
            "layer-selective",
            MethodSpec::layer_selective_full_cpt(4, 1, 1),
            layer_ids(&[0, 3], Component::ALL).union(&tables).copied().collect(),
        ),
        ("layra", MethodSpec::layra(4, 1, 1), layer_ids(&[0, 3], &linear).union(&tables).copied().collect()),
    ];
    for (name, method, allowed) in cases {
        let out = train_on(&base, &method, 12, &tokens);
        let diff = changed(&out, &base);
        assert!(diff.is_subset(&allowed), "{name}: changed outside mask: {:?}", diff.difference(&allowed).collect::<Vec<_>>());
        // Each method moves every linear map it is allowed to move.
        let moved_linear: BTreeSet<ParamId> = allowed
            .iter()
            .filter(|id| matches!(id, ParamId::Layer { component, .. } if component.is_linear()))
            .copied()
            .collect();
        assert!(moved_linear.is_subset(&diff), "{name}: some allowed map never changed");
    }
}

#[test]
fn training_is_deterministic_and_learns() {
    let tokens = corpus();
    let base = init_model(config(Vocabulary::standard().len())).unwrap();
    let a = train_on(&base, &MethodSpec::full_cpt(), 200, &tokens);
    let b = train_on(&base, &MethodSpec::full_cpt(), 200, &tokens);
    assert_eq!(content_hash(&a).unwrap(), content_hash(&b).unwrap());
    let seqs: Vec<Vec<u32>> = tokens.chunks(25).take(16).map(<[u32]>::to_vec).collect();
    let inputs: Vec<Vec<u32>> = seqs.iter().map(|s| s[..24].to_vec()).collect();
    let targets: Vec<Option<u32>> = seqs.iter().flat_map(|s| s[1..].iter().map(|&t| Some(t))).collect();
    let batch = TokenBatch::padded(&inputs, 0);
    assert!(loss(&a, &batch, &targets).unwrap() < loss(&base, &batch, &targets).unwrap() - 1.0);
    assert_eq!(a.provenance["parent"], content_hash(&base).unwrap());
    assert_eq!(a.provenance["method"], "full_cpt");
}

#[test]
fn desk_layra_trainable_count_matches_closed_form() {
    let cfg = ModelConfig {
        n_layers: 8,
        d_model: 32,
        n_heads: 4,
        d_ff: 64,
        vocab_size: 320,
        max_seq_len: 128,
        seed: 1,
    };
    let adapted = attach(&init_model(cfg).unwrap(), &AdapterSpec::layer_selective(8, 2, 1), 1).unwrap();
    let (d, f, v, r) = (32, 64, 320, 8);
    let per_layer = 4 * r * (d + d) + 2 * r * (d + f) + r * (f + d);
    assert_eq!(adapted.adapters().len(), 3 * 7);
    assert_eq!(adapted.trainable_param_count(), 3 * per_layer + 2 * v * d);
}

fn random_sequences(n: usize, vocab: u32, max_len: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.gen_range(1..=max_len);
            (0..len).map(|_| rng.gen_range(0..vocab)).collect()
        })
        .collect()
}

#[test]
fn fresh_adapters_preserve_the_base_function() {
    let base = init_model(config(40)).unwrap();
    let adapted = attach(&base, &AdapterSpec::layer_selective(4, 1, 1), 3).unwrap();
    for s in random_sequences(10, 40, 20, 1) {
        assert!(adapted.forward(&s).unwrap().bits_eq(&forward(&base, &s).unwrap()));
    }
    assert_eq!(content_hash(&merge_adapters(&adapted).unwrap()).unwrap(), content_hash(&base).unwrap());
}

#[test]
fn merged_adapters_match_adapter_forward() {
    let base = init_model(config(40)).unwrap();
    let mut adapted = attach(&base, &AdapterSpec::all_layers(4), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for l in 0..4 {
        for &c in Component::LINEAR {
            let pair = adapted.adapter_mut(l, c).unwrap();
            pair.b = Tensor::randn(pair.b.shape(), 0.2, &mut rng);
        }
    }
    let merged = merge_adapters(&adapted).unwrap();
    let mut worst: f64 = 0.0;
    for s in random_sequences(30, 40, 32, 2) {
        worst = worst.max(merged_diff(&merged, &adapted, &s));
    }
    assert!(worst < 1e-8, "{worst}");
    assert_eq!(changed(&merged, &base), layer_ids(&[0, 1, 2, 3], Component::LINEAR));
    let again = merge_adapters(&attach(&merged, &AdapterSpec::all_layers(4), 5).unwrap()).unwrap();
    assert_eq!(content_hash(&again).unwrap(), content_hash(&merged).unwrap());
}

fn merged_diff(merged: &Checkpoint, adapted: &layra::adapters::AdaptedModel, s: &[u32]) -> f64 {
    forward(merged, s).unwrap().max_abs_diff(&adapted.forward(s).unwrap())
}
