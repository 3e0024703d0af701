//! Reverse-mode gradients against central finite differences.

use layra::adapters::{attach, AdapterSpec};
use layra::model::{init_model, loss, loss_and_gradients, Component, ModelConfig, ParamId, TokenBatch};
use layra::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Checks every input entry of a tape op wrapped as `Σ w ⊙ op(inputs)`.
fn check_op(inputs: Vec<Tensor>, op: impl Fn(&mut Tape, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let eval = |xs: &[Tensor], weights: Option<&Tensor>| -> (f64, Tape, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = op(&mut tape, &vars);
        let w = weights.cloned().unwrap();
        let wv = tape.constant(w);
        let prod = tape.mul(out, wv).unwrap();
        let s = tape.sum(prod).unwrap();
        (tape.value(s).data()[0], tape, vars, s)
    };
    let out_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
        let o = op(&mut tape, &vars);
        tape.value(o).shape().to_vec()
    };
    let weights = Tensor::randn(&out_shape, 1.0, &mut rng);
    let (_, tape, vars, s) = eval(&inputs, Some(&weights));
    let grads = tape.backward(s).unwrap();
    for (i, x) in inputs.iter().enumerate() {
        let g = grads.get(vars[i]).unwrap();
        for j in 0..x.len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= H;
            let num = (eval(&plus, Some(&weights)).0 - eval(&minus, Some(&weights)).0) / (2.0 * H);
            let e = rel_err(g.data()[j], num);
            assert!(e < TOL, "input {i} entry {j}: analytic {} numeric {num} rel {e}", g.data()[j]);
        }
    }
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn matmul_and_transpose_products() {
    check_op(vec![rand_t(&[3, 4], 1), rand_t(&[4, 2], 2)], |t, v| t.matmul(v[0], v[1]).unwrap());
    check_op(vec![rand_t(&[3, 4], 3), rand_t(&[5, 4], 4)], |t, v| t.matmul_nt(v[0], v[1]).unwrap());
}

#[test]
fn elementwise_ops() {
    check_op(vec![rand_t(&[2, 3], 5), rand_t(&[2, 3], 6)], |t, v| t.add(v[0], v[1]).unwrap());
    check_op(vec![rand_t(&[2, 3], 7), rand_t(&[2, 3], 8)], |t, v| t.mul(v[0], v[1]).unwrap());
    check_op(vec![rand_t(&[2, 3], 9)], |t, v| t.scale(v[0], -1.7).unwrap());
    check_op(vec![rand_t(&[2, 3], 10)], |t, v| t.silu(v[0]).unwrap());
}

#[test]
fn rmsnorm_gradients() {
    check_op(vec![rand_t(&[3, 6], 11), rand_t(&[6], 12)], |t, v| t.rmsnorm(v[0], v[1]).unwrap());
}

#[test]
fn rope_gradients() {
    check_op(vec![rand_t(&[2 * 3, 8], 13)], |t, v| t.rope(v[0], 2, 3).unwrap());
}

#[test]
fn attention_gradients() {
    let (b, s, d) = (2, 4, 8);
    check_op(
        vec![rand_t(&[b * s, d], 14), rand_t(&[b * s, d], 15), rand_t(&[b * s, d], 16)],
        |t, v| t.causal_attention(v[0], v[1], v[2], 2, s).unwrap(),
    );
}

#[test]
fn embedding_gradients() {
    check_op(vec![rand_t(&[5, 3], 17)], |t, v| t.embedding(v[0], &[4, 0, 4, 2]).unwrap());
}

#[test]
fn cross_entropy_gradients() {
    check_op(vec![rand_t(&[4, 6], 18)], |t, v| {
        t.softmax_cross_entropy(v[0], &[Some(1), None, Some(5), Some(0)]).unwrap()
    });
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        n_layers: 3,
        d_model: 8,
        n_heads: 2,
        d_ff: 12,
        vocab_size: 11,
        max_seq_len: 16,
        seed: 21,
    }
}

fn tiny_batch() -> (TokenBatch, Vec<Option<u32>>) {
    let seqs = vec![vec![1, 4, 2, 9, 3], vec![7, 7, 0]];
    let batch = TokenBatch::padded(&seqs, 0);
    let targets = vec![Some(4), Some(2), Some(9), Some(3), Some(10), Some(7), Some(0), Some(5), None, None];
    (batch, targets)
}

#[test]
fn full_model_sampled_parameters() {
    let model = init_model(tiny_config()).unwrap();
    let (batch, targets) = tiny_batch();
    let (_, grads) = loss_and_gradients(&model, &batch, &targets).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ids = model.config().param_ids();
    let mut checked = 0;
    for id in &ids {
        for _ in 0..2 {
            let j = rng.gen_range(0..model.get(*id).len());
            let mut plus = model.clone();
            plus.values_mut(*id)[j] += H;
            let mut minus = model.clone();
            minus.values_mut(*id)[j] -= H;
            let num = (loss(&plus, &batch, &targets).unwrap() - loss(&minus, &batch, &targets).unwrap()) / (2.0 * H);
            let ana = grads[id].data()[j];
            assert!(rel_err(ana, num) < TOL, "{id}[{j}]: analytic {ana} numeric {num}");
            checked += 1;
        }
    }
    assert!(checked >= 20);
}

#[test]
fn adapter_factors_and_unfrozen_tables() {
    let base = init_model(tiny_config()).unwrap();
    let mut spec = AdapterSpec::layer_selective(3, 1, 1);
    spec.rank = 2;
    let mut adapted = attach(&base, &spec, 4).unwrap();
    // Non-zero B so the A gradients are not identically zero.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for l in [0, 2] {
        for &c in Component::LINEAR {
            let pair = adapted.adapter_mut(l, c).unwrap();
            pair.b = Tensor::randn(pair.b.shape(), 0.3, &mut rng);
        }
    }
    let (batch, targets) = tiny_batch();
    let (_, grads) = adapted.loss_and_gradients(&batch, &targets).unwrap();
    let eval = |m: &layra::adapters::AdaptedModel| m.loss_and_gradients(&batch, &targets).unwrap().0;

    let mut checked = 0;
    for (&(l, c), g) in &grads.adapters {
        for (which, j) in [(0, 1usize), (1, 3usize)] {
            let perturb = |delta: f64| {
                let mut m = adapted.clone();
                let pair = m.adapter_mut(l, c).unwrap();
                let t = if which == 0 { &mut pair.a } else { &mut pair.b };
                t.data_mut()[j] += delta;
                eval(&m)
            };
            let num = (perturb(H) - perturb(-H)) / (2.0 * H);
            let ana = if which == 0 { g.a.data()[j] } else { g.b.data()[j] };
            assert!(rel_err(ana, num) < TOL, "layer {l} {c:?} factor {which}: {ana} vs {num}");
            checked += 1;
        }
    }
    for id in [ParamId::Embedding, ParamId::Head] {
        let j = 13;
        let mut plus = adapted.clone();
        plus.base_values_mut(id)[j] += H;
        let mut minus = adapted.clone();
        minus.base_values_mut(id)[j] -= H;
        let num = (eval(&plus) - eval(&minus)) / (2.0 * H);
        assert!(rel_err(grads.base[&id].data()[j], num) < TOL);
        checked += 1;
    }
    assert_eq!(grads.base.keys().copied().collect::<BTreeSet<_>>(), BTreeSet::from([ParamId::Embedding, ParamId::Head]));
    assert!(checked >= 20);
}
