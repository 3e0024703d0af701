//! Low-rank adapters attached to a frozen checkpoint, optionally restricted
//! to a subset of layers, and merged back into plain weights.
//!
//! An adapted linear map computes `x·Wᵀ + (α/r)·(drop(x)·Aᵀ)·Bᵀ` with
//! `A: r×d_in` and `B: d_out×r`. `B` starts at zero, so a fresh attachment
//! computes exactly what the frozen model computes.

use crate::error::{Error, Result};
use crate::model::{
    forward_graph, Checkpoint, Component, LoraVars, ModelConfig, ParamId, TokenBatch, WeightVars,
};
use crate::tensor::{matmul, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

/// Which maps get adapters and how they are scaled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub selected_layers: BTreeSet<usize>,
    /// Fully finetune the embedding table alongside the adapters.
    pub train_embedding: bool,
    /// Fully finetune the output head alongside the adapters.
    pub train_head: bool,
    pub target_components: BTreeSet<Component>,
}

/// The first `k_front` and last `k_back` layer indices of an `n_layers`
/// model.
pub fn edge_layers(n_layers: usize, k_front: usize, k_back: usize) -> BTreeSet<usize> {
    let front = 0..k_front.min(n_layers);
    let back = n_layers.saturating_sub(k_back)..n_layers;
    front.chain(back).collect()
}

impl AdapterSpec {
    /// Rank 8, α = 16, dropout 0.05 on every linear map of `layers`.
    pub fn new(layers: BTreeSet<usize>) -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            dropout: 0.05,
            selected_layers: layers,
            train_embedding: false,
            train_head: false,
            target_components: Component::LINEAR.iter().copied().collect(),
        }
    }

    /// LoRA on every layer, embedding and head frozen.
    pub fn all_layers(n_layers: usize) -> Self {
        Self::new((0..n_layers).collect())
    }

    /// LoRA on the first `k_front` and last `k_back` layers, with the
    /// embedding and head fully trained.
    pub fn layer_selective(n_layers: usize, k_front: usize, k_back: usize) -> Self {
        Self {
            train_embedding: true,
            train_head: true,
            ..Self::new(edge_layers(n_layers, k_front, k_back))
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::config("adapter rank must be positive"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("adapter alpha {} is not a finite non-negative value", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("adapter dropout {} outside [0, 1)", self.dropout)));
        }
        if let Some(&l) = self.selected_layers.iter().find(|&&l| l >= config.n_layers) {
            return Err(Error::config(format!(
                "selected layer {l} outside 0..{}",
                config.n_layers
            )));
        }
        if let Some(c) = self.target_components.iter().find(|c| !c.is_linear()) {
            return Err(Error::config(format!("{} is not a linear map", c.name())));
        }
        if !self.selected_layers.is_empty() {
            for &c in &self.target_components {
                let shape = config.shape_of(ParamId::layer(0, c));
                let limit = shape[0].min(shape[1]);
                if self.rank > limit {
                    return Err(Error::config(format!(
                        "rank {} exceeds min dimension {limit} of {}",
                        self.rank,
                        c.name()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Base parameters that training under this spec may modify once the
    /// adapters are merged.
    pub fn touched_params(&self) -> BTreeSet<ParamId> {
        let mut ids: BTreeSet<ParamId> = self
            .selected_layers
            .iter()
            .flat_map(|&l| self.target_components.iter().map(move |&c| ParamId::layer(l, c)))
            .collect();
        if self.train_embedding {
            ids.insert(ParamId::Embedding);
        }
        if self.train_head {
            ids.insert(ParamId::Head);
        }
        ids
    }
}

/// The two low-rank factors of one adapted map.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterPair {
    /// `r × d_in`
    pub a: Tensor,
    /// `d_out × r`
    pub b: Tensor,
}

/// `W + (α/r)·B·A`.
pub fn effective_weight(w: &Tensor, pair: &AdapterPair, alpha: f64, rank: usize) -> Result<Tensor> {
    let (ws, a_s, bs) = (w.shape(), pair.a.shape(), pair.b.shape());
    if ws.len() != 2
        || a_s.len() != 2
        || bs.len() != 2
        || a_s[0] != rank
        || bs[1] != rank
        || a_s[1] != ws[1]
        || bs[0] != ws[0]
    {
        return Err(Error::shape(format!(
            "adapter A {a_s:?}, B {bs:?} (rank {rank}) do not fit weight {ws:?}"
        )));
    }
    let update = matmul(&pair.b, &pair.a)?;
    let s = alpha / rank as f64;
    let data = w
        .data()
        .iter()
        .zip(update.data())
        .map(|(wv, uv)| wv + s * uv)
        .collect();
    Tensor::new(ws.to_vec(), data)
}

/// A checkpoint with adapters attached. The embedding and head inside
/// `base` are the ones training updates when the spec asks for it.
#[derive(Clone, Debug)]
pub struct AdaptedModel {
    pub(crate) base: Checkpoint,
    pub(crate) spec: AdapterSpec,
    pub(crate) adapters: BTreeMap<(usize, Component), AdapterPair>,
}

/// Attaches freshly initialized adapters: `A` uniform in `±1/√d_in`
/// (seeded), `B` zero.
pub fn attach(model: &Checkpoint, spec: &AdapterSpec, seed: u64) -> Result<AdaptedModel> {
    let config = model.config();
    spec.validate(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adapters = BTreeMap::new();
    for &layer in &spec.selected_layers {
        for &c in &spec.target_components {
            let shape = config.shape_of(ParamId::layer(layer, c));
            let (d_out, d_in) = (shape[0], shape[1]);
            let bound = 1.0 / (d_in as f64).sqrt();
            let a: Vec<f64> = (0..spec.rank * d_in)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            adapters.insert(
                (layer, c),
                AdapterPair {
                    a: Tensor::new(vec![spec.rank, d_in], a)?,
                    b: Tensor::zeros(&[d_out, spec.rank]),
                },
            );
        }
    }
    Ok(AdaptedModel {
        base: model.clone(),
        spec: spec.clone(),
        adapters,
    })
}

impl AdaptedModel {
    pub fn spec(&self) -> &AdapterSpec {
        &self.spec
    }

    pub fn base(&self) -> &Checkpoint {
        &self.base
    }

    pub fn adapters(&self) -> &BTreeMap<(usize, Component), AdapterPair> {
        &self.adapters
    }

    /// Number of scalars training may update: adapter factors plus the
    /// embedding and head when they are unfrozen.
    pub fn trainable_param_count(&self) -> usize {
        let adapters: usize = self.adapters.values().map(|p| p.a.len() + p.b.len()).sum();
        let cfg = self.base.config();
        let table = cfg.vocab_size * cfg.d_model;
        adapters
            + if self.spec.train_embedding { table } else { 0 }
            + if self.spec.train_head { table } else { 0 }
    }

    /// Places every weight on `tape`; adapters, and the embedding/head when
    /// unfrozen, become trainable leaves.
    pub(crate) fn weight_vars(&self, tape: &mut Tape, base_trainable: &BTreeSet<ParamId>) -> WeightVars {
        let params = self
            .base
            .params()
            .iter()
            .map(|(id, t)| (*id, tape.leaf(t.clone(), base_trainable.contains(id))))
            .collect();
        let scale = self.spec.scale();
        let adapters = self
            .adapters
            .iter()
            .map(|(key, pair)| {
                let a = tape.param(pair.a.clone());
                let b = tape.param(pair.b.clone());
                (*key, LoraVars { a, b, scale })
            })
            .collect();
        WeightVars { params, adapters }
    }

    /// Dropout-free forward through the adapter branches.
    pub fn forward_batch(&self, batch: &TokenBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let w = self.weight_vars(&mut tape, &BTreeSet::new());
        let g = forward_graph(&mut tape, self.base.config(), &w, batch, None)?;
        Ok(tape.value(g.logits).clone())
    }

    pub fn forward(&self, tokens: &[u32]) -> Result<Tensor> {
        self.forward_batch(&TokenBatch::single(tokens))
    }

    /// Base parameters that are trainable under this spec.
    pub fn trainable_base_params(&self) -> BTreeSet<ParamId> {
        let mut ids = BTreeSet::new();
        if self.spec.train_embedding {
            ids.insert(ParamId::Embedding);
        }
        if self.spec.train_head {
            ids.insert(ParamId::Head);
        }
        ids
    }

    /// Dropout-free loss and its gradients with respect to every trainable
    /// tensor.
    pub fn loss_and_gradients(&self, batch: &TokenBatch, targets: &[Option<u32>]) -> Result<(f64, AdapterGradients)> {
        let mut tape = Tape::new();
        let w = self.weight_vars(&mut tape, &self.trainable_base_params());
        let g = forward_graph(&mut tape, self.base.config(), &w, batch, None)?;
        let ix: Vec<Option<usize>> = targets.iter().map(|t| t.map(|v| v as usize)).collect();
        let l = tape.softmax_cross_entropy(g.logits, &ix)?;
        let mut grads = tape.backward(l)?;
        let base = self
            .trainable_base_params()
            .into_iter()
            .map(|id| (id, grads.take(w.params[&id]).expect("trainable base parameter")))
            .collect();
        let adapters = w
            .adapters
            .iter()
            .map(|(key, v)| {
                let pair = AdapterPair {
                    a: grads.take(v.a).expect("adapter A is trainable"),
                    b: grads.take(v.b).expect("adapter B is trainable"),
                };
                (*key, pair)
            })
            .collect();
        Ok((tape.value(l).data()[0], AdapterGradients { base, adapters }))
    }

    /// Mutable access to one adapter, for perturbation and tests.
    pub fn adapter_mut(&mut self, layer: usize, component: Component) -> Option<&mut AdapterPair> {
        self.adapters.get_mut(&(layer, component))
    }

    /// Mutable values of an unfrozen base parameter.
    pub fn base_values_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.base.values_mut(id)
    }
}

/// Gradients of an [`AdaptedModel`]'s trainable tensors.
pub struct AdapterGradients {
    pub base: BTreeMap<ParamId, Tensor>,
    pub adapters: BTreeMap<(usize, Component), AdapterPair>,
}

/// Folds every adapter into its frozen weight, giving a plain checkpoint
/// with the base model's parameter set.
pub fn merge_adapters(adapted: &AdaptedModel) -> Result<Checkpoint> {
    let mut merged = adapted.base.clone();
    for (&(layer, c), pair) in &adapted.adapters {
        let id = ParamId::layer(layer, c);
        let w = effective_weight(merged.get(id), pair, adapted.spec.alpha, adapted.spec.rank)?;
        merged.replace_param(id, w);
    }
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 4,
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            vocab_size: 13,
            max_seq_len: 16,
            seed: 3,
        }
    }

    #[test]
    fn edge_layer_selection() {
        assert_eq!(edge_layers(8, 2, 1), BTreeSet::from([0, 1, 7]));
        assert_eq!(edge_layers(32, 10, 2).len(), 12);
        assert_eq!(edge_layers(4, 3, 3), BTreeSet::from([0, 1, 2, 3]));
    }

    #[test]
    fn rank_and_layer_checks() {
        let m = init_model(cfg()).unwrap();
        let mut spec = AdapterSpec::all_layers(4);
        spec.rank = 9;
        assert!(matches!(attach(&m, &spec, 0), Err(Error::Config(_))));
        let spec = AdapterSpec::new(BTreeSet::from([4]));
        assert!(matches!(attach(&m, &spec, 0), Err(Error::Config(_))));
    }

    #[test]
    fn empty_spec_has_nothing_to_train() {
        let m = init_model(cfg()).unwrap();
        let a = attach(&m, &AdapterSpec::new(BTreeSet::new()), 0).unwrap();
        assert_eq!(a.trainable_param_count(), 0);
    }

    #[test]
    fn effective_weight_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = Tensor::randn(&[5, 6], 1.0, &mut rng);
        let pair = AdapterPair {
            a: Tensor::randn(&[2, 6], 1.0, &mut rng),
            b: Tensor::zeros(&[5, 2]),
        };
        assert!(effective_weight(&w, &pair, 16.0, 2).unwrap().bits_eq(&w));
        let pair = AdapterPair {
            b: Tensor::randn(&[5, 2], 1.0, &mut rng),
            ..pair
        };
        assert!(effective_weight(&w, &pair, 0.0, 2).unwrap().bits_eq(&w));
        assert!(matches!(effective_weight(&w, &pair, 1.0, 3), Err(Error::Shape(_))));
    }

    #[test]
    fn effective_weight_matches_dense_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let pair = AdapterPair {
            a: Tensor::randn(&[2, 3], 1.0, &mut rng),
            b: Tensor::randn(&[4, 2], 1.0, &mut rng),
        };
        let got = effective_weight(&w, &pair, 6.0, 2).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let ba: f64 = (0..2).map(|p| pair.b.data()[i * 2 + p] * pair.a.data()[p * 3 + j]).sum();
                let want = w.data()[i * 3 + j] + 3.0 * ba;
                assert!((got.data()[i * 3 + j] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn fresh_merge_is_base() {
        let m = init_model(cfg()).unwrap();
        let a = attach(&m, &AdapterSpec::layer_selective(4, 1, 1), 1).unwrap();
        assert!(merge_adapters(&a).unwrap().changed_params(&m).is_empty());
    }
}
