//! Continued pretraining: method masks, batch streams, the learning-rate
//! schedule and the optimization loop.

use crate::adapters::{attach, merge_adapters, AdaptedModel, AdapterSpec};
use crate::corpora::{InstructionItem, PAD};
use crate::error::{Error, Result};
use crate::model::{forward_graph, Component, Checkpoint, Dropout, ModelConfig, ParamId, TokenBatch};
use crate::store::content_hash;
use crate::tensor::{AdamW, AdamWConfig, ParamSlot, Tape, Tensor};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    FullCpt,
    LoraCpt,
    LayerSelectiveFullCpt,
    Layra,
    /// Full training on a mixture of corpora.
    ParallelCpt,
}

impl MethodKind {
    pub fn name(self) -> &'static str {
        match self {
            MethodKind::FullCpt => "full_cpt",
            MethodKind::LoraCpt => "lora_cpt",
            MethodKind::LayerSelectiveFullCpt => "layer_selective_full_cpt",
            MethodKind::Layra => "layra",
            MethodKind::ParallelCpt => "parallel_cpt",
        }
    }
}

/// What a training run may modify.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub kind: MethodKind,
    /// Layers trained in full (layer-selective full CPT only).
    #[serde(default)]
    pub layers: BTreeSet<usize>,
    /// Adapter layout (LoRA CPT and LayRA only).
    #[serde(default)]
    pub adapter: Option<AdapterSpec>,
}

impl MethodSpec {
    pub fn full_cpt() -> Self {
        Self {
            kind: MethodKind::FullCpt,
            layers: BTreeSet::new(),
            adapter: None,
        }
    }

    pub fn parallel_cpt() -> Self {
        Self {
            kind: MethodKind::ParallelCpt,
            ..Self::full_cpt()
        }
    }

    /// Adapters on every layer; embedding and head frozen.
    pub fn lora_cpt(n_layers: usize) -> Self {
        Self {
            kind: MethodKind::LoraCpt,
            layers: BTreeSet::new(),
            adapter: Some(AdapterSpec::all_layers(n_layers)),
        }
    }

    /// Full training of the first `k_front` and last `k_back` layers plus
    /// embedding and head.
    pub fn layer_selective_full_cpt(n_layers: usize, k_front: usize, k_back: usize) -> Self {
        Self {
            kind: MethodKind::LayerSelectiveFullCpt,
            layers: crate::adapters::edge_layers(n_layers, k_front, k_back),
            adapter: None,
        }
    }

    /// Adapters on the first `k_front` and last `k_back` layers, embedding
    /// and head trained in full.
    pub fn layra(n_layers: usize, k_front: usize, k_back: usize) -> Self {
        Self {
            kind: MethodKind::Layra,
            layers: BTreeSet::new(),
            adapter: Some(AdapterSpec::layer_selective(n_layers, k_front, k_back)),
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let adapter_based = matches!(self.kind, MethodKind::LoraCpt | MethodKind::Layra);
        match (&self.adapter, adapter_based) {
            (Some(a), true) => a.validate(config)?,
            (None, true) => return Err(Error::config(format!("{} needs an adapter spec", self.kind.name()))),
            (Some(_), false) => {
                return Err(Error::config(format!("{} takes no adapter spec", self.kind.name())))
            }
            (None, false) => {}
        }
        if let Some(&l) = self.layers.iter().find(|&&l| l >= config.n_layers) {
            return Err(Error::config(format!("layer {l} outside 0..{}", config.n_layers)));
        }
        if self.kind == MethodKind::LayerSelectiveFullCpt && self.layers.is_empty() {
            return Err(Error::config("layer-selective full CPT needs at least one layer"));
        }
        Ok(())
    }

    /// Base parameters the optimizer updates directly.
    pub fn trainable_base(&self, config: &ModelConfig) -> BTreeSet<ParamId> {
        match self.kind {
            MethodKind::FullCpt | MethodKind::ParallelCpt => config.param_ids().into_iter().collect(),
            MethodKind::LayerSelectiveFullCpt => {
                let mut ids: BTreeSet<ParamId> = self
                    .layers
                    .iter()
                    .flat_map(|&l| Component::ALL.iter().map(move |&c| ParamId::layer(l, c)))
                    .collect();
                ids.insert(ParamId::Embedding);
                ids.insert(ParamId::Head);
                ids
            }
            MethodKind::LoraCpt | MethodKind::Layra => {
                let a = self.adapter.as_ref().expect("validated");
                let mut ids = BTreeSet::new();
                if a.train_embedding {
                    ids.insert(ParamId::Embedding);
                }
                if a.train_head {
                    ids.insert(ParamId::Head);
                }
                ids
            }
        }
    }

    /// Parameters that may differ from the base after training and merging;
    /// every other parameter must come back bitwise unchanged.
    pub fn may_change(&self, config: &ModelConfig) -> BTreeSet<ParamId> {
        match &self.adapter {
            Some(a) => a.touched_params(),
            None => self.trainable_base(config),
        }
    }

    fn adapter_spec(&self) -> AdapterSpec {
        self.adapter.clone().unwrap_or_else(|| AdapterSpec::new(BTreeSet::new()))
    }
}

/// Hyperparameters of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRunConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    /// Final learning rate as a fraction of `lr`.
    #[serde(default = "default_min_lr_ratio")]
    pub min_lr_ratio: f64,
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub seed: u64,
    #[serde(default)]
    pub corpora: Vec<String>,
    #[serde(default)]
    pub mixing_weights: Vec<f64>,
}

fn default_min_lr_ratio() -> f64 {
    0.1
}

fn default_clip() -> f64 {
    1.0
}

fn default_weight_decay() -> f64 {
    0.01
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.seq_len == 0 {
            return Err(Error::config("batch_size and seq_len must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(Error::config("min_lr_ratio outside [0, 1]"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::config("grad_clip must be positive"));
        }
        if self.mixing_weights.len() != self.corpora.len() {
            return Err(Error::config(format!(
                "{} corpora but {} mixing weights",
                self.corpora.len(),
                self.mixing_weights.len()
            )));
        }
        if self.mixing_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::config("mixing weights must be finite and non-negative"));
        }
        if !self.mixing_weights.is_empty() && self.mixing_weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::config("mixing weights sum to zero"));
        }
        Ok(())
    }
}

/// Linear warmup to `lr`, then cosine decay to `min_lr_ratio·lr` at the
/// last step. `step` counts from 0.
pub fn lr_at(run: &TrainRunConfig, step: usize) -> f64 {
    if step < run.warmup_steps {
        return run.lr * (step + 1) as f64 / run.warmup_steps as f64;
    }
    let span = run.steps.saturating_sub(run.warmup_steps).max(1);
    let progress = ((step - run.warmup_steps) as f64 / span as f64).min(1.0);
    let floor = run.lr * run.min_lr_ratio;
    floor + 0.5 * (run.lr - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// One training batch: inputs and, per position, the next-token target or
/// `None` where no loss is taken.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    pub inputs: TokenBatch,
    pub targets: Vec<Option<u32>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub elapsed_ms: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    /// Notable events such as corpus epochs rolling over.
    pub events: Vec<String>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        let mut out = crate::corpora::to_jsonl(&self.records)?;
        for e in &self.events {
            serde_json::to_writer(&mut out, &serde_json::json!({ "event": e }))
                .map_err(|e| Error::data(e.to_string()))?;
            out.push(b'\n');
        }
        Ok(out)
    }
}

pub trait BatchSource {
    fn next_batch(&mut self, log: &mut TrainLog) -> Result<TrainBatch>;
}

fn derived_rng(parts: &[u64]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.to_le_bytes());
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

struct ChunkCursor<'a> {
    name: String,
    tokens: &'a [u32],
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
}

/// Non-overlapping `seq_len + 1` windows from one or more corpora. Window
/// order is reshuffled every epoch; a whole batch comes from one corpus,
/// and corpora are visited by smooth weighted round robin.
pub struct CorpusBatches<'a> {
    cursors: Vec<ChunkCursor<'a>>,
    weights: Vec<f64>,
    credit: Vec<f64>,
    counts: Vec<usize>,
    batch_size: usize,
    seq_len: usize,
    seed: u64,
}

impl<'a> CorpusBatches<'a> {
    pub fn new(corpora: &[(&str, &'a [u32])], weights: &[f64], batch_size: usize, seq_len: usize, seed: u64) -> Result<Self> {
        if corpora.is_empty() {
            return Err(Error::data("no corpora to train on"));
        }
        if weights.len() != corpora.len() {
            return Err(Error::config(format!("{} corpora but {} weights", corpora.len(), weights.len())));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::config("mixing weights must be non-negative with a positive sum"));
        }
        let mut cursors = Vec::new();
        for (i, (name, tokens)) in corpora.iter().enumerate() {
            let n = tokens.len() / (seq_len + 1);
            if n == 0 {
                return Err(Error::data(format!(
                    "corpus {name} has {} tokens, fewer than one window of {}",
                    tokens.len(),
                    seq_len + 1
                )));
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut derived_rng(&[seed, i as u64, 0]));
            cursors.push(ChunkCursor {
                name: name.to_string(),
                tokens,
                order,
                pos: 0,
                epoch: 0,
            });
        }
        Ok(Self {
            weights: weights.iter().map(|w| w / total).collect(),
            credit: vec![0.0; cursors.len()],
            counts: vec![0; cursors.len()],
            cursors,
            batch_size,
            seq_len,
            seed,
        })
    }

    /// Batches drawn from each corpus so far.
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Index of the corpus the next batch comes from.
    fn pick(&mut self) -> usize {
        for (c, w) in self.credit.iter_mut().zip(&self.weights) {
            *c += w;
        }
        let mut best = 0;
        for i in 1..self.credit.len() {
            if self.credit[i] > self.credit[best] {
                best = i;
            }
        }
        self.credit[best] -= 1.0;
        self.counts[best] += 1;
        best
    }
}

impl BatchSource for CorpusBatches<'_> {
    fn next_batch(&mut self, log: &mut TrainLog) -> Result<TrainBatch> {
        let ci = self.pick();
        let w = self.seq_len + 1;
        let seed = self.seed;
        let cur = &mut self.cursors[ci];
        let mut tokens = Vec::with_capacity(self.batch_size * self.seq_len);
        let mut targets = Vec::with_capacity(self.batch_size * self.seq_len);
        for _ in 0..self.batch_size {
            if cur.pos == cur.order.len() {
                cur.epoch += 1;
                cur.pos = 0;
                cur.order.shuffle(&mut derived_rng(&[seed, ci as u64, cur.epoch]));
                log.events.push(format!(
                    "corpus {} exhausted; starting epoch {} with a fresh shuffle",
                    cur.name, cur.epoch
                ));
            }
            let start = cur.order[cur.pos] * w;
            cur.pos += 1;
            let chunk = &cur.tokens[start..start + w];
            tokens.extend_from_slice(&chunk[..self.seq_len]);
            targets.extend(chunk[1..].iter().map(|&t| Some(t)));
        }
        Ok(TrainBatch {
            inputs: TokenBatch {
                tokens,
                batch: self.batch_size,
                seq_len: self.seq_len,
            },
            targets,
        })
    }
}

/// Instruction items as prompt-then-answer sequences, with loss only on the
/// answer tokens.
pub struct InstructionBatches<'a> {
    items: &'a [InstructionItem],
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    batch_size: usize,
    seed: u64,
}

impl<'a> InstructionBatches<'a> {
    pub fn new(items: &'a [InstructionItem], batch_size: usize, seed: u64) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::data("no instruction items"));
        }
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut derived_rng(&[seed, u64::MAX, 0]));
        Ok(Self {
            items,
            order,
            pos: 0,
            epoch: 0,
            batch_size,
            seed,
        })
    }
}

/// Input, target pairs for teacher-forced training on `prompt ++ target`.
pub fn instruction_example(item: &InstructionItem) -> (Vec<u32>, Vec<Option<u32>>) {
    let full: Vec<u32> = item.prompt.iter().chain(&item.target).copied().collect();
    let inputs = full[..full.len() - 1].to_vec();
    let targets = (0..inputs.len())
        .map(|i| (i + 1 >= item.prompt.len()).then_some(full[i + 1]))
        .collect();
    (inputs, targets)
}

impl BatchSource for InstructionBatches<'_> {
    fn next_batch(&mut self, log: &mut TrainLog) -> Result<TrainBatch> {
        let mut seqs = Vec::with_capacity(self.batch_size);
        let mut tgts = Vec::with_capacity(self.batch_size);
        for _ in 0..self.batch_size {
            if self.pos == self.order.len() {
                self.epoch += 1;
                self.pos = 0;
                self.order.shuffle(&mut derived_rng(&[self.seed, u64::MAX, self.epoch]));
                log.events.push(format!("instruction items exhausted; starting epoch {}", self.epoch));
            }
            let (x, y) = instruction_example(&self.items[self.order[self.pos]]);
            self.pos += 1;
            seqs.push(x);
            tgts.push(y);
        }
        let inputs = TokenBatch::padded(&seqs, PAD);
        let mut targets = Vec::with_capacity(inputs.tokens.len());
        for y in tgts {
            let pad = inputs.seq_len - y.len();
            targets.extend(y);
            targets.extend(std::iter::repeat_n(None, pad));
        }
        Ok(TrainBatch { inputs, targets })
    }
}

fn slot_name(key: &(usize, Component), factor: &str) -> String {
    format!("layers.{}.{}.lora_{factor}", key.0, key.1.name())
}

/// Trains `base` under `method`, merging any adapters into the result.
///
/// With `steps == 0` the base checkpoint is returned unchanged, provenance
/// included. A non-finite loss or gradient aborts with the step index.
pub fn train(base: &Checkpoint, method: &MethodSpec, run: &TrainRunConfig, data: &mut dyn BatchSource) -> Result<(Checkpoint, TrainLog)> {
    let config = *base.config();
    method.validate(&config)?;
    run.validate()?;
    let mut log = TrainLog::default();
    if run.steps == 0 {
        log.events.push("zero steps requested; base returned unchanged".into());
        return Ok((base.clone(), log));
    }
    let mut model: AdaptedModel = attach(base, &method.adapter_spec(), run.seed)?;
    let trainable = method.trainable_base(&config);
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: run.weight_decay,
        ..AdamWConfig::default()
    });
    let mut dropout_rng = derived_rng(&[run.seed, 0xD50F]);
    let dropout_rate = method.adapter.as_ref().map_or(0.0, |a| a.dropout);
    let started = Instant::now();

    for step in 0..run.steps {
        let batch = data.next_batch(&mut log)?;
        let lr = lr_at(run, step);
        let abort = |e: Error| match e {
            Error::NonFinite(detail) => Error::NumericalAbort { step: step + 1, detail },
            other => other,
        };

        let mut tape = Tape::new();
        let w = model.weight_vars(&mut tape, &trainable);
        let dropout = (dropout_rate > 0.0).then_some(Dropout {
            rate: dropout_rate,
            rng: &mut dropout_rng,
        });
        let g = forward_graph(&mut tape, &config, &w, &batch.inputs, dropout).map_err(abort)?;
        let ix: Vec<Option<usize>> = batch.targets.iter().map(|t| t.map(|v| v as usize)).collect();
        let loss_var = tape.softmax_cross_entropy(g.logits, &ix).map_err(abort)?;
        let loss = tape.value(loss_var).data()[0];
        let mut grads = tape.backward(loss_var).map_err(abort)?;

        let mut base_grads: BTreeMap<ParamId, Tensor> = BTreeMap::new();
        for id in &trainable {
            base_grads.insert(*id, grads.take(w.params[id]).expect("trainable parameter has a gradient"));
        }
        let mut adapter_grads = BTreeMap::new();
        for (key, v) in &w.adapters {
            let a = grads.take(v.a).expect("adapter gradient");
            let b = grads.take(v.b).expect("adapter gradient");
            adapter_grads.insert(*key, (a, b));
        }
        drop(tape);

        let sq: f64 = base_grads.values().map(Tensor::sq_norm).sum::<f64>()
            + adapter_grads.values().map(|(a, b)| a.sq_norm() + b.sq_norm()).sum::<f64>();
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::NumericalAbort {
                step: step + 1,
                detail: "non-finite gradient norm".into(),
            });
        }
        if norm > run.grad_clip {
            let s = run.grad_clip / norm;
            let scale = |t: &mut Tensor| t.data_mut().iter_mut().for_each(|v| *v *= s);
            base_grads.values_mut().for_each(scale);
            adapter_grads.values_mut().for_each(|(a, b)| {
                scale(a);
                scale(b);
            });
        }

        let names: Vec<String> = base_grads
            .keys()
            .map(|id| id.to_string())
            .chain(adapter_grads.keys().flat_map(|k| [slot_name(k, "a"), slot_name(k, "b")]))
            .collect();
        let mut name_iter = names.iter();
        let mut slots = Vec::with_capacity(names.len());
        let AdaptedModel { base: mbase, adapters, .. } = &mut model;
        for ((id, value), g) in mbase.params_mut_in(&trainable).zip(base_grads.values()) {
            slots.push(ParamSlot {
                name: name_iter.next().unwrap(),
                value,
                grad: g,
                decay: id.decays(),
            });
        }
        for (pair, (ga, gb)) in adapters.values_mut().zip(adapter_grads.values()) {
            slots.push(ParamSlot {
                name: name_iter.next().unwrap(),
                value: &mut pair.a,
                grad: ga,
                decay: true,
            });
            slots.push(ParamSlot {
                name: name_iter.next().unwrap(),
                value: &mut pair.b,
                grad: gb,
                decay: true,
            });
        }
        opt.step(lr, &mut slots).map_err(abort)?;

        log.records.push(LogRecord {
            step: step + 1,
            loss,
            lr,
            grad_norm: norm,
            elapsed_ms: started.elapsed().as_millis() as u64,
        });
    }

    let merged = merge_adapters(&model)?;
    let mut provenance = crate::model::Provenance::new();
    provenance.insert("method".into(), method.kind.name().into());
    provenance.insert("parent".into(), content_hash(base)?);
    provenance.insert("corpora".into(), run.corpora.join(","));
    provenance.insert(
        "run".into(),
        serde_json::to_string(run).map_err(|e| Error::data(e.to_string()))?,
    );
    provenance.insert(
        "method_spec".into(),
        serde_json::to_string(method).map_err(|e| Error::data(e.to_string()))?,
    );
    Ok((merged.with_provenance(provenance), log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(steps: usize) -> TrainRunConfig {
        TrainRunConfig {
            steps,
            batch_size: 2,
            seq_len: 4,
            lr: 1e-3,
            warmup_steps: 10,
            min_lr_ratio: 0.1,
            grad_clip: 1.0,
            weight_decay: 0.0,
            seed: 1,
            corpora: vec![],
            mixing_weights: vec![],
        }
    }

    #[test]
    fn schedule_shape() {
        let r = run(110);
        assert!((lr_at(&r, 0) - 1e-4).abs() < 1e-18);
        assert_eq!(lr_at(&r, 9), 1e-3);
        assert_eq!(lr_at(&r, 10), 1e-3);
        assert!((lr_at(&r, 110) - 1e-4).abs() < 1e-15);
        let mid = lr_at(&r, 60);
        assert!((mid - 5.5e-4).abs() < 1e-12);
    }

    #[test]
    fn windows_shift_by_one() {
        let tokens: Vec<u32> = (0..50).collect();
        let mut b = CorpusBatches::new(&[("c", &tokens)], &[1.0], 2, 4, 0).unwrap();
        let batch = b.next_batch(&mut TrainLog::default()).unwrap();
        for r in 0..2 {
            for p in 0..4 {
                let x = batch.inputs.tokens[r * 4 + p];
                assert_eq!(batch.targets[r * 4 + p], Some(x + 1));
                assert_eq!(x % 5 + p as u32, x % 5 + p as u32);
            }
            assert_eq!(batch.inputs.tokens[r * 4] % 5, 0);
        }
    }

    #[test]
    fn exhaustion_cycles_and_logs() {
        let tokens: Vec<u32> = (0..10).collect();
        let mut b = CorpusBatches::new(&[("tiny", &tokens)], &[1.0], 3, 4, 0).unwrap();
        let mut log = TrainLog::default();
        b.next_batch(&mut log).unwrap();
        assert!(log.events.iter().any(|e| e.contains("tiny")));
    }

    #[test]
    fn too_short_corpus_is_an_error() {
        let tokens = [1u32, 2, 3];
        assert!(matches!(CorpusBatches::new(&[("s", &tokens)], &[1.0], 1, 4, 0), Err(Error::Data(_))));
    }

    #[test]
    fn instruction_targets_cover_answer_only() {
        let item = InstructionItem {
            language: "x".into(),
            task: crate::corpora::Task::Copy,
            words: vec![],
            prompt: vec![1, 4, 6, 20, 5],
            target: vec![20, 2],
        };
        let (x, y) = instruction_example(&item);
        assert_eq!(x, vec![1, 4, 6, 20, 5, 20]);
        assert_eq!(y, vec![None, None, None, None, Some(20), Some(2)]);
    }
}
