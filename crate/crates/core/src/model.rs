//! Decoder-only transformer: pre-norm blocks with RMSNorm, rotary
//! attention and a gated SiLU feed-forward, untied embedding and head.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Eight layers, width 128.
    pub fn desk(vocab_size: usize, seed: u64) -> Self {
        Self {
            n_layers: 8,
            d_model: 128,
            n_heads: 4,
            d_ff: 256,
            vocab_size,
            max_seq_len: 64,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if (self.d_model / self.n_heads) % 2 != 0 {
            return Err(Error::config("rotary embeddings need an even head dimension"));
        }
        Ok(())
    }

    /// Errors unless `other` describes the same architecture; the init seed
    /// is ignored.
    pub fn check_compatible(&self, other: &ModelConfig) -> Result<()> {
        let pairs = [
            ("n_layers", self.n_layers, other.n_layers),
            ("d_model", self.d_model, other.d_model),
            ("n_heads", self.n_heads, other.n_heads),
            ("d_ff", self.d_ff, other.d_ff),
            ("vocab_size", self.vocab_size, other.vocab_size),
            ("max_seq_len", self.max_seq_len, other.max_seq_len),
        ];
        for (name, a, b) in pairs {
            if a != b {
                return Err(Error::incompatible(name, format!("{a} vs {b}")));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn shape_of(&self, id: ParamId) -> Vec<usize> {
        let (d, f, v) = (self.d_model, self.d_ff, self.vocab_size);
        match id {
            ParamId::Embedding | ParamId::Head => vec![v, d],
            ParamId::FinalNorm => vec![d],
            ParamId::Layer { component, .. } => match component {
                Component::AttnNorm | Component::FfnNorm => vec![d],
                Component::Wq | Component::Wk | Component::Wv | Component::Wo => vec![d, d],
                Component::WGate | Component::WUp => vec![f, d],
                Component::WDown => vec![d, f],
            },
        }
    }

    /// Every parameter id in canonical order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![ParamId::Embedding];
        for index in 0..self.n_layers {
            for &component in Component::ALL {
                ids.push(ParamId::Layer { index, component });
            }
        }
        ids.push(ParamId::FinalNorm);
        ids.push(ParamId::Head);
        ids
    }

    /// `2·V·d + d + L·(4d² + 3·d·d_ff + 2d)`.
    pub fn param_count(&self) -> usize {
        let (d, f, v, l) = (self.d_model, self.d_ff, self.vocab_size, self.n_layers);
        2 * v * d + d + l * (4 * d * d + 3 * d * f + 2 * d)
    }
}

/// Named sub-tensor of a transformer block, in canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    AttnNorm,
    Wq,
    Wk,
    Wv,
    Wo,
    FfnNorm,
    WGate,
    WUp,
    WDown,
}

impl Component {
    pub const ALL: &'static [Component] = &[
        Component::AttnNorm,
        Component::Wq,
        Component::Wk,
        Component::Wv,
        Component::Wo,
        Component::FfnNorm,
        Component::WGate,
        Component::WUp,
        Component::WDown,
    ];

    /// The linear maps of a block, i.e. everything LoRA can wrap.
    pub const LINEAR: &'static [Component] = &[
        Component::Wq,
        Component::Wk,
        Component::Wv,
        Component::Wo,
        Component::WGate,
        Component::WUp,
        Component::WDown,
    ];

    pub fn is_linear(self) -> bool {
        !matches!(self, Component::AttnNorm | Component::FfnNorm)
    }

    pub fn name(self) -> &'static str {
        match self {
            Component::AttnNorm => "attn_norm",
            Component::Wq => "wq",
            Component::Wk => "wk",
            Component::Wv => "wv",
            Component::Wo => "wo",
            Component::FfnNorm => "ffn_norm",
            Component::WGate => "w_gate",
            Component::WUp => "w_up",
            Component::WDown => "w_down",
        }
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Component::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::config(format!("unknown component {s:?}")))
    }
}

/// Structured parameter identifier. The derived ordering is the canonical
/// checkpoint order: embedding, layers by index then component, final norm,
/// head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    Embedding,
    Layer { index: usize, component: Component },
    FinalNorm,
    Head,
}

impl ParamId {
    pub fn layer(index: usize, component: Component) -> Self {
        ParamId::Layer { index, component }
    }

    pub fn layer_index(self) -> Option<usize> {
        match self {
            ParamId::Layer { index, .. } => Some(index),
            _ => None,
        }
    }

    /// Norm gains are not weight-decayed.
    pub fn decays(self) -> bool {
        match self {
            ParamId::FinalNorm => false,
            ParamId::Layer { component, .. } => component.is_linear(),
            ParamId::Embedding | ParamId::Head => true,
        }
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamId::Embedding => f.write_str("embedding"),
            ParamId::FinalNorm => f.write_str("final_norm"),
            ParamId::Head => f.write_str("head"),
            ParamId::Layer { index, component } => write!(f, "layers.{index}.{}", component.name()),
        }
    }
}

impl FromStr for ParamId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "embedding" => return Ok(ParamId::Embedding),
            "final_norm" => return Ok(ParamId::FinalNorm),
            "head" => return Ok(ParamId::Head),
            _ => {}
        }
        let mut parts = s.splitn(3, '.');
        match (parts.next(), parts.next(), parts.next()) {
            (Some("layers"), Some(idx), Some(comp)) => {
                let index = idx
                    .parse()
                    .map_err(|_| Error::config(format!("bad layer index in {s:?}")))?;
                Ok(ParamId::Layer {
                    index,
                    component: comp.parse()?,
                })
            }
            _ => Err(Error::config(format!("unknown parameter id {s:?}"))),
        }
    }
}

/// Free-form provenance record. Keys are sorted, which keeps serialization
/// canonical.
pub type Provenance = BTreeMap<String, String>;

/// Model weights plus their configuration and provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    config: ModelConfig,
    params: BTreeMap<ParamId, Tensor>,
    pub provenance: Provenance,
}

impl Checkpoint {
    /// Checks that `params` holds exactly the parameters `config` implies.
    pub fn new(
        config: ModelConfig,
        params: BTreeMap<ParamId, Tensor>,
        provenance: Provenance,
    ) -> Result<Self> {
        config.validate()?;
        let ids = config.param_ids();
        if params.len() != ids.len() {
            let missing = ids.iter().find(|id| !params.contains_key(id));
            let extra = params.keys().find(|id| !ids.contains(id));
            let which = missing.or(extra).map(|id| id.to_string()).unwrap_or_default();
            return Err(Error::incompatible(
                which,
                format!("expected {} parameters, found {}", ids.len(), params.len()),
            ));
        }
        for id in ids {
            let t = params
                .get(&id)
                .ok_or_else(|| Error::incompatible(id.to_string(), "missing parameter"))?;
            let want = config.shape_of(id);
            if t.shape() != want.as_slice() {
                return Err(Error::incompatible(
                    id.to_string(),
                    format!("shape {:?}, config implies {want:?}", t.shape()),
                ));
            }
        }
        Ok(Self {
            config,
            params,
            provenance,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<ParamId, Tensor> {
        &self.params
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[&id]
    }

    /// Mutable access to one tensor. Shapes are fixed by the config, so
    /// only values may change.
    pub fn values_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.params
            .get_mut(&id)
            .expect("every config parameter is present")
            .data_mut()
    }

    /// Mutable tensors for `ids`, in canonical order.
    pub(crate) fn params_mut_in<'a>(&'a mut self, ids: &'a BTreeSet<ParamId>) -> impl Iterator<Item = (ParamId, &'a mut Tensor)> + 'a {
        self.params
            .iter_mut()
            .filter(move |(id, _)| ids.contains(id))
            .map(|(id, t)| (*id, t))
    }

    pub(crate) fn replace_param(&mut self, id: ParamId, t: Tensor) {
        debug_assert_eq!(t.shape(), self.config.shape_of(id).as_slice());
        self.params.insert(id, t);
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    /// Ids whose tensors differ bitwise between `self` and `other`.
    pub fn changed_params(&self, other: &Checkpoint) -> Vec<ParamId> {
        self.params
            .iter()
            .filter(|(id, t)| other.params.get(id).is_none_or(|o| !o.bits_eq(t)))
            .map(|(id, _)| *id)
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }
}

/// Deterministic seeded initialization.
pub fn init_model(config: ModelConfig) -> Result<Checkpoint> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let residual_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
    let mut params = BTreeMap::new();
    for id in config.param_ids() {
        let shape = config.shape_of(id);
        let t = match id {
            ParamId::FinalNorm => Tensor::full(&shape, 1.0),
            ParamId::Embedding => Tensor::randn(&shape, 1.0, &mut rng),
            // Readout scaled by 1/d so untrained logits are close to uniform.
            ParamId::Head => Tensor::randn(&shape, 1.0 / config.d_model as f64, &mut rng),
            ParamId::Layer { component, .. } => {
                let fan_in = shape.get(1).copied().unwrap_or(1) as f64;
                match component {
                    Component::AttnNorm | Component::FfnNorm => Tensor::full(&shape, 1.0),
                    Component::Wo | Component::WDown => {
                        Tensor::randn(&shape, residual_scale / fan_in.sqrt(), &mut rng)
                    }
                    _ => Tensor::randn(&shape, 1.0 / fan_in.sqrt(), &mut rng),
                }
            }
        };
        params.insert(id, t);
    }
    let mut provenance = Provenance::new();
    provenance.insert("method".into(), "init".into());
    provenance.insert("seed".into(), config.seed.to_string());
    Checkpoint::new(config, params, provenance)
}

/// A batch of equal-length token sequences, row-major `batch × seq_len`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub tokens: Vec<u32>,
    pub batch: usize,
    pub seq_len: usize,
}

impl TokenBatch {
    pub fn single(tokens: &[u32]) -> Self {
        Self {
            tokens: tokens.to_vec(),
            batch: 1,
            seq_len: tokens.len(),
        }
    }

    /// Right-pads every sequence with `pad` to the longest length. Causal
    /// masking means padding never influences the real positions.
    pub fn padded(seqs: &[Vec<u32>], pad: u32) -> Self {
        let seq_len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut tokens = Vec::with_capacity(seqs.len() * seq_len);
        for s in seqs {
            tokens.extend_from_slice(s);
            tokens.extend(std::iter::repeat_n(pad, seq_len - s.len()));
        }
        Self {
            tokens,
            batch: seqs.len(),
            seq_len,
        }
    }

    pub(crate) fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.seq_len == 0 || self.batch == 0 {
            return Err(Error::shape("empty token batch"));
        }
        if self.tokens.len() != self.batch * self.seq_len {
            return Err(Error::shape(format!(
                "{} tokens for a {}×{} batch",
                self.tokens.len(),
                self.batch,
                self.seq_len
            )));
        }
        if self.seq_len > config.max_seq_len {
            return Err(Error::shape(format!(
                "sequence length {} exceeds max_seq_len {}",
                self.seq_len, config.max_seq_len
            )));
        }
        if let Some(&bad) = self.tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
            return Err(Error::Index(format!(
                "token id {bad} outside vocabulary of {}",
                config.vocab_size
            )));
        }
        Ok(())
    }
}

/// Tape handles for one low-rank adapter.
pub(crate) struct LoraVars {
    pub a: Var,
    pub b: Var,
    pub scale: f64,
}

/// Tape handles for every weight a forward pass reads.
pub(crate) struct WeightVars {
    pub params: BTreeMap<ParamId, Var>,
    pub adapters: BTreeMap<(usize, Component), LoraVars>,
}

impl WeightVars {
    /// All parameters as constants, no adapters.
    pub fn constants(tape: &mut Tape, ckpt: &Checkpoint) -> Self {
        let params = ckpt
            .params
            .iter()
            .map(|(id, t)| (*id, tape.constant(t.clone())))
            .collect();
        Self {
            params,
            adapters: BTreeMap::new(),
        }
    }
}

/// Inverted dropout applied to adapter-branch inputs.
pub(crate) struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

pub(crate) struct Graph {
    pub logits: Var,
    /// Residual stream before layer 0 (the embeddings) and after every
    /// layer, so `hidden.len() == n_layers + 1`.
    pub hidden: Vec<Var>,
}

fn linear(
    tape: &mut Tape,
    x: Var,
    w: Var,
    adapter: Option<&LoraVars>,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<Var> {
    let base = tape.matmul_nt(x, w)?;
    let Some(lora) = adapter else { return Ok(base) };
    let input = match dropout {
        Some(d) if d.rate > 0.0 => {
            let shape = tape.value(x).shape().to_vec();
            let keep = 1.0 - d.rate;
            let n: usize = shape.iter().product();
            let mask: Vec<f64> = (0..n)
                .map(|_| if d.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            let m = tape.constant(Tensor::from_parts(shape, mask));
            tape.mul(x, m)?
        }
        _ => x,
    };
    let down = tape.matmul_nt(input, lora.a)?;
    let up = tape.matmul_nt(down, lora.b)?;
    let scaled = tape.scale(up, lora.scale)?;
    tape.add(base, scaled)
}

pub(crate) fn forward_graph(
    tape: &mut Tape,
    config: &ModelConfig,
    w: &WeightVars,
    batch: &TokenBatch,
    mut dropout: Option<Dropout<'_>>,
) -> Result<Graph> {
    batch.validate(config)?;
    let ids: Vec<usize> = batch.tokens.iter().map(|&t| t as usize).collect();
    let (nh, t) = (config.n_heads, batch.seq_len);
    let mut x = tape.embedding(w.params[&ParamId::Embedding], &ids)?;
    let mut hidden = vec![x];
    for l in 0..config.n_layers {
        let p = |c| w.params[&ParamId::layer(l, c)];
        let ad = |c| w.adapters.get(&(l, c));

        let h = tape.rmsnorm(x, p(Component::AttnNorm))?;
        let q = linear(tape, h, p(Component::Wq), ad(Component::Wq), &mut dropout)?;
        let k = linear(tape, h, p(Component::Wk), ad(Component::Wk), &mut dropout)?;
        let v = linear(tape, h, p(Component::Wv), ad(Component::Wv), &mut dropout)?;
        let q = tape.rope(q, nh, t)?;
        let k = tape.rope(k, nh, t)?;
        let att = tape.causal_attention(q, k, v, nh, t)?;
        let o = linear(tape, att, p(Component::Wo), ad(Component::Wo), &mut dropout)?;
        x = tape.add(x, o)?;

        let h = tape.rmsnorm(x, p(Component::FfnNorm))?;
        let gate = linear(tape, h, p(Component::WGate), ad(Component::WGate), &mut dropout)?;
        let gate = tape.silu(gate)?;
        let up = linear(tape, h, p(Component::WUp), ad(Component::WUp), &mut dropout)?;
        let g = tape.mul(gate, up)?;
        let down = linear(tape, g, p(Component::WDown), ad(Component::WDown), &mut dropout)?;
        x = tape.add(x, down)?;
        hidden.push(x);
    }
    let logits = project(tape, w, x)?;
    Ok(Graph { logits, hidden })
}

fn project(tape: &mut Tape, w: &WeightVars, x: Var) -> Result<Var> {
    let normed = tape.rmsnorm(x, w.params[&ParamId::FinalNorm])?;
    tape.matmul_nt(normed, w.params[&ParamId::Head])
}

/// Logits `[batch·seq_len × vocab]` for a batch.
pub fn forward_batch(model: &Checkpoint, batch: &TokenBatch) -> Result<Tensor> {
    let mut tape = Tape::new();
    let w = WeightVars::constants(&mut tape, model);
    let g = forward_graph(&mut tape, &model.config, &w, batch, None)?;
    Ok(tape.value(g.logits).clone())
}

/// Logits `[len × vocab]` for one sequence.
pub fn forward(model: &Checkpoint, tokens: &[u32]) -> Result<Tensor> {
    forward_batch(model, &TokenBatch::single(tokens))
}

fn targets_as_indices(targets: &[Option<u32>]) -> Vec<Option<usize>> {
    targets.iter().map(|t| t.map(|v| v as usize)).collect()
}

/// Mean next-token cross-entropy over the positions whose target is `Some`.
pub fn loss(model: &Checkpoint, batch: &TokenBatch, targets: &[Option<u32>]) -> Result<f64> {
    let mut tape = Tape::new();
    let w = WeightVars::constants(&mut tape, model);
    let g = forward_graph(&mut tape, &model.config, &w, batch, None)?;
    let l = tape.softmax_cross_entropy(g.logits, &targets_as_indices(targets))?;
    Ok(tape.value(l).data()[0])
}

/// [`loss`] together with its gradient for every parameter.
pub fn loss_and_gradients(
    model: &Checkpoint,
    batch: &TokenBatch,
    targets: &[Option<u32>],
) -> Result<(f64, BTreeMap<ParamId, Tensor>)> {
    let mut tape = Tape::new();
    let params: BTreeMap<ParamId, Var> = model
        .params
        .iter()
        .map(|(id, t)| (*id, tape.param(t.clone())))
        .collect();
    let w = WeightVars {
        params,
        adapters: BTreeMap::new(),
    };
    let g = forward_graph(&mut tape, &model.config, &w, batch, None)?;
    let l = tape.softmax_cross_entropy(g.logits, &targets_as_indices(targets))?;
    let mut grads = tape.backward(l)?;
    let out = w
        .params
        .iter()
        .map(|(id, v)| (*id, grads.take(*v).expect("every parameter is trainable")))
        .collect();
    Ok((tape.value(l).data()[0], out))
}

/// Residual stream `[len × d_model]` entering layer `layer`; `layer == 0`
/// is the embedding lookup and `layer == n_layers` is the input to the
/// final norm.
pub fn hidden_state(model: &Checkpoint, tokens: &[u32], layer: usize) -> Result<Tensor> {
    if layer > model.config.n_layers {
        return Err(Error::Index(format!(
            "layer {layer} outside 0..={}",
            model.config.n_layers
        )));
    }
    let mut tape = Tape::new();
    let w = WeightVars::constants(&mut tape, model);
    let g = forward_graph(&mut tape, &model.config, &w, &TokenBatch::single(tokens), None)?;
    Ok(tape.value(g.hidden[layer]).clone())
}

/// Every residual-stream snapshot (`n_layers + 1` of them) for one sequence.
pub fn hidden_states(model: &Checkpoint, tokens: &[u32]) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let w = WeightVars::constants(&mut tape, model);
    let g = forward_graph(&mut tape, &model.config, &w, &TokenBatch::single(tokens), None)?;
    Ok(g.hidden.iter().map(|&h| tape.value(h).clone()).collect())
}

/// Final norm followed by the output head, applied to any residual-stream
/// tensor.
pub fn project_hidden(model: &Checkpoint, hidden: &Tensor) -> Result<Tensor> {
    if hidden.cols() != model.config.d_model {
        return Err(Error::shape(format!(
            "hidden width {} for d_model {}",
            hidden.cols(),
            model.config.d_model
        )));
    }
    let mut tape = Tape::new();
    let w = WeightVars::constants(&mut tape, model);
    let x = tape.constant(hidden.clone());
    let logits = project(&mut tape, &w, x)?;
    Ok(tape.value(logits).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            vocab_size: 11,
            max_seq_len: 16,
            seed,
        }
    }

    #[test]
    fn param_id_round_trips_through_strings() {
        for id in tiny(0).param_ids() {
            assert_eq!(id.to_string().parse::<ParamId>().unwrap(), id);
        }
        assert!("layers.x.wq".parse::<ParamId>().is_err());
        assert!("layers.1.bogus".parse::<ParamId>().is_err());
    }

    #[test]
    fn canonical_order_is_derived_order() {
        let ids = tiny(0).param_ids();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
        assert_eq!(ids.first(), Some(&ParamId::Embedding));
        assert_eq!(ids.last(), Some(&ParamId::Head));
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = tiny(0);
        c.n_heads = 3;
        assert!(matches!(init_model(c), Err(Error::Config(_))));
        let mut c = tiny(0);
        c.d_ff = 0;
        assert!(matches!(init_model(c), Err(Error::Config(_))));
    }

    #[test]
    fn checkpoint_rejects_missing_param() {
        let m = init_model(tiny(0)).unwrap();
        let mut params = m.params().clone();
        params.remove(&ParamId::Head);
        let err = Checkpoint::new(*m.config(), params, Provenance::new()).unwrap_err();
        assert!(err.to_string().contains("head"), "{err}");
    }

    #[test]
    fn forward_errors() {
        let m = init_model(tiny(0)).unwrap();
        assert!(matches!(forward(&m, &[0; 17]), Err(Error::Shape(_))));
        assert!(matches!(forward(&m, &[3, 11]), Err(Error::Index(_))));
        assert!(matches!(hidden_state(&m, &[1, 2], 3), Err(Error::Index(_))));
    }

    #[test]
    fn single_token_shape() {
        let m = init_model(tiny(0)).unwrap();
        assert_eq!(forward(&m, &[4]).unwrap().shape(), &[1, 11]);
    }

    #[test]
    fn padded_batch_matches_individual_rows() {
        let m = init_model(tiny(5)).unwrap();
        let seqs = vec![vec![1, 2, 3, 4, 5], vec![6, 7]];
        let batch = TokenBatch::padded(&seqs, 0);
        let logits = forward_batch(&m, &batch).unwrap();
        for (b, s) in seqs.iter().enumerate() {
            let solo = forward(&m, s).unwrap();
            for p in 0..s.len() {
                assert_eq!(logits.row(b * batch.seq_len + p), solo.row(p));
            }
        }
    }
}
