//! Declarative experiment description, read from TOML.

use crate::adapters::AdapterSpec;
use crate::corpora::{Charset, LanguageSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::{MethodKind, MethodSpec, TrainRunConfig};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

/// Id of the freshly initialized model.
pub const INIT: &str = "init";

pub const METRICS: [&str; 3] = ["cloze", "perplexity", "instruction"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    /// Relative paths resolve against the output root.
    pub output_dir: PathBuf,
    pub model: ModelSection,
    pub data: DataSection,
    pub languages: Vec<LanguageDecl>,
    #[serde(default)]
    pub defaults: TrainDefaults,
    /// Trained once and reused by every seed.
    #[serde(default)]
    pub shared: Vec<TrainDecl>,
    /// Built once per seed, in order.
    #[serde(default)]
    pub artifacts: Vec<ArtifactDecl>,
    #[serde(default)]
    pub eval: Vec<EvalDecl>,
    #[serde(default)]
    pub report: ReportSection,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub init_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Seed for lexicons and grammars.
    pub language_seed: u64,
    /// Seed for every sampled corpus and item set.
    pub sample_seed: u64,
    pub lexicon_size: usize,
    pub train_tokens: usize,
    pub heldout_tokens: usize,
    pub cloze_items: usize,
    #[serde(default = "default_k")]
    pub cloze_k: usize,
    pub instruction_items: usize,
    /// Training items per language for instruction tuning; never overlaps
    /// the evaluation items.
    #[serde(default)]
    pub instruction_train_items: usize,
}

fn default_k() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CharsetDecl {
    Preset(String),
    Explicit(Charset),
}

impl CharsetDecl {
    pub fn resolve(&self) -> Result<Charset> {
        match self {
            CharsetDecl::Preset(name) => match name.as_str() {
                "latin" => Ok(Charset::latin()),
                "devanagari" => Ok(Charset::devanagari()),
                "arabic" => Ok(Charset::arabic()),
                other => Err(Error::config(format!("unknown charset preset {other:?}"))),
            },
            CharsetDecl::Explicit(c) => Ok(c.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageDecl {
    pub name: String,
    pub charset: CharsetDecl,
    pub grammar_seed: u64,
    #[serde(default)]
    pub parent: Option<String>,
    #[serde(default)]
    pub overlap: f64,
    #[serde(default)]
    pub loan_source: Option<String>,
    #[serde(default)]
    pub loanword_rate: f64,
    #[serde(default)]
    pub lexicon_size: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainDefaults {
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub seq_len: Option<usize>,
    pub lr: Option<f64>,
    pub warmup_steps: Option<usize>,
    pub min_lr_ratio: Option<f64>,
    pub grad_clip: Option<f64>,
    pub weight_decay: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainData {
    /// Running text of the listed languages.
    #[default]
    Corpus,
    /// Instruction items of the listed languages.
    Instructions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainDecl {
    pub id: String,
    pub parent: String,
    pub method: MethodKind,
    pub languages: Vec<String>,
    /// Mixing weights; equal when omitted.
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    #[serde(default)]
    pub data: TrainData,
    /// Layers counted from the front and back (layer-selective and LayRA).
    #[serde(default)]
    pub front: Option<usize>,
    #[serde(default)]
    pub back: Option<usize>,
    #[serde(default)]
    pub rank: Option<usize>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub dropout: Option<f64>,
    /// Required for shared runs; per-seed runs derive theirs.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub seq_len: Option<usize>,
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default)]
    pub warmup_steps: Option<usize>,
    #[serde(default)]
    pub min_lr_ratio: Option<f64>,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub weight_decay: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArithOp {
    /// `inputs = [target, phi, theta]`: `target + scale·(phi − theta)`.
    Apply,
    /// `inputs = [previous, new]`: `previous + scale·(new − base)`, with
    /// `base` defaulting to `previous`.
    Series,
    /// `inputs = [a, b]`: `scale·a + (1 − scale)·b`.
    Merge,
    /// `inputs = [instruct, adapted, adapted_from]`.
    Instruct,
}

impl ArithOp {
    pub fn name(self) -> &'static str {
        match self {
            ArithOp::Apply => "apply",
            ArithOp::Series => "series",
            ArithOp::Merge => "merge",
            ArithOp::Instruct => "instruct",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            ArithOp::Apply | ArithOp::Instruct => 3,
            ArithOp::Series | ArithOp::Merge => 2,
        }
    }

    pub fn default_scale(self) -> f64 {
        use crate::arithmetic::*;
        match self {
            ArithOp::Apply => DEFAULT_LAMBDA,
            ArithOp::Series => DEFAULT_SERIES_LAMBDA,
            ArithOp::Merge => DEFAULT_MU,
            ArithOp::Instruct => DEFAULT_GAMMA,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArithDecl {
    pub id: String,
    pub op: ArithOp,
    pub inputs: Vec<String>,
    #[serde(default)]
    pub scale: Option<f64>,
    /// Residual base for `series`.
    #[serde(default)]
    pub base: Option<String>,
}

impl ArithDecl {
    pub fn scale(&self) -> f64 {
        self.scale.unwrap_or_else(|| self.op.default_scale())
    }

    fn references(&self) -> impl Iterator<Item = &String> {
        self.inputs.iter().chain(self.base.iter())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArtifactDecl {
    Train(TrainDecl),
    Arith(ArithDecl),
}

impl ArtifactDecl {
    pub fn id(&self) -> &str {
        match self {
            ArtifactDecl::Train(t) => &t.id,
            ArtifactDecl::Arith(a) => &a.id,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalDecl {
    pub checkpoints: Vec<String>,
    pub languages: Vec<String>,
    pub metrics: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    #[serde(default)]
    pub compare: Vec<CompareDecl>,
    #[serde(default)]
    pub sweep: Vec<SweepDecl>,
    #[serde(default)]
    pub lens: Vec<LensDecl>,
}

/// Learning and retention of each `after` checkpoint relative to `before`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareDecl {
    pub name: String,
    pub before: String,
    pub after: Vec<String>,
    pub new_languages: Vec<String>,
    /// Languages scored; all evaluated languages of `before` when omitted.
    #[serde(default)]
    pub languages: Option<Vec<String>>,
    pub metric: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepPoint {
    pub value: String,
    pub checkpoint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepDecl {
    pub name: String,
    pub parameter: String,
    pub points: Vec<SweepPoint>,
    pub languages: Vec<String>,
    pub metrics: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LensDecl {
    pub checkpoint: String,
    pub language: String,
}

fn pick<T: Copy>(own: Option<T>, default: Option<T>, name: &str, id: &str) -> Result<T> {
    own.or(default)
        .ok_or_else(|| Error::config(format!("{id}: {name} is neither set nor defaulted")))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            n_layers: m.n_layers,
            d_model: m.d_model,
            n_heads: m.n_heads,
            d_ff: m.d_ff,
            vocab_size,
            max_seq_len: m.max_seq_len,
            seed: m.init_seed,
        }
    }

    pub fn language_specs(&self) -> Result<Vec<LanguageSpec>> {
        self.languages
            .iter()
            .map(|l| {
                Ok(LanguageSpec {
                    parent: l.parent.clone(),
                    overlap: l.overlap,
                    loan_source: l.loan_source.clone(),
                    loanword_rate: l.loanword_rate,
                    ..LanguageSpec::new(
                        &l.name,
                        l.charset.resolve()?,
                        l.lexicon_size.unwrap_or(self.data.lexicon_size),
                        l.grammar_seed,
                    )
                })
            })
            .collect()
    }

    pub fn language_names(&self) -> Vec<&str> {
        self.languages.iter().map(|l| l.name.as_str()).collect()
    }

    pub fn is_shared(&self, id: &str) -> bool {
        id == INIT || self.shared.iter().any(|t| t.id == id)
    }

    pub fn artifact(&self, id: &str) -> Option<&ArtifactDecl> {
        self.artifacts.iter().find(|a| a.id() == id)
    }

    /// Every trainable run, shared first.
    pub fn train_decl(&self, id: &str) -> Option<&TrainDecl> {
        self.shared.iter().find(|t| t.id == id).or_else(|| match self.artifact(id) {
            Some(ArtifactDecl::Train(t)) => Some(t),
            _ => None,
        })
    }

    pub fn all_ids(&self) -> Vec<&str> {
        std::iter::once(INIT)
            .chain(self.shared.iter().map(|t| t.id.as_str()))
            .chain(self.artifacts.iter().map(|a| a.id()))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds list is empty"));
        }
        let mut seen = BTreeSet::new();
        for &s in &self.seeds {
            if !seen.insert(s) {
                return Err(Error::config(format!("seed {s} listed twice")));
            }
        }
        self.model_config(1).validate()?;
        for spec in self.language_specs()? {
            spec.validate()?;
        }
        let langs: BTreeSet<&str> = self.language_names().into_iter().collect();
        if langs.len() != self.languages.len() {
            return Err(Error::config("a language is declared twice"));
        }
        let check_lang = |owner: &str, l: &str| -> Result<()> {
            if langs.contains(l) {
                Ok(())
            } else {
                Err(Error::config(format!("{owner} refers to undeclared language {l}")))
            }
        };

        let mut declared: BTreeSet<&str> = BTreeSet::from([INIT]);
        let plain = |id: &str| -> Result<()> {
            if id.is_empty() || id.contains(['/', '\\', '.']) {
                return Err(Error::config(format!("artifact id {id:?} must be a plain name")));
            }
            Ok(())
        };
        let known = |id: &str, declared: &BTreeSet<&str>, owner: &str| -> Result<()> {
            if declared.contains(id) {
                Ok(())
            } else {
                Err(Error::config(format!("{owner} refers to {id} before it is declared")))
            }
        };
        for t in &self.shared {
            plain(&t.id)?;
            known(&t.parent, &declared, &t.id)?;
            if t.seed.is_none() {
                return Err(Error::config(format!("shared run {} needs an explicit seed", t.id)));
            }
            self.check_train(t)?;
            t.languages.iter().try_for_each(|l| check_lang(&t.id, l))?;
            if !declared.insert(&t.id) {
                return Err(Error::config(format!("artifact {} declared twice", t.id)));
            }
        }
        for a in &self.artifacts {
            plain(a.id())?;
            match a {
                ArtifactDecl::Train(t) => {
                    known(&t.parent, &declared, &t.id)?;
                    if t.seed.is_some() {
                        return Err(Error::config(format!("{}: per-seed runs take their seed from the seeds list", t.id)));
                    }
                    self.check_train(t)?;
                    t.languages.iter().try_for_each(|l| check_lang(&t.id, l))?;
                }
                ArtifactDecl::Arith(x) => {
                    if x.inputs.len() != x.op.arity() {
                        return Err(Error::config(format!(
                            "{}: {} takes {} inputs, got {}",
                            x.id,
                            x.op.name(),
                            x.op.arity(),
                            x.inputs.len()
                        )));
                    }
                    if x.base.is_some() && x.op != ArithOp::Series {
                        return Err(Error::config(format!("{}: only series takes a base", x.id)));
                    }
                    if !x.scale().is_finite() {
                        return Err(Error::config(format!("{}: scale must be finite", x.id)));
                    }
                    if x.op == ArithOp::Merge && !(0.0..=1.0).contains(&x.scale()) {
                        return Err(Error::config(format!("{}: mu must lie in [0, 1]", x.id)));
                    }
                    for r in x.references() {
                        known(r, &declared, &x.id)?;
                    }
                }
            }
            if !declared.insert(a.id()) {
                return Err(Error::config(format!("artifact {} declared twice", a.id())));
            }
        }
        for e in &self.eval {
            for c in &e.checkpoints {
                known(c, &declared, "eval")?;
            }
            e.languages.iter().try_for_each(|l| check_lang("eval", l))?;
            for m in &e.metrics {
                if !METRICS.contains(&m.as_str()) {
                    return Err(Error::config(format!("unknown metric {m:?}; expected one of {METRICS:?}")));
                }
                if m == "instruction" && self.data.instruction_items == 0 {
                    return Err(Error::config("instruction metric requested but instruction_items is 0"));
                }
            }
        }
        for c in &self.report.compare {
            known(&c.before, &declared, &c.name)?;
            for a in &c.after {
                known(a, &declared, &c.name)?;
            }
            c.new_languages.iter().try_for_each(|l| check_lang(&c.name, l))?;
            c.languages.iter().flatten().try_for_each(|l| check_lang(&c.name, l))?;
        }
        for s in &self.report.sweep {
            for p in &s.points {
                known(&p.checkpoint, &declared, &s.name)?;
            }
            s.languages.iter().try_for_each(|l| check_lang(&s.name, l))?;
        }
        for l in &self.report.lens {
            known(&l.checkpoint, &declared, "lens")?;
            check_lang("lens", &l.language)?;
        }
        Ok(())
    }

    fn check_train(&self, t: &TrainDecl) -> Result<()> {
        if t.languages.is_empty() {
            return Err(Error::config(format!("{}: no training languages", t.id)));
        }
        if let Some(w) = &t.weights {
            if w.len() != t.languages.len() {
                return Err(Error::config(format!("{}: {} languages but {} weights", t.id, t.languages.len(), w.len())));
            }
        }
        if t.data == TrainData::Instructions && self.data.instruction_train_items == 0 {
            return Err(Error::config(format!("{}: instruction training needs instruction_train_items", t.id)));
        }
        self.method_spec(t)?.validate(&self.model_config(1))?;
        self.run_config(t, 0)?.validate()?;
        let seq_len = self.run_config(t, 0)?.seq_len;
        if seq_len > self.model.max_seq_len {
            return Err(Error::config(format!(
                "{}: seq_len {seq_len} exceeds max_seq_len {}",
                t.id, self.model.max_seq_len
            )));
        }
        Ok(())
    }

    pub fn method_spec(&self, t: &TrainDecl) -> Result<MethodSpec> {
        let n = self.model.n_layers;
        let edges = || -> Result<(usize, usize)> {
            match (t.front, t.back) {
                (Some(f), Some(b)) => Ok((f, b)),
                _ => Err(Error::config(format!("{}: {} needs front and back", t.id, t.method.name()))),
            }
        };
        let mut spec = match t.method {
            MethodKind::FullCpt => MethodSpec::full_cpt(),
            MethodKind::ParallelCpt => MethodSpec::parallel_cpt(),
            MethodKind::LoraCpt => MethodSpec::lora_cpt(n),
            MethodKind::LayerSelectiveFullCpt => {
                let (f, b) = edges()?;
                MethodSpec::layer_selective_full_cpt(n, f, b)
            }
            MethodKind::Layra => {
                let (f, b) = edges()?;
                MethodSpec::layra(n, f, b)
            }
        };
        let adapter_knobs = t.rank.is_some() || t.alpha.is_some() || t.dropout.is_some();
        match spec.adapter.as_mut() {
            Some(a) => apply_adapter_knobs(a, t),
            None if adapter_knobs => {
                return Err(Error::config(format!("{}: {} has no adapters to configure", t.id, t.method.name())))
            }
            None => {}
        }
        if matches!(t.method, MethodKind::FullCpt | MethodKind::ParallelCpt | MethodKind::LoraCpt)
            && (t.front.is_some() || t.back.is_some())
        {
            return Err(Error::config(format!("{}: {} takes no front/back", t.id, t.method.name())));
        }
        Ok(spec)
    }

    /// Hyperparameters of `t`; `seed` is used unless the run fixes its own.
    pub fn run_config(&self, t: &TrainDecl, seed: u64) -> Result<TrainRunConfig> {
        let d = &self.defaults;
        let id = t.id.as_str();
        let weights = t
            .weights
            .clone()
            .unwrap_or_else(|| vec![1.0 / t.languages.len() as f64; t.languages.len()]);
        Ok(TrainRunConfig {
            steps: pick(t.steps, d.steps, "steps", id)?,
            batch_size: pick(t.batch_size, d.batch_size, "batch_size", id)?,
            seq_len: pick(t.seq_len, d.seq_len, "seq_len", id)?,
            lr: pick(t.lr, d.lr, "lr", id)?,
            warmup_steps: pick(t.warmup_steps, d.warmup_steps, "warmup_steps", id)?,
            min_lr_ratio: t.min_lr_ratio.or(d.min_lr_ratio).unwrap_or(0.1),
            grad_clip: t.grad_clip.or(d.grad_clip).unwrap_or(1.0),
            weight_decay: t.weight_decay.or(d.weight_decay).unwrap_or(0.01),
            seed: t.seed.unwrap_or(seed),
            corpora: t.languages.clone(),
            mixing_weights: weights,
        })
    }

    /// Checkpoints, languages and metrics to evaluate, deduplicated and in
    /// declaration order.
    pub fn eval_plan(&self) -> Vec<(String, String, String)> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for e in &self.eval {
            for c in &e.checkpoints {
                for l in &e.languages {
                    for m in &e.metrics {
                        let key = (c.clone(), l.clone(), m.clone());
                        if seen.insert(key.clone()) {
                            out.push(key);
                        }
                    }
                }
            }
        }
        out
    }

    /// Languages needing instruction items, for evaluation or training.
    pub fn instruction_languages(&self) -> BTreeMap<String, bool> {
        let mut out = BTreeMap::new();
        for (_, l, m) in self.eval_plan() {
            if m == "instruction" {
                out.entry(l).or_insert(false);
            }
        }
        for t in self.shared.iter().chain(self.artifacts.iter().filter_map(|a| match a {
            ArtifactDecl::Train(t) => Some(t),
            _ => None,
        })) {
            if t.data == TrainData::Instructions {
                for l in &t.languages {
                    out.insert(l.clone(), true);
                }
            }
        }
        out
    }
}

fn apply_adapter_knobs(a: &mut AdapterSpec, t: &TrainDecl) {
    if let Some(r) = t.rank {
        a.rank = r;
    }
    if let Some(al) = t.alpha {
        a.alpha = al;
    }
    if let Some(p) = t.dropout {
        a.dropout = p;
    }
}
