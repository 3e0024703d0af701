//! Stages of an experiment over an output directory: data generation,
//! training, arithmetic, evaluation. Every stage reads its inputs from disk
//! and writes its outputs atomically, so each can run as its own process.

use super::config::{ArithDecl, ArithOp, ArtifactDecl, ExperimentConfig, TrainData, TrainDecl, INIT};
use crate::arithmetic;
use crate::corpora::{
    generate_languages, items_hash, make_cloze_set, make_instruction_set, read_corpus, read_jsonl, sample_corpus,
    write_corpus, write_jsonl, ClozeItem, InstructionItem, Language, Vocabulary,
};
use crate::error::{Error, Result};
use crate::eval::{logit_lens, perplexity, rows_to_csv, score_cloze, score_instruction, EvalRow, LensProfile};
use crate::model::{init_model, Checkpoint};
use crate::store::{content_hash, load_checkpoint, save_checkpoint};
use crate::trainer::{train, BatchSource, CorpusBatches, InstructionBatches};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

/// Environment variable naming the root that relative output directories
/// resolve against.
pub const OUT_ENV: &str = "LAYRA_OUT";

/// Seed derived from a parent seed and a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

/// File layout of one experiment's outputs.
#[derive(Clone, Debug)]
pub struct Workspace {
    root: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Heldout,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Heldout => "heldout",
        }
    }
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// `output_dir` of the config, under [`OUT_ENV`] when that is set and
    /// the directory is relative.
    pub fn for_config(cfg: &ExperimentConfig) -> Self {
        match std::env::var_os(OUT_ENV) {
            Some(root) if cfg.output_dir.is_relative() => Self::new(Path::new(&root).join(&cfg.output_dir)),
            _ => Self::new(cfg.output_dir.clone()),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn corpus_path(&self, lang: &str, split: Split) -> PathBuf {
        self.root.join("data").join(format!("{lang}.{}.tok", split.name()))
    }

    pub fn cloze_path(&self, lang: &str) -> PathBuf {
        self.root.join("data").join(format!("{lang}.cloze.jsonl"))
    }

    pub fn instruction_path(&self, lang: &str, split: Split) -> PathBuf {
        self.root.join("data").join(format!("{lang}.instruct.{}.jsonl", split.name()))
    }

    fn artifact_dir(&self, cfg: &ExperimentConfig, id: &str, seed: u64) -> PathBuf {
        if cfg.is_shared(id) {
            self.root.join("shared")
        } else {
            self.seed_dir(seed)
        }
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.join(format!("seed-{seed}"))
    }

    pub fn checkpoint_path(&self, cfg: &ExperimentConfig, id: &str, seed: u64) -> PathBuf {
        self.artifact_dir(cfg, id, seed).join(format!("{id}.ckpt"))
    }

    pub fn log_path(&self, cfg: &ExperimentConfig, id: &str, seed: u64) -> PathBuf {
        self.artifact_dir(cfg, id, seed).join(format!("{id}.log.jsonl"))
    }

    pub fn eval_path(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("eval.csv")
    }

    pub fn hashes_path(&self) -> PathBuf {
        self.root.join("hashes.tsv")
    }

    pub fn report_path(&self) -> PathBuf {
        self.root.join("report.md")
    }

    pub fn summary_path(&self) -> PathBuf {
        self.root.join("summary.csv")
    }
}

pub fn build_languages(cfg: &ExperimentConfig) -> Result<BTreeMap<String, Language>> {
    generate_languages(&cfg.language_specs()?, cfg.data.language_seed)
}

/// Counts of what [`gen_language_data`] wrote.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DataSummary {
    pub language: String,
    pub train_tokens: usize,
    pub heldout_tokens: usize,
    pub cloze_items: usize,
    pub instruction_eval_items: usize,
    pub instruction_train_items: usize,
}

fn instruction_key(item: &InstructionItem) -> (crate::corpora::Task, Vec<String>) {
    (item.task, item.words.clone())
}

/// Training items for `lang` that share no (task, words) pair with `held_out`.
fn instruction_train_set(
    lang: &Language,
    vocab: &Vocabulary,
    n: usize,
    seed: u64,
    max_len: usize,
    held_out: &[InstructionItem],
) -> Result<Vec<InstructionItem>> {
    let exclude: BTreeSet<_> = held_out.iter().map(instruction_key).collect();
    let mut pool_size = 2 * n + 64;
    for _ in 0..6 {
        let pool = make_instruction_set(&[lang], vocab, pool_size, seed, max_len)?;
        let kept: Vec<InstructionItem> = pool
            .into_iter()
            .filter(|i| !exclude.contains(&instruction_key(i)))
            .take(n)
            .collect();
        if kept.len() == n {
            return Ok(kept);
        }
        pool_size *= 2;
    }
    Err(Error::data(format!(
        "{}: cannot draw {n} instruction items disjoint from the evaluation set",
        lang.name()
    )))
}

/// Writes the corpora and item sets of one language. `train_tokens`
/// overrides the configured training-corpus size.
pub fn gen_language_data(
    cfg: &ExperimentConfig,
    ws: &Workspace,
    langs: &BTreeMap<String, Language>,
    vocab: &Vocabulary,
    name: &str,
    train_tokens: Option<usize>,
) -> Result<DataSummary> {
    let lang = langs
        .get(name)
        .ok_or_else(|| Error::config(format!("unknown language {name:?}; declared: {:?}", cfg.language_names())))?;
    let d = &cfg.data;
    let seed = d.sample_seed;
    let n_train = train_tokens.unwrap_or(d.train_tokens);
    let train = sample_corpus(lang, vocab, n_train, derive_seed(seed, "train"));
    write_corpus(&ws.corpus_path(name, Split::Train), &train, vocab)?;
    let heldout = sample_corpus(lang, vocab, d.heldout_tokens, derive_seed(seed, "heldout"));
    write_corpus(&ws.corpus_path(name, Split::Heldout), &heldout, vocab)?;
    let max_len = cfg.model.max_seq_len;
    let cloze = make_cloze_set(lang, vocab, d.cloze_items, derive_seed(seed, "cloze"), d.cloze_k, max_len)?;
    write_jsonl(&ws.cloze_path(name), &cloze)?;

    let wants = cfg.instruction_languages();
    let (mut n_eval, mut n_itrain) = (0, 0);
    if let Some(&for_training) = wants.get(name) {
        let eval = make_instruction_set(&[lang], vocab, d.instruction_items, derive_seed(seed, "instruct-eval"), max_len)?;
        write_jsonl(&ws.instruction_path(name, Split::Heldout), &eval)?;
        n_eval = eval.len();
        if for_training {
            let tr = instruction_train_set(
                lang,
                vocab,
                d.instruction_train_items,
                derive_seed(seed, "instruct-train"),
                max_len,
                &eval,
            )?;
            write_jsonl(&ws.instruction_path(name, Split::Train), &tr)?;
            n_itrain = tr.len();
        }
    }
    Ok(DataSummary {
        language: name.to_string(),
        train_tokens: train.len(),
        heldout_tokens: heldout.len(),
        cloze_items: cloze.len(),
        instruction_eval_items: n_eval,
        instruction_train_items: n_itrain,
    })
}

fn read_input<T>(path: &Path, what: &str, read: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
    if !path.exists() {
        return Err(Error::data(format!(
            "{what} not found at {}; run the stage that produces it first",
            path.display()
        )));
    }
    read(path)
}

/// Checkpoint `id` as seen by `seed`; [`INIT`] is rebuilt from the config.
pub fn load_artifact(cfg: &ExperimentConfig, ws: &Workspace, vocab: &Vocabulary, id: &str, seed: u64) -> Result<Checkpoint> {
    if id == INIT {
        return init_model(cfg.model_config(vocab.len()));
    }
    let path = ws.checkpoint_path(cfg, id, seed);
    read_input(&path, &format!("checkpoint {id}"), load_checkpoint)
}

/// Result of building one artifact.
#[derive(Clone, Debug, PartialEq)]
pub struct Built {
    pub id: String,
    pub hash: String,
    pub path: PathBuf,
    /// Mean loss over the last tenth of training steps.
    pub final_loss: Option<f64>,
}

/// Trains `decl` for `seed`, writes checkpoint and log, and checks that
/// only the parameters the method may touch moved.
pub fn train_artifact(cfg: &ExperimentConfig, ws: &Workspace, vocab: &Vocabulary, decl: &TrainDecl, seed: u64) -> Result<Built> {
    let parent = load_artifact(cfg, ws, vocab, &decl.parent, seed)?;
    let method = cfg.method_spec(decl)?;
    let run_seed = match decl.seed {
        Some(s) => s,
        None => derive_seed(seed, &decl.id),
    };
    let run = cfg.run_config(decl, run_seed)?;
    let (phi, log) = match decl.data {
        TrainData::Corpus => {
            let corpora = decl
                .languages
                .iter()
                .map(|l| {
                    let p = ws.corpus_path(l, Split::Train);
                    read_input(&p, &format!("{l} training corpus"), |p| read_corpus(p, vocab))
                })
                .collect::<Result<Vec<_>>>()?;
            let named: Vec<(&str, &[u32])> = decl
                .languages
                .iter()
                .zip(&corpora)
                .map(|(l, c)| (l.as_str(), c.as_slice()))
                .collect();
            let mut src = CorpusBatches::new(&named, &run.mixing_weights, run.batch_size, run.seq_len, run.seed)?;
            train(&parent, &method, &run, &mut src as &mut dyn BatchSource)?
        }
        TrainData::Instructions => {
            let mut items: Vec<InstructionItem> = Vec::new();
            for l in &decl.languages {
                let p = ws.instruction_path(l, Split::Train);
                items.extend(read_input(&p, &format!("{l} instruction items"), |p| read_jsonl(p))?);
            }
            let mut src = InstructionBatches::new(&items, run.batch_size, run.seed)?;
            train(&parent, &method, &run, &mut src as &mut dyn BatchSource)?
        }
    };
    let allowed = method.may_change(parent.config());
    if let Some(bad) = phi.changed_params(&parent).into_iter().find(|p| !allowed.contains(p)) {
        return Err(Error::data(format!(
            "{}: frozen parameter {bad} changed during {}",
            decl.id,
            method.kind.name()
        )));
    }
    let path = ws.checkpoint_path(cfg, &decl.id, seed);
    let hash = save_checkpoint(&path, &phi)?;
    crate::corpora::write_file(&ws.log_path(cfg, &decl.id, seed), &log.to_jsonl()?)?;
    let tail = (log.records.len() / 10).max(1);
    let final_loss = (!log.records.is_empty()).then(|| {
        let last = &log.records[log.records.len().saturating_sub(tail)..];
        last.iter().map(|r| r.loss).sum::<f64>() / last.len() as f64
    });
    Ok(Built {
        id: decl.id.clone(),
        hash,
        path,
        final_loss,
    })
}

/// Applies one arithmetic step to loaded operands.
pub fn run_arith(op: ArithOp, inputs: &[&Checkpoint], base: Option<&Checkpoint>, scale: f64) -> Result<Checkpoint> {
    let need = op.arity();
    if inputs.len() != need {
        return Err(Error::config(format!("{} takes {need} operands, got {}", op.name(), inputs.len())));
    }
    match op {
        ArithOp::Apply => {
            let d = arithmetic::delta(inputs[1], inputs[2])?;
            arithmetic::apply(inputs[0], &d, scale)
        }
        ArithOp::Series => arithmetic::series(inputs[0], inputs[1], base.unwrap_or(inputs[0]), scale),
        ArithOp::Merge => arithmetic::merge(inputs[0], inputs[1], scale),
        ArithOp::Instruct => arithmetic::instruct(inputs[0], inputs[1], inputs[2], scale),
    }
}

pub fn arith_artifact(cfg: &ExperimentConfig, ws: &Workspace, vocab: &Vocabulary, decl: &ArithDecl, seed: u64) -> Result<Built> {
    let inputs = decl
        .inputs
        .iter()
        .map(|id| load_artifact(cfg, ws, vocab, id, seed))
        .collect::<Result<Vec<_>>>()?;
    let base = decl
        .base
        .as_ref()
        .map(|id| load_artifact(cfg, ws, vocab, id, seed))
        .transpose()?;
    let refs: Vec<&Checkpoint> = inputs.iter().collect();
    let out = run_arith(decl.op, &refs, base.as_ref(), decl.scale())?;
    let path = ws.checkpoint_path(cfg, &decl.id, seed);
    let hash = save_checkpoint(&path, &out)?;
    Ok(Built {
        id: decl.id.clone(),
        hash,
        path,
        final_loss: None,
    })
}

/// Evaluation sets of one language, read on first use.
#[derive(Default)]
struct EvalSets {
    cloze: HashMap<String, (Vec<ClozeItem>, String)>,
    heldout: HashMap<String, (Vec<u32>, String)>,
    instruction: HashMap<String, (Vec<InstructionItem>, String)>,
}

fn token_hash(tokens: &[u32]) -> String {
    let mut h = Sha256::new();
    for t in tokens {
        h.update(t.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Scores memoized by (checkpoint hash, metric, eval-set hash), so a
/// checkpoint shared by several seeds is scored once.
#[derive(Default)]
pub struct Evaluator {
    sets: EvalSets,
    cache: HashMap<(String, String, String), f64>,
}

impl Evaluator {
    pub fn new() -> Self {
        Self::default()
    }

    fn set_hash(&mut self, ws: &Workspace, vocab: &Vocabulary, lang: &str, metric: &str) -> Result<String> {
        Ok(match metric {
            "cloze" => {
                if !self.sets.cloze.contains_key(lang) {
                    let items: Vec<ClozeItem> =
                        read_input(&ws.cloze_path(lang), &format!("{lang} cloze items"), |p| read_jsonl(p))?;
                    let h = items_hash(&items)?;
                    self.sets.cloze.insert(lang.to_string(), (items, h));
                }
                self.sets.cloze[lang].1.clone()
            }
            "perplexity" => {
                if !self.sets.heldout.contains_key(lang) {
                    let p = ws.corpus_path(lang, Split::Heldout);
                    let toks = read_input(&p, &format!("{lang} held-out corpus"), |p| read_corpus(p, vocab))?;
                    let h = token_hash(&toks);
                    self.sets.heldout.insert(lang.to_string(), (toks, h));
                }
                self.sets.heldout[lang].1.clone()
            }
            "instruction" => {
                if !self.sets.instruction.contains_key(lang) {
                    let p = ws.instruction_path(lang, Split::Heldout);
                    let items: Vec<InstructionItem> =
                        read_input(&p, &format!("{lang} instruction items"), |p| read_jsonl(p))?;
                    let h = items_hash(&items)?;
                    self.sets.instruction.insert(lang.to_string(), (items, h));
                }
                self.sets.instruction[lang].1.clone()
            }
            other => return Err(Error::config(format!("unknown metric {other:?}"))),
        })
    }

    /// One row for `model` on `lang` under `metric`.
    pub fn score(
        &mut self,
        ws: &Workspace,
        vocab: &Vocabulary,
        name: &str,
        model: &Checkpoint,
        model_hash: &str,
        lang: &str,
        metric: &str,
    ) -> Result<EvalRow> {
        let set = self.set_hash(ws, vocab, lang, metric)?;
        let key = (model_hash.to_string(), metric.to_string(), set.clone());
        let value = match self.cache.get(&key) {
            Some(&v) => v,
            None => {
                let v = match metric {
                    "cloze" => score_cloze(model, &self.sets.cloze[lang].0)?,
                    "perplexity" => perplexity(model, &self.sets.heldout[lang].0)?,
                    _ => score_instruction(model, &self.sets.instruction[lang].0)?,
                };
                self.cache.insert(key, v);
                v
            }
        };
        Ok(EvalRow {
            checkpoint: name.to_string(),
            checkpoint_hash: model_hash.to_string(),
            language: lang.to_string(),
            metric: metric.to_string(),
            value,
            eval_set_hash: set,
        })
    }

    /// Rows for every (checkpoint, language, metric) in `plan`, in order.
    pub fn evaluate(
        &mut self,
        cfg: &ExperimentConfig,
        ws: &Workspace,
        vocab: &Vocabulary,
        seed: u64,
        plan: &[(String, String, String)],
    ) -> Result<Vec<EvalRow>> {
        let mut rows = Vec::with_capacity(plan.len());
        let mut loaded: Option<(String, Checkpoint, String)> = None;
        for (ckpt, lang, metric) in plan {
            if loaded.as_ref().map(|(id, _, _)| id != ckpt).unwrap_or(true) {
                let m = load_artifact(cfg, ws, vocab, ckpt, seed)?;
                let h = content_hash(&m)?;
                loaded = Some((ckpt.clone(), m, h));
            }
            let (_, m, h) = loaded.as_ref().unwrap();
            rows.push(self.score(ws, vocab, ckpt, m, h, lang, metric)?);
        }
        Ok(rows)
    }

    /// Logit-lens profile on the first `max_seq_len` held-out tokens.
    pub fn lens(&mut self, ws: &Workspace, vocab: &Vocabulary, model: &Checkpoint, lang: &str) -> Result<LensProfile> {
        self.set_hash(ws, vocab, lang, "perplexity")?;
        let toks = &self.sets.heldout[lang].0;
        let n = toks.len().min(model.config().max_seq_len);
        logit_lens(model, vocab, &toks[..n])
    }
}

/// Everything one pipeline run produced.
#[derive(Clone, Debug, Default)]
pub struct Outcome {
    /// Content hash per (seed, artifact id); shared artifacts appear under
    /// every seed.
    pub hashes: BTreeMap<(u64, String), String>,
    pub final_losses: BTreeMap<(u64, String), f64>,
    pub rows: BTreeMap<u64, Vec<EvalRow>>,
    pub report: super::report::Report,
}

/// Generates data, trains the shared runs, builds every seed's artifacts,
/// evaluates, and writes the eval CSVs, the hash list and the report.
pub fn run_pipeline(cfg: &ExperimentConfig, ws: &Workspace, progress: &mut dyn FnMut(&str)) -> Result<Outcome> {
    cfg.validate()?;
    let vocab = Vocabulary::standard();
    let langs = build_languages(cfg)?;
    for name in cfg.language_names() {
        let s = gen_language_data(cfg, ws, &langs, &vocab, name, None)?;
        progress(&format!(
            "data {name}: {} train tokens, {} cloze items, {} instruction items",
            s.train_tokens, s.cloze_items, s.instruction_eval_items
        ));
    }

    let mut out = Outcome::default();
    let first = cfg.seeds[0];
    let mut shared = BTreeMap::new();
    shared.insert(INIT.to_string(), content_hash(&load_artifact(cfg, ws, &vocab, INIT, first)?)?);
    for t in &cfg.shared {
        let b = train_artifact(cfg, ws, &vocab, t, first)?;
        progress(&format!("shared {}: {} loss {:.4}", b.id, &b.hash[..12], b.final_loss.unwrap_or(f64::NAN)));
        for &s in &cfg.seeds {
            if let Some(l) = b.final_loss {
                out.final_losses.insert((s, b.id.clone()), l);
            }
        }
        shared.insert(b.id, b.hash);
    }

    let mut evaluator = Evaluator::new();
    let plan = cfg.eval_plan();
    for &seed in &cfg.seeds {
        for (id, h) in &shared {
            out.hashes.insert((seed, id.clone()), h.clone());
        }
        for a in &cfg.artifacts {
            let b = match a {
                ArtifactDecl::Train(t) => train_artifact(cfg, ws, &vocab, t, seed)?,
                ArtifactDecl::Arith(x) => arith_artifact(cfg, ws, &vocab, x, seed)?,
            };
            progress(&format!(
                "seed {seed} {}: {}{}",
                b.id,
                &b.hash[..12],
                b.final_loss.map(|l| format!(" loss {l:.4}")).unwrap_or_default()
            ));
            if let Some(l) = b.final_loss {
                out.final_losses.insert((seed, b.id.clone()), l);
            }
            out.hashes.insert((seed, b.id), b.hash);
        }
        let rows = evaluator.evaluate(cfg, ws, &vocab, seed, &plan)?;
        crate::corpora::write_file(&ws.eval_path(seed), &rows_to_csv(&rows)?)?;
        progress(&format!("seed {seed}: {} eval rows", rows.len()));
        out.rows.insert(seed, rows);
    }

    let mut hashes = String::from("seed\tartifact\tcontent_hash\n");
    for ((seed, id), h) in &out.hashes {
        hashes.push_str(&format!("{seed}\t{id}\t{h}\n"));
    }
    crate::corpora::write_file(&ws.hashes_path(), hashes.as_bytes())?;

    let lens = lens_profiles(cfg, ws, &vocab, &mut evaluator)?;
    out.report = super::report::build_report(cfg, &out.rows, &lens)?;
    out.report.write(ws)?;
    Ok(out)
}

/// Lens profile for each configured (checkpoint, language), averaged over
/// seeds.
pub fn lens_profiles(
    cfg: &ExperimentConfig,
    ws: &Workspace,
    vocab: &Vocabulary,
    evaluator: &mut Evaluator,
) -> Result<Vec<(super::config::LensDecl, LensProfile)>> {
    let mut out = Vec::new();
    for decl in &cfg.report.lens {
        let mut acc: Option<LensProfile> = None;
        for &seed in &cfg.seeds {
            let m = load_artifact(cfg, ws, vocab, &decl.checkpoint, seed)?;
            let p = evaluator.lens(ws, vocab, &m, &decl.language)?;
            acc = Some(match acc {
                None => p,
                Some(mut a) => {
                    for (ra, rp) in a.rows.iter_mut().zip(&p.rows) {
                        ra.iter_mut().zip(rp).for_each(|(x, y)| *x += y);
                    }
                    a.entropy.iter_mut().zip(&p.entropy).for_each(|(x, y)| *x += y);
                    a
                }
            });
        }
        let mut p = acc.expect("seeds list is nonempty");
        let n = cfg.seeds.len() as f64;
        p.rows.iter_mut().flatten().for_each(|x| *x /= n);
        p.entropy.iter_mut().for_each(|x| *x /= n);
        out.push((decl.clone(), p));
    }
    Ok(out)
}
