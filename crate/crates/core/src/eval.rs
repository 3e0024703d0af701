//! Scoring: perplexity, cloze accuracy, instruction exact match, learning
//! and retention deltas, and the per-layer logit lens.

use crate::corpora::{ClozeItem, InstructionItem, Language, Script, Vocabulary, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::{forward_batch, hidden_states, project_hidden, Checkpoint, TokenBatch};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Sequences per forward pass when scoring.
const EVAL_BATCH: usize = 32;

fn log_softmax_at(row: &[f64], target: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
    row[target] - max - z.ln()
}

/// Sum of `log p(seq[i] | seq[..i])` for `i` in `from..seq.len()`, for each
/// sequence, batched.
///
/// Sequences are batched in length order to limit padding; each row's
/// result does not depend on what else is in its batch.
fn continuation_log_likelihoods(model: &Checkpoint, seqs: &[(Vec<u32>, usize)]) -> Result<Vec<f64>> {
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    order.sort_by_key(|&i| seqs[i].0.len());
    let mut out = vec![0.0; seqs.len()];
    for chunk in order.chunks(EVAL_BATCH) {
        let inputs: Vec<Vec<u32>> = chunk.iter().map(|&i| seqs[i].0[..seqs[i].0.len() - 1].to_vec()).collect();
        let batch = TokenBatch::padded(&inputs, PAD);
        let logits = forward_batch(model, &batch)?;
        for (b, &i) in chunk.iter().enumerate() {
            let (s, from) = &seqs[i];
            out[i] = (*from..s.len())
                .map(|t| log_softmax_at(logits.row(b * batch.seq_len + t - 1), s[t] as usize))
                .sum();
        }
    }
    Ok(out)
}

/// Anything that can assign a score to every candidate of a cloze item.
pub trait ClozeScorer {
    fn candidate_scores(&self, items: &[ClozeItem]) -> Result<Vec<Vec<f64>>>;
}

/// Length-normalized log-likelihood of each candidate given the prompt.
impl ClozeScorer for Checkpoint {
    fn candidate_scores(&self, items: &[ClozeItem]) -> Result<Vec<Vec<f64>>> {
        let mut seqs = Vec::new();
        for item in items {
            for c in &item.candidates {
                if c.is_empty() {
                    return Err(Error::data("empty cloze candidate"));
                }
                let s: Vec<u32> = item.prompt.iter().chain(c).copied().collect();
                seqs.push((s, item.prompt.len()));
            }
        }
        let lls = continuation_log_likelihoods(self, &seqs)?;
        let mut it = lls.into_iter();
        Ok(items
            .iter()
            .map(|item| {
                item.candidates
                    .iter()
                    .map(|c| it.next().unwrap() / c.len() as f64)
                    .collect()
            })
            .collect())
    }
}

/// Scores 1 for a grammatical candidate and 0 otherwise.
pub struct GrammarOracle<'a>(pub &'a Language);

impl ClozeScorer for GrammarOracle<'_> {
    fn candidate_scores(&self, items: &[ClozeItem]) -> Result<Vec<Vec<f64>>> {
        Ok(items
            .iter()
            .map(|i| {
                i.sentences
                    .iter()
                    .map(|s| if self.0.is_grammatical(s) { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect())
    }
}

/// Index of the highest score; ties go to the lowest index.
pub fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Fraction of items whose gold candidate scores highest.
pub fn score_cloze(scorer: &dyn ClozeScorer, items: &[ClozeItem]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::data("no cloze items to score"));
    }
    let scores = scorer.candidate_scores(items)?;
    let hits = items
        .iter()
        .zip(&scores)
        .filter(|(item, s)| argmax_first(s) == item.gold)
        .count();
    Ok(hits as f64 / items.len() as f64)
}

/// Anything that can complete instruction prompts.
pub trait InstructionFollower {
    /// Continuation of each prompt, at most `max_new` tokens, ending at the
    /// first [`EOS`] if one is produced.
    fn respond(&self, prompts: &[Vec<u32>], max_new: usize) -> Result<Vec<Vec<u32>>>;
}

/// Greedy decoding; the argmax keeps the lowest id on ties.
impl InstructionFollower for Checkpoint {
    fn respond(&self, prompts: &[Vec<u32>], max_new: usize) -> Result<Vec<Vec<u32>>> {
        let limit = self.config().max_seq_len;
        let mut outs = Vec::with_capacity(prompts.len());
        for chunk in prompts.chunks(EVAL_BATCH) {
            let mut seqs: Vec<Vec<u32>> = chunk.to_vec();
            let mut gen: Vec<Vec<u32>> = vec![Vec::new(); chunk.len()];
            let mut done = vec![false; chunk.len()];
            for _ in 0..max_new {
                let active: Vec<usize> = (0..chunk.len())
                    .filter(|&i| !done[i] && seqs[i].len() < limit)
                    .collect();
                if active.is_empty() {
                    break;
                }
                let inputs: Vec<Vec<u32>> = active.iter().map(|&i| seqs[i].clone()).collect();
                let batch = TokenBatch::padded(&inputs, PAD);
                let logits = forward_batch(self, &batch)?;
                for (b, &i) in active.iter().enumerate() {
                    let row = logits.row(b * batch.seq_len + seqs[i].len() - 1);
                    let next = argmax_first(row) as u32;
                    seqs[i].push(next);
                    gen[i].push(next);
                    if next == EOS {
                        done[i] = true;
                    }
                }
                for i in 0..chunk.len() {
                    if seqs[i].len() >= limit {
                        done[i] = true;
                    }
                }
            }
            outs.extend(gen);
        }
        Ok(outs)
    }
}

/// Exact token-sequence match of the response against the target.
pub fn score_instruction(model: &dyn InstructionFollower, items: &[InstructionItem]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::data("no instruction items to score"));
    }
    let max_new = items.iter().map(|i| i.target.len()).max().unwrap_or(0) + 8;
    let prompts: Vec<Vec<u32>> = items.iter().map(|i| i.prompt.clone()).collect();
    let outs = model.respond(&prompts, max_new)?;
    let hits = items.iter().zip(&outs).filter(|(i, o)| &i.target == *o).count();
    Ok(hits as f64 / items.len() as f64)
}

/// `exp` of the mean next-token loss over non-overlapping windows of
/// `max_seq_len` tokens; the first token of each window is context only.
pub fn perplexity(model: &Checkpoint, corpus: &[u32]) -> Result<f64> {
    let w = model.config().max_seq_len;
    let windows: Vec<(Vec<u32>, usize)> = corpus
        .chunks(w)
        .filter(|c| c.len() >= 2)
        .map(|c| (c.to_vec(), 1))
        .collect();
    if windows.is_empty() {
        return Err(Error::data("corpus too short for perplexity"));
    }
    let count: usize = windows.iter().map(|(c, _)| c.len() - 1).sum();
    let total: f64 = continuation_log_likelihoods(model, &windows)?.iter().sum();
    Ok((-total / count as f64).exp())
}

/// One score for one checkpoint on one language.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub checkpoint: String,
    pub checkpoint_hash: String,
    pub language: String,
    pub metric: String,
    pub value: f64,
    pub eval_set_hash: String,
}

pub const CSV_HEADER: &str = "checkpoint,checkpoint_hash,language,metric,value,eval_set_hash";

pub fn rows_to_csv(rows: &[EvalRow]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    let mut out = format!("{CSV_HEADER}\n").into_bytes();
    for r in rows {
        w.write_record([
            r.checkpoint.as_str(),
            &r.checkpoint_hash,
            &r.language,
            &r.metric,
            &format!("{:.6}", r.value),
            &r.eval_set_hash,
        ])
        .map_err(|e| Error::data(e.to_string()))?;
    }
    out.extend(w.into_inner().map_err(|e| Error::data(e.to_string()))?);
    Ok(out)
}

pub fn rows_from_csv(bytes: &[u8]) -> Result<Vec<EvalRow>> {
    let mut r = csv::Reader::from_reader(bytes);
    r.deserialize()
        .map(|row| row.map_err(|e| Error::data(format!("eval CSV: {e}"))))
        .collect()
}

/// Deltas between two evaluations of the same eval sets. Learning is the
/// change on new languages; retention is the change on every other
/// language, so forgetting shows up negative. Averages weight languages
/// equally.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningRetention {
    pub metric: String,
    pub learning: BTreeMap<String, f64>,
    pub retention: BTreeMap<String, f64>,
    pub mean_learning: f64,
    pub mean_retention: f64,
}

fn mean(v: &BTreeMap<String, f64>) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.values().sum::<f64>() / v.len() as f64
    }
}

pub fn learning_retention(before: &[EvalRow], after: &[EvalRow], new_languages: &[&str], metric: &str) -> Result<LearningRetention> {
    let index = |rows: &[EvalRow]| -> Result<BTreeMap<String, (f64, String)>> {
        let mut m = BTreeMap::new();
        for r in rows.iter().filter(|r| r.metric == metric) {
            if m.insert(r.language.clone(), (r.value, r.eval_set_hash.clone())).is_some() {
                return Err(Error::data(format!("duplicate {metric} row for {}", r.language)));
            }
        }
        Ok(m)
    };
    let (b, a) = (index(before)?, index(after)?);
    let mut learning = BTreeMap::new();
    let mut retention = BTreeMap::new();
    for (lang, (vb, hb)) in &b {
        let (va, ha) = a
            .get(lang)
            .ok_or_else(|| Error::data(format!("{metric} for {lang} missing from the later evaluation")))?;
        if ha != hb {
            return Err(Error::data(format!("eval set for {lang} changed between evaluations")));
        }
        let d = va - vb;
        if new_languages.contains(&lang.as_str()) {
            learning.insert(lang.clone(), d);
        } else {
            retention.insert(lang.clone(), d);
        }
    }
    if let Some(lang) = a.keys().find(|l| !b.contains_key(*l)) {
        return Err(Error::data(format!("{metric} for {lang} missing from the earlier evaluation")));
    }
    Ok(LearningRetention {
        metric: metric.to_string(),
        mean_learning: mean(&learning),
        mean_retention: mean(&retention),
        learning,
        retention,
    })
}

/// Per-layer distribution of the script of the top projected token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LensProfile {
    pub bins: Vec<Script>,
    /// `rows[l][b]`: fraction of positions at layer `l` in bin `b`.
    pub rows: Vec<Vec<f64>>,
    pub entropy: Vec<f64>,
}

/// Applies the final norm and head to the residual stream entering every
/// layer (and after the last) and bins each position's top token by script.
pub fn logit_lens(model: &Checkpoint, vocab: &Vocabulary, tokens: &[u32]) -> Result<LensProfile> {
    if tokens.is_empty() {
        return Err(Error::data("logit lens needs at least one token"));
    }
    let bins = Script::ALL.to_vec();
    let mut rows = Vec::new();
    let mut entropy = Vec::new();
    for (layer, h) in hidden_states(model, tokens)?.iter().enumerate() {
        let logits: Tensor = project_hidden(model, h)?;
        logits.ensure_finite(&format!("logit lens projection at layer {layer}"))?;
        let mut counts = vec![0usize; bins.len()];
        for p in 0..logits.rows() {
            let top = argmax_first(logits.row(p)) as u32;
            let s = vocab.script(top).unwrap_or(Script::Special);
            counts[bins.iter().position(|b| *b == s).unwrap()] += 1;
        }
        let n = logits.rows() as f64;
        let dist: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
        entropy.push(-dist.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>());
        rows.push(dist);
    }
    Ok(LensProfile { bins, rows, entropy })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(lang: &str, v: f64) -> EvalRow {
        EvalRow {
            checkpoint: "c".into(),
            checkpoint_hash: "h".into(),
            language: lang.into(),
            metric: "cloze".into(),
            value: v,
            eval_set_hash: format!("set-{lang}"),
        }
    }

    #[test]
    fn hand_built_deltas() {
        let before = [row("old", 0.8), row("new", 0.5)];
        let after = [row("new", 0.9), row("old", 0.7)];
        let s = learning_retention(&before, &after, &["new"], "cloze").unwrap();
        assert!((s.mean_retention + 0.1).abs() < 1e-12);
        assert!((s.mean_learning - 0.4).abs() < 1e-12);
        let back = learning_retention(&after, &before, &["new"], "cloze").unwrap();
        assert_eq!(back.mean_learning, -s.mean_learning);
    }

    #[test]
    fn changed_eval_set_rejected() {
        let before = [row("old", 0.8)];
        let mut after = [row("old", 0.7)];
        after[0].eval_set_hash = "other".into();
        assert!(matches!(learning_retention(&before, &after, &[], "cloze"), Err(Error::Data(_))));
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![row("a", 0.25), row("b,c", 1.0)];
        let bytes = rows_to_csv(&rows).unwrap();
        assert!(bytes.starts_with(CSV_HEADER.as_bytes()));
        assert_eq!(rows_from_csv(&bytes).unwrap(), rows);
        assert_eq!(rows_to_csv(&[]).unwrap(), format!("{CSV_HEADER}\n").into_bytes());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax_first(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax_first(&[2.0, 2.0]), 0);
    }
}
