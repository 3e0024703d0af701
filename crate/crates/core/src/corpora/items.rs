//! Token streams, cloze items and instruction items drawn from a
//! [`Language`].

use super::language::{Language, Word};
use super::vocab::{Vocabulary, BOS, EOS, INST, SEP, SPACE, TASK_COPY, TASK_NTH, TASK_REVERSE};
use crate::error::{Error, Result};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

fn rng_for(tag: &str, language: &str, seed: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(tag.as_bytes());
    h.update([0]);
    h.update(language.as_bytes());
    h.update(seed.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn forms(words: &[Word]) -> Vec<&str> {
    words.iter().map(|w| w.form.as_str()).collect()
}

/// Exactly `n_tokens` ids of running text; every sentence ends with
/// [`EOS`].
pub fn sample_corpus(lang: &Language, vocab: &Vocabulary, n_tokens: usize, seed: u64) -> Vec<u32> {
    let mut rng = rng_for("corpus", lang.name(), seed);
    let mut out = Vec::with_capacity(n_tokens + 64);
    while out.len() < n_tokens {
        let s = lang.sample_sentence(&mut rng);
        out.extend(vocab.encode_words(&forms(&s)));
        out.push(EOS);
    }
    out.truncate(n_tokens);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClozeKind {
    Agreement,
    Order,
    Mixed,
}

/// A prompt with `k` completions, exactly one grammatical.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClozeItem {
    pub language: String,
    pub kind: ClozeKind,
    pub prompt: Vec<u32>,
    pub candidates: Vec<Vec<u32>>,
    pub gold: usize,
    /// The gold sentence and one word list per candidate, for inspection
    /// and grammar-oracle scoring.
    pub sentences: Vec<Vec<String>>,
}

/// All single-edit corruptions of `words` that the grammar rejects.
fn corruptions(lang: &Language, words: &[Word]) -> Vec<(ClozeKind, Vec<Word>)> {
    let mut out: Vec<(ClozeKind, Vec<Word>)> = Vec::new();
    for (i, w) in words.iter().enumerate() {
        if let Some(flipped) = lang.flip_agreement(w) {
            let mut c = words.to_vec();
            c[i] = flipped;
            out.push((ClozeKind::Agreement, c));
        }
    }
    for i in 0..words.len().saturating_sub(1) {
        if words[i].form != words[i + 1].form {
            let mut c = words.to_vec();
            c.swap(i, i + 1);
            out.push((ClozeKind::Order, c));
        }
    }
    out.retain(|(_, c)| !lang.is_grammatical(&forms(c)));
    let mut seen = std::collections::HashSet::new();
    out.retain(|(_, c)| seen.insert(forms(c).join(" ")));
    out
}

/// `n_items` items with `k` candidates each. The gold position is drawn
/// uniformly, and the shared prompt is every word before the first position
/// at which any candidate differs. Sentences whose prompt plus candidate
/// would exceed `max_len` tokens are skipped.
pub fn make_cloze_set(
    lang: &Language,
    vocab: &Vocabulary,
    n_items: usize,
    seed: u64,
    k: usize,
    max_len: usize,
) -> Result<Vec<ClozeItem>> {
    if k < 2 {
        return Err(Error::config(format!("cloze needs k >= 2, got {k}")));
    }
    let mut rng = rng_for("cloze", lang.name(), seed);
    let mut items = Vec::with_capacity(n_items);
    let mut attempts = 0usize;
    while items.len() < n_items {
        attempts += 1;
        if attempts > 100 * n_items + 1000 {
            return Err(Error::data(format!("{}: cannot build {k}-way cloze items", lang.name())));
        }
        let gold_words = lang.sample_sentence(&mut rng);
        let mut pool = corruptions(lang, &gold_words);
        if pool.len() < k - 1 {
            continue;
        }
        pool.shuffle(&mut rng);
        pool.truncate(k - 1);
        let kind = if pool.iter().all(|(kd, _)| *kd == pool[0].0) { pool[0].0 } else { ClozeKind::Mixed };
        let gold = rng.gen_range(0..k);
        let mut sentences: Vec<Vec<Word>> = pool.into_iter().map(|(_, c)| c).collect();
        sentences.insert(gold, gold_words);
        let split = (0..sentences[0].len())
            .find(|&i| sentences.iter().any(|s| s[i].form != sentences[0][i].form))
            .expect("corruptions differ from the gold sentence");
        let mut prompt = vec![EOS];
        prompt.extend(vocab.encode_words(&forms(&sentences[0][..split])));
        let candidates = sentences
            .iter()
            .map(|s| {
                let mut c = Vec::new();
                if split > 0 {
                    c.push(SPACE);
                }
                c.extend(vocab.encode_words(&forms(&s[split..])));
                c.push(EOS);
                c
            })
            .collect::<Vec<Vec<u32>>>();
        if prompt.len() + candidates[0].len() > max_len {
            continue;
        }
        items.push(ClozeItem {
            language: lang.name().to_string(),
            kind,
            prompt,
            candidates,
            gold,
            sentences: sentences
                .iter()
                .map(|s| s.iter().map(|w| w.form.clone()).collect())
                .collect(),
        });
    }
    Ok(items)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Copy,
    Reverse,
    /// Select word `k` (1-based).
    Nth(u8),
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Copy, Task::Reverse, Task::Nth(1), Task::Nth(2), Task::Nth(3)];

    pub fn marker(self) -> u32 {
        match self {
            Task::Copy => TASK_COPY,
            Task::Reverse => TASK_REVERSE,
            Task::Nth(k) => TASK_NTH + k as u32 - 1,
        }
    }

    /// The transformation on a word list.
    pub fn apply<T: Clone>(self, words: &[T]) -> Vec<T> {
        match self {
            Task::Copy => words.to_vec(),
            Task::Reverse => words.iter().rev().cloned().collect(),
            Task::Nth(k) => words.get(k as usize - 1).cloned().into_iter().collect(),
        }
    }
}

/// `BOS INST <task> w1 ␣ w2 ␣ w3 SEP` → answer words then [`EOS`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionItem {
    pub language: String,
    pub task: Task,
    pub words: Vec<String>,
    pub prompt: Vec<u32>,
    pub target: Vec<u32>,
}

pub const INSTRUCTION_WORDS: usize = 3;

pub fn instruction_item(lang: &str, vocab: &Vocabulary, task: Task, words: Vec<String>) -> InstructionItem {
    let mut prompt = vec![BOS, INST, task.marker()];
    prompt.extend(vocab.encode_words(&words));
    prompt.push(SEP);
    let mut target = vocab.encode_words(&task.apply(&words));
    target.push(EOS);
    InstructionItem {
        language: lang.to_string(),
        task,
        words,
        prompt,
        target,
    }
}

/// Items cycle through the languages and tasks in order; the words are the
/// first three of a fresh sentence, redrawn while prompt plus answer would
/// exceed `max_len` tokens.
pub fn make_instruction_set(
    langs: &[&Language],
    vocab: &Vocabulary,
    n_items: usize,
    seed: u64,
    max_len: usize,
) -> Result<Vec<InstructionItem>> {
    if langs.is_empty() {
        return Err(Error::config("instruction set needs at least one language"));
    }
    let mut rngs: Vec<ChaCha8Rng> = langs.iter().map(|l| rng_for("instruct", l.name(), seed)).collect();
    let mut items = Vec::with_capacity(n_items);
    for i in 0..n_items {
        let li = i % langs.len();
        let task = Task::ALL[(i / langs.len()) % Task::ALL.len()];
        let mut tries = 0;
        let item = loop {
            tries += 1;
            if tries > 10_000 {
                return Err(Error::data(format!(
                    "{}: no instruction item fits in {max_len} tokens",
                    langs[li].name()
                )));
            }
            let s = langs[li].sample_sentence(&mut rngs[li]);
            if s.len() < INSTRUCTION_WORDS {
                continue;
            }
            let words = s[..INSTRUCTION_WORDS].iter().map(|w| w.form.clone()).collect();
            let item = instruction_item(langs[li].name(), vocab, task, words);
            if item.prompt.len() + item.target.len() <= max_len {
                break item;
            }
        };
        items.push(item);
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpora::language::{generate_languages, Charset, LanguageSpec};

    fn lang() -> Language {
        generate_languages(&[LanguageSpec::new("t", Charset::latin(), 40, 5)], 3)
            .unwrap()
            .remove("t")
            .unwrap()
    }

    #[test]
    fn corpus_has_exact_length_and_is_deterministic() {
        let (l, v) = (lang(), Vocabulary::standard());
        let a = sample_corpus(&l, &v, 1234, 9);
        assert_eq!(a.len(), 1234);
        assert_eq!(a, sample_corpus(&l, &v, 1234, 9));
        assert_ne!(a, sample_corpus(&l, &v, 1234, 10));
        assert!(a.contains(&EOS));
    }

    #[test]
    fn cloze_candidates_have_equal_length_and_one_gold() {
        let (l, v) = (lang(), Vocabulary::standard());
        for k in [2, 3] {
            for item in make_cloze_set(&l, &v, 50, 1, k, 64).unwrap() {
                assert_eq!(item.candidates.len(), k);
                let len = item.candidates[0].len();
                assert!(item.candidates.iter().all(|c| c.len() == len));
                let ok: Vec<bool> = item.sentences.iter().map(|s| l.is_grammatical(s)).collect();
                assert_eq!(ok.iter().filter(|&&b| b).count(), 1);
                assert!(ok[item.gold]);
                assert!(item.prompt.len() + len <= 64);
            }
        }
    }

    #[test]
    fn tasks_transform_words() {
        let w = ["a", "b", "c"];
        assert_eq!(Task::Reverse.apply(&w), vec!["c", "b", "a"]);
        assert_eq!(Task::Copy.apply(&w), w.to_vec());
        assert_eq!(Task::Nth(2).apply(&w), vec!["b"]);
    }

    #[test]
    fn instruction_layout() {
        let v = Vocabulary::standard();
        let item = instruction_item("x", &v, Task::Reverse, vec!["ab".into(), "c".into(), "d".into()]);
        assert_eq!(item.prompt[..3], [BOS, INST, TASK_REVERSE]);
        assert_eq!(*item.prompt.last().unwrap(), SEP);
        assert_eq!(v.decode(&item.target).unwrap(), "d c ab<eos>");
    }
}
