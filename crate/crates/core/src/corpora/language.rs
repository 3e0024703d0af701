//! Synthetic languages: a seeded lexicon of syllabic stems, a depth-bounded
//! phrase grammar with class agreement, a sampler and a recognizer.
//!
//! Every syllable is one consonant followed by one vowel symbol, and every
//! content word is a stem of one or more syllables plus a one-syllable class
//! suffix. A word form therefore splits uniquely into stem and suffix, and
//! forms that differ only in their suffix have the same length.

use crate::error::{Error, Result};
use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

/// Symbols a language is spelled with.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Charset {
    pub consonants: String,
    pub vowels: String,
}

impl Charset {
    pub fn latin() -> Self {
        Self {
            consonants: "bdfghklmnprstvz".into(),
            vowels: "aeiou".into(),
        }
    }

    pub fn devanagari() -> Self {
        Self {
            consonants: "कखगघचजटडतदनपबमयरलवसह".into(),
            vowels: "\u{93e}\u{93f}\u{940}\u{941}\u{942}\u{947}\u{94b}".into(),
        }
    }

    /// An Arabic-script set; none of its symbols are in the standard
    /// vocabulary.
    pub fn arabic() -> Self {
        Self {
            consonants: "بتجدرسکلمنفقشزطع".into(),
            vowels: "اوی".into(),
        }
    }

    pub fn symbols(&self) -> BTreeSet<char> {
        self.consonants.chars().chain(self.vowels.chars()).collect()
    }

    fn validate(&self) -> Result<()> {
        if self.consonants.is_empty() || self.vowels.is_empty() {
            return Err(Error::config("charset needs at least one consonant and one vowel"));
        }
        Ok(())
    }

    fn spell(&self, syllables: &[Syllable]) -> String {
        let c: Vec<char> = self.consonants.chars().collect();
        let v: Vec<char> = self.vowels.chars().collect();
        syllables
            .iter()
            .flat_map(|s| [c[s.0 as usize % c.len()], v[s.1 as usize % v.len()]])
            .collect()
    }
}

/// Abstract `(consonant, vowel)` index pair, spelled modulo the charset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Syllable(pub u16, pub u16);

/// A stem as abstract syllables, so related languages with different
/// scripts can share it.
pub type Stem = Vec<Syllable>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub name: String,
    pub charset: Charset,
    pub lexicon_size: usize,
    pub grammar_seed: u64,
    /// Language this one inherits stems from.
    #[serde(default)]
    pub parent: Option<String>,
    /// Fraction of the lexicon copied from `parent`.
    #[serde(default)]
    pub overlap: f64,
    /// Language loanwords come from.
    #[serde(default)]
    pub loan_source: Option<String>,
    /// Probability that a content word is a loan.
    #[serde(default)]
    pub loanword_rate: f64,
    #[serde(default = "default_zipf")]
    pub zipf_exponent: f64,
    /// Maximum possessor nesting.
    #[serde(default = "default_depth")]
    pub max_depth: usize,
}

fn default_zipf() -> f64 {
    1.0
}

fn default_depth() -> usize {
    1
}

impl LanguageSpec {
    pub fn new(name: &str, charset: Charset, lexicon_size: usize, grammar_seed: u64) -> Self {
        Self {
            name: name.into(),
            charset,
            lexicon_size,
            grammar_seed,
            parent: None,
            overlap: 0.0,
            loan_source: None,
            loanword_rate: 0.0,
            zipf_exponent: default_zipf(),
            max_depth: default_depth(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.charset.validate()?;
        if self.name.is_empty() {
            return Err(Error::config("language name is empty"));
        }
        if self.lexicon_size < 3 {
            return Err(Error::config(format!("{}: lexicon_size must be at least 3", self.name)));
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return Err(Error::config(format!("{}: overlap {} outside [0, 1]", self.name, self.overlap)));
        }
        if !(0.0..=1.0).contains(&self.loanword_rate) {
            return Err(Error::config(format!(
                "{}: loanword_rate {} outside [0, 1]",
                self.name, self.loanword_rate
            )));
        }
        if self.overlap > 0.0 && self.parent.is_none() {
            return Err(Error::config(format!("{}: overlap requested without a parent", self.name)));
        }
        if self.loanword_rate > 0.0 && self.loan_source.is_none() {
            return Err(Error::config(format!("{}: loanword_rate set without a loan source", self.name)));
        }
        if !(self.zipf_exponent >= 0.0 && self.zipf_exponent.is_finite()) {
            return Err(Error::config(format!("{}: bad zipf exponent", self.name)));
        }
        Ok(())
    }

    fn dependencies(&self) -> impl Iterator<Item = &String> {
        self.parent.iter().chain(self.loan_source.iter())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Noun,
    Verb,
    Adj,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Noun, Category::Verb, Category::Adj];

    fn index(self) -> usize {
        self as usize
    }
}

/// Share of the lexicon per category.
const CATEGORY_SHARE: [f64; 3] = [0.5, 0.3, 0.2];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexEntry {
    pub stem: Stem,
    pub category: Category,
    /// Agreement class; meaningful for nouns only.
    pub class: u8,
    /// Spelled stem.
    pub form: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WordOrder {
    Svo,
    Sov,
    Vso,
}

/// Phrase grammar derived from a grammar seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grammar {
    pub order: WordOrder,
    pub adj_before_noun: bool,
    /// Class suffixes, one syllable each.
    pub noun_suffix: [Syllable; 2],
    pub verb_suffix: [Syllable; 2],
    pub adj_suffix: [Syllable; 2],
    /// One-syllable particle introducing a possessor.
    pub genitive: Syllable,
    pub p_object: f64,
    pub p_adj: f64,
    pub p_possessor: f64,
}

impl Grammar {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_616d_6d61_7221);
        let order = [WordOrder::Svo, WordOrder::Sov, WordOrder::Vso][rng.gen_range(0..3)];
        let mut used = HashSet::new();
        // Indices below every preset's consonant and vowel counts, so
        // distinct affixes stay distinct in any preset script.
        let mut syl = |rng: &mut ChaCha8Rng| loop {
            let s = Syllable(rng.gen_range(0..15), rng.gen_range(0..3));
            if used.insert(s) {
                return s;
            }
        };
        let mut pair = |rng: &mut ChaCha8Rng| [syl(rng), syl(rng)];
        let noun_suffix = pair(&mut rng);
        let verb_suffix = pair(&mut rng);
        let adj_suffix = pair(&mut rng);
        let genitive = syl(&mut rng);
        Self {
            order,
            adj_before_noun: rng.gen_bool(0.5),
            noun_suffix,
            verb_suffix,
            adj_suffix,
            genitive,
            p_object: 0.6,
            p_adj: 0.35,
            p_possessor: 0.25,
        }
    }

    fn suffix(&self, cat: Category, class: u8) -> Syllable {
        let table = match cat {
            Category::Noun => &self.noun_suffix,
            Category::Verb => &self.verb_suffix,
            Category::Adj => &self.adj_suffix,
        };
        table[class as usize & 1]
    }
}

/// Where a sampled word came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Source {
    Native(usize),
    Loan(usize),
    Particle,
}

/// One word of a sampled sentence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Word {
    pub source: Source,
    /// `None` for the genitive particle.
    pub category: Option<Category>,
    pub class: u8,
    pub form: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Analysis {
    Content(Category, u8),
    Genitive,
}

/// A generated language.
#[derive(Clone, Debug)]
pub struct Language {
    pub spec: LanguageSpec,
    pub grammar: Grammar,
    /// Native lexicon; position within a category is the Zipf rank.
    pub lexicon: Vec<LexEntry>,
    /// Borrowed entries, spelled as in the source language.
    pub loans: Vec<LexEntry>,
    by_category: [Vec<usize>; 3],
    weights: [WeightedIndex<f64>; 3],
    loans_by_category: [Vec<usize>; 3],
    analyses: HashMap<String, Vec<Analysis>>,
    genitive_form: String,
}

fn derive_seed(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

fn zipf_weights(n: usize, s: f64) -> Vec<f64> {
    (1..=n).map(|r| (r as f64).powf(-s)).collect()
}

/// Builds every spec in dependency order.
pub fn generate_languages(specs: &[LanguageSpec], seed: u64) -> Result<BTreeMap<String, Language>> {
    let mut names = HashSet::new();
    for s in specs {
        s.validate()?;
        if !names.insert(s.name.as_str()) {
            return Err(Error::config(format!("language {} declared twice", s.name)));
        }
    }
    for s in specs {
        if let Some(d) = s.dependencies().find(|d| !names.contains(d.as_str())) {
            return Err(Error::config(format!("{} refers to undeclared language {d}", s.name)));
        }
    }
    let mut done: BTreeMap<String, Language> = BTreeMap::new();
    while done.len() < specs.len() {
        let ready = specs
            .iter()
            .find(|s| !done.contains_key(&s.name) && s.dependencies().all(|d| done.contains_key(d)))
            .ok_or_else(|| Error::config("cyclic parent/loan references between languages"))?;
        let lang = generate_language(ready, seed, &done)?;
        done.insert(ready.name.clone(), lang);
    }
    Ok(done)
}

/// Builds one language; its parent and loan source must be in `known`.
pub fn generate_language(spec: &LanguageSpec, seed: u64, known: &BTreeMap<String, Language>) -> Result<Language> {
    spec.validate()?;
    let lookup = |name: &String| {
        known
            .get(name)
            .ok_or_else(|| Error::config(format!("{} refers to ungenerated language {name}", spec.name)))
    };
    let parent = spec.parent.as_ref().map(lookup).transpose()?;
    let loan_source = spec.loan_source.as_ref().map(lookup).transpose()?;
    let grammar = Grammar::from_seed(spec.grammar_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[b"lexicon", spec.name.as_bytes(), &seed.to_le_bytes()]));
    let n = spec.lexicon_size;
    let n_shared = (spec.overlap * n as f64).round() as usize;

    let mut stems_taken: HashSet<Stem> = HashSet::new();
    let mut forms_taken: HashSet<String> = HashSet::new();
    // Fresh stems also avoid the parent's spellings, so surface overlap
    // equals stem overlap.
    let mut parent_forms: HashSet<String> = HashSet::new();
    if let Some(p) = parent {
        stems_taken.extend(p.lexicon.iter().map(|e| e.stem.clone()));
        parent_forms.extend(p.lexicon.iter().map(|e| spec.charset.spell(&e.stem)));
    }
    let mut entries: Vec<LexEntry> = Vec::with_capacity(n);

    if n_shared > 0 {
        let p = parent.expect("validated: overlap implies parent");
        let mut order: Vec<usize> = (0..p.lexicon.len()).collect();
        order.shuffle(&mut rng);
        for i in order {
            if entries.len() == n_shared {
                break;
            }
            let e = &p.lexicon[i];
            let form = spec.charset.spell(&e.stem);
            if forms_taken.insert(form.clone()) {
                entries.push(LexEntry { form, ..e.clone() });
            }
        }
        if entries.len() < n_shared {
            return Err(Error::config(format!(
                "{}: parent {} cannot supply {n_shared} distinct shared stems",
                spec.name, p.spec.name
            )));
        }
    }

    let targets: Vec<usize> = {
        let mut t: Vec<usize> = CATEGORY_SHARE.iter().map(|s| (s * n as f64).round() as usize).collect();
        t[0] = n - t[1] - t[2];
        t
    };
    let mut counts = [0usize; 3];
    for e in &entries {
        counts[e.category.index()] += 1;
    }
    let mut fresh_cats = Vec::new();
    for c in Category::ALL {
        fresh_cats.extend(std::iter::repeat_n(c, targets[c.index()].saturating_sub(counts[c.index()])));
    }
    while entries.len() + fresh_cats.len() < n {
        fresh_cats.push(Category::Noun);
    }
    fresh_cats.truncate(n - entries.len());
    let mut attempts = 0usize;
    for cat in fresh_cats {
        loop {
            attempts += 1;
            if attempts > 1000 * n + 10_000 {
                return Err(Error::config(format!("{}: charset too small for {n} distinct stems", spec.name)));
            }
            let len = [1, 2, 2, 3][rng.gen_range(0..4)];
            let stem: Stem = (0..len)
                .map(|_| Syllable(rng.gen_range(0..1024), rng.gen_range(0..1024)))
                .collect();
            if stems_taken.contains(&stem) {
                continue;
            }
            let form = spec.charset.spell(&stem);
            if forms_taken.contains(&form) || parent_forms.contains(&form) {
                continue;
            }
            stems_taken.insert(stem.clone());
            forms_taken.insert(form.clone());
            entries.push(LexEntry {
                stem,
                category: cat,
                class: if cat == Category::Noun { rng.gen_range(0..2) } else { 0 },
                form,
            });
            break;
        }
    }
    entries.shuffle(&mut rng);

    let mut loans = Vec::new();
    if let Some(src) = loan_source.filter(|_| spec.loanword_rate > 0.0) {
        for c in Category::ALL {
            let want = ((spec.loanword_rate * targets[c.index()] as f64).round() as usize).max(1);
            for &i in src.by_category[c.index()].iter() {
                if loans.iter().filter(|e: &&LexEntry| e.category == c).count() == want {
                    break;
                }
                let e = &src.lexicon[i];
                if forms_taken.insert(e.form.clone()) {
                    loans.push(e.clone());
                }
            }
        }
    }

    Language::assemble(spec.clone(), grammar, entries, loans)
}

impl Language {
    fn assemble(spec: LanguageSpec, grammar: Grammar, lexicon: Vec<LexEntry>, loans: Vec<LexEntry>) -> Result<Self> {
        let mut by_category: [Vec<usize>; 3] = Default::default();
        for (i, e) in lexicon.iter().enumerate() {
            by_category[e.category.index()].push(i);
        }
        let mut loans_by_category: [Vec<usize>; 3] = Default::default();
        for (i, e) in loans.iter().enumerate() {
            loans_by_category[e.category.index()].push(i);
        }
        if let Some(c) = Category::ALL.iter().find(|c| by_category[c.index()].is_empty()) {
            return Err(Error::config(format!("{}: no {c:?} stems in lexicon", spec.name)));
        }
        let weights = [0, 1, 2].map(|c| {
            WeightedIndex::new(zipf_weights(by_category[c].len(), spec.zipf_exponent))
                .expect("non-empty positive weights")
        });
        let genitive_form = spec.charset.spell(&[grammar.genitive]);
        let mut lang = Self {
            spec,
            grammar,
            lexicon,
            loans,
            by_category,
            weights,
            loans_by_category,
            analyses: HashMap::new(),
            genitive_form,
        };
        let mut analyses: HashMap<String, Vec<Analysis>> = HashMap::new();
        for e in lang.lexicon.iter().chain(&lang.loans) {
            let classes: &[u8] = if e.category == Category::Noun { &[e.class] } else { &[0, 1] };
            for &class in classes {
                let form = lang.inflect(&e.form, e.category, class);
                analyses.entry(form).or_default().push(Analysis::Content(e.category, class));
            }
        }
        analyses
            .entry(lang.genitive_form.clone())
            .or_default()
            .push(Analysis::Genitive);
        for v in analyses.values_mut() {
            v.sort_by_key(|a| format!("{a:?}"));
            v.dedup();
        }
        lang.analyses = analyses;
        Ok(lang)
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    /// Native stems of one category in rank order.
    pub fn category_entries(&self, cat: Category) -> impl Iterator<Item = (usize, &LexEntry)> {
        self.by_category[cat.index()].iter().map(|&i| (i, &self.lexicon[i]))
    }

    /// Sampling probabilities of a category's native stems, in rank order,
    /// conditional on the stem being native.
    pub fn stem_probabilities(&self, cat: Category) -> Vec<f64> {
        let w = zipf_weights(self.by_category[cat.index()].len(), self.spec.zipf_exponent);
        let total: f64 = w.iter().sum();
        w.into_iter().map(|x| x / total).collect()
    }

    pub fn genitive_form(&self) -> &str {
        &self.genitive_form
    }

    /// Stem followed by its class suffix.
    pub fn inflect(&self, stem_form: &str, cat: Category, class: u8) -> String {
        let mut s = stem_form.to_string();
        s.push_str(&self.spec.charset.spell(&[self.grammar.suffix(cat, class)]));
        s
    }

    fn pick(&self, cat: Category, rng: &mut ChaCha8Rng) -> (Source, u8, String) {
        let loans = &self.loans_by_category[cat.index()];
        if !loans.is_empty() && rng.gen_bool(self.spec.loanword_rate) {
            let i = loans[rng.gen_range(0..loans.len())];
            let e = &self.loans[i];
            (Source::Loan(i), e.class, e.form.clone())
        } else {
            let i = self.by_category[cat.index()][self.weights[cat.index()].sample(rng)];
            let e = &self.lexicon[i];
            (Source::Native(i), e.class, e.form.clone())
        }
    }

    fn content_word(&self, cat: Category, class: Option<u8>, rng: &mut ChaCha8Rng) -> Word {
        let (source, own, stem) = self.pick(cat, rng);
        let class = class.unwrap_or(own);
        Word {
            source,
            category: Some(cat),
            class,
            form: self.inflect(&stem, cat, class),
        }
    }

    fn noun_phrase(&self, depth: usize, rng: &mut ChaCha8Rng, out: &mut Vec<Word>) -> u8 {
        let noun = self.content_word(Category::Noun, None, rng);
        let class = noun.class;
        let adj = rng
            .gen_bool(self.grammar.p_adj)
            .then(|| self.content_word(Category::Adj, Some(class), rng));
        if self.grammar.adj_before_noun {
            out.extend(adj.clone());
            out.push(noun);
        } else {
            out.push(noun);
            out.extend(adj);
        }
        if depth < self.spec.max_depth && rng.gen_bool(self.grammar.p_possessor) {
            out.push(Word {
                source: Source::Particle,
                category: None,
                class: 0,
                form: self.genitive_form.clone(),
            });
            self.noun_phrase(depth + 1, rng, out);
        }
        class
    }

    /// One grammatical sentence.
    pub fn sample_sentence(&self, rng: &mut ChaCha8Rng) -> Vec<Word> {
        let mut subject = Vec::new();
        let class = self.noun_phrase(0, rng, &mut subject);
        let verb = self.content_word(Category::Verb, Some(class), rng);
        let mut object = Vec::new();
        if rng.gen_bool(self.grammar.p_object) {
            self.noun_phrase(0, rng, &mut object);
        }
        let mut words = Vec::new();
        match self.grammar.order {
            WordOrder::Svo => {
                words.extend(subject);
                words.push(verb);
                words.extend(object);
            }
            WordOrder::Sov => {
                words.extend(subject);
                words.extend(object);
                words.push(verb);
            }
            WordOrder::Vso => {
                words.push(verb);
                words.extend(subject);
                words.extend(object);
            }
        }
        words
    }

    fn analyses(&self, form: &str) -> &[Analysis] {
        self.analyses.get(form).map_or(&[], Vec::as_slice)
    }

    fn has(&self, form: &str, cat: Category, class: u8) -> bool {
        self.analyses(form).contains(&Analysis::Content(cat, class))
    }

    /// Every `(end, head class)` for a noun phrase starting at `i`.
    fn parse_np(&self, words: &[&str], i: usize, depth: usize) -> Vec<(usize, u8)> {
        let mut heads = Vec::new();
        for class in 0..2u8 {
            let noun_at = |j: usize| j < words.len() && self.has(words[j], Category::Noun, class);
            let adj_at = |j: usize| j < words.len() && self.has(words[j], Category::Adj, class);
            if noun_at(i) {
                heads.push((i + 1, class));
            }
            if self.grammar.adj_before_noun {
                if adj_at(i) && noun_at(i + 1) {
                    heads.push((i + 2, class));
                }
            } else if noun_at(i) && adj_at(i + 1) {
                heads.push((i + 2, class));
            }
        }
        let mut out = heads.clone();
        if depth < self.spec.max_depth {
            for &(end, class) in &heads {
                if end < words.len() && self.analyses(words[end]).contains(&Analysis::Genitive) {
                    for (e2, _) in self.parse_np(words, end + 1, depth + 1) {
                        out.push((e2, class));
                    }
                }
            }
        }
        out
    }

    /// Whether `words` is a sentence of this language.
    pub fn is_grammatical<S: AsRef<str>>(&self, words: &[S]) -> bool {
        let w: Vec<&str> = words.iter().map(AsRef::as_ref).collect();
        let n = w.len();
        let verb_at = |j: usize, c: u8| j < n && self.has(w[j], Category::Verb, c);
        let object_ends = |start: usize| -> Vec<usize> {
            let mut ends = vec![start];
            ends.extend(self.parse_np(&w, start, 0).into_iter().map(|(e, _)| e));
            ends
        };
        match self.grammar.order {
            WordOrder::Svo => self
                .parse_np(&w, 0, 0)
                .into_iter()
                .any(|(e, c)| verb_at(e, c) && object_ends(e + 1).contains(&n)),
            WordOrder::Sov => self
                .parse_np(&w, 0, 0)
                .into_iter()
                .any(|(e, c)| object_ends(e).into_iter().any(|o| o + 1 == n && verb_at(o, c))),
            WordOrder::Vso => (0..2u8).any(|c| {
                verb_at(0, c)
                    && self
                        .parse_np(&w, 1, 0)
                        .into_iter()
                        .any(|(e, sc)| sc == c && object_ends(e).contains(&n))
            }),
        }
    }

    /// Same word with the other agreement class, if it is a verb or
    /// adjective.
    pub(crate) fn flip_agreement(&self, word: &Word) -> Option<Word> {
        let cat = word.category?;
        if cat == Category::Noun {
            return None;
        }
        let stem = match word.source {
            Source::Native(i) => &self.lexicon[i].form,
            Source::Loan(i) => &self.loans[i].form,
            Source::Particle => return None,
        };
        let class = 1 - word.class;
        Some(Word {
            class,
            form: self.inflect(stem, cat, class),
            ..word.clone()
        })
    }
}
