//! Fixed symbol-level vocabulary.
//!
//! Ids are laid out as specials, then every symbol of the planned scripts,
//! then 256 byte-fallback tokens. A symbol outside the table is encoded as
//! the byte tokens of its UTF-8 form.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
/// Word boundary.
pub const SPACE: u32 = 3;
/// Opens an instruction prompt.
pub const INST: u32 = 4;
/// Separates an instruction prompt from its answer.
pub const SEP: u32 = 5;
pub const TASK_COPY: u32 = 6;
pub const TASK_REVERSE: u32 = 7;
/// `TASK_NTH + k - 1` selects word `k` (1-based, k ≤ 3).
pub const TASK_NTH: u32 = 8;

const SPECIALS: &[&str] = &[
    "<pad>", "<bos>", "<eos>", "<sp>", "<inst>", "<sep>", "<copy>", "<reverse>", "<nth1>", "<nth2>", "<nth3>",
];

pub const LATIN: &str = "abcdefghijklmnopqrstuvwxyz";
pub const DEVANAGARI: &str = "कखगघचजटडतदनपबमयरलवसह\u{93e}\u{93f}\u{940}\u{941}\u{942}\u{947}\u{94b}";

/// Which part of the table a token id falls in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Script {
    Special,
    Latin,
    Devanagari,
    /// Byte-fallback tokens, used by any script outside the table.
    Byte,
}

impl Script {
    pub const ALL: &'static [Script] = &[Script::Special, Script::Latin, Script::Devanagari, Script::Byte];

    pub fn name(self) -> &'static str {
        match self {
            Script::Special => "special",
            Script::Latin => "latin",
            Script::Devanagari => "devanagari",
            Script::Byte => "byte",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    scripts: Vec<Script>,
    by_char: HashMap<char, u32>,
    byte_base: u32,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::standard()
    }
}

impl Vocabulary {
    pub fn standard() -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut scripts = vec![Script::Special; tokens.len()];
        let mut by_char = HashMap::new();
        for (chars, script) in [(LATIN, Script::Latin), (DEVANAGARI, Script::Devanagari)] {
            for c in chars.chars() {
                by_char.insert(c, tokens.len() as u32);
                tokens.push(c.to_string());
                scripts.push(script);
            }
        }
        let byte_base = tokens.len() as u32;
        for b in 0..=255u8 {
            tokens.push(format!("<0x{b:02X}>"));
            scripts.push(Script::Byte);
        }
        Self {
            tokens,
            scripts,
            by_char,
            byte_base,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn script(&self, id: u32) -> Option<Script> {
        self.scripts.get(id as usize).copied()
    }

    pub fn has_symbol(&self, c: char) -> bool {
        self.by_char.contains_key(&c)
    }

    /// Hex SHA-256 over the token table.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update((t.len() as u32).to_le_bytes());
            h.update(t.as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn encode_word_into(&self, word: &str, out: &mut Vec<u32>) {
        for c in word.chars() {
            match self.by_char.get(&c) {
                Some(&id) => out.push(id),
                None => {
                    let mut buf = [0u8; 4];
                    for b in c.encode_utf8(&mut buf).bytes() {
                        out.push(self.byte_base + b as u32);
                    }
                }
            }
        }
    }

    pub fn encode_word(&self, word: &str) -> Vec<u32> {
        let mut out = Vec::new();
        self.encode_word_into(word, &mut out);
        out
    }

    /// Words separated by [`SPACE`].
    pub fn encode_words<S: AsRef<str>>(&self, words: &[S]) -> Vec<u32> {
        let mut out = Vec::new();
        for (i, w) in words.iter().enumerate() {
            if i > 0 {
                out.push(SPACE);
            }
            self.encode_word_into(w.as_ref(), &mut out);
        }
        out
    }

    /// Text form of an id sequence: specials other than [`SPACE`] are
    /// rendered by name, byte runs are reassembled as UTF-8.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        let mut bytes = Vec::new();
        let flush = |bytes: &mut Vec<u8>, out: &mut String| -> Result<()> {
            if !bytes.is_empty() {
                let s = std::str::from_utf8(bytes)
                    .map_err(|_| Error::data("byte tokens do not form valid UTF-8"))?;
                out.push_str(s);
                bytes.clear();
            }
            Ok(())
        };
        for &id in ids {
            let script = self
                .script(id)
                .ok_or_else(|| Error::Index(format!("token id {id} outside vocabulary of {}", self.len())))?;
            if script == Script::Byte {
                bytes.push((id - self.byte_base) as u8);
                continue;
            }
            flush(&mut bytes, &mut out)?;
            if id == SPACE {
                out.push(' ');
            } else {
                out.push_str(&self.tokens[id as usize]);
            }
        }
        flush(&mut bytes, &mut out)?;
        Ok(out)
    }
}
