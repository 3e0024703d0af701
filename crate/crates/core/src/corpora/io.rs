//! On-disk formats: token streams as a headed little-endian `u32` array,
//! item sets as JSON lines.

use super::vocab::Vocabulary;
use crate::error::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;

pub const CORPUS_MAGIC: &[u8; 8] = b"LAYRATOK";
pub const CORPUS_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 32 + 8;

pub fn corpus_to_bytes(tokens: &[u32], vocab: &Vocabulary) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * tokens.len());
    out.extend_from_slice(CORPUS_MAGIC);
    out.extend_from_slice(&CORPUS_VERSION.to_le_bytes());
    out.extend_from_slice(&hex::decode(vocab.hash()).expect("hex digest"));
    out.extend_from_slice(&(tokens.len() as u64).to_le_bytes());
    for t in tokens {
        out.extend_from_slice(&t.to_le_bytes());
    }
    out
}

/// Decodes a corpus and checks it was tokenized with `vocab`.
pub fn corpus_from_bytes(bytes: &[u8], vocab: &Vocabulary) -> Result<Vec<u32>> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != CORPUS_MAGIC {
        return Err(Error::Corrupt("not a token corpus file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CORPUS_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CORPUS_VERSION,
        });
    }
    if hex::encode(&bytes[12..44]) != vocab.hash() {
        return Err(Error::data("corpus was tokenized with a different vocabulary"));
    }
    let count = u64::from_le_bytes(bytes[44..52].try_into().unwrap()) as usize;
    let body = &bytes[HEADER_LEN..];
    if body.len() != count.saturating_mul(4) {
        return Err(Error::Corrupt(format!(
            "header declares {count} tokens but {} bytes follow",
            body.len()
        )));
    }
    let tokens: Vec<u32> = body
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab.len()) {
        return Err(Error::Index(format!("token id {bad} outside vocabulary of {}", vocab.len())));
    }
    Ok(tokens)
}

pub fn write_corpus(path: &Path, tokens: &[u32], vocab: &Vocabulary) -> Result<()> {
    write_file(path, &corpus_to_bytes(tokens, vocab))
}

pub fn read_corpus(path: &Path, vocab: &Vocabulary) -> Result<Vec<u32>> {
    corpus_from_bytes(&fs::read(path)?, vocab)
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(|e| Error::data(e.to_string()))?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn from_jsonl<T: DeserializeOwned>(bytes: &[u8]) -> Result<Vec<T>> {
    let text = std::str::from_utf8(bytes).map_err(|_| Error::data("item file is not UTF-8"))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::data(format!("line {}: {e}", i + 1))))
        .collect()
}

/// Hex SHA-256 of the canonical JSON-lines encoding.
pub fn items_hash<T: Serialize>(items: &[T]) -> Result<String> {
    Ok(hex::encode(Sha256::digest(to_jsonl(items)?)))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    write_file(path, &to_jsonl(items)?)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    from_jsonl(&fs::read(path)?)
}

/// Writes through a temporary file and a rename.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
