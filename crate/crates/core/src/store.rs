//! Binary checkpoint and delta files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "LAYRAWTS" | u32 version | u8 kind
//! config: n_layers d_model n_heads d_ff vocab_size max_seq_len seed (u64 each)
//! u32 table count, then per table: u32 tensor count, per tensor:
//!     u16 name length, name, u8 rank, u64 dims, f64 payload
//! u64 provenance length, provenance as canonical JSON
//! sha256 of every preceding byte
//! ```
//!
//! A checkpoint has one table; a delta has two (leading part and exact
//! residual). The trailing digest guards the whole file and is checked before
//! anything else is interpreted. The content hash identifies a model by
//! config and values alone: it is the digest of the same encoding with the
//! provenance left empty.

use crate::arithmetic::ParamDelta;
use crate::error::{Error, Result};
use crate::model::{Checkpoint, ModelConfig, ParamId, Provenance};
use crate::tensor::Tensor;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"LAYRAWTS";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum FileKind {
    Checkpoint = 0,
    Delta = 1,
}

type Table = BTreeMap<ParamId, Tensor>;

struct Payload {
    kind: FileKind,
    config: ModelConfig,
    tables: Vec<Table>,
    provenance: Provenance,
}

fn encode(p: &Payload) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(p.kind as u8);
    let c = &p.config;
    for v in [c.n_layers, c.d_model, c.n_heads, c.d_ff, c.vocab_size, c.max_seq_len] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    out.extend_from_slice(&c.seed.to_le_bytes());
    out.extend_from_slice(&(p.tables.len() as u32).to_le_bytes());
    for table in &p.tables {
        out.extend_from_slice(&(table.len() as u32).to_le_bytes());
        for (id, t) in table {
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("parameter {id} (refusing to save)")));
            }
            let name = id.to_string();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let prov = serde_json::to_vec(&p.provenance).map_err(|e| Error::data(e.to_string()))?;
    out.extend_from_slice(&(prov.len() as u64).to_le_bytes());
    out.extend_from_slice(&prov);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Corrupt("size field overflows".into()))
    }
}

fn decode(bytes: &[u8]) -> Result<Payload> {
    if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN {
        return Err(Error::Corrupt(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Corrupt("bad magic bytes".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Corrupt("content hash mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: MAGIC.len() };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let kind = match r.u8()? {
        0 => FileKind::Checkpoint,
        1 => FileKind::Delta,
        k => return Err(Error::Corrupt(format!("unknown file kind {k}"))),
    };
    let config = ModelConfig {
        n_layers: r.usize()?,
        d_model: r.usize()?,
        n_heads: r.usize()?,
        d_ff: r.usize()?,
        vocab_size: r.usize()?,
        max_seq_len: r.usize()?,
        seed: r.u64()?,
    };
    config
        .validate()
        .map_err(|e| Error::Corrupt(format!("stored config: {e}")))?;
    let n_tables = r.u32()?;
    let mut tables = Vec::new();
    for _ in 0..n_tables {
        let n = r.u32()?;
        let mut table = Table::new();
        for _ in 0..n {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?;
            let id: ParamId = name
                .parse()
                .map_err(|_| Error::Corrupt(format!("unknown tensor name {name:?}")))?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
            let count = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Corrupt(format!("{name} shape overflows")))?;
            let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::Corrupt("payload overflows".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Corrupt(format!("{name}: {e}")))?;
            table.insert(id, t);
        }
        tables.push(table);
    }
    let len = r.usize()?;
    let provenance = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::Corrupt(format!("provenance: {e}")))?;
    if r.pos != body.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(Payload {
        kind,
        config,
        tables,
        provenance,
    })
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    drop(f);
    fs::rename(&tmp, path)?;
    Ok(())
}

fn hex_digest(bytes: &[u8]) -> String {
    hex::encode(&bytes[bytes.len() - DIGEST_LEN..])
}

pub fn checkpoint_to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    encode(&Payload {
        kind: FileKind::Checkpoint,
        config: *ckpt.config(),
        tables: vec![ckpt.params().clone()],
        provenance: ckpt.provenance.clone(),
    })
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let p = decode(bytes)?;
    if p.kind != FileKind::Checkpoint || p.tables.len() != 1 {
        return Err(Error::data("file holds a delta, not a checkpoint"));
    }
    let table = p.tables.into_iter().next().unwrap();
    Checkpoint::new(p.config, table, p.provenance)
}

pub fn delta_to_bytes(delta: &ParamDelta) -> Result<Vec<u8>> {
    let (hi, lo) = delta.parts();
    encode(&Payload {
        kind: FileKind::Delta,
        config: *delta.config(),
        tables: vec![hi.clone(), lo.clone()],
        provenance: delta.provenance.clone(),
    })
}

pub fn delta_from_bytes(bytes: &[u8]) -> Result<ParamDelta> {
    let p = decode(bytes)?;
    if p.kind != FileKind::Delta || p.tables.len() != 2 {
        return Err(Error::data("file holds a checkpoint, not a delta"));
    }
    let mut tables = p.tables.into_iter();
    let (hi, lo) = (tables.next().unwrap(), tables.next().unwrap());
    ParamDelta::from_parts(p.config, hi, lo, p.provenance)
}

/// Hex SHA-256 over config and parameter values, ignoring provenance.
pub fn content_hash(ckpt: &Checkpoint) -> Result<String> {
    let bytes = encode(&Payload {
        kind: FileKind::Checkpoint,
        config: *ckpt.config(),
        tables: vec![ckpt.params().clone()],
        provenance: Provenance::new(),
    })?;
    Ok(hex_digest(&bytes))
}

pub fn delta_hash(delta: &ParamDelta) -> Result<String> {
    let (hi, lo) = delta.parts();
    let bytes = encode(&Payload {
        kind: FileKind::Delta,
        config: *delta.config(),
        tables: vec![hi.clone(), lo.clone()],
        provenance: Provenance::new(),
    })?;
    Ok(hex_digest(&bytes))
}

/// Writes atomically and returns the content hash.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<String> {
    write_atomic(path, &checkpoint_to_bytes(ckpt)?)?;
    content_hash(ckpt)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint_from_bytes(&fs::read(path)?)
}

pub fn save_delta(path: &Path, delta: &ParamDelta) -> Result<String> {
    write_atomic(path, &delta_to_bytes(delta)?)?;
    delta_hash(delta)
}

pub fn load_delta(path: &Path) -> Result<ParamDelta> {
    delta_from_bytes(&fs::read(path)?)
}

/// Digest recorded in a file's trailer, without decoding the rest.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    if bytes.len() < DIGEST_LEN {
        return Err(Error::Corrupt("file too short".into()));
    }
    Ok(hex_digest(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    fn small() -> Checkpoint {
        init_model(ModelConfig {
            n_layers: 1,
            d_model: 4,
            n_heads: 2,
            d_ff: 6,
            vocab_size: 5,
            max_seq_len: 8,
            seed: 2,
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = small();
        let bytes = checkpoint_to_bytes(&m).unwrap();
        let back = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert!(back.changed_params(&m).is_empty());
        assert_eq!(checkpoint_to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn version_mismatch_names_both_versions() {
        let mut bytes = checkpoint_to_bytes(&small()).unwrap();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        let n = bytes.len() - DIGEST_LEN;
        let digest = Sha256::digest(&bytes[..n]);
        bytes[n..].copy_from_slice(&digest);
        let err = checkpoint_from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::Version { found: 7, expected: 1 }));
        let msg = err.to_string();
        assert!(msg.contains('7') && msg.contains('1'), "{msg}");
    }

    #[test]
    fn truncation_and_flips_are_corrupt() {
        let bytes = checkpoint_to_bytes(&small()).unwrap();
        for cut in [0, 5, 40, bytes.len() - 1] {
            assert!(matches!(checkpoint_from_bytes(&bytes[..cut]), Err(Error::Corrupt(_))));
        }
        let mut flipped = bytes.clone();
        flipped[100] ^= 0x40;
        assert!(matches!(checkpoint_from_bytes(&flipped), Err(Error::Corrupt(_))));
    }

    #[test]
    fn non_finite_refused() {
        let mut m = small();
        m.values_mut(ParamId::Head)[0] = f64::INFINITY;
        assert!(matches!(checkpoint_to_bytes(&m), Err(Error::NonFinite(_))));
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/m.ckpt");
        let m = small();
        let h = save_checkpoint(&path, &m).unwrap();
        assert_eq!(h, content_hash(&m).unwrap());
        assert_eq!(load_checkpoint(&path).unwrap(), m);
        let names: Vec<_> = fs::read_dir(path.parent().unwrap()).unwrap().collect();
        assert_eq!(names.len(), 1);
    }

    #[test]
    fn content_hash_ignores_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let m = small();
        let mut p = Provenance::new();
        p.insert("note".into(), "x".into());
        let tagged = m.clone().with_provenance(p);
        assert_eq!(content_hash(&m).unwrap(), content_hash(&tagged).unwrap());
        save_checkpoint(&dir.path().join("a"), &m).unwrap();
        save_checkpoint(&dir.path().join("b"), &tagged).unwrap();
        assert_ne!(file_hash(&dir.path().join("a")).unwrap(), file_hash(&dir.path().join("b")).unwrap());
        let mut changed = m.clone();
        changed.values_mut(ParamId::Head)[0] += 1.0;
        assert_ne!(content_hash(&m).unwrap(), content_hash(&changed).unwrap());
    }

    #[test]
    fn kind_mismatch_is_a_data_error() {
        let m = small();
        let d = crate::arithmetic::delta(&m, &m).unwrap();
        let bytes = delta_to_bytes(&d).unwrap();
        assert!(matches!(checkpoint_from_bytes(&bytes), Err(Error::Data(_))));
        assert!(matches!(
            delta_from_bytes(&checkpoint_to_bytes(&m).unwrap()),
            Err(Error::Data(_))
        ));
    }
}
