//! Versioned binary checkpoint of a model configuration and its parameters.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "STGF"                      4 bytes magic
//! version                     u32
//! hash_len, hash              u32, UTF-8 config hash
//! json_len, json              u64, UTF-8 model config
//! tensor_count                u32
//! per tensor:
//!   name_len, name            u32, UTF-8
//!   group                     u8   (0 trajectory, 1 prior, 2 posterior)
//!   flags                     u8   (bit 0 trainable, bit 1 decay)
//!   rows, cols                u64, u64
//!   values                    rows·cols f64, row-major
//! sha256                      32 bytes over everything above
//! ```

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Stgformer};
use crate::params::{ParamEntry, ParamGroup, ParamStore};

pub const MAGIC: &[u8; 4] = b"STGF";
pub const FORMAT_VERSION: u32 = 1;

fn group_code(g: ParamGroup) -> u8 {
    match g {
        ParamGroup::Trajectory => 0,
        ParamGroup::Prior => 1,
        ParamGroup::Posterior => 2,
    }
}

fn group_from(code: u8) -> Result<ParamGroup> {
    match code {
        0 => Ok(ParamGroup::Trajectory),
        1 => Ok(ParamGroup::Prior),
        2 => Ok(ParamGroup::Posterior),
        other => Err(Error::CorruptCheckpoint(format!("unknown parameter group {other}"))),
    }
}

pub fn encode(model: &Stgformer) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.write_u32::<LittleEndian>(FORMAT_VERSION).unwrap();
    let hash = model.config().hash();
    buf.write_u32::<LittleEndian>(hash.len() as u32).unwrap();
    buf.extend_from_slice(hash.as_bytes());
    let json = serde_json::to_string(model.config()).expect("config serializes");
    buf.write_u64::<LittleEndian>(json.len() as u64).unwrap();
    buf.extend_from_slice(json.as_bytes());
    let entries = model.params().entries();
    buf.write_u32::<LittleEndian>(entries.len() as u32).unwrap();
    for e in entries {
        buf.write_u32::<LittleEndian>(e.name.len() as u32).unwrap();
        buf.extend_from_slice(e.name.as_bytes());
        buf.write_u8(group_code(e.group)).unwrap();
        buf.write_u8(u8::from(e.trainable) | (u8::from(e.decay) << 1)).unwrap();
        buf.write_u64::<LittleEndian>(e.value.nrows() as u64).unwrap();
        buf.write_u64::<LittleEndian>(e.value.ncols() as u64).unwrap();
        for v in e.value.iter() {
            buf.write_f64::<LittleEndian>(*v).unwrap();
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

fn truncated(_: std::io::Error) -> Error {
    Error::CorruptCheckpoint("file is truncated".into())
}

fn read_string(cur: &mut Cursor<&[u8]>, len: usize) -> Result<String> {
    let remaining = cur.get_ref().len() - cur.position() as usize;
    if len > remaining {
        return Err(Error::CorruptCheckpoint("string runs past end of file".into()));
    }
    let mut bytes = vec![0; len];
    cur.read_exact(&mut bytes).map_err(truncated)?;
    String::from_utf8(bytes).map_err(|_| Error::CorruptCheckpoint("string is not UTF-8".into()))
}

pub fn decode(bytes: &[u8]) -> Result<Stgformer> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..4] != MAGIC {
        return Err(Error::CorruptCheckpoint("missing magic header".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    if bytes.len() < 8 + 32 {
        return Err(Error::CorruptCheckpoint("file is truncated".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::CorruptCheckpoint("checksum mismatch".into()));
    }
    let mut cur = Cursor::new(body);
    cur.set_position(8);
    let hash_len = cur.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    let hash = read_string(&mut cur, hash_len)?;
    let json_len = cur.read_u64::<LittleEndian>().map_err(truncated)? as usize;
    let json = read_string(&mut cur, json_len)?;
    let config: ModelConfig =
        serde_json::from_str(&json).map_err(|e| Error::CorruptCheckpoint(format!("config is unreadable: {e}")))?;
    if config.hash() != hash {
        return Err(Error::CorruptCheckpoint("config hash does not match stored config".into()));
    }
    let count = cur.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = cur.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let name = read_string(&mut cur, name_len)?;
        let group = group_from(cur.read_u8().map_err(truncated)?)?;
        let flags = cur.read_u8().map_err(truncated)?;
        let rows = cur.read_u64::<LittleEndian>().map_err(truncated)? as usize;
        let cols = cur.read_u64::<LittleEndian>().map_err(truncated)? as usize;
        let len = rows
            .checked_mul(cols)
            .filter(|l| l.checked_mul(8).is_some_and(|b| b <= body.len()))
            .ok_or_else(|| Error::CorruptCheckpoint(format!("tensor {name} has implausible shape {rows}×{cols}")))?;
        let mut values = vec![0.0; len];
        cur.read_f64_into::<LittleEndian>(&mut values).map_err(truncated)?;
        entries.push(ParamEntry {
            name,
            group,
            value: Array2::from_shape_vec((rows, cols), values).expect("length checked"),
            trainable: flags & 1 != 0,
            decay: flags & 2 != 0,
        });
    }
    if cur.position() as usize != body.len() {
        return Err(Error::CorruptCheckpoint("trailing bytes after tensors".into()));
    }
    Stgformer::from_params(config, ParamStore::from_entries(entries))
}

pub fn save_checkpoint(model: &Stgformer, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, encode(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Stgformer> {
    decode(&std::fs::read(path)?)
}

/// Loads a checkpoint and requires its configuration to equal `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<Stgformer> {
    let model = load_checkpoint(path)?;
    if model.config() != expected {
        return Err(Error::ConfigMismatch(config_diff(model.config(), expected)));
    }
    Ok(model)
}

fn config_diff(found: &ModelConfig, expected: &ModelConfig) -> String {
    let a = serde_json::to_value(found).expect("config serializes");
    let b = serde_json::to_value(expected).expect("config serializes");
    let (Some(a), Some(b)) = (a.as_object(), b.as_object()) else {
        return "configurations differ".into();
    };
    let diffs: Vec<String> = a
        .iter()
        .filter(|(k, v)| b.get(*k) != Some(*v))
        .map(|(k, v)| format!("{k}: checkpoint has {v}, expected {}", b.get(k).cloned().unwrap_or_default()))
        .collect();
    diffs.join("; ")
}
