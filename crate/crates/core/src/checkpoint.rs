//! Checkpoint container: `KRCK` + u64 header length + JSON header (caller
//! metadata and section table) + concatenated [`ParamStore`] blobs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use krlab_nn::ParamStore;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::datasets::atomic_write;
use crate::error::{KrError, Result};

const MAGIC: &[u8; 4] = b"KRCK";

#[derive(Serialize, Deserialize)]
struct Header<M> {
    meta: M,
    sections: Vec<(String, usize)>,
}

/// Writes `meta` and the named stores atomically.
pub fn save_checkpoint<M: Serialize>(path: &Path, meta: &M, sections: &[(&str, &ParamStore)]) -> Result<()> {
    let blobs: Vec<Vec<u8>> = sections.iter().map(|(_, s)| s.to_bytes()).collect();
    let header = Header {
        meta,
        sections: sections.iter().zip(&blobs).map(|((n, _), b)| (n.to_string(), b.len())).collect(),
    };
    let h = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + h.len() + blobs.iter().map(Vec::len).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(h.len() as u64).to_le_bytes());
    out.extend_from_slice(&h);
    for b in &blobs {
        out.extend_from_slice(b);
    }
    atomic_write(path, &out)
}

/// Decoded checkpoint: metadata plus stores by section name.
#[derive(Debug)]
pub struct Checkpoint<M> {
    pub meta: M,
    pub sections: BTreeMap<String, ParamStore>,
}

impl<M> Checkpoint<M> {
    /// Removes and returns a section, failing if absent.
    pub fn take(&mut self, name: &str) -> Result<ParamStore> {
        self.sections
            .remove(name)
            .ok_or_else(|| KrError::Serde(format!("checkpoint has no `{name}` section")))
    }
}

pub fn load_checkpoint<M: DeserializeOwned>(path: &Path) -> Result<Checkpoint<M>> {
    let bytes = fs::read(path).map_err(|e| KrError::io(path, e))?;
    let corrupt = |what: &str| KrError::Serde(format!("{}: {what}", path.display()));
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let hlen = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let h = bytes.get(12..12 + hlen).ok_or_else(|| corrupt("truncated header"))?;
    let header: Header<M> = serde_json::from_slice(h).map_err(|e| corrupt(&e.to_string()))?;
    let mut at = 12 + hlen;
    let mut sections = BTreeMap::new();
    for (name, len) in header.sections {
        let blob = bytes.get(at..at + len).ok_or_else(|| corrupt("truncated section"))?;
        sections.insert(name, ParamStore::from_bytes(blob)?);
        at += len;
    }
    if at != bytes.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(Checkpoint {
        meta: header.meta,
        sections,
    })
}
