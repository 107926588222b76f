//! Split container files and the per-dataset metadata record.
//!
//! A split file is `KRDS` + u64 header length + JSON header, then the image
//! tensor as little-endian f32, the labels as little-endian u32 and, for
//! synthetic dumps, a soft-label matrix as f32.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use krlab_nn::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{LabeledDataset, RegistryEntry, Split};
use crate::error::{KrError, Result};

const MAGIC: &[u8; 4] = b"KRDS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    name: String,
    split: Split,
    num_classes: usize,
    shape: Vec<usize>,
    soft_labels: bool,
    spec_hash: String,
}

/// Decoded split file.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitFile {
    pub dataset: LabeledDataset,
    pub soft_labels: Option<Tensor>,
    pub spec_hash: String,
}

/// Contents of `<root>/<name>/meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheMeta {
    pub entry: RegistryEntry,
    pub spec_hash: String,
    pub seed: Option<u64>,
    pub format_version: u32,
}

pub(crate) fn spec_hash(entry: &RegistryEntry) -> String {
    let bytes = serde_json::to_vec(entry).expect("registry entries serialize");
    hex(&Sha256::digest(bytes))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| KrError::io(dir, e))?;
    }
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| KrError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| KrError::io(&tmp, e))?;
    f.sync_all().map_err(|e| KrError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| KrError::io(path, e))
}

pub fn write_split(path: &Path, ds: &LabeledDataset, soft: Option<&Tensor>, spec_hash: &str) -> Result<()> {
    let header = Header {
        name: ds.name.clone(),
        split: ds.split,
        num_classes: ds.num_classes,
        shape: ds.images.shape().to_vec(),
        soft_labels: soft.is_some(),
        spec_hash: spec_hash.to_string(),
    };
    let h = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + h.len() + ds.images.len() * 4 + ds.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(h.len() as u64).to_le_bytes());
    out.extend_from_slice(&h);
    for v in ds.images.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &l in &ds.labels {
        out.extend_from_slice(&(l as u32).to_le_bytes());
    }
    if let Some(s) = soft {
        for v in s.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    atomic_write(path, &out)
}

pub fn read_split(path: &Path) -> Result<SplitFile> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| KrError::io(path, e))?;
    let corrupt = |reason: &str| KrError::Dataset {
        name: path.display().to_string(),
        reason: format!("corrupt split file: {reason}"),
    };
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let hlen = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let header: Header = bytes
        .get(12..12 + hlen)
        .ok_or_else(|| corrupt("truncated header"))
        .and_then(|h| serde_json::from_slice(h).map_err(|e| corrupt(&e.to_string())))?;
    let n_img: usize = header.shape.iter().product();
    let n = header.shape.first().copied().unwrap_or(0);
    let soft_len = if header.soft_labels { n * header.num_classes } else { 0 };
    let body = &bytes[12 + hlen..];
    if body.len() != 4 * (n_img + n + soft_len) {
        return Err(corrupt("payload length mismatch"));
    }
    let f32s = |b: &[u8]| -> Vec<f32> { b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect() };
    let images = Tensor::new(&header.shape, f32s(&body[..4 * n_img]));
    let labels = body[4 * n_img..4 * (n_img + n)]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let soft_labels = header
        .soft_labels
        .then(|| Tensor::new(&[n, header.num_classes], f32s(&body[4 * (n_img + n)..])));
    let dataset = LabeledDataset::new(&header.name, header.split, header.num_classes, images, labels)?;
    Ok(SplitFile {
        dataset,
        soft_labels,
        spec_hash: header.spec_hash,
    })
}

fn dir(root: &Path, entry: &RegistryEntry) -> PathBuf {
    root.join(&entry.spec.name)
}

/// Returns cached splits if the metadata matches the registry entry.
pub(crate) fn load_cached(root: &Path, entry: &RegistryEntry) -> Result<Option<[LabeledDataset; 3]>> {
    let d = dir(root, entry);
    let meta_path = d.join("meta.json");
    let Ok(text) = fs::read_to_string(&meta_path) else {
        return Ok(None);
    };
    let Ok(meta) = serde_json::from_str::<CacheMeta>(&text) else {
        return Ok(None);
    };
    let hash = spec_hash(entry);
    if meta.spec_hash != hash {
        return Ok(None);
    }
    let mut out = Vec::with_capacity(3);
    for split in Split::ALL {
        let p = d.join(format!("{}.bin", split.as_str()));
        if !p.exists() {
            return Ok(None);
        }
        let f = read_split(&p)?;
        if f.spec_hash != hash || f.dataset.len() != entry.spec.size(split) {
            return Ok(None);
        }
        out.push(f.dataset);
    }
    Ok(Some(out.try_into().expect("three splits")))
}

pub(crate) fn store(root: &Path, entry: &RegistryEntry, splits: &[LabeledDataset; 3]) -> Result<()> {
    let d = dir(root, entry);
    let hash = spec_hash(entry);
    for s in splits {
        write_split(&d.join(format!("{}.bin", s.split.as_str())), s, None, &hash)?;
    }
    let seed = match entry.source {
        super::Source::Toy { seed } => Some(seed),
        _ => None,
    };
    let meta = CacheMeta {
        entry: entry.clone(),
        spec_hash: hash,
        seed,
        format_version: 1,
    };
    atomic_write(&d.join("meta.json"), &serde_json::to_vec_pretty(&meta)?)
}
