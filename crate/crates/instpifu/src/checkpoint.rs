//! Single-file parameter archives.
//!
//! Layout: 4-byte magic, u32 format version, u64 JSON header length, the
//! header, then every tensor's values back to back as little-endian
//! scalars. The header carries a caller-supplied JSON config snapshot
//! (architecture hyperparameters, seeds, ablation flag) plus one manifest
//! entry per parameter, so names and shapes are readable without touching
//! the payload.

use crate::nn::ParamStore;
use crate::{Error, Result, Scalar};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"IPFC";
const FORMAT_VERSION: u32 = 1;

/// One parameter's manifest entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload (which starts after the header).
    pub offset: u64,
}

/// Parsed checkpoint header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    /// "f32" or "f64".
    pub dtype: String,
    /// Caller-supplied config snapshot; stored verbatim.
    pub config: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

impl CheckpointHeader {
    /// Parameter names in storage order.
    pub fn names(&self) -> Vec<&str> {
        self.params.iter().map(|p| p.name.as_str()).collect()
    }

    /// Hash of the stored config, for compatibility checks between a
    /// checkpoint and a run configuration.
    pub fn config_hash(&self) -> String {
        config_hash(&self.config)
    }
}

fn dtype_of<S: Scalar>() -> &'static str {
    match std::mem::size_of::<S>() {
        4 => "f32",
        8 => "f64",
        _ => unreachable!("scalars are f32 or f64"),
    }
}

/// Hex SHA-256 of a JSON value's canonical serialization.
pub fn config_hash(config: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(config).expect("JSON value serializes");
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Writes a parameter store plus its config snapshot to one archive file.
pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    store: &ParamStore<S>,
    config: &serde_json::Value,
) -> Result<()> {
    let elem = std::mem::size_of::<S>() as u64;
    let mut params = Vec::with_capacity(store.len());
    let mut offset = 0u64;
    for (name, value) in store.iter() {
        params.push(ParamEntry {
            name: name.to_string(),
            shape: value.shape().to_vec(),
            offset,
        });
        offset += value.len() as u64 * elem;
    }
    let header = CheckpointHeader {
        version: FORMAT_VERSION,
        dtype: dtype_of::<S>().to_string(),
        config: config.clone(),
        params,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())
        ?;
    w.write_all(&header_bytes)?;
    let mut buf = Vec::with_capacity(4096);
    for (_, value) in store.iter() {
        buf.clear();
        for v in value.iter() {
            let x = v.to_f();
            if elem == 4 {
                buf.extend_from_slice(&(x as f32).to_le_bytes());
            } else {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact_or_malformed(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::malformed("checkpoint", "unexpected end of file"))
}

fn read_header_from(r: &mut impl Read) -> Result<CheckpointHeader> {
    let mut magic = [0u8; 4];
    read_exact_or_malformed(r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::malformed("checkpoint", "bad magic"));
    }
    let mut v4 = [0u8; 4];
    read_exact_or_malformed(r, &mut v4)?;
    let version = u32::from_le_bytes(v4);
    if version != FORMAT_VERSION {
        return Err(Error::ManifestVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let mut l8 = [0u8; 8];
    read_exact_or_malformed(r, &mut l8)?;
    let header_len = u64::from_le_bytes(l8) as usize;
    if header_len > 1 << 30 {
        return Err(Error::malformed("checkpoint", "implausible header length"));
    }
    let mut header_bytes = vec![0u8; header_len];
    read_exact_or_malformed(r, &mut header_bytes)?;
    serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::malformed("checkpoint header", e.to_string()))
}

/// Reads just the header: names, shapes, and the config snapshot, without
/// loading any tensor data.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let mut r = BufReader::new(File::open(path)?);
    read_header_from(&mut r)
}

/// Parameter names stored in an archive, cheaply (header-only read).
pub fn manifest_names(path: &Path) -> Result<Vec<String>> {
    Ok(read_header(path)?
        .params
        .into_iter()
        .map(|p| p.name)
        .collect())
}

/// Loads an archive into a fresh parameter store. The archive's dtype must
/// match `S` exactly; converting precision is a caller decision, not an
/// implicit one.
pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<(ParamStore<S>, CheckpointHeader)> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header_from(&mut r)?;
    if header.dtype != dtype_of::<S>() {
        return Err(Error::Config(format!(
            "checkpoint holds {} tensors, requested {}",
            header.dtype,
            dtype_of::<S>()
        )));
    }
    let elem = std::mem::size_of::<S>();
    let payload_start = r.stream_position()?;
    let mut store = ParamStore::<S>::new();
    for entry in &header.params {
        let n: usize = entry.shape.iter().product();
        r.seek(SeekFrom::Start(payload_start + entry.offset))
            ?;
        let mut bytes = vec![0u8; n * elem];
        read_exact_or_malformed(&mut r, &mut bytes)?;
        let mut data = Vec::with_capacity(n);
        for chunk in bytes.chunks_exact(elem) {
            let x = if elem == 4 {
                f32::from_le_bytes(chunk.try_into().expect("4-byte chunk")) as f64
            } else {
                f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"))
            };
            data.push(S::from_f(x));
        }
        let value = ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
            .map_err(|_| Error::malformed("checkpoint tensor", entry.name.clone()))?;
        store.add(&entry.name, value)?;
    }
    Ok((store, header))
}
