//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "UBRC" | u32 version | u32 config_len | config (UTF-8 TOML)
//! repeated until EOF:
//!   u32 name_len | name | u32 rank | u32 extent × rank | f64 × product(extents)
//! ```
//!
//! The config text carries a `[network]` table; training checkpoints add a
//! `[training]` table and `velocity.*` tensors which `load_params` ignores.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{ModelParams, NetworkConfig};
use crate::diffcore::{Tensor, MAX_RANK};
use crate::error::{Result, UbrError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UBRC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Raw contents of a checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn encode_checkpoint(config_text: &str, tensors: &[(&str, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    out.extend_from_slice(config_text.as_bytes());
    for (name, tensor) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &e in tensor.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_checkpoint(path: &Path, config_text: &str, tensors: &[(&str, &Tensor)]) -> Result<()> {
    fs::write(path, encode_checkpoint(config_text, tensors)).map_err(|e| UbrError::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(UbrError::format(
                self.path,
                format!("truncated checkpoint while reading {what} at byte {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(UbrError::format(path, "not a checkpoint (bad magic bytes)"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(UbrError::format(
            path,
            format!("unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"),
        ));
    }
    let len = r.u32("config length")? as usize;
    let config_text = std::str::from_utf8(r.take(len, "config")?)
        .map_err(|_| UbrError::format(path, "config text is not UTF-8"))?
        .to_string();
    let mut tensors = Vec::new();
    while !r.done() {
        let len = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| UbrError::format(path, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32("tensor rank")? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(UbrError::format(path, format!("tensor `{name}` has invalid rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.u32("tensor extent").map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let raw = r.take(count * 8, "tensor data")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let tensor = Tensor::new(shape, data).map_err(|e| UbrError::format(path, format!("tensor `{name}`: {e}")))?;
        tensors.push((name, tensor));
    }
    Ok(Checkpoint { config_text, tensors })
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| UbrError::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

pub(crate) fn network_config_text(config: &NetworkConfig) -> String {
    let mut doc = toml::Table::new();
    doc.insert("network".into(), toml::Value::try_from(config).expect("serialisable config"));
    toml::to_string(&doc).expect("serialisable config")
}

pub(crate) fn parse_network_config(text: &str, path: &Path) -> Result<NetworkConfig> {
    let mut doc: toml::Table = text
        .parse()
        .map_err(|e| UbrError::format(path, format!("checkpoint config: {e}")))?;
    let net = doc
        .remove("network")
        .ok_or_else(|| UbrError::format(path, "checkpoint config has no [network] table"))?;
    net.try_into()
        .map_err(|e| UbrError::format(path, format!("checkpoint [network]: {e}")))
}

pub fn save_params(params: &ModelParams, path: &Path) -> Result<()> {
    let tensors: Vec<(&str, &Tensor)> = params.iter().collect();
    write_checkpoint(path, &network_config_text(params.config()), &tensors)
}

/// Loads network parameters; the architecture always comes from the file.
pub fn load_params(path: &Path) -> Result<ModelParams> {
    let ckpt = read_checkpoint(path)?;
    params_from_checkpoint(&ckpt, path)
}

pub(crate) fn params_from_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<ModelParams> {
    let config = parse_network_config(&ckpt.config_text, path)?;
    let expected: BTreeMap<String, Vec<usize>> = config.parameter_shapes().into_iter().collect();
    let tensors = ckpt
        .tensors
        .iter()
        .filter(|(name, _)| expected.contains_key(name))
        .cloned()
        .collect();
    ModelParams::new(config, tensors).map_err(|e| UbrError::format(path, e.to_string()))
}
