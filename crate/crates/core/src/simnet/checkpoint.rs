//! Single-file tensor container.
//!
//! Layout: an 8-byte little-endian header length, a JSON header
//! `{format_version, kind, model_config, tensors: [{name, dtype, shape, offset}]}`,
//! then the raw little-endian `f32` payloads. Offsets are relative to the
//! first payload byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::decoder::{Decoder, DecoderConfig};
use super::model::Model;
use crate::error::{Error, Result};
use crate::gradcore::{ParamStore, Tensor};

pub const FORMAT_VERSION: u32 = 1;
const DTYPE: &str = "f32";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    model_config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Container {
    pub kind: String,
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn write_container(kind: &str, config: serde_json::Value, store: &ParamStore) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(store.len());
    let mut offset = 0u64;
    for p in store.iter() {
        entries.push(TensorEntry {
            name: p.id.clone(),
            dtype: DTYPE.into(),
            shape: p.value.shape().to_vec(),
            offset,
        });
        offset += 4 * p.value.len() as u64;
    }
    let header = serde_json::to_vec(&Header {
        format_version: FORMAT_VERSION,
        kind: kind.into(),
        model_config: config,
        tensors: entries,
    })?;
    let mut out = Vec::with_capacity(8 + header.len() + offset as usize);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for p in store.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_container(bytes: &[u8]) -> Result<Container> {
    let corrupt = |m: String| Error::Corrupt(m);
    if bytes.len() < 8 {
        return Err(corrupt(format!("file of {} bytes has no header", bytes.len())));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let rest = &bytes[8..];
    if hlen > rest.len() as u64 {
        return Err(corrupt(format!("header length {hlen} exceeds file size")));
    }
    let (hbytes, payload) = rest.split_at(hlen as usize);
    let header: Header =
        serde_json::from_slice(hbytes).map_err(|e| corrupt(format!("unreadable header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(corrupt(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut expected_offset = 0u64;
    for e in &header.tensors {
        if e.dtype != DTYPE {
            return Err(corrupt(format!("tensor `{}` has dtype {}", e.name, e.dtype)));
        }
        if e.offset != expected_offset {
            return Err(corrupt(format!("tensor `{}` at offset {} (expected {expected_offset})", e.name, e.offset)));
        }
        let n: usize = e.shape.iter().product();
        let end = e.offset + 4 * n as u64;
        if end > payload.len() as u64 {
            return Err(corrupt(format!("tensor `{}` runs past the end of the file", e.name)));
        }
        let data = payload[e.offset as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(e.shape.clone(), data).map_err(|err| corrupt(format!("tensor `{}`: {err}", e.name)))?;
        tensors.push((e.name.clone(), t));
        expected_offset = end;
    }
    if expected_offset != payload.len() as u64 {
        return Err(corrupt(format!(
            "{} trailing payload bytes",
            payload.len() as u64 - expected_offset
        )));
    }
    Ok(Container {
        kind: header.kind,
        config: header.model_config,
        tensors,
    })
}

impl Container {
    /// Copy every tensor into `store`, which must hold exactly the same
    /// names with the same shapes.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.tensors.len() != store.len() {
            for p in store.iter() {
                if !self.tensors.iter().any(|(n, _)| *n == p.id) {
                    return Err(Error::Corrupt(format!("missing tensor `{}`", p.id)));
                }
            }
        }
        for (name, t) in &self.tensors {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Corrupt(format!("unexpected tensor `{name}`")))?;
            store.set_value(id, t.clone())?;
        }
        Ok(())
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Corrupt(format!("expected a {kind} checkpoint, found {}", self.kind)))
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

const MODEL_KIND: &str = "model";
const DECODER_KIND: &str = "decoder";

impl Model {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        write_container(MODEL_KIND, serde_json::to_value(&self.config)?, &self.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = read_container(bytes)?;
        c.expect_kind(MODEL_KIND)?;
        let config: ModelConfig =
            serde_json::from_value(c.config.clone()).map_err(|e| Error::Corrupt(format!("model_config: {e}")))?;
        let mut model = Model::new(config)?;
        c.restore_into(&mut model.params)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }
}

impl Decoder {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        write_container(DECODER_KIND, serde_json::to_value(&self.config)?, &self.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = read_container(bytes)?;
        c.expect_kind(DECODER_KIND)?;
        let config: DecoderConfig =
            serde_json::from_value(c.config.clone()).map_err(|e| Error::Corrupt(format!("decoder config: {e}")))?;
        let mut dec = Decoder::from_config(config)?;
        c.restore_into(&mut dec.params)?;
        Ok(dec)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }
}
