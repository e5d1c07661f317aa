//! Binary parameter files: magic, JSON header, little-endian f32 payload.

use std::path::Path;

use autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::io::write_atomic;
use crate::params::{ParamLabel, ParamStore};

pub const MAGIC: &[u8; 8] = b"HDSTCKP1";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub label: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in elements.
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Header {
    pub kind: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn label_name(l: ParamLabel) -> &'static str {
    match l {
        ParamLabel::Body => "body",
        ParamLabel::Lora => "lora",
        ParamLabel::FrozenBase => "frozen-base",
        ParamLabel::Critic => "critic",
        ParamLabel::PolicyStd => "policy-std",
        ParamLabel::Adapter => "adapter",
        ParamLabel::Teacher => "teacher",
    }
}

fn parse_label(s: &str) -> Result<ParamLabel> {
    Ok(match s {
        "body" => ParamLabel::Body,
        "lora" => ParamLabel::Lora,
        "frozen-base" => ParamLabel::FrozenBase,
        "critic" => ParamLabel::Critic,
        "policy-std" => ParamLabel::PolicyStd,
        "adapter" => ParamLabel::Adapter,
        "teacher" => ParamLabel::Teacher,
        other => return Err(CoreError::Checkpoint(format!("unknown parameter label `{other}`"))),
    })
}

pub fn encode(kind: &str, store: &ParamStore, meta: serde_json::Value) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(store.len());
    let mut payload = Vec::new();
    let mut offset = 0;
    for (name, p) in store.iter() {
        tensors.push(TensorEntry { name: name.clone(), label: label_name(p.label).into(), shape: p.value.shape().to_vec(), offset });
        offset += p.value.len();
        for v in p.value.data() {
            payload.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&Header { kind: kind.into(), tensors, meta })?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(Header, ParamStore)> {
    let bad = |m: &str| CoreError::Checkpoint(m.to_string());
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let mut len = [0u8; 8];
    len.copy_from_slice(&bytes[MAGIC.len()..MAGIC.len() + 8]);
    let hlen = u64::from_le_bytes(len) as usize;
    let start = MAGIC.len() + 8;
    let header: Header = serde_json::from_slice(bytes.get(start..start + hlen).ok_or_else(|| bad("truncated header"))?)?;
    let payload = &bytes[start + hlen..];
    let mut store = ParamStore::new();
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        let raw = payload.get(t.offset * 4..(t.offset + n) * 4).ok_or_else(|| bad(&format!("truncated data for `{}`", t.name)))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        store.insert(t.name.clone(), Tensor::new(t.shape.clone(), data)?, parse_label(&t.label)?);
    }
    Ok((header, store))
}

pub fn save(path: &Path, kind: &str, store: &ParamStore, meta: serde_json::Value) -> Result<()> {
    write_atomic(path, &encode(kind, store, meta)?)
}

pub fn load(path: &Path) -> Result<(Header, ParamStore)> {
    let bytes = std::fs::read(path).map_err(|e| CoreError::Checkpoint(format!("{}: {e}", path.display())))?;
    decode(&bytes)
}

/// Rounds every value through f32 so in-memory parameters match a saved copy.
pub fn round_to_f32(store: &mut ParamStore) {
    let names: Vec<String> = store.names().cloned().collect();
    for n in names {
        if let Some(t) = store.tensor_mut(&n) {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::new(vec![2, 2], vec![1.0, -2.5, 0.125, 3.0]).unwrap(), ParamLabel::Lora);
        s.insert("b", Tensor::scalar(7.0), ParamLabel::Teacher);
        let bytes = encode("test", &s, serde_json::json!({"epoch": 3})).unwrap();
        let (h, back) = decode(&bytes).unwrap();
        assert_eq!(h.kind, "test");
        assert_eq!(back.tensor("a").data(), s.tensor("a").data());
        assert_eq!(back.get("b").unwrap().label, ParamLabel::Teacher);
        assert!(decode(b"garbage!").is_err());
    }
}
