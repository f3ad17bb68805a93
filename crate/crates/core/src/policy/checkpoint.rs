//! Self-describing checkpoint container.
//!
//! Layout: magic, little-endian u64 header length, JSON header, f64 payload, SHA-256 of all
//! preceding bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::model::{AdapterConfig, BaseWeights, LayerNorms, ModelConfig, PolicyModel, LAYER_SLOTS};
use super::tokenizer::Tokenizer;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FDPOCKPT";
const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    adapter_config: AdapterConfig,
    seed: u64,
    tokenizer: Tokenizer,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    extra: Option<Value>,
}

fn named_tensors(model: &PolicyModel) -> Vec<(String, &[f64])> {
    let b = &model.base;
    let mut out: Vec<(String, &[f64])> = vec![
        ("tok_emb".into(), &b.tok_emb),
        ("pos_emb".into(), &b.pos_emb),
    ];
    for (l, n) in b.norms.iter().enumerate() {
        out.push((format!("layer{l}.ln1_g"), &n.ln1_g));
        out.push((format!("layer{l}.ln1_b"), &n.ln1_b));
        out.push((format!("layer{l}.ln2_g"), &n.ln2_g));
        out.push((format!("layer{l}.ln2_b"), &n.ln2_b));
        out.push((format!("layer{l}.b1"), &n.b1));
        out.push((format!("layer{l}.b2"), &n.b2));
    }
    for (i, m) in b.mats.iter().enumerate() {
        let name = if i / 6 < b.norms.len() {
            format!("layer{}.{}", i / 6, LAYER_SLOTS[i % 6])
        } else {
            "w_out".to_string()
        };
        out.push((name, m));
    }
    out.push(("lnf_g".into(), &b.lnf_g));
    out.push(("lnf_b".into(), &b.lnf_b));
    out.push(("adapters".into(), &model.adapters));
    out
}

/// Writes the model (and optional extra state) to `path`.
pub fn save_checkpoint(
    model: &PolicyModel,
    path: impl AsRef<Path>,
    extra: Option<Value>,
) -> Result<()> {
    let path = path.as_ref();
    let tensors = named_tensors(model);
    let header = Header {
        version: VERSION,
        config: model.config.clone(),
        adapter_config: model.adapter_config.clone(),
        seed: model.seed,
        tokenizer: model.tokenizer.clone(),
        tensors: tensors
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                len: t.len(),
            })
            .collect(),
        extra,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let payload_len: usize = tensors.iter().map(|(_, t)| t.len() * 8).sum();
    let mut buf = Vec::with_capacity(16 + header_bytes.len() + payload_len + DIGEST_LEN);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    for (_, t) in &tensors {
        for v in t.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    fs::write(path, &buf).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Reads a checkpoint, verifying its digest and tensor shapes.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(PolicyModel, Option<Value>)> {
    let path = path.as_ref();
    let corrupt = |detail: String| Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        detail,
    };
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if bytes.len() < 16 + DIGEST_LEN || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic or truncated file".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("SHA-256 digest mismatch".into()));
    }
    let header_len = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
    if 16 + header_len > body.len() {
        return Err(corrupt("header length exceeds file".into()));
    }
    let header: Header = serde_json::from_slice(&body[16..16 + header_len])
        .map_err(|e| corrupt(format!("header: {e}")))?;
    if header.version != VERSION {
        return Err(corrupt(format!("unsupported version {}", header.version)));
    }
    let payload = &body[16 + header_len..];
    let total: usize = header.tensors.iter().map(|t| t.len).sum();
    if payload.len() != total * 8 {
        return Err(corrupt(format!(
            "payload has {} bytes, header declares {}",
            payload.len(),
            total * 8
        )));
    }
    let mut offsets = std::collections::HashMap::new();
    let mut off = 0;
    for t in &header.tensors {
        offsets.insert(t.name.as_str(), (off, t.len));
        off += t.len;
    }
    let take = |name: &str, expected: usize| -> Result<Vec<f64>> {
        let &(start, len) = offsets
            .get(name)
            .ok_or_else(|| corrupt(format!("missing tensor {name}")))?;
        if len != expected {
            return Err(corrupt(format!(
                "tensor {name} has {len} values, expected {expected}"
            )));
        }
        Ok(payload[start * 8..(start + len) * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };

    let cfg = &header.config;
    PolicyModel::check_config(cfg, &header.adapter_config).map_err(|e| corrupt(e.to_string()))?;
    if cfg.vocab_size != header.tokenizer.vocab_size() {
        return Err(corrupt("vocabulary size disagrees with tokenizer".into()));
    }
    let d = cfg.embed_dim;
    let f = d * cfg.mlp_ratio;
    let tok_emb = take("tok_emb", cfg.vocab_size * d)?;
    let pos_emb = take("pos_emb", cfg.context_len * d)?;
    let mut norms = Vec::new();
    for l in 0..cfg.layers {
        norms.push(LayerNorms {
            ln1_g: take(&format!("layer{l}.ln1_g"), d)?,
            ln1_b: take(&format!("layer{l}.ln1_b"), d)?,
            ln2_g: take(&format!("layer{l}.ln2_g"), d)?,
            ln2_b: take(&format!("layer{l}.ln2_b"), d)?,
            b1: take(&format!("layer{l}.b1"), f)?,
            b2: take(&format!("layer{l}.b2"), d)?,
        });
    }
    let shapes = PolicyModel::slot_shapes(cfg);
    let mut mats = Vec::new();
    for (i, (r, c)) in shapes.iter().enumerate() {
        let name = if i / 6 < cfg.layers {
            format!("layer{}.{}", i / 6, LAYER_SLOTS[i % 6])
        } else {
            "w_out".to_string()
        };
        mats.push(take(&name, r * c)?);
    }
    let lnf_g = take("lnf_g", d)?;
    let lnf_b = take("lnf_b", d)?;
    let slots = PolicyModel::layout(cfg, &header.adapter_config);
    let n_adapter = slots
        .last()
        .map_or(0, |s| s.b_off + header.adapter_config.rank * s.cols);
    let adapters = take("adapters", n_adapter)?;
    let base = BaseWeights {
        tok_emb,
        pos_emb,
        norms,
        lnf_g,
        lnf_b,
        mats,
    };
    let model = PolicyModel::from_parts(
        header.config.clone(),
        header.adapter_config.clone(),
        header.tokenizer,
        header.seed,
        base,
        adapters,
    )?;
    Ok((model, header.extra))
}
