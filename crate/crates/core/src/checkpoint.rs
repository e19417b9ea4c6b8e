//! Single-file checkpoints: an 8-byte magic, a little-endian `u64` header
//! length, a JSON header indexing named tensors, then the tensors as raw
//! little-endian `f32`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{PrototypeBank, PrototypeInit};
use crate::nn::{Arch, Model, ModelBundle, Params, RunningStats, NORM_NAMES, PARAM_NAMES};

const MAGIC: &[u8; 8] = b"RSTCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    arch: Arch,
    prototype_epsilon: Option<f64>,
    prototype_init: Option<PrototypeInit>,
    tensors: Vec<TensorEntry>,
}

fn named_tensors<'a>(model: &'a ModelBundle, bank: Option<&'a PrototypeBank>) -> Vec<(String, &'a [f32])> {
    let mut out: Vec<(String, &[f32])> = PARAM_NAMES
        .iter()
        .zip(model.params.tensors())
        .map(|(n, t)| (n.to_string(), t.as_slice()))
        .collect();
    for (n, l) in NORM_NAMES.iter().zip(&model.stats.layers) {
        out.push((format!("{n}.running_mean"), &l.mean));
        out.push((format!("{n}.running_var"), &l.var));
    }
    if let Some(b) = bank {
        for (k, p) in b.prototypes.iter().enumerate() {
            out.push((format!("prototype.{k}"), p));
        }
    }
    out
}

/// Writes `model` and optionally its prototype bank to `path`.
pub fn save(path: &Path, model: &ModelBundle, bank: Option<&PrototypeBank>) -> Result<()> {
    let tensors = named_tensors(model, bank);
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            offset,
            len: t.len(),
        });
        offset += t.len();
    }
    let header = Header {
        format: "restcal-checkpoint/1".into(),
        arch: model.arch,
        prototype_epsilon: bank.map(|b| b.epsilon),
        prototype_init: bank.map(|b| b.init),
        tensors: entries,
    };
    let head = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut bytes = Vec::with_capacity(16 + head.len() + 4 * offset);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(head.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&head);
    for (_, t) in &tensors {
        for v in *t {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint written by [`save`].
pub fn load(path: &Path) -> Result<(ModelBundle, Option<PrototypeBank>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |why: &str| Error::Format(format!("{}: {why}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body_start = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header =
        serde_json::from_slice(&bytes[16..body_start]).map_err(|e| bad(&format!("header: {e}")))?;
    header.arch.validate()?;
    let body = &bytes[body_start..];
    let tensor = |name: &str| -> Result<Vec<f32>> {
        let e = header
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| bad(&format!("missing tensor {name}")))?;
        let (a, b) = (4 * e.offset, 4 * (e.offset + e.len));
        if b > body.len() {
            return Err(bad(&format!("tensor {name} runs past the end of the file")));
        }
        let v: Vec<f32> = body[a..b]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(bad(&format!("tensor {name} has non-finite values")));
        }
        Ok(v)
    };
    let arch = header.arch;
    let mut params = Params::<f32>::zeros(&arch);
    for (name, dst) in PARAM_NAMES.iter().zip(params.tensors_mut()) {
        let v = tensor(name)?;
        if v.len() != dst.len() {
            return Err(bad(&format!("tensor {name} has {} values, expected {}", v.len(), dst.len())));
        }
        *dst = v;
    }
    let mut stats = RunningStats::<f32>::new(&arch);
    for (name, l) in NORM_NAMES.iter().zip(stats.layers.iter_mut()) {
        let (m, v) = (tensor(&format!("{name}.running_mean"))?, tensor(&format!("{name}.running_var"))?);
        if m.len() != l.mean.len() || v.len() != l.var.len() {
            return Err(bad(&format!("running statistics of {name} have the wrong length")));
        }
        l.mean = m;
        l.var = v;
    }
    let bank = match header.prototype_epsilon {
        Some(epsilon) => Some(PrototypeBank {
            prototypes: (0..arch.classes)
                .map(|k| tensor(&format!("prototype.{k}")))
                .collect::<Result<_>>()?,
            epsilon,
            init: header.prototype_init.unwrap_or(PrototypeInit::FirstEpochMean),
        }),
        None => None,
    };
    Ok((Model { arch, params, stats }, bank))
}
