//! Checkpoint container: named f32 arrays plus a JSON metadata record in a
//! single binary file.
//!
//! Layout: `magic "SPCK" | version u32 | meta_len u64 | meta JSON | array
//! count u64 | arrays`, every integer little-endian. Each array is `name_len
//! u16 | name | ndim u8 | dims u64 x ndim | f32 data`. Parameters, layer
//! state (e.g. batch-norm running stats) and optimizer moments share one
//! namespace via the prefixes `param.`, `state.`, `optim.m.`, `optim.v.`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use super::{Generator, ModelConfig};
use crate::nn::{Adam, ParamTree};
use crate::seed::fnv1a64;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"SPCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Adam moments keyed by parameter path.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    pub t: u64,
    pub m: BTreeMap<String, ArrayD<f32>>,
    pub v: BTreeMap<String, ArrayD<f32>>,
}

#[derive(Debug, Clone)]
pub struct CheckpointContainer {
    pub format_version: u32,
    /// What the arrays parameterise: "generator", "discriminator", ...
    pub role: String,
    /// The role's own config, kept as JSON so every network kind can use
    /// the same container.
    pub config_json: serde_json::Value,
    /// Digest of role + config; guards against loading weights into a
    /// differently shaped model.
    pub fingerprint: u64,
    pub params: BTreeMap<String, ArrayD<f32>>,
    pub state: BTreeMap<String, ArrayD<f32>>,
    pub optimizer: Option<OptimizerState>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Meta {
    format_version: u32,
    role: String,
    config: serde_json::Value,
    /// Hex so the full u64 range survives JSON.
    fingerprint: String,
    optimizer_t: Option<u64>,
}

pub fn container_fingerprint(role: &str, config_json: &serde_json::Value) -> u64 {
    let canonical = serde_json::to_string(config_json).expect("value serializes");
    let mut bytes = Vec::with_capacity(role.len() + 1 + canonical.len());
    bytes.extend_from_slice(role.as_bytes());
    bytes.push(0);
    bytes.extend_from_slice(canonical.as_bytes());
    fnv1a64(&bytes)
}

impl CheckpointContainer {
    /// Snapshot a network's parameters and state.
    pub fn from_tree(
        role: &str,
        config_json: serde_json::Value,
        tree: &mut dyn ParamTree<f32>,
        optimizer: Option<&Adam<f32>>,
    ) -> Self {
        let mut params = BTreeMap::new();
        tree.visit_params("", &mut |path, p| {
            params.insert(path.to_string(), p.value.clone());
        });
        let mut state = BTreeMap::new();
        tree.visit_state("", &mut |path, s| {
            state.insert(path.to_string(), s.clone());
        });
        let optimizer = optimizer.map(|a| OptimizerState {
            t: a.t,
            m: a.m.clone(),
            v: a.v.clone(),
        });
        let fingerprint = container_fingerprint(role, &config_json);
        Self {
            format_version: CHECKPOINT_VERSION,
            role: role.to_string(),
            config_json,
            fingerprint,
            params,
            state,
            optimizer,
        }
    }

    /// Copy every parameter and state array into `tree`. Strict: a missing,
    /// extra, or differently shaped array is an error.
    pub fn apply_to(&self, tree: &mut dyn ParamTree<f32>) -> Result<()> {
        let mut missing = Vec::new();
        let mut used = 0usize;
        tree.visit_params("", &mut |path, p| match self.params.get(path) {
            Some(saved) if saved.shape() == p.value.shape() => {
                p.value.assign(saved);
                used += 1;
            }
            Some(saved) => missing.push(format!(
                "{path}: shape {:?} in file, {:?} in model",
                saved.shape(),
                p.value.shape()
            )),
            None => missing.push(format!("{path}: absent from checkpoint")),
        });
        if used != self.params.len() {
            missing.push(format!(
                "checkpoint has {} parameter arrays, model consumed {used}",
                self.params.len()
            ));
        }
        let mut state_used = 0usize;
        tree.visit_state("", &mut |path, s| match self.state.get(path) {
            Some(saved) if saved.shape() == s.shape() => {
                s.assign(saved);
                state_used += 1;
            }
            Some(saved) => missing.push(format!(
                "state {path}: shape {:?} in file, {:?} in model",
                saved.shape(),
                s.shape()
            )),
            None => missing.push(format!("state {path}: absent from checkpoint")),
        });
        if state_used != self.state.len() {
            missing.push(format!(
                "checkpoint has {} state arrays, model consumed {state_used}",
                self.state.len()
            ));
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Checkpoint(missing.join("; ")))
        }
    }

    /// Load saved Adam moments into an optimizer (hyperparameters are the
    /// caller's; only step count and moment arrays live in the checkpoint).
    pub fn restore_optimizer(&self, adam: &mut Adam<f32>) -> Result<()> {
        let saved = self
            .optimizer
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("no optimizer state in checkpoint".into()))?;
        adam.t = saved.t;
        adam.m = saved.m.clone();
        adam.v = saved.v.clone();
        Ok(())
    }
}

pub fn write_container(path: &Path, c: &CheckpointContainer) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let meta = Meta {
        format_version: c.format_version,
        role: c.role.clone(),
        config: c.config_json.clone(),
        fingerprint: format!("{:016x}", c.fingerprint),
        optimizer_t: c.optimizer.as_ref().map(|o| o.t),
    };
    let meta_bytes = serde_json::to_vec(&meta)
        .map_err(|e| Error::Checkpoint(format!("metadata serialization: {e}")))?;

    let mut flat: Vec<(String, &ArrayD<f32>)> = Vec::new();
    for (k, a) in &c.params {
        flat.push((format!("param.{k}"), a));
    }
    for (k, a) in &c.state {
        flat.push((format!("state.{k}"), a));
    }
    if let Some(o) = &c.optimizer {
        for (k, a) in &o.m {
            flat.push((format!("optim.m.{k}"), a));
        }
        for (k, a) in &o.v {
            flat.push((format!("optim.v.{k}"), a));
        }
    }

    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta_bytes);
    buf.extend_from_slice(&(flat.len() as u64).to_le_bytes());
    for (name, array) in flat {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(array.ndim() as u8);
        for d in array.shape() {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        let slice = array.as_slice().expect("contiguous checkpoint array");
        for v in slice {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated checkpoint: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
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
}

pub fn read_container(path: &Path) -> Result<CheckpointContainer> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };

    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint file (bad magic)",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (supported: {CHECKPOINT_VERSION})"
        )));
    }
    let meta_len = r.u64()? as usize;
    let meta: Meta = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| Error::Checkpoint(format!("metadata parse: {e}")))?;
    let fingerprint = u64::from_str_radix(&meta.fingerprint, 16)
        .map_err(|e| Error::Checkpoint(format!("bad fingerprint field: {e}")))?;
    if fingerprint != container_fingerprint(&meta.role, &meta.config) {
        return Err(Error::Checkpoint(
            "stored fingerprint does not match stored config".into(),
        ));
    }

    let count = r.u64()? as usize;
    let mut params = BTreeMap::new();
    let mut state = BTreeMap::new();
    let mut optim_m = BTreeMap::new();
    let mut optim_v = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| Error::Checkpoint(format!("array name not UTF-8: {e}")))?
            .to_string();
        let ndim = r.take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u64()? as usize);
        }
        let len: usize = dims.iter().product();
        let raw = r.take(len * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let array = ArrayD::from_shape_vec(IxDyn(&dims), data)
            .map_err(|e| Error::Checkpoint(format!("array {name}: {e}")))?;
        if let Some(k) = name.strip_prefix("param.") {
            params.insert(k.to_string(), array);
        } else if let Some(k) = name.strip_prefix("state.") {
            state.insert(k.to_string(), array);
        } else if let Some(k) = name.strip_prefix("optim.m.") {
            optim_m.insert(k.to_string(), array);
        } else if let Some(k) = name.strip_prefix("optim.v.") {
            optim_v.insert(k.to_string(), array);
        } else {
            return Err(Error::Checkpoint(format!("unknown array namespace: {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after last array",
            bytes.len() - r.pos
        )));
    }

    let optimizer = meta.optimizer_t.map(|t| OptimizerState {
        t,
        m: optim_m,
        v: optim_v,
    });
    Ok(CheckpointContainer {
        format_version: version,
        role: meta.role,
        config_json: meta.config,
        fingerprint,
        params,
        state,
        optimizer,
    })
}

/// Write a generator (and optionally its optimizer) to `path`.
pub fn save_generator(
    path: &Path,
    gen: &mut Generator<f32>,
    optimizer: Option<&Adam<f32>>,
) -> Result<()> {
    let config_json = serde_json::to_value(gen.config())
        .map_err(|e| Error::Checkpoint(format!("config serialization: {e}")))?;
    let container = CheckpointContainer::from_tree("generator", config_json, gen, optimizer);
    write_container(path, &container)
}

/// Rebuild a generator from `path`. When `expected` is given, its
/// fingerprint must match the checkpoint's config or loading fails.
pub fn load_generator(
    path: &Path,
    expected: Option<&ModelConfig>,
) -> Result<(Generator<f32>, CheckpointContainer)> {
    let container = read_container(path)?;
    if container.role != "generator" {
        return Err(Error::Checkpoint(format!(
            "expected a generator checkpoint, found role {:?}",
            container.role
        )));
    }
    let cfg: ModelConfig = serde_json::from_value(container.config_json.clone())
        .map_err(|e| Error::Checkpoint(format!("config parse: {e}")))?;
    if let Some(want) = expected {
        if want.fingerprint() != cfg.fingerprint() {
            return Err(Error::Checkpoint(format!(
                "config fingerprint mismatch: checkpoint {:016x}, requested {:016x}",
                cfg.fingerprint(),
                want.fingerprint()
            )));
        }
    }
    let mut gen = Generator::new(&cfg, 0)?;
    container.apply_to(&mut gen)?;
    Ok((gen, container))
}
