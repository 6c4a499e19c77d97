//! Checkpoint container.
//!
//! Layout, little-endian:
//!
//! ```text
//! "OMCK" | version u16 | config hash u64 | meta length u32 | meta JSON
//! tensor count u32
//! per tensor: name length u16 | name | dtype u8 (0 = f32, 1 = f64)
//!             | rank u8 | dims u32 x rank | row-major data
//! ```
//!
//! Network weights are f32; codebooks and their EMA statistics are f64 so
//! that quantizer state reloads exactly.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{json, Value};

use crate::codec::Codec;
use crate::config::{parse_config, ValidatedConfig};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::quantize::{Codebook, RvqStack};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"OMCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Stored {
    F32 { shape: Vec<usize>, data: Vec<f32> },
    F64 { shape: Vec<usize>, data: Vec<f64> },
}

impl Stored {
    pub fn shape(&self) -> &[usize] {
        match self {
            Stored::F32 { shape, .. } | Stored::F64 { shape, .. } => shape,
        }
    }

    fn dtype(&self) -> u8 {
        match self {
            Stored::F32 { .. } => 0,
            Stored::F64 { .. } => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub meta: Value,
    pub tensors: BTreeMap<String, Stored>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::TruncatedPayload {
            expected: self.pos.saturating_add(n),
            found: self.bytes.len(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
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

fn bad(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(format!("corrupt checkpoint: {}", msg.into()))
}

impl Checkpoint {
    pub fn new(config_hash: u64, meta: Value) -> Self {
        Self {
            config_hash,
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn put_f32(&mut self, name: impl Into<String>, t: &Tensor) {
        self.tensors.insert(
            name.into(),
            Stored::F32 {
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            },
        );
    }

    pub fn put_f64(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        self.tensors.insert(name.into(), Stored::F64 { shape, data });
    }

    pub fn f32(&self, name: &str) -> Result<Tensor> {
        match self.tensors.get(name) {
            Some(Stored::F32 { shape, data }) => Ok(Tensor::new(shape.clone(), data.clone())),
            Some(Stored::F64 { .. }) => Err(bad(format!("{name} is not f32"))),
            None => Err(Error::MissingTensor(name.into())),
        }
    }

    pub fn f64(&self, name: &str) -> Result<&[f64]> {
        match self.tensors.get(name) {
            Some(Stored::F64 { data, .. }) => Ok(data),
            Some(Stored::F32 { .. }) => Err(bad(format!("{name} is not f64"))),
            None => Err(Error::MissingTensor(name.into())),
        }
    }

    /// Stores every tensor of `store` under `prefix`.
    pub fn put_store(&mut self, prefix: &str, store: &ParamStore) {
        for (name, t) in store.iter() {
            self.put_f32(format!("{prefix}{name}"), t);
        }
    }

    /// Collects every f32 tensor stored under `prefix`.
    pub fn store(&self, prefix: &str) -> Result<ParamStore> {
        let mut out = ParamStore::new();
        for name in self.tensors.keys().filter(|k| k.starts_with(prefix)) {
            out.insert(&name[prefix.len()..], self.f32(name)?);
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("json values serialize");
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match t {
                Stored::F32 { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Stored::F64 { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if bytes.len() < 4 || bytes[..4] != CHECKPOINT_MAGIC {
            let mut found = [0u8; 4];
            let n = bytes.len().min(4);
            found[..n].copy_from_slice(&bytes[..n]);
            return Err(Error::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found,
            });
        }
        r.take(4)?;
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let config_hash = r.u64()?;
        let meta_len = r.u32()? as usize;
        let meta = serde_json::from_slice(r.take(meta_len)?).map_err(|e| bad(e.to_string()))?;
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|e| bad(e.to_string()))?;
            let dtype = r.u8()?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let t = match dtype {
                0 => Stored::F32 {
                    data: r
                        .take(n * 4)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                    shape,
                },
                1 => Stored::F64 {
                    data: r
                        .take(n * 8)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                    shape,
                },
                other => return Err(bad(format!("unknown dtype {other}"))),
            };
            tensors.insert(name, t);
        }
        if r.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config_hash,
            meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// The codec configuration recorded in the metadata, checked against the
    /// header hash.
    pub fn config(&self) -> Result<ValidatedConfig> {
        let text = self.meta["config"]
            .as_str()
            .ok_or_else(|| bad("metadata has no config"))?;
        let (cfg, _) = parse_config(text)?;
        let cfg = cfg.validate()?;
        if cfg.config_hash() != self.config_hash {
            return Err(Error::ConfigHashMismatch(format!(
                "header hash {:016x}, recorded config hashes to {:016x}",
                self.config_hash,
                cfg.config_hash()
            )));
        }
        Ok(cfg)
    }

    pub fn expect_hash(&self, expected: u64) -> Result<()> {
        if self.config_hash != expected {
            return Err(Error::ConfigHashMismatch(format!(
                "checkpoint hash {:016x}, expected {expected:016x}",
                self.config_hash
            )));
        }
        Ok(())
    }
}

// -------------------------------------------------------------------------
// Codec state

const GEN_PREFIX: &str = "gen/";

fn put_codebook(ck: &mut Checkpoint, prefix: &str, cb: &Codebook) -> Value {
    ck.put_f64(format!("{prefix}.vectors"), vec![cb.size, cb.dim], cb.vectors.clone());
    ck.put_f64(format!("{prefix}.ema_cluster_size"), vec![cb.size], cb.ema_cluster_size.clone());
    ck.put_f64(format!("{prefix}.ema_vector_sum"), vec![cb.size, cb.dim], cb.ema_vector_sum.clone());
    json!({ "decay": cb.decay, "epsilon": cb.epsilon, "initialized": cb.initialized })
}

fn get_codebook(ck: &Checkpoint, prefix: &str, meta: &Value, dim: usize) -> Result<Codebook> {
    let num = |k: &str| meta[k].as_f64().ok_or_else(|| bad(format!("{prefix}: missing {k}")));
    let mut cb = Codebook::from_vectors(dim, ck.f64(&format!("{prefix}.vectors"))?.to_vec(), num("decay")?, num("epsilon")?);
    let sizes = ck.f64(&format!("{prefix}.ema_cluster_size"))?;
    let sums = ck.f64(&format!("{prefix}.ema_vector_sum"))?;
    if sizes.len() != cb.size || sums.len() != cb.vectors.len() {
        return Err(bad(format!("{prefix}: EMA statistics have the wrong size")));
    }
    cb.ema_cluster_size = sizes.to_vec();
    cb.ema_vector_sum = sums.to_vec();
    cb.initialized = meta["initialized"].as_bool().unwrap_or(true);
    Ok(cb)
}

/// Writes the codec parameters and quantizer state into `ck` and records
/// the configuration in its metadata.
pub fn put_codec(ck: &mut Checkpoint, codec: &Codec) {
    ck.config_hash = codec.cfg.config_hash();
    ck.put_store(GEN_PREFIX, &codec.params);
    let stages: Vec<Value> = codec
        .rvq
        .stages
        .iter()
        .enumerate()
        .map(|(s, cb)| put_codebook(ck, &format!("rvq.{s}"), cb))
        .collect();
    let semantic = codec.semantic_vq.as_ref().map(|cb| put_codebook(ck, "semantic_vq", cb));
    let teacher = codec.teacher().map(|t| hex(&t.param_hash()));
    if !ck.meta.is_object() {
        ck.meta = json!({});
    }
    let m = ck.meta.as_object_mut().unwrap();
    m.insert("config".into(), json!(codec.cfg.to_config_string()));
    m.insert("rvq".into(), json!(stages));
    m.insert("semantic_vq".into(), json!(semantic));
    m.insert("teacher_hash".into(), json!(teacher));
}

/// Rebuilds a codec from a checkpoint.
pub fn get_codec(ck: &Checkpoint) -> Result<Codec> {
    let cfg = ck.config()?;
    let params = ck.store(GEN_PREFIX)?;
    let stage_meta = ck.meta["rvq"].as_array().ok_or_else(|| bad("metadata has no rvq"))?;
    let stages = stage_meta
        .iter()
        .enumerate()
        .map(|(s, m)| get_codebook(ck, &format!("rvq.{s}"), m, cfg.acoustic_code_dim))
        .collect::<Result<Vec<_>>>()?;
    let semantic = match &ck.meta["semantic_vq"] {
        Value::Null => None,
        m => Some(get_codebook(ck, "semantic_vq", m, cfg.semantic_dim)?),
    };
    let rvq = RvqStack {
        stages,
        dim: cfg.acoustic_code_dim,
    };
    let codec = Codec::from_parts(cfg, params, semantic, rvq)?;
    if let (Some(t), Some(stored)) = (codec.teacher(), ck.meta["teacher_hash"].as_str()) {
        if hex(&t.param_hash()) != stored {
            return Err(Error::ConfigHashMismatch("semantic teacher parameters differ from the checkpoint".into()));
        }
    }
    Ok(codec)
}

pub fn save_codec(path: &Path, codec: &Codec) -> Result<()> {
    let mut ck = Checkpoint::new(0, json!({}));
    put_codec(&mut ck, codec);
    ck.save(path)
}

pub fn load_codec(path: &Path) -> Result<Codec> {
    get_codec(&Checkpoint::load(path)?)
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
