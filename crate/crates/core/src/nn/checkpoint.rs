//! Binary checkpoint container.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "E3DP" | version | meta_len | meta JSON | array_count
//!   repeated: name_len | name | rows | cols | rows*cols f32 values
//! ```
//!
//! Momentum buffers, when present, are stored as arrays named `momentum/<param>`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Model, ModelConfig};
use super::{Matrix, ParamStore};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"E3DP";
const VERSION: u32 = 1;
const MOMENTUM_PREFIX: &str = "momentum/";

/// Training metadata carried alongside the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    /// `init`, `pretrain`, `semantic` or `instance`.
    pub kind: String,
    pub iteration: usize,
    pub total_iterations: usize,
    pub seed: u64,
    /// Frozen run settings that produced the checkpoint.
    #[serde(default)]
    pub settings: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    meta: TrainMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub meta: TrainMeta,
    pub params: ParamStore,
    pub momentum: Option<ParamStore>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

impl Checkpoint {
    pub fn from_model(model: &Model, meta: TrainMeta, momentum: Option<ParamStore>) -> Self {
        Self {
            model: model.config,
            meta,
            params: model.params.clone(),
            momentum,
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        Model::from_params(self.model, self.params.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&Header {
            model: self.model,
            meta: self.meta.clone(),
        })
        .expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION as usize);
        put_u32(&mut out, header.len());
        out.extend_from_slice(&header);
        let momentum = self.momentum.iter().flat_map(|m| m.iter());
        let arrays: Vec<(String, &Matrix)> = self
            .params
            .iter()
            .map(|(n, m)| (n.to_string(), m))
            .chain(momentum.map(|(n, m)| (format!("{MOMENTUM_PREFIX}{n}"), m)))
            .collect();
        put_u32(&mut out, arrays.len());
        for (name, m) in arrays {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, m.rows());
            put_u32(&mut out, m.cols());
            for v in m.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not an E3DP checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VERSION as usize {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let len = r.u32()?;
        let header: Header =
            serde_json::from_slice(r.take(len)?).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let count = r.u32()?;
        let mut params = ParamStore::new();
        let mut momentum = ParamStore::new();
        for _ in 0..count {
            let name_len = r.u32()?;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?
                .to_string();
            let rows = r.u32()?;
            let cols = r.u32()?;
            let raw = r.take(rows * cols * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let m = Matrix::from_vec(rows, cols, data);
            let (store, key) = match name.strip_prefix(MOMENTUM_PREFIX) {
                Some(rest) => (&mut momentum, rest.to_string()),
                None => (&mut params, name),
            };
            if store.find(&key).is_some() {
                return Err(Error::Checkpoint(format!("duplicate array '{key}'")));
            }
            store.add(key, m);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let momentum = if momentum.is_empty() {
            None
        } else {
            if momentum.iter().map(|(n, m)| (n, m.shape())).ne(params.iter().map(|(n, m)| (n, m.shape()))) {
                return Err(Error::Checkpoint("momentum arrays do not match parameters".into()));
            }
            Some(momentum)
        };
        Model::from_params(header.model, params.clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(Self {
            model: header.model,
            meta: header.meta,
            params,
            momentum,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Human-readable summary: configuration, metadata and one line per array.
    pub fn describe(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "kind={} iteration={}/{} seed={}\n",
            self.meta.kind, self.meta.iteration, self.meta.total_iterations, self.meta.seed
        ));
        s.push_str(&format!(
            "model={}\n",
            serde_json::to_string(&self.model).expect("config serializes")
        ));
        for (k, v) in &self.meta.settings {
            s.push_str(&format!("setting {k}={v}\n"));
        }
        for (name, m) in self.params.iter() {
            s.push_str(&format!("param {name} {}x{}\n", m.rows(), m.cols()));
        }
        s.push_str(&format!(
            "scalars={} momentum={}\n",
            self.params.num_scalars(),
            self.momentum.is_some()
        ));
        s
    }
}
