//! Versioned checkpoint format shared by every trainable component.
//!
//! Layout: magic `CSIFMCK1`, version byte, u32 LE header length, JSON
//! header, u32 parameter count, then per parameter a u16 name length, the
//! name, a u8 rank, u64 dims and f64 values; finally a u8 optimizer flag
//! followed, when set, by the AdamW step, hyperparameters and moments.

use std::path::Path;

use csifm_tensor::{AdamWConfig, AdamWState, ParamStore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::ByteReader;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CSIFMCK1";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// "param", "stage1", "stage2" or a downstream tag.
    pub stage: String,
    pub epoch: usize,
    pub step: u64,
    pub config_hash: String,
    pub config: serde_json::Value,
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSnapshot {
    pub step: u64,
    pub config: AdamWConfig,
    /// (parameter name, first moment, second moment)
    pub moments: Vec<(String, Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<NamedTensor>,
    pub optimizer: Option<OptimizerSnapshot>,
}

/// SHA-256 over names, shapes and values of parameters under `prefix`.
pub fn param_hash(store: &ParamStore, prefix: &str) -> String {
    let mut h = Sha256::new();
    for (name, t) in store.iter().filter(|(n, _)| n.starts_with(prefix)) {
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

impl Checkpoint {
    /// Captures parameters whose names start with any of `prefixes`
    /// (all parameters when empty).
    pub fn capture(header: CheckpointHeader, store: &ParamStore, prefixes: &[&str], opt: Option<&AdamWState>) -> Self {
        let params = store
            .iter()
            .filter(|(n, _)| prefixes.is_empty() || prefixes.iter().any(|p| n.starts_with(p)))
            .map(|(n, t)| NamedTensor {
                name: n.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect();
        let optimizer = opt.map(|o| OptimizerSnapshot {
            step: o.step,
            config: o.config,
            moments: o
                .params
                .iter()
                .zip(o.m.iter().zip(&o.v))
                .map(|(&id, (m, v))| (store.name(id).to_string(), m.clone(), v.clone()))
                .collect(),
        });
        Self {
            header,
            params,
            optimizer,
        }
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Copies every checkpoint tensor into `store`, which must hold a
    /// parameter of the same name and shape.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        for p in &self.params {
            let id = store
                .id(&p.name)
                .ok_or_else(|| Error::Format(format!("checkpoint parameter {} has no counterpart in the model", p.name)))?;
            let have = store.get(id).shape().to_vec();
            if have != p.shape {
                return Err(Error::Format(format!(
                    "parameter {}: checkpoint shape {:?} vs model shape {:?}",
                    p.name, p.shape, have
                )));
            }
            store.get_mut(id).data_mut().copy_from_slice(&p.data);
        }
        Ok(())
    }

    /// Restores every `store` parameter under `prefix` from the checkpoint;
    /// checkpoint entries outside the prefix are ignored.
    pub fn restore_prefix(&self, store: &mut ParamStore, prefix: &str) -> Result<usize> {
        let ids: Vec<_> = store.ids_with_prefix(prefix).collect();
        for &id in &ids {
            let name = store.name(id).to_string();
            let p = self
                .get(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {name}")))?;
            let have = store.get(id).shape().to_vec();
            if have != p.shape {
                return Err(Error::Format(format!(
                    "parameter {name}: checkpoint shape {:?} vs model shape {:?}",
                    p.shape, have
                )));
            }
            store.get_mut(id).data_mut().copy_from_slice(&p.data);
        }
        Ok(ids.len())
    }

    /// Rebuilds optimizer state over the same parameter names.
    pub fn restore_optimizer(&self, store: &ParamStore) -> Result<Option<AdamWState>> {
        let Some(snap) = &self.optimizer else {
            return Ok(None);
        };
        let mut ids = Vec::with_capacity(snap.moments.len());
        for (name, _, _) in &snap.moments {
            ids.push(
                store
                    .id(name)
                    .ok_or_else(|| Error::Format(format!("optimizer entry {name} has no parameter")))?,
            );
        }
        let mut st = AdamWState::new(store, ids, snap.config);
        st.step = snap.step;
        for (i, (name, m, v)) in snap.moments.iter().enumerate() {
            if m.len() != st.m[i].len() || v.len() != st.v[i].len() {
                return Err(Error::Format(format!("optimizer moments for {name} have wrong length")));
            }
            st.m[i].copy_from_slice(m);
            st.v[i].copy_from_slice(v);
        }
        Ok(Some(st))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            write_name(&mut out, &p.name);
            out.push(p.shape.len() as u8);
            for &d in &p.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            write_f64s(&mut out, &p.data);
        }
        match &self.optimizer {
            None => out.push(0),
            Some(o) => {
                out.push(1);
                out.extend_from_slice(&o.step.to_le_bytes());
                for v in [o.config.lr, o.config.beta1, o.config.beta2, o.config.eps, o.config.weight_decay] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out.extend_from_slice(&(o.moments.len() as u32).to_le_bytes());
                for (name, m, v) in &o.moments {
                    write_name(&mut out, name);
                    out.extend_from_slice(&(m.len() as u64).to_le_bytes());
                    write_f64s(&mut out, m);
                    write_f64s(&mut out, v);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.take(1)?[0];
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let hlen = r.u32()? as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name = read_name(&mut r)?;
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = read_f64s(&mut r, n)?;
            params.push(NamedTensor { name, shape, data });
        }
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = r.u64()?;
                let config = AdamWConfig {
                    lr: r.f64()?,
                    beta1: r.f64()?,
                    beta2: r.f64()?,
                    eps: r.f64()?,
                    weight_decay: r.f64()?,
                };
                let n = r.u32()? as usize;
                let mut moments = Vec::with_capacity(n);
                for _ in 0..n {
                    let name = read_name(&mut r)?;
                    let len = r.u64()? as usize;
                    let m = read_f64s(&mut r, len)?;
                    let v = read_f64s(&mut r, len)?;
                    moments.push((name, m, v));
                }
                Some(OptimizerSnapshot { step, config, moments })
            }
            other => return Err(Error::Format(format!("bad optimizer flag {other}"))),
        };
        if r.remaining() != 0 {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self {
            header,
            params,
            optimizer,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn write_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

fn read_name(r: &mut ByteReader) -> Result<String> {
    let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
    String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format("parameter name is not UTF-8".into()))
}

fn write_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn read_f64s(r: &mut ByteReader, n: usize) -> Result<Vec<f64>> {
    (0..n).map(|_| r.f64()).collect()
}
