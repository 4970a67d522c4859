//! Single-file checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "RTGC" | u32 version | [u8; 32] config digest
//! u32 meta length | meta JSON
//! u32 tensor count
//! per tensor: u32 name length | name | u8 group | u8 rank | u64 dims… | f64 data…
//! ```

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{OptimState, ParamGroup, ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"RTGC";
pub const CHECKPOINT_VERSION: u32 = 1;

const PARAM_PREFIX: &str = "param/";
const BEST_PREFIX: &str = "best/";
const MOMENT1_PREFIX: &str = "adam.m/";
const MOMENT2_PREFIX: &str = "adam.v/";
const STEPS_NAME: &str = "adam.steps";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    pub lr_factor: f64,
    pub backbone_frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub test_site: usize,
    /// Last completed epoch.
    pub epoch: usize,
    pub best_epoch: usize,
    pub best_val_loss: Option<f64>,
    pub bad_epochs: usize,
    pub stopped: bool,
    pub age_mean: f64,
    pub age_std: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_digest: [u8; 32],
    pub meta: CheckpointMeta,
    pub tensors: Vec<NamedTensor>,
}

fn group_code(g: ParamGroup) -> u8 {
    match g {
        ParamGroup::Backbone => 0,
        ParamGroup::Head => 1,
        ParamGroup::Buffer => 2,
    }
}

fn group_from(code: u8) -> Result<ParamGroup> {
    match code {
        0 => Ok(ParamGroup::Backbone),
        1 => Ok(ParamGroup::Head),
        2 => Ok(ParamGroup::Buffer),
        _ => Err(fmt_err(format!("unknown parameter group code {code}"))),
    }
}

fn fmt_err(msg: String) -> Error {
    Error::Format {
        context: "checkpoint".into(),
        msg,
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(fmt_err(format!("truncated at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_digest);
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(group_code(t.group));
            out.push(t.tensor.rank() as u8);
            for &d in t.tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(fmt_err("bad magic, not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(fmt_err(format!("unsupported version {version}")));
        }
        let config_digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| fmt_err("tensor name is not UTF-8".into()))?
                .to_string();
            let group = group_from(r.u8()?)?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let len = len.ok_or_else(|| fmt_err(format!("tensor {name} has overflowing shape {shape:?}")))?;
            let raw = r.take(len.checked_mul(8).ok_or_else(|| fmt_err("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push(NamedTensor {
                name,
                group,
                tensor: Tensor::new(&shape, data)?,
            });
        }
        if r.pos != bytes.len() {
            return Err(fmt_err(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config_digest,
            meta,
            tensors,
        })
    }

    /// Writes through a temporary sibling so readers never see a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Format { msg, .. } => Error::Format {
                context: path.display().to_string(),
                msg,
            },
            other => other,
        })
    }

    fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a NamedTensor> + 'a {
        self.tensors.iter().filter(move |t| t.name.starts_with(prefix))
    }

    pub fn has_training_state(&self) -> bool {
        self.tensors.iter().any(|t| t.name == STEPS_NAME)
    }

    /// Loads `prefix`-named tensors into `store`, which must have the same
    /// parameters in the same order.
    fn restore_prefixed(&self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        let found: Vec<&NamedTensor> = self.with_prefix(prefix).collect();
        if found.len() != store.len() {
            return Err(fmt_err(format!(
                "expected {} {prefix} tensors, found {}",
                store.len(),
                found.len()
            )));
        }
        for ((_, p), t) in store.iter_mut().zip(found) {
            let name = &t.name[prefix.len()..];
            if name != p.name || t.group != p.group || t.tensor.shape() != p.value.shape() {
                return Err(fmt_err(format!(
                    "tensor {name:?} {:?} does not match parameter {:?} {:?}",
                    t.tensor.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = t.tensor.clone();
        }
        Ok(())
    }

    pub fn restore_params(&self, store: &mut ParamStore) -> Result<()> {
        self.restore_prefixed(store, PARAM_PREFIX)
    }

    pub fn restore_best(&self, store: &mut ParamStore) -> Result<()> {
        self.restore_prefixed(store, BEST_PREFIX)
    }

    pub fn restore_optimizer(&self, store: &ParamStore, state: &mut OptimState) -> Result<()> {
        let steps = self
            .tensors
            .iter()
            .find(|t| t.name == STEPS_NAME)
            .ok_or_else(|| fmt_err("no optimizer state stored".into()))?;
        let m: Vec<&NamedTensor> = self.with_prefix(MOMENT1_PREFIX).collect();
        let v: Vec<&NamedTensor> = self.with_prefix(MOMENT2_PREFIX).collect();
        if m.len() != store.len() || v.len() != store.len() || steps.tensor.len() != store.len() {
            return Err(fmt_err("optimizer state does not match the parameter list".into()));
        }
        for (i, (id, _)) in store.iter().enumerate() {
            state.restore(id.index(), m[i].tensor.data(), v[i].tensor.data(), steps.tensor.data()[i] as u64)?;
        }
        Ok(())
    }
}

pub fn tensors_of(store: &ParamStore, prefix: &str) -> Vec<NamedTensor> {
    store
        .iter()
        .map(|(_, p)| NamedTensor {
            name: format!("{prefix}{}", p.name),
            group: p.group,
            tensor: p.value.clone(),
        })
        .collect()
}

/// Checkpoint holding only the selected parameters.
pub fn params_checkpoint(digest: [u8; 32], meta: CheckpointMeta, store: &ParamStore) -> Checkpoint {
    Checkpoint {
        config_digest: digest,
        meta,
        tensors: tensors_of(store, PARAM_PREFIX),
    }
}

/// Checkpoint that can resume training: current and best parameters plus
/// optimizer moments and step counts.
pub fn training_checkpoint(
    digest: [u8; 32],
    meta: CheckpointMeta,
    current: &ParamStore,
    best: &ParamStore,
    state: &OptimState,
) -> Checkpoint {
    let mut tensors = tensors_of(current, PARAM_PREFIX);
    tensors.extend(tensors_of(best, BEST_PREFIX));
    for (prefix, which) in [(MOMENT1_PREFIX, 0), (MOMENT2_PREFIX, 1)] {
        for (id, p) in current.iter() {
            let (m, v) = state.moments(id.index());
            let data = if which == 0 { m } else { v };
            tensors.push(NamedTensor {
                name: format!("{prefix}{}", p.name),
                group: p.group,
                tensor: Tensor::new(p.value.shape(), data.to_vec()).expect("moment shape"),
            });
        }
    }
    let steps = current.iter().map(|(id, _)| state.steps(id.index()) as f64).collect();
    tensors.push(NamedTensor {
        name: STEPS_NAME.into(),
        group: ParamGroup::Buffer,
        tensor: Tensor::from_vec(steps),
    });
    Checkpoint {
        config_digest: digest,
        meta,
        tensors,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            test_site: 2,
            epoch: 3,
            best_epoch: 2,
            best_val_loss: Some(0.5),
            bad_epochs: 1,
            stopped: false,
            age_mean: 12.5,
            age_std: 2.25,
            tau1: 0.15,
            tau2: 0.3,
            history: vec![],
        }
    }

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a.weight", ParamGroup::Backbone, Tensor::new(&[2, 2], vec![1.0, -2.5, 3.25, 1e-300]).unwrap());
        s.add("b.bias", ParamGroup::Head, Tensor::from_vec(vec![0.1, f64::MIN_POSITIVE]));
        s
    }

    #[test]
    fn roundtrip_is_exact() {
        let ck = params_checkpoint([7; 32], meta(), &store());
        let bytes = ck.encode().unwrap();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode().unwrap(), bytes);
        let mut s = store();
        s.get_mut(s.find("b.bias").unwrap()).data_mut()[0] = 9.0;
        back.restore_params(&mut s).unwrap();
        assert_eq!(s, store());
    }

    #[test]
    fn rejects_corruption_and_mismatch() {
        let bytes = params_checkpoint([0; 32], meta(), &store()).encode().unwrap();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad).is_err());
        let mut other = ParamStore::new();
        other.add("a.weight", ParamGroup::Backbone, Tensor::zeros(&[3]));
        other.add("b.bias", ParamGroup::Head, Tensor::zeros(&[2]));
        assert!(Checkpoint::decode(&bytes).unwrap().restore_params(&mut other).is_err());
    }
}
