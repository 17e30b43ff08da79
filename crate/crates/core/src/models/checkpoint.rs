//! "EMSG" checkpoint container.
//!
//! Little-endian layout:
//!
//! ```text
//! magic    b"EMSG"
//! version  u32 (= 1)
//! config   u32 byte length + UTF-8 key=value lines
//! count    u32 number of records
//! record   u32 name length + UTF-8 name
//!          u32 ndim + ndim × u32 dims
//!          numel × f32 data
//! ```
//!
//! Records hold every parameter under its store name, batch-norm running
//! statistics as `{bn}.running_mean` / `{bn}.running_var`, the EM bases as
//! `emau.bases`, and optionally the optimizer as `adam.step`,
//! `adam.m.{param}`, `adam.v.{param}`.

use std::collections::BTreeMap;
use std::path::Path;

use super::{Model, ModelConfig};
use crate::emau::Bases;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::training::OptimizerState;

pub const MAGIC: &[u8; 4] = b"EMSG";
pub const FORMAT_VERSION: u32 = 1;

const BASES_RECORD: &str = "emau.bases";
const STEP_RECORD: &str = "adam.step";

type Record = (String, Vec<usize>, Vec<f64>);

fn records(model: &Model, state: Option<&OptimizerState>) -> Vec<Record> {
    let mut out: Vec<Record> = Vec::new();
    let mut put =
        |name: String, t: &Tensor| out.push((name, t.shape().to_vec(), t.data().to_vec()));
    for p in model.store().iter() {
        put(p.name.clone(), &p.value);
    }
    for bn in model.batchnorms() {
        let c = bn.stats.mean.len();
        put(
            format!("{}.running_mean", bn.name),
            &vec_tensor(&bn.stats.mean, c),
        );
        put(
            format!("{}.running_var", bn.name),
            &vec_tensor(&bn.stats.var, c),
        );
    }
    if let Some(b) = model.bases() {
        put(BASES_RECORD.into(), b.tensor());
    }
    if let Some(s) = state {
        put(STEP_RECORD.into(), &Tensor::full(&[1], s.step as f64));
        for ((p, m), v) in model.store().iter().zip(&s.m).zip(&s.v) {
            put(format!("adam.m.{}", p.name), m);
            put(format!("adam.v.{}", p.name), v);
        }
    }
    out
}

fn vec_tensor(v: &[f64], c: usize) -> Tensor {
    Tensor::new(vec![c], v.to_vec()).expect("running stats length matches channels")
}

/// Serializes the model (and optimizer) into checkpoint bytes.
pub fn encode_checkpoint(model: &Model, state: Option<&OptimizerState>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let echo = model.config().to_echo();
    put_u32(&mut buf, echo.len());
    buf.extend_from_slice(echo.as_bytes());
    let recs = records(model, state);
    put_u32(&mut buf, recs.len());
    for (name, shape, data) in recs {
        put_u32(&mut buf, name.len());
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, shape.len());
        for d in shape {
            put_u32(&mut buf, d);
        }
        for v in data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    buf
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
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
            .ok_or_else(|| Error::Format(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format("non UTF-8 string in checkpoint".into()))
    }
}

/// Parses checkpoint bytes back into a model and, if present, optimizer state.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Model, Option<OptimizerState>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Format("bad magic, not an EMSG checkpoint".into()));
    }
    let version = r.u32()? as u32;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let config = ModelConfig::from_echo(&r.string()?)?;
    let count = r.u32()?;
    let mut recs: BTreeMap<String, Tensor> = BTreeMap::new();
    for _ in 0..count {
        let name = r.string()?;
        let ndim = r.u32()?;
        let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("record {name} too large")))?;
        let raw = r.take(
            numel
                .checked_mul(4)
                .ok_or_else(|| Error::Format("record too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        let t =
            Tensor::new(shape, data).map_err(|e| Error::Format(format!("record {name}: {e}")))?;
        if recs.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate record {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after last record".into()));
    }

    let mut model = Model::new(config).map_err(|e| Error::Format(format!("config echo: {e}")))?;
    for p in model.store_mut().iter_mut() {
        p.value = take(&mut recs, &p.name, p.value.shape())?;
    }
    for bn in model.batchnorms_mut() {
        let c = bn.stats.mean.len();
        bn.stats.mean = take(&mut recs, &format!("{}.running_mean", bn.name), &[c])?.into_data();
        bn.stats.var = take(&mut recs, &format!("{}.running_var", bn.name), &[c])?.into_data();
    }
    if let Some(b) = model.bases_mut() {
        let shape = b.tensor().shape().to_vec();
        *b = Bases::new(take(&mut recs, BASES_RECORD, &shape)?)?;
    }
    let state = if recs.contains_key(STEP_RECORD) {
        let step = take(&mut recs, STEP_RECORD, &[1])?.data()[0] as u64;
        let mut s = OptimizerState::new(model.store());
        s.step = step;
        for ((p, m), v) in model.store().iter().zip(&mut s.m).zip(&mut s.v) {
            *m = take(&mut recs, &format!("adam.m.{}", p.name), p.value.shape())?;
            *v = take(&mut recs, &format!("adam.v.{}", p.name), p.value.shape())?;
        }
        Some(s)
    } else {
        None
    };
    if let Some(extra) = recs.keys().next() {
        return Err(Error::Format(format!("unexpected record {extra}")));
    }
    Ok((model, state))
}

fn take(recs: &mut BTreeMap<String, Tensor>, name: &str, shape: &[usize]) -> Result<Tensor> {
    let t = recs
        .remove(name)
        .ok_or_else(|| Error::Format(format!("missing record {name}")))?;
    if t.shape() != shape {
        return Err(Error::Format(format!(
            "record {name} has shape {:?}, expected {shape:?}",
            t.shape()
        )));
    }
    Ok(t)
}

pub fn save_checkpoint(model: &Model, state: Option<&OptimizerState>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, encode_checkpoint(model, state)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, Option<OptimizerState>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
