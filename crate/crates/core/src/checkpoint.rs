//! Versioned checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "EVCK" | version u16 | config_len u32 | config JSON
//!        | meta_len u32 | meta JSON
//!        | n_params u32 | n_params × (name_len u16 | name | ndim u8 | ndim × u32 | f32 data)
//!        | has_opt u8 | [step u64 | n_params × (f32 m | f32 v)]
//! ```
//!
//! JSON sections are canonical: keys sorted, no whitespace.

use std::path::Path;

use serde_json::Value;

use crate::error::{ensure, Error, Result};
use crate::fusion::{EvLight, EvLightConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CKPT_MAGIC: &[u8; 4] = b"EVCK";
pub const CKPT_VERSION: u16 = 1;
const MAX_NDIM: usize = 8;

/// Adam moments aligned with the checkpoint's parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: EvLightConfig,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Option<OptimizerState>,
    /// Free-form training metadata (epoch, train config, ...).
    pub meta: Value,
}

/// Serializes with sorted keys, independent of struct field order.
pub fn canonical_json<T: serde::Serialize>(v: &T) -> Result<String> {
    let value = serde_json::to_value(v)?;
    Ok(serde_json::to_string(&value)?)
}

impl Checkpoint {
    pub fn from_model(model: &EvLight, optimizer: Option<OptimizerState>, meta: Value) -> Self {
        Self {
            config: model.config.clone(),
            params: model
                .params
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
            optimizer,
            meta,
        }
    }

    /// Rebuilds the model; every parameter must match by name and shape.
    pub fn to_model(&self) -> Result<EvLight> {
        let mut model = EvLight::new(self.config.clone())?;
        load_params(&mut model.params, &self.params)?;
        Ok(model)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        for json in [canonical_json(&self.config)?, canonical_json(&self.meta)?] {
            out.extend_from_slice(&(json.len() as u32).to_le_bytes());
            out.extend_from_slice(json.as_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            ensure!(
                name.len() <= u16::MAX as usize,
                InvalidArgument,
                "parameter name too long"
            );
            ensure!(
                t.shape().len() <= MAX_NDIM,
                InvalidArgument,
                "too many dimensions in `{name}`"
            );
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            push_f32(&mut out, t);
        }
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                ensure!(
                    opt.m.len() == self.params.len() && opt.v.len() == self.params.len(),
                    ShapeMismatch,
                    "optimizer state does not align with parameters"
                );
                out.push(1);
                out.extend_from_slice(&opt.step.to_le_bytes());
                for ((m, v), (name, p)) in opt.m.iter().zip(&opt.v).zip(&self.params) {
                    ensure!(
                        m.shape() == p.shape() && v.shape() == p.shape(),
                        ShapeMismatch,
                        "optimizer moments for `{name}` have the wrong shape"
                    );
                    push_f32(&mut out, m);
                    push_f32(&mut out, v);
                }
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let fail = |reason: String| Error::format("checkpoint", reason);
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CKPT_MAGIC {
            return Err(fail("bad magic".into()));
        }
        let version = r.u16()?;
        if version != CKPT_VERSION {
            return Err(fail(format!("unsupported version {version}")));
        }
        let config_len = r.u32()? as usize;
        let config: EvLightConfig = serde_json::from_slice(r.take(config_len)?)?;
        config.validate()?;
        let meta_len = r.u32()? as usize;
        let meta: Value = serde_json::from_slice(r.take(meta_len)?)?;

        let n = r.u32()? as usize;
        let mut params = Vec::new();
        for _ in 0..n {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| fail("parameter name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u8()? as usize;
            if ndim > MAX_NDIM {
                return Err(fail(format!("`{name}` has {ndim} dimensions")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let t = r.tensor(shape)?;
            params.push((name, t));
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let (mut m, mut v) = (Vec::new(), Vec::new());
                for (_, p) in &params {
                    m.push(r.tensor(p.shape().to_vec())?);
                    v.push(r.tensor(p.shape().to_vec())?);
                }
                Some(OptimizerState { step, m, v })
            }
            flag => return Err(fail(format!("optimizer flag {flag}"))),
        };
        if r.pos != bytes.len() {
            return Err(fail(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config,
            params,
            optimizer,
            meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.encode()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

/// Copies named arrays into `store`, requiring an exact one-to-one match.
pub fn load_params(store: &mut ParamStore, params: &[(String, Tensor)]) -> Result<()> {
    ensure!(
        params.len() == store.len(),
        ParamMismatch,
        "checkpoint has {} parameters, model expects {}",
        params.len(),
        store.len()
    );
    let mut seen = vec![false; store.len()];
    for (name, t) in params {
        let id = store
            .id(name)
            .ok_or_else(|| Error::ParamMismatch(format!("unexpected parameter `{name}`")))?;
        ensure!(
            !seen[id.index()],
            ParamMismatch,
            "duplicate parameter `{name}`"
        );
        seen[id.index()] = true;
        let slot = store.get_mut(id);
        ensure!(
            slot.shape() == t.shape(),
            ParamMismatch,
            "`{name}` has shape {:?}, model expects {:?}",
            t.shape(),
            slot.shape()
        );
        ensure!(
            t.is_finite(),
            ParamMismatch,
            "`{name}` contains non-finite values"
        );
        slot.data_mut().copy_from_slice(t.data());
    }
    Ok(())
}

fn push_f32(out: &mut Vec<u8>, t: &Tensor) {
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
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
            .ok_or_else(|| {
                Error::format("checkpoint", format!("truncated at byte {}", self.pos))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn tensor(&mut self, shape: Vec<usize>) -> Result<Tensor> {
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::format("checkpoint", "tensor size overflows"))?;
        let raw = self.take(n)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        Tensor::new(shape, data)
    }
}
