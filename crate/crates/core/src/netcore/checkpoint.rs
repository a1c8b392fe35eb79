//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  b"SSDETCK\0"
//! version  u32      currently 1
//! arch     u32 len + ArchConfig JSON
//! meta     u32 len + CheckpointMeta JSON
//! student  param block
//! teacher  u8 presence flag, then param block if 1
//! domain   u8 presence flag, then param block if 1
//! velocity param block (optimizer momentum state)
//! ```
//!
//! A param block is `u32 count` followed by `count` entries of
//! `u16 name_len, name bytes (utf-8), u8 ndim, ndim x u32 dims,
//! prod(dims) x f64 little-endian payload`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::ArchConfig;
use super::tensor::{ParamSet, Tensor};
use super::NetError;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"SSDETCK\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub mode: String,
    pub epoch: u64,
    pub step: u64,
    pub ema_m: f64,
    pub lr: f64,
    pub momentum: f64,
    /// Whether evaluation should use the teacher weights.
    pub eval_teacher: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchConfig,
    pub meta: CheckpointMeta,
    pub student: ParamSet,
    pub teacher: Option<ParamSet>,
    pub domain: Option<ParamSet>,
    pub velocity: ParamSet,
}

impl Checkpoint {
    /// Parameters evaluation should load: teacher when present and flagged.
    pub fn eval_params(&self) -> &ParamSet {
        match (&self.teacher, self.meta.eval_teacher) {
            (Some(t), true) => t,
            _ => &self.student,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        write_json(&mut out, &self.arch);
        write_json(&mut out, &self.meta);
        write_params(&mut out, &self.student);
        write_optional(&mut out, self.teacher.as_ref());
        write_optional(&mut out, self.domain.as_ref());
        write_params(&mut out, &self.velocity);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, NetError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(NetError::BadCheckpoint("bad magic header".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(NetError::BadCheckpoint(format!(
                "unsupported version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let arch: ArchConfig = read_json(&mut r)?;
        let meta: CheckpointMeta = read_json(&mut r)?;
        let student = read_params(&mut r)?;
        let teacher = read_optional(&mut r)?;
        let domain = read_optional(&mut r)?;
        let velocity = read_params(&mut r)?;
        if r.pos != bytes.len() {
            return Err(NetError::BadCheckpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            arch,
            meta,
            student,
            teacher,
            domain,
            velocity,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NetError> {
        let bytes = fs::read(path)?;
        Self::decode(&bytes)
    }
}

fn write_json<T: Serialize>(out: &mut Vec<u8>, value: &T) {
    let json = serde_json::to_vec(value).expect("checkpoint json");
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
}

fn write_params(out: &mut Vec<u8>, params: &ParamSet) {
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn write_optional(out: &mut Vec<u8>, params: Option<&ParamSet>) {
    match params {
        Some(p) => {
            out.push(1);
            write_params(out, p);
        }
        None => out.push(0),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NetError> {
        if self.pos + n > self.bytes.len() {
            return Err(NetError::BadCheckpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, NetError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, NetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8, NetError> {
        Ok(self.take(1)?[0])
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(r: &mut Reader) -> Result<T, NetError> {
    let len = r.u32()? as usize;
    let bytes = r.take(len)?;
    serde_json::from_slice(bytes)
        .map_err(|e| NetError::BadCheckpoint(format!("json section: {e}")))
}

fn read_params(r: &mut Reader) -> Result<ParamSet, NetError> {
    let count = r.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| NetError::BadCheckpoint("non-utf8 parameter name".into()))?
            .to_string();
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = r.take(len * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(name, Tensor::from_vec(&shape, data)?);
    }
    Ok(params)
}

fn read_optional(r: &mut Reader) -> Result<Option<ParamSet>, NetError> {
    match r.u8()? {
        0 => Ok(None),
        1 => Ok(Some(read_params(r)?)),
        other => Err(NetError::BadCheckpoint(format!(
            "bad presence flag {other}"
        ))),
    }
}
