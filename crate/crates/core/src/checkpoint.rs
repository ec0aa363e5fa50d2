//! Versioned binary checkpoint codec.
//!
//! Layout (all integers little-endian):
//!   magic "ABCK" | u32 version=1 | u32 param count
//!   per param: u16 name len | name UTF-8 | u8 rank | u32 dims... | f32 payload
//!   u32 moment count | moments in the same framing ("<name>.m" / "<name>.v")
//!   u64 step counter

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::optim::AdamState;
use crate::params::ParamStore;

pub const MAGIC: &[u8; 4] = b"ABCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CheckpointError {
    BadMagic,
    VersionMismatch { found: u32 },
    TruncatedPayload,
    MalformedName,
    /// Loaded entry does not match the model being restored.
    ParamMismatch { name: String },
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::BadMagic => write!(f, "bad magic"),
            CheckpointError::VersionMismatch { found } => {
                write!(f, "version mismatch: found {found}, expected {VERSION}")
            }
            CheckpointError::TruncatedPayload => write!(f, "truncated payload"),
            CheckpointError::MalformedName => write!(f, "malformed parameter name"),
            CheckpointError::ParamMismatch { name } => {
                write!(f, "checkpoint entry {name} does not match the model")
            }
        }
    }
}

pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub struct Checkpoint {
    pub params: Vec<Entry>,
    pub moments: Vec<Entry>,
    pub step: u64,
}

fn write_entry(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    let nb = name.as_bytes();
    out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
    out.extend_from_slice(nb);
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(store: &ParamStore, state: &AdamState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        write_entry(&mut out, &p.name, &p.shape, &p.data);
    }
    out.extend_from_slice(&(2 * store.len() as u32).to_le_bytes());
    for (id, p) in store.iter() {
        write_entry(&mut out, &alloc::format!("{}.m", p.name), &p.shape, &state.m[id.0]);
        write_entry(&mut out, &alloc::format!("{}.v", p.name), &p.shape, &state.v[id.0]);
    }
    out.extend_from_slice(&state.step.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::TruncatedPayload);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn entry(&mut self) -> Result<Entry, CheckpointError> {
        let name_len = self.u16()? as usize;
        let name = core::str::from_utf8(self.take(name_len)?)
            .map_err(|_| CheckpointError::MalformedName)?
            .into();
        let rank = self.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = self.take(4 * n)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Entry { name, shape, data })
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch { found: version });
    }
    let n_params = r.u32()? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        params.push(r.entry()?);
    }
    let n_moments = r.u32()? as usize;
    let mut moments = Vec::with_capacity(n_moments);
    for _ in 0..n_moments {
        moments.push(r.entry()?);
    }
    let step = r.u64()?;
    Ok(Checkpoint { params, moments, step })
}

/// Restores parameters and optimizer state into an existing model whose
/// architecture matches the checkpoint.
pub fn restore(
    ckpt: &Checkpoint,
    store: &mut ParamStore,
    state: &mut AdamState,
) -> Result<(), CheckpointError> {
    for e in &ckpt.params {
        let id = store
            .find(&e.name)
            .ok_or_else(|| CheckpointError::ParamMismatch { name: e.name.clone() })?;
        let p = store.get_mut(id);
        if p.shape != e.shape {
            return Err(CheckpointError::ParamMismatch { name: e.name.clone() });
        }
        p.data = e.data.clone();
    }
    for e in &ckpt.moments {
        let (base, which) = match e.name.rsplit_once('.') {
            Some((b, "m")) => (b, 0),
            Some((b, "v")) => (b, 1),
            _ => return Err(CheckpointError::ParamMismatch { name: e.name.clone() }),
        };
        let id = store
            .find(base)
            .ok_or_else(|| CheckpointError::ParamMismatch { name: e.name.clone() })?;
        let buf = if which == 0 { &mut state.m[id.0] } else { &mut state.v[id.0] };
        if buf.len() != e.data.len() {
            return Err(CheckpointError::ParamMismatch { name: e.name.clone() });
        }
        *buf = e.data.clone();
    }
    state.step = ckpt.step;
    Ok(())
}
