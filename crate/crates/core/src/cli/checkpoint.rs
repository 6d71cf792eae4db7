//! Versioned little-endian checkpoint:
//!
//! ```text
//! "ATNS" | u32 version | u32 len | architecture report (UTF-8)
//!        | u32 len | metadata (JSON)
//!        | per parameter, in report order: 4 × u32 shape, f32 data
//!        | per batch norm: u32 channels, f32 running mean, f32 running var
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Preprocess;
use crate::error::{Error, Result};
use crate::search::SearchConfig;
use crate::supernet::{ArchitectureReport, Supernet};
use crate::tensor::BatchNormState;

pub const MAGIC: &[u8; 4] = b"ATNS";
pub const VERSION: u32 = 1;

/// Everything besides weights needed to evaluate a checkpoint the way it
/// was trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: SearchConfig,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    pub input_size: usize,
    pub input_channels: usize,
}

impl CheckpointMeta {
    pub fn new(config: &SearchConfig, pre: &Preprocess) -> Self {
        CheckpointMeta {
            config: config.clone(),
            mean: pre.mean.clone(),
            std: pre.std.clone(),
            input_size: pre.size,
            input_channels: pre.channels,
        }
    }

    pub fn preprocess(&self) -> Preprocess {
        Preprocess {
            size: self.input_size,
            channels: self.input_channels,
            mean: self.mean.clone(),
            std: self.std.clone(),
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, vs: &[f32]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialises `net` with the given batch-norm statistics (the network's own
/// when `bn` is `None`).
pub fn encode(net: &Supernet, meta: &CheckpointMeta, bn: Option<&[BatchNormState]>) -> Result<Vec<u8>> {
    let report = net.export_architecture().to_text();
    let meta = serde_json::to_string(meta).map_err(|e| Error::Config(format!("checkpoint metadata: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, report.len() as u32);
    out.extend_from_slice(report.as_bytes());
    put_u32(&mut out, meta.len() as u32);
    out.extend_from_slice(meta.as_bytes());
    for id in net.ordered_param_ids() {
        let p = net.params().get(id);
        for d in p.shape() {
            put_u32(&mut out, d as u32);
        }
        put_f32s(&mut out, p.value.data());
    }
    let own: Vec<BatchNormState> = net.bn_states().cloned().collect();
    let states = bn.unwrap_or(&own);
    if states.len() != own.len() || states.iter().zip(&own).any(|(a, b)| a.channels() != b.channels()) {
        return Err(Error::Consistency("batch-norm statistics do not match the network".into()));
    }
    for s in states {
        put_u32(&mut out, s.channels() as u32);
        put_f32s(&mut out, &s.running_mean);
        put_f32s(&mut out, &s.running_var);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.into(),
            offset: self.pos,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated: need {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let b = self.take(n * 4)?;
        Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }

    fn text(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.pos;
        let b = self.take(n)?.to_vec();
        String::from_utf8(b).map_err(|_| Error::Format {
            path: self.path.into(),
            offset: at,
            detail: "invalid UTF-8".into(),
        })
    }
}

/// Rebuilds the network stored in a checkpoint.
pub fn decode(bytes: &[u8], path: &Path) -> Result<(Supernet, CheckpointMeta)> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        r.pos = 0;
        return Err(r.fail("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        r.pos -= 4;
        return Err(r.fail(format!("unsupported checkpoint version {version}")));
    }
    let report = ArchitectureReport::parse(&r.text()?)?;
    let at = r.pos;
    let meta: CheckpointMeta = serde_json::from_str(&r.text()?).map_err(|e| Error::Format {
        path: path.into(),
        offset: at,
        detail: format!("metadata: {e}"),
    })?;
    let mut net = Supernet::build_with_widths(&report.config, &report.widths(), 0)?;
    for id in net.ordered_param_ids() {
        let expected = net.params().get(id).shape();
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = r.u32()? as usize;
        }
        if shape != expected {
            return Err(r.fail(format!("parameter shape {shape:?} does not match architecture {expected:?}")));
        }
        let data = r.f32s(shape.iter().product())?;
        net.params_mut().get_mut(id).value.data_mut().copy_from_slice(&data);
    }
    let count = net.bn_states().count();
    for i in 0..count {
        let c = r.u32()? as usize;
        let expected = net.bn_states().nth(i).map(BatchNormState::channels).unwrap_or(0);
        if c != expected {
            return Err(r.fail(format!("batch norm {i} has {c} channels, architecture says {expected}")));
        }
        let mean = r.f32s(c)?;
        let var = r.f32s(c)?;
        let s = net.bn_states_mut().nth(i).expect("counted");
        s.running_mean = mean;
        s.running_var = var;
    }
    if r.pos != bytes.len() {
        return Err(r.fail("trailing bytes"));
    }
    Ok((net, meta))
}

pub fn save(path: &Path, net: &Supernet, meta: &CheckpointMeta, bn: Option<&[BatchNormState]>) -> Result<()> {
    fs::write(path, encode(net, meta, bn)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Supernet, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
