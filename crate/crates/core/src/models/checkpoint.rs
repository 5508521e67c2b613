//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "BANF" | version u16 | generation u32 | spec_len u32 | spec JSON
//! count u32 | count × (name_len u32 | name | ndim u32 | ndim × u64 | values f64…)
//! SHA-256 of everything above (32 bytes)
//! ```

use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{build, Model, ModelSpec, TeacherSnapshot};
use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BANF";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: ParameterSet<f64>,
    pub generation: u32,
}

impl Checkpoint {
    /// Frozen model for inference. Fails when the stored parameters do not
    /// have the names and shapes the stored spec builds.
    pub fn into_snapshot(self) -> Result<TeacherSnapshot<f64>> {
        let fresh = build(&self.spec)?;
        let expected: Vec<(&str, &[usize])> = fresh.params.iter().map(|(n, t)| (n, t.shape())).collect();
        let found: Vec<(&str, &[usize])> = self.params.iter().map(|(n, t)| (n, t.shape())).collect();
        if expected != found {
            return Err(Error::Spec {
                stage: "checkpoint".into(),
                detail: "stored parameters do not match the stored model spec".into(),
            });
        }
        let model = Model {
            spec: self.spec,
            params: self.params,
        };
        Ok(TeacherSnapshot::new(&model, self.generation as usize))
    }
}

fn encode<F: Real>(spec: &ModelSpec, params: &ParameterSet<F>, generation: u32) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&generation.to_le_bytes());
    let json = serde_json::to_vec(spec)?;
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Writes a checkpoint atomically (temporary file, then rename).
pub fn save_checkpoint<F: Real>(
    path: &Path,
    spec: &ModelSpec,
    params: &ParameterSet<F>,
    generation: u32,
) -> Result<()> {
    let bytes = encode(spec, params, generation)?;
    let tmp = path.with_extension("banf.tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                detail: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint from memory, verifying magic, version and checksum.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let fmt = |offset: usize, detail: String| Error::Format {
        offset: offset as u64,
        detail,
    };
    if bytes.len() < 4 + 2 + 32 {
        return Err(fmt(bytes.len(), "file too short for a checkpoint".into()));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(fmt(0, "bad magic, not a BANF checkpoint".into()));
    }
    let body_len = bytes.len() - 32;
    if Sha256::digest(&bytes[..body_len]).as_slice() != &bytes[body_len..] {
        return Err(fmt(body_len, "checksum mismatch".into()));
    }
    let mut r = Reader {
        bytes: &bytes[..body_len],
        pos: 4,
    };
    let version = u16::from_le_bytes(r.take(2, "version")?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(fmt(4, format!("unsupported checkpoint version {version}")));
    }
    let generation = r.u32("generation")?;
    let spec_len = r.u32("spec length")? as usize;
    let spec_at = r.pos;
    let spec: ModelSpec =
        serde_json::from_slice(r.take(spec_len, "spec")?).map_err(|e| fmt(spec_at, format!("spec: {e}")))?;
    let count = r.u32("parameter count")?;
    let mut params = ParameterSet::new();
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| fmt(at, "parameter name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64("dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let at = r.pos;
        let raw = r.take(
            numel.checked_mul(8).ok_or_else(|| fmt(at, "tensor too large".into()))?,
            "values",
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params
            .insert(name, Tensor::new(shape, data)?)
            .map_err(|e| fmt(at, e.to_string()))?;
    }
    if r.pos != body_len {
        return Err(fmt(r.pos, "trailing bytes after parameters".into()));
    }
    Ok(Checkpoint {
        spec,
        params,
        generation,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
