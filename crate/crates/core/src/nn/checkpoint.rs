//! Binary checkpoint format.
//!
//! All integers and floats are little-endian. `W` is the float width in
//! bytes (4 for `f32`, 8 for `f64`).
//!
//! ```text
//! offset  size    field
//! 0       8       magic "DRQ2CKPT"
//! 8       4       u32 format version (currently 1)
//! 12      4       u32 float width W
//! 16      20      u32 × 5: obs_channels, obs_size, action_dim, features_dim, hidden_dim
//! 36      8       u64 environment-step counter
//! 44      4       u32 tensor count N
//! 48      ...     manifest, N entries:
//!                   u32 name length L, L bytes UTF-8 name,
//!                   u32 rank R, R × u64 extents,
//!                   u64 Adam step count
//! ...     ...     payload, N entries in manifest order:
//!                   numel × W values, numel × W Adam first moment,
//!                   numel × W Adam second moment
//! ```
//!
//! The file ends exactly after the last payload entry.

use std::path::Path;

use super::network::NetworkSpec;
use super::param::Parameter;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"DRQ2CKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub spec: NetworkSpec,
    pub env_step: u64,
}

pub fn encode<S: Scalar>(header: &CheckpointHeader, params: &[(String, &Parameter<S>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(S::BYTES as u32).to_le_bytes());
    let s = header.spec;
    for d in [s.obs_channels, s.obs_size, s.action_dim, s.features_dim, s.hidden_dim] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&header.env_step.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(p.shape().len() as u32).to_le_bytes());
        for &d in p.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&p.step_count.to_le_bytes());
    }
    for (_, p) in params {
        for buf in [p.values(), &p.adam_m[..], &p.adam_v[..]] {
            buf.iter().for_each(|v| v.write_le(&mut out));
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.path,
                format!("truncated at byte {} (wanted {n} more)", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint. `path` is only used in error messages.
pub fn decode<S: Scalar>(bytes: &[u8], path: &Path) -> Result<(CheckpointHeader, Vec<(String, Parameter<S>)>)> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8)? != MAGIC {
        return Err(Error::format(path, "bad magic, not a checkpoint"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let width = r.u32()? as usize;
    if width != S::BYTES {
        return Err(Error::format(
            path,
            format!("stored float width {width} does not match requested {}", S::BYTES),
        ));
    }
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let spec = NetworkSpec {
        obs_channels: dims[0],
        obs_size: dims[1],
        action_dim: dims[2],
        features_dim: dims[3],
        hidden_dim: dims[4],
    };
    let env_step = r.u64()?;
    let count = r.u32()? as usize;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
            .to_owned();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let steps = r.u64()?;
        manifest.push((name, shape, steps));
    }
    let mut params = Vec::with_capacity(count);
    for (name, shape, steps) in manifest {
        let numel: usize = shape.iter().product();
        let read_buf = |r: &mut Reader| -> Result<Vec<S>> {
            let raw = r.take(numel * width)?;
            Ok(raw.chunks_exact(width).map(S::read_le).collect())
        };
        let values = read_buf(&mut r)?;
        let adam_m = read_buf(&mut r)?;
        let adam_v = read_buf(&mut r)?;
        let tensor = Tensor::new(shape, values).map_err(|e| Error::format(path, format!("{name}: {e}")))?;
        params.push((
            name,
            Parameter {
                tensor,
                adam_m,
                adam_v,
                step_count: steps,
            },
        ));
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((CheckpointHeader { spec, env_step }, params))
}

pub fn save<S: Scalar>(path: &Path, header: &CheckpointHeader, params: &[(String, &Parameter<S>)]) -> Result<()> {
    let bytes = encode(header, params);
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load<S: Scalar>(path: &Path) -> Result<(CheckpointHeader, Vec<(String, Parameter<S>)>)> {
    let bytes = std::fs::read(path)?;
    decode(&bytes, path)
}
