//! On-disk episode format, one episode per file, little-endian.
//!
//! ```text
//! offset  size            field
//! 0       8               magic "DRQ2EPIS"
//! 8       4               u32 format version (currently 1)
//! 12      4               u32 step count L
//! 16      4               u32 channels per frame C
//! 20      4               u32 frame height H
//! 24      4               u32 frame width W
//! 28      4               u32 action dim A
//! 32      (L+1)·C·H·W     u8 frames, channel-major
//! ...     L·A·4           f32 actions
//! ...     L·4             f32 rewards
//! ```

use std::path::Path;

use super::Episode;
use crate::error::{Error, Result};
use crate::frame::FRAME_CHANNELS;

pub const EPISODE_MAGIC: &[u8; 8] = b"DRQ2EPIS";
const VERSION: u32 = 1;
const HEADER: usize = 32;

pub fn write_episode(path: &Path, ep: &Episode) -> Result<()> {
    let side = ep.frame_size() as u32;
    let mut out = Vec::with_capacity(HEADER + ep.raw_frames().len() + 4 * (ep.raw_actions().len() + ep.len()));
    out.extend_from_slice(EPISODE_MAGIC);
    for v in [
        VERSION,
        ep.len() as u32,
        FRAME_CHANNELS as u32,
        side,
        side,
        ep.action_dim() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(ep.raw_frames());
    for &a in ep.raw_actions() {
        out.extend_from_slice(&a.to_le_bytes());
    }
    for &r in ep.rewards() {
        out.extend_from_slice(&r.to_le_bytes());
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, out)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_episode(path: &Path) -> Result<Episode> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < HEADER || &bytes[..8] != EPISODE_MAGIC {
        return Err(Error::format(path, "not an episode file"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    if word(0) != VERSION as usize {
        return Err(Error::format(path, format!("unsupported version {}", word(0))));
    }
    let (len, c, h, w, a) = (word(1), word(2), word(3), word(4), word(5));
    if c != FRAME_CHANNELS || h != w {
        return Err(Error::format(path, format!("unsupported frame geometry {c}x{h}x{w}")));
    }
    let frame_bytes = (len + 1) * c * h * w;
    let expected = HEADER + frame_bytes + 4 * len * a + 4 * len;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let frames = bytes[HEADER..HEADER + frame_bytes].to_vec();
    let floats = |start: usize, n: usize| -> Vec<f32> {
        bytes[start..start + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    };
    let actions = floats(HEADER + frame_bytes, len * a);
    let rewards = floats(HEADER + frame_bytes + 4 * len * a, len);
    Episode::from_parts(h, a, frames, actions, rewards).map_err(|e| Error::format(path, e.to_string()))
}
