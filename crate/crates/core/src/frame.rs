//! Rendered frames and channel-stacked observations.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Colour channels per frame.
pub const FRAME_CHANNELS: usize = 3;

/// One square RGB image, channel-major (`[3, size, size]`), 8 bits per
/// channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    size: usize,
    data: Vec<u8>,
}

impl Frame {
    pub fn new(size: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != FRAME_CHANNELS * size * size {
            return Err(Error::contract(format!(
                "frame of side {size} needs {} bytes, got {}",
                FRAME_CHANNELS * size * size,
                data.len()
            )));
        }
        Ok(Self { size, data })
    }

    pub fn blank(size: usize) -> Self {
        Self {
            size,
            data: vec![0; FRAME_CHANNELS * size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn bytes_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.data
    }

    /// Sets pixel `(row, col)` to `rgb`.
    #[inline]
    pub fn put(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let plane = self.size * self.size;
        let idx = row * self.size + col;
        self.data[idx] = rgb[0];
        self.data[plane + idx] = rgb[1];
        self.data[2 * plane + idx] = rgb[2];
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let plane = self.size * self.size;
        let idx = row * self.size + col;
        [self.data[idx], self.data[plane + idx], self.data[2 * plane + idx]]
    }

    /// Fraction of pixels whose colour differs between two frames.
    pub fn differing_fraction(&self, other: &Frame) -> f64 {
        assert_eq!(self.size, other.size, "frame sizes differ");
        let n = self.size * self.size;
        let differing = (0..n)
            .filter(|&i| {
                (0..FRAME_CHANNELS).any(|c| self.data[c * n + i] != other.data[c * n + i])
            })
            .count();
        differing as f64 / n as f64
    }

    /// Writes the frame as a PNG for inspection.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut img = image::RgbImage::new(self.size as u32, self.size as u32);
        for (x, y, px) in img.enumerate_pixels_mut() {
            *px = image::Rgb(self.pixel(y as usize, x as usize));
        }
        img.save(path)
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
    }
}

/// A window of the most recent frames, concatenated along channels and
/// scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedObservation {
    channels: usize,
    size: usize,
    data: Vec<f32>,
}

impl StackedObservation {
    /// Stacks frames oldest first.
    pub fn from_frames<'a>(frames: impl IntoIterator<Item = &'a Frame>) -> Self {
        let mut data = Vec::new();
        let mut size = 0;
        let mut count = 0;
        for f in frames {
            size = f.size();
            data.extend(f.bytes().iter().map(|&b| b as f32 / 255.0));
            count += 1;
        }
        Self {
            channels: count * FRAME_CHANNELS,
            size,
            data,
        }
    }

    /// `[channels, size, size]`.
    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.size, self.size]
    }

    pub fn values(&self) -> &[f32] {
        &self.data
    }

    /// A batch of one, `[1, C, H, W]`.
    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        Tensor::from_fn(&[1, self.channels, self.size, self.size], |i| {
            S::from_f64(self.data[i] as f64)
        })
    }
}
