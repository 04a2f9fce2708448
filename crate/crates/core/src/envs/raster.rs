//! Flat-shaded rasterization of 2-D primitives.
//!
//! World coordinates are a square `[-half, half]²` centered on `origin`, with
//! `y` pointing up. A pixel is covered when its center lies inside the
//! primitive; there is no anti-aliasing.

use crate::frame::Frame;

pub type Rgb = [u8; 3];

pub struct Canvas<'a> {
    frame: &'a mut Frame,
    origin: (f64, f64),
    scale: f64,
}

impl<'a> Canvas<'a> {
    pub fn new(frame: &'a mut Frame, origin: (f64, f64), half: f64) -> Self {
        let scale = frame.size() as f64 / (2.0 * half);
        Self { frame, origin, scale }
    }

    pub fn fill(&mut self, rgb: Rgb) {
        let n = self.frame.size();
        for row in 0..n {
            for col in 0..n {
                self.frame.put(row, col, rgb);
            }
        }
    }

    /// Pixel-space center of a world point as `(col, row)` floats.
    fn to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        let n = self.frame.size() as f64;
        (
            (x - self.origin.0) * self.scale + n / 2.0,
            n / 2.0 - (y - self.origin.1) * self.scale,
        )
    }

    /// Visits every pixel whose center falls in the pixel-space box and
    /// passes `inside`.
    fn cover(&mut self, lo: (f64, f64), hi: (f64, f64), rgb: Rgb, inside: impl Fn(f64, f64) -> bool) {
        let n = self.frame.size() as isize;
        let c0 = (lo.0.floor() as isize).clamp(0, n);
        let c1 = (hi.0.ceil() as isize + 1).clamp(0, n);
        let r0 = (lo.1.floor() as isize).clamp(0, n);
        let r1 = (hi.1.ceil() as isize + 1).clamp(0, n);
        for row in r0..r1 {
            for col in c0..c1 {
                if inside(col as f64 + 0.5, row as f64 + 0.5) {
                    self.frame.put(row as usize, col as usize, rgb);
                }
            }
        }
    }

    pub fn circle(&mut self, center: (f64, f64), radius: f64, rgb: Rgb) {
        let (cx, cy) = self.to_pixel(center.0, center.1);
        let r = radius * self.scale;
        self.cover((cx - r, cy - r), (cx + r, cy + r), rgb, |px, py| {
            (px - cx).powi(2) + (py - cy).powi(2) <= r * r
        });
    }

    /// A segment thickened by `radius`, with round caps.
    pub fn capsule(&mut self, a: (f64, f64), b: (f64, f64), radius: f64, rgb: Rgb) {
        let (ax, ay) = self.to_pixel(a.0, a.1);
        let (bx, by) = self.to_pixel(b.0, b.1);
        let r = radius * self.scale;
        let (dx, dy) = (bx - ax, by - ay);
        let len2 = dx * dx + dy * dy;
        self.cover(
            (ax.min(bx) - r, ay.min(by) - r),
            (ax.max(bx) + r, ay.max(by) + r),
            rgb,
            |px, py| {
                let t = if len2 > 0.0 {
                    (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (qx, qy) = (ax + t * dx, ay + t * dy);
                (px - qx).powi(2) + (py - qy).powi(2) <= r * r
            },
        );
    }

    /// Axis-aligned rectangle given by world-space center and half extents.
    pub fn rect(&mut self, center: (f64, f64), half_w: f64, half_h: f64, rgb: Rgb) {
        let (cx, cy) = self.to_pixel(center.0, center.1);
        let (hw, hh) = (half_w * self.scale, half_h * self.scale);
        self.cover((cx - hw, cy - hh), (cx + hw, cy + hh), rgb, |px, py| {
            (px - cx).abs() <= hw && (py - cy).abs() <= hh
        });
    }
}
