//! Random-shift image augmentation.
//!
//! Each image is padded by replicating its border pixels, then resampled at a
//! sub-pixel offset `(dx, dy) ∈ [−pad, pad]²` with bilinear interpolation. The
//! offset is drawn once per image and shared by all its channels, so the
//! frames of a stacked observation move together.
//!
//! Two implementations exist. [`random_shift_reference`] materializes the
//! padded image and interpolates pixel by pixel. [`random_shift`] never builds
//! the padded copy: replicate padding is index clamping, the offset is
//! uniform over the image, so the interpolation weights and source indices
//! are computed once per image and the resampling splits into a horizontal
//! pass over contiguous rows followed by a vertical blend.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Sub-pixel translation applied to one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shift {
    pub dx: f64,
    pub dy: f64,
}

impl Shift {
    pub const ZERO: Shift = Shift { dx: 0.0, dy: 0.0 };
}

fn dims<S: Scalar>(batch: &Tensor<S>) -> Result<(usize, usize, usize, usize)> {
    match *batch.shape() {
        [b, c, h, w] if h == w => Ok((b, c, h, w)),
        ref s => Err(Error::contract(format!(
            "image batch must be [B,C,H,W] with H == W, got {s:?}"
        ))),
    }
}

fn check_shifts(shifts: &[Shift], batch: usize, pad: usize) -> Result<()> {
    if shifts.len() != batch {
        return Err(Error::contract(format!(
            "{} shifts supplied for a batch of {batch}",
            shifts.len()
        )));
    }
    let p = pad as f64;
    if let Some((i, s)) = shifts
        .iter()
        .enumerate()
        .find(|(_, s)| !(s.dx.abs() <= p && s.dy.abs() <= p))
    {
        return Err(Error::contract(format!(
            "shift {i} = ({}, {}) exceeds pad {pad}",
            s.dx, s.dy
        )));
    }
    Ok(())
}

/// Draws one shift per image, uniformly from the square `[−pad, pad]²`.
///
/// `dx` is drawn before `dy` for every image.
pub fn draw_shifts<R: Rng + ?Sized>(rng: &mut R, batch: usize, pad: usize) -> Vec<Shift> {
    let p = pad as f64;
    (0..batch)
        .map(|_| {
            let dx = rng.random_range(-p..=p);
            let dy = rng.random_range(-p..=p);
            Shift { dx, dy }
        })
        .collect()
}

/// Replicates border pixels outward by `pad` on every side.
pub fn pad_replicate<S: Scalar>(batch: &Tensor<S>, pad: usize) -> Result<Tensor<S>> {
    let (b, c, h, w) = dims(batch)?;
    if pad == 0 {
        return Ok(batch.clone());
    }
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let src = batch.values();
    let mut out = Vec::with_capacity(b * c * hp * wp);
    for plane in src.chunks_exact(h * w) {
        for i in 0..hp {
            let si = i.saturating_sub(pad).min(h - 1);
            for j in 0..wp {
                let sj = j.saturating_sub(pad).min(w - 1);
                out.push(plane[si * w + sj]);
            }
        }
    }
    Tensor::new(vec![b, c, hp, wp], out)
}

/// Samples a padded batch at `(i + pad + dy, j + pad + dx)` for every output
/// pixel `(i, j)`, interpolating the four surrounding grid points.
///
/// This is the straightforward per-pixel formulation.
pub fn bilinear_sample<S: Scalar>(padded: &Tensor<S>, pad: usize, shifts: &[Shift]) -> Result<Tensor<S>> {
    let (b, c, hp, wp) = dims(padded)?;
    if hp <= 2 * pad {
        return Err(Error::contract(format!(
            "padded extent {hp} inconsistent with pad {pad}"
        )));
    }
    check_shifts(shifts, b, pad)?;
    let (h, w) = (hp - 2 * pad, wp - 2 * pad);
    let src = padded.values();
    let mut out = vec![S::zero(); b * c * h * w];
    for n in 0..b {
        let Shift { dx, dy } = shifts[n];
        for ch in 0..c {
            let base = (n * c + ch) * hp * wp;
            for i in 0..h {
                for j in 0..w {
                    let y = (i + pad) as f64 + dy;
                    let x = (j + pad) as f64 + dx;
                    let (y0, x0) = (y.floor(), x.floor());
                    let (fy, fx) = (S::from_f64(y - y0), S::from_f64(x - x0));
                    let (y0, x0) = (y0 as usize, x0 as usize);
                    let y1 = (y0 + 1).min(hp - 1);
                    let x1 = (x0 + 1).min(wp - 1);
                    let at = |yy: usize, xx: usize| src[base + yy * wp + xx];
                    let top = (S::one() - fx) * at(y0, x0) + fx * at(y0, x1);
                    let bottom = (S::one() - fx) * at(y1, x0) + fx * at(y1, x1);
                    out[((n * c + ch) * h + i) * w + j] = (S::one() - fy) * top + fy * bottom;
                }
            }
        }
    }
    Tensor::new(vec![b, c, h, w], out)
}

/// Reference random shift: explicit padding followed by per-pixel sampling.
pub fn random_shift_reference<S: Scalar, R: Rng + ?Sized>(
    batch: &Tensor<S>,
    pad: usize,
    rng: &mut R,
) -> Result<Tensor<S>> {
    let (b, ..) = dims(batch)?;
    let shifts = draw_shifts(rng, b, pad);
    shift_reference(batch, pad, &shifts)
}

/// Reference path with caller-supplied shifts.
pub fn shift_reference<S: Scalar>(batch: &Tensor<S>, pad: usize, shifts: &[Shift]) -> Result<Tensor<S>> {
    let padded = pad_replicate(batch, pad)?;
    bilinear_sample(&padded, pad, shifts)
}

/// Optimized random shift. Consumes the same random draws as
/// [`random_shift_reference`].
pub fn random_shift<S: Scalar, R: Rng + ?Sized>(batch: &Tensor<S>, pad: usize, rng: &mut R) -> Result<Tensor<S>> {
    let (b, ..) = dims(batch)?;
    let shifts = draw_shifts(rng, b, pad);
    shift_batch(batch, pad, &shifts)
}

/// Source indices and weights for one axis of a uniform sub-pixel shift.
struct AxisPlan<S> {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: S,
    /// Output positions `[start, end)` whose neighbours need no clamping.
    interior: (usize, usize),
    offset: isize,
}

impl<S: Scalar> AxisPlan<S> {
    fn new(len: usize, shift: f64) -> Self {
        let whole = shift.floor();
        let frac = S::from_f64(shift - whole);
        let offset = whole as isize;
        let last = len as isize - 1;
        let clamp = |v: isize| v.clamp(0, last) as usize;
        let lo = (0..len as isize).map(|k| clamp(k + offset)).collect();
        let hi = (0..len as isize).map(|k| clamp(k + offset + 1)).collect();
        let start = (-offset).clamp(0, len as isize) as usize;
        let end = (last - offset).clamp(start as isize, len as isize) as usize;
        Self {
            lo,
            hi,
            frac,
            interior: (start, end),
            offset,
        }
    }
}

/// Optimized shift with caller-supplied shifts.
pub fn shift_batch<S: Scalar>(batch: &Tensor<S>, pad: usize, shifts: &[Shift]) -> Result<Tensor<S>> {
    let (b, c, h, w) = dims(batch)?;
    check_shifts(shifts, b, pad)?;
    let src = batch.values();
    let mut out = vec![S::zero(); src.len()];
    let mut rows = vec![S::zero(); h * w];
    let plane = h * w;
    for (n, shift) in shifts.iter().enumerate() {
        let xs = AxisPlan::<S>::new(w, shift.dx);
        let ys = AxisPlan::<S>::new(h, shift.dy);
        let (fx, fy) = (xs.frac, ys.frac);
        let (gx, gy) = (S::one() - fx, S::one() - fy);
        for ch in 0..c {
            let off = (n * c + ch) * plane;
            let img = &src[off..off + plane];
            let dst = &mut out[off..off + plane];
            // Horizontal pass over every source row.
            for (srow, hrow) in img.chunks_exact(w).zip(rows.chunks_exact_mut(w)) {
                let (s, e) = xs.interior;
                for j in (0..s).chain(e..w) {
                    hrow[j] = gx * srow[xs.lo[j]] + fx * srow[xs.hi[j]];
                }
                if e > s {
                    let a = &srow[(s as isize + xs.offset) as usize..(e as isize + xs.offset) as usize];
                    let bb = &srow[(s as isize + xs.offset + 1) as usize..(e as isize + xs.offset + 1) as usize];
                    for ((o, &l), &r) in hrow[s..e].iter_mut().zip(a).zip(bb) {
                        *o = gx * l + fx * r;
                    }
                }
            }
            // Vertical blend of the interpolated rows.
            for (i, orow) in dst.chunks_exact_mut(w).enumerate() {
                let top = &rows[ys.lo[i] * w..(ys.lo[i] + 1) * w];
                let bottom = &rows[ys.hi[i] * w..(ys.hi[i] + 1) * w];
                for ((o, &t), &bt) in orow.iter_mut().zip(top).zip(bottom) {
                    *o = gy * t + fy * bt;
                }
            }
        }
    }
    Tensor::new(vec![b, c, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
        Tensor::from_fn(shape, |_| rng.random::<f32>())
    }

    /// Integer translation with edge clamping, written independently of
    /// both implementations.
    fn translate_clamped(img: &Tensor<f32>, dx: isize, dy: isize) -> Tensor<f32> {
        let (b, c, h, w) = dims(img).unwrap();
        Tensor::from_fn(&[b, c, h, w], |idx| {
            let j = (idx % w) as isize;
            let i = ((idx / w) % h) as isize;
            let plane = idx / (h * w);
            let si = (i + dy).clamp(0, h as isize - 1) as usize;
            let sj = (j + dx).clamp(0, w as isize - 1) as usize;
            img.values()[plane * h * w + si * w + sj]
        })
    }

    #[test]
    fn pad_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random_batch(&mut rng, &[2, 3, 6, 6]);
        assert_eq!(pad_replicate(&x, 0).unwrap(), x);
    }

    #[test]
    fn pad_replicates_edges() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let p = pad_replicate(&x, 1).unwrap();
        assert_eq!(p.shape(), &[1, 1, 4, 4]);
        #[rustfmt::skip]
        let expect = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(p.values(), &expect);
        let c = Tensor::full(&[1, 2, 3, 3], 0.3f32);
        assert!(pad_replicate(&c, 4).unwrap().values().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn zero_shift_returns_original() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_batch(&mut rng, &[3, 9, 10, 10]);
        let shifts = vec![Shift::ZERO; 3];
        assert_eq!(shift_reference(&x, 4, &shifts).unwrap(), x);
        assert_eq!(shift_batch(&x, 4, &shifts).unwrap(), x);
    }

    #[test]
    fn constant_image_stays_constant() {
        let x = Tensor::full(&[2, 3, 8, 8], 0.625f32);
        let shifts = [Shift { dx: 1.3, dy: -3.9 }, Shift { dx: -4.0, dy: 4.0 }];
        for out in [shift_reference(&x, 4, &shifts).unwrap(), shift_batch(&x, 4, &shifts).unwrap()] {
            assert!(out.values().iter().all(|&v| (v - 0.625).abs() < 1e-7));
        }
    }

    #[test]
    fn integer_shift_is_exact_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_batch(&mut rng, &[1, 3, 8, 8]);
        let shifts = [Shift { dx: 2.0, dy: -3.0 }];
        let expect = translate_clamped(&x, 2, -3);
        assert_eq!(shift_reference(&x, 4, &shifts).unwrap(), expect);
        assert_eq!(shift_batch(&x, 4, &shifts).unwrap(), expect);
    }

    #[test]
    fn out_of_range_shift_rejected() {
        let x = Tensor::full(&[1, 1, 8, 8], 0.0f32);
        let bad = [Shift { dx: 4.5, dy: 0.0 }];
        assert!(matches!(shift_batch(&x, 4, &bad), Err(Error::Contract(_))));
        let padded = pad_replicate(&x, 4).unwrap();
        assert!(bilinear_sample(&padded, 4, &bad).is_err());
        assert!(shift_batch(&x, 4, &[Shift::ZERO, Shift::ZERO]).is_err());
        let rect = Tensor::full(&[1, 1, 8, 6], 0.0f32);
        assert!(shift_batch(&rect, 4, &[Shift::ZERO]).is_err());
    }

    #[test]
    fn pad_zero_random_shift_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_batch(&mut rng, &[4, 3, 7, 7]);
        assert_eq!(random_shift(&x, 0, &mut rng).unwrap(), x);
        assert_eq!(random_shift_reference(&x, 0, &mut rng).unwrap(), x);
    }

    #[test]
    fn seeded_calls_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_batch(&mut rng, &[4, 9, 12, 12]);
        let r1 = ChaCha8Rng::seed_from_u64(99);
        let a = random_shift(&x, 4, &mut r1.clone()).unwrap();
        let b = random_shift(&x, 4, &mut r1.clone()).unwrap();
        assert_eq!(a.values(), b.values());
        let c = random_shift_reference(&x, 4, &mut r1.clone()).unwrap();
        let max = a.values().iter().zip(c.values()).map(|(p, q)| (p - q).abs()).fold(0.0, f32::max);
        assert!(max <= 1e-6, "{max}");
    }

    #[test]
    fn sampler_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = draw_shifts(&mut rng, 10_000, 4);
        let (mut sx, mut sy) = (0.0, 0.0);
        for sh in &s {
            assert!(sh.dx.abs() <= 4.0 && sh.dy.abs() <= 4.0);
            sx += sh.dx;
            sy += sh.dy;
        }
        assert!((sx / 1e4).abs() < 0.15 && (sy / 1e4).abs() < 0.15);
        // Continuous: essentially no draw is an integer.
        assert!(s.iter().filter(|sh| sh.dx.fract() == 0.0).count() < 5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn paths_agree_and_preserve_range(
            seed in any::<u64>(),
            b in 1usize..4,
            c in 1usize..4,
            side in 1usize..14,
            pad in 0usize..6,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_batch(&mut rng, &[b, c, side, side]);
            let shifts = draw_shifts(&mut rng, b, pad);
            let fast = shift_batch(&x, pad, &shifts).unwrap();
            let slow = shift_reference(&x, pad, &shifts).unwrap();
            for (p, q) in fast.values().iter().zip(slow.values()) {
                prop_assert!((p - q).abs() <= 1e-6);
                prop_assert!((0.0..=1.0).contains(p));
            }
        }

        #[test]
        fn sampling_is_linear(seed in any::<u64>(), a in -2.0f64..2.0, bcoef in -2.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f64>::from_fn(&[2, 2, 9, 9], |_| rng.random());
            let y = Tensor::<f64>::from_fn(&[2, 2, 9, 9], |_| rng.random());
            let shifts = draw_shifts(&mut rng, 2, 3);
            let mix = Tensor::from_fn(x.shape(), |i| a * x.values()[i] + bcoef * y.values()[i]);
            let lhs = shift_batch(&mix, 3, &shifts).unwrap();
            let sx = shift_batch(&x, 3, &shifts).unwrap();
            let sy = shift_batch(&y, 3, &shifts).unwrap();
            for i in 0..lhs.numel() {
                let rhs = a * sx.values()[i] + bcoef * sy.values()[i];
                prop_assert!((lhs.values()[i] - rhs).abs() <= 1e-6);
            }
        }
    }
}
