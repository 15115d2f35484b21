//! Seeded geometric augmentation of square planar images.
//!
//! Stages run in a fixed order (flip, rotate, scale, crop), each drawing
//! from its own stream derived from the sample seed, so toggling one stage
//! never changes what another stage draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{resize_bilinear, sample_bilinear, Image};
use crate::seed::derive_seed;

pub const SCALE_RANGE: (f64, f64) = (0.9, 1.1);
pub const CROP_AREA: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentFlags {
    pub flip: bool,
    pub rotate: bool,
    pub scale: bool,
    pub crop: bool,
    /// Rotate by a uniform angle with bilinear resampling instead of a
    /// multiple of 90°.
    pub continuous_rotation: bool,
}

impl Default for AugmentFlags {
    fn default() -> Self {
        AugmentFlags {
            flip: true,
            rotate: true,
            scale: true,
            crop: true,
            continuous_rotation: false,
        }
    }
}

impl AugmentFlags {
    pub fn none() -> Self {
        AugmentFlags {
            flip: false,
            rotate: false,
            scale: false,
            crop: false,
            continuous_rotation: false,
        }
    }

    pub fn any(&self) -> bool {
        self.flip || self.rotate || self.scale || self.crop
    }
}

fn remap(img: &Image, f: impl Fn(usize, usize) -> (usize, usize)) -> Image {
    img.map_coords(img.height, img.width, |plane, y, x| {
        let (sy, sx) = f(y, x);
        plane[sy * img.width + sx]
    })
}

pub fn flip_horizontal(img: &Image) -> Image {
    let w = img.width;
    remap(img, |y, x| (y, w - 1 - x))
}

pub fn flip_vertical(img: &Image) -> Image {
    let h = img.height;
    remap(img, |y, x| (h - 1 - y, x))
}

fn require_square(img: &Image) -> Result<usize> {
    if img.height != img.width || img.height == 0 {
        return Err(Error::InvalidArgument(format!(
            "augmentation needs a square image, got {}×{}",
            img.height, img.width
        )));
    }
    Ok(img.height)
}

/// Rotates counter-clockwise by `k` quarter turns.
pub fn rot90(img: &Image, k: usize) -> Result<Image> {
    let s = require_square(img)?;
    Ok(match k % 4 {
        0 => img.clone(),
        1 => remap(img, |y, x| (x, s - 1 - y)),
        2 => remap(img, |y, x| (s - 1 - y, s - 1 - x)),
        _ => remap(img, |y, x| (s - 1 - x, y)),
    })
}

/// Inverse-maps every output pixel through `f` about the image centre,
/// clamping to the edge.
fn warp(img: &Image, f: impl Fn(f64, f64) -> (f64, f64)) -> Image {
    let (h, w) = (img.height, img.width);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    img.map_coords(h, w, |plane, y, x| {
        let (dy, dx) = f(y as f64 - cy, x as f64 - cx);
        sample_bilinear(plane, h, w, cy + dy, cx + dx)
    })
}

/// Zooms by `factor` about the centre; > 1 crops, < 1 pads with edge values.
pub fn scale_about_center(img: &Image, factor: f64) -> Image {
    warp(img, |dy, dx| (dy / factor, dx / factor))
}

pub fn rotate(img: &Image, radians: f64) -> Image {
    let (s, c) = radians.sin_cos();
    warp(img, |dy, dx| (c * dy - s * dx, s * dy + c * dx))
}

/// Crops a `side`×`side` window at (y0, x0) and resizes it back.
pub fn crop_resize(img: &Image, y0: usize, x0: usize, side: usize) -> Image {
    let crop = Image {
        channels: img.channels,
        height: side,
        width: side,
        data: (0..img.channels)
            .flat_map(|c| {
                let plane = img.plane(c);
                (y0..y0 + side).flat_map(move |y| plane[y * img.width + x0..y * img.width + x0 + side].iter().copied())
            })
            .collect(),
    };
    resize_bilinear(&crop, img.height, img.width)
}

fn stage_rng(seed: u64, stage: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stage))
}

/// Applies the enabled stages. Output shape always equals input shape.
pub fn augment(img: &Image, flags: &AugmentFlags, seed: u64) -> Result<Image> {
    let s = require_square(img)?;
    let mut out = img.clone();
    if flags.flip {
        let mut rng = stage_rng(seed, "augment/flip");
        if rng.gen_bool(0.5) {
            out = flip_horizontal(&out);
        }
        if rng.gen_bool(0.5) {
            out = flip_vertical(&out);
        }
    }
    if flags.rotate {
        let mut rng = stage_rng(seed, "augment/rotate");
        out = if flags.continuous_rotation {
            rotate(&out, rng.gen_range(0.0..std::f64::consts::TAU))
        } else {
            rot90(&out, rng.gen_range(0..4))?
        };
    }
    if flags.scale {
        let mut rng = stage_rng(seed, "augment/scale");
        out = scale_about_center(&out, rng.gen_range(SCALE_RANGE.0..=SCALE_RANGE.1));
    }
    if flags.crop {
        let mut rng = stage_rng(seed, "augment/crop");
        let side = ((s as f64 * CROP_AREA.sqrt()).round() as usize).clamp(1, s);
        let y0 = rng.gen_range(0..=s - side);
        let x0 = rng.gen_range(0..=s - side);
        out = crop_resize(&out, y0, x0, side);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numbered(c: usize, s: usize) -> Image {
        let n = c * s * s;
        Image::new(c, s, s, (0..n).map(|i| i as f32).collect()).unwrap()
    }

    #[test]
    fn disabled_is_identity() {
        let img = numbered(3, 6);
        assert_eq!(augment(&img, &AugmentFlags::none(), 7).unwrap(), img);
    }

    #[test]
    fn constant_stays_constant() {
        let img = Image::filled(3, 9, 9, 0.625);
        let all = AugmentFlags {
            continuous_rotation: true,
            ..AugmentFlags::default()
        };
        for seed in 0..20 {
            for flags in [AugmentFlags::default(), all] {
                let out = augment(&img, &flags, seed).unwrap();
                assert!(out.data.iter().all(|&v| v == 0.625));
                assert_eq!((out.channels, out.height, out.width), (3, 9, 9));
            }
        }
    }

    #[test]
    fn rotation_group() {
        let img = numbered(2, 5);
        assert_eq!(rot90(&rot90(&img, 2).unwrap(), 2).unwrap(), img);
        assert_eq!(rot90(&rot90(&img, 1).unwrap(), 3).unwrap(), img);
        let r = rot90(&img, 1).unwrap();
        // top-right corner moves to top-left
        assert_eq!(r.at(0, 0, 0), img.at(0, 0, 4));
        assert_eq!(flip_horizontal(&flip_horizontal(&img)), img);
        assert_eq!(rot90(&img, 2).unwrap(), flip_vertical(&flip_horizontal(&img)));
    }

    #[test]
    fn unit_scale_and_full_crop_are_identity() {
        let img = numbered(1, 7);
        assert_eq!(scale_about_center(&img, 1.0), img);
        assert_eq!(crop_resize(&img, 0, 0, 7), img);
        assert_eq!(rotate(&img, 0.0), img);
    }

    #[test]
    fn seeded_and_shape_preserving() {
        let img = numbered(3, 8);
        let f = AugmentFlags::default();
        let a = augment(&img, &f, 3).unwrap();
        assert_eq!(a, augment(&img, &f, 3).unwrap());
        assert_eq!(a.data.len(), img.data.len());
        assert!((0..10).any(|s| augment(&img, &f, s).unwrap() != a));
        assert!(augment(&Image::filled(1, 2, 3, 0.0), &f, 0).is_err());
    }
}
