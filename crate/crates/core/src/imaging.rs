//! Planar `f32` images and bilinear resampling.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Channel-major (C×H×W) image with values nominally in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Image> {
        if data.len() != channels * height * width {
            return Err(Error::LengthMismatch(data.len(), channels * height * width));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Image {
        Image {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Builds a new image of the same channel count from a per-pixel map.
    pub fn map_coords<F>(&self, height: usize, width: usize, mut f: F) -> Image
    where
        F: FnMut(&[f32], usize, usize) -> f32,
    {
        let mut data = Vec::with_capacity(self.channels * height * width);
        for c in 0..self.channels {
            let src = self.plane(c);
            for y in 0..height {
                for x in 0..width {
                    data.push(f(src, y, x));
                }
            }
        }
        Image {
            channels: self.channels,
            height,
            width,
            data,
        }
    }

    pub fn from_rgb8(img: &RgbImage) -> Image {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; 3 * h * w];
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = p.0[c] as f32 / 255.0;
            }
        }
        Image {
            channels: 3,
            height: h,
            width: w,
            data,
        }
    }

    pub fn from_gray16(img: &ImageBuffer<Luma<u16>, Vec<u16>>) -> Image {
        Image {
            channels: 1,
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.as_raw().iter().map(|&v| v as f32 / 65535.0).collect(),
        }
    }

    /// Quantizes a single-channel image in [0, 1] to 16-bit gray.
    pub fn to_gray16(&self) -> Result<ImageBuffer<Luma<u16>, Vec<u16>>> {
        if self.channels != 1 {
            return Err(Error::InvalidArgument(format!(
                "expected 1 channel, found {}",
                self.channels
            )));
        }
        let raw = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
            .collect();
        Ok(ImageBuffer::from_raw(self.width as u32, self.height as u32, raw).expect("sized buffer"))
    }

    /// Stacks images of identical shape into an N×C×H×W tensor.
    pub fn batch(images: &[&Image]) -> Result<Tensor> {
        let first = images.first().ok_or(Error::EmptyInput("image batch"))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for im in images {
            if (im.channels, im.height, im.width) != (first.channels, first.height, first.width) {
                return Err(Error::shape(
                    "batch",
                    &[im.channels, im.height, im.width],
                    &[first.channels, first.height, first.width],
                ));
            }
            data.extend_from_slice(&im.data);
        }
        Tensor::new(&[images.len(), first.channels, first.height, first.width], data)
    }
}

/// Bilinear sample of one plane at continuous pixel-centre coordinates,
/// clamping to the edge.
pub fn sample_bilinear(plane: &[f32], height: usize, width: usize, y: f64, x: f64) -> f32 {
    let y = y.clamp(0.0, (height - 1) as f64);
    let x = x.clamp(0.0, (width - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(height - 1), (x0 + 1).min(width - 1));
    let (ty, tx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    let p = |yy: usize, xx: usize| plane[yy * width + xx];
    // lerp form keeps constant neighbourhoods exact
    let top = p(y0, x0) + (p(y0, x1) - p(y0, x0)) * tx;
    let bottom = p(y1, x0) + (p(y1, x1) - p(y1, x0)) * tx;
    top + (bottom - top) * ty
}

/// Resizes with half-pixel-centre bilinear interpolation.
pub fn resize_bilinear(img: &Image, height: usize, width: usize) -> Image {
    if (height, width) == (img.height, img.width) {
        return img.clone();
    }
    let sy = img.height as f64 / height as f64;
    let sx = img.width as f64 / width as f64;
    let (h, w) = (img.height, img.width);
    img.map_coords(height, width, |plane, y, x| {
        let fy = (y as f64 + 0.5) * sy - 0.5;
        let fx = (x as f64 + 0.5) * sx - 0.5;
        sample_bilinear(plane, h, w, fy, fx)
    })
}

/// Decodes a PNG/TIFF as a planar image. RGB(A) 8-bit becomes 3 channels,
/// 8- or 16-bit gray becomes 1 channel.
pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::ImageDecode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    match img {
        DynamicImage::ImageRgb8(rgb) => Ok(Image::from_rgb8(&rgb)),
        DynamicImage::ImageRgba8(_) => Ok(Image::from_rgb8(&img.to_rgb8())),
        DynamicImage::ImageLuma8(g) => Ok(Image {
            channels: 1,
            height: g.height() as usize,
            width: g.width() as usize,
            data: g.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
        }),
        DynamicImage::ImageLuma16(g) => Ok(Image::from_gray16(&g)),
        other => Err(Error::NonRgb(format!("{:?}", other.color()))),
    }
}
