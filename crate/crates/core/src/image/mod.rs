//! Images, color conversion, resampling, and the evaluation metrics.

pub mod metrics;
pub mod resize;

pub use metrics::{psnr_y, ssim_y, SSIM_WINDOW};
pub use resize::{bicubic_resize, Scale};

use std::path::Path;

use crate::error::{ensure_contract, Result};
use crate::tensor::Tensor;

/// 8-bit RGB image, row-major, tightly packed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageRgb {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl ImageRgb {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        ensure_contract!(
            width > 0 && height > 0,
            "image dimensions must be positive, got {width}x{height}"
        );
        ensure_contract!(
            data.len() == 3 * width * height,
            "image data length {} does not match 3*{width}*{height}",
            data.len()
        );
        Ok(ImageRgb {
            width,
            height,
            data,
        })
    }

    pub fn constant(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(3 * width * height);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Self::new(w, h, img.into_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = image::RgbImage::from_raw(
            self.width as u32,
            self.height as u32,
            self.data.clone(),
        )
        .expect("dimensions validated at construction");
        img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// `[3, H, W]` tensor with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let (w, h) = (self.width, self.height);
        let mut t = Tensor::zeros(&[3, h, w]);
        for y in 0..h {
            for x in 0..w {
                let p = self.pixel(x, y);
                for c in 0..3 {
                    *t.at3_mut(c, y, x) = p[c] as f64 / 255.0;
                }
            }
        }
        t
    }

    /// Quantizes a `[3, H, W]` tensor in `[0, 1]` back to 8-bit, clamping
    /// and rounding half away from zero.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        ensure_contract!(
            t.rank() == 3 && t.channels() == 3,
            "expected a [3, H, W] tensor, got {:?}",
            t.shape()
        );
        let (h, w) = (t.height(), t.width());
        let mut data = Vec::with_capacity(3 * w * h);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let v = (t.at3(c, y, x) * 255.0).clamp(0.0, 255.0);
                    data.push(v.round() as u8);
                }
            }
        }
        Self::new(w, h, data)
    }
}

/// Luminance plane, real-valued in `[0, 255]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageY {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ImageY {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        ensure_contract!(
            data.len() == width * height,
            "luminance data length {} does not match {width}x{height}",
            data.len()
        );
        for &v in &data {
            ensure_contract!(
                v.is_finite() && (0.0..=255.0).contains(&v),
                "luminance value {v} outside [0, 255]"
            );
        }
        Ok(ImageY {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Studio-range BT.601 luminance: `Y = 16 + 65.481 R + 128.553 G + 24.966 B`
/// with RGB normalized to `[0, 1]`, clamped to `[0, 255]`. This is the
/// convention behind published super-resolution PSNR numbers.
pub fn rgb_to_y(img: &ImageRgb) -> ImageY {
    let data = img
        .data()
        .chunks_exact(3)
        .map(|p| {
            let r = p[0] as f64 / 255.0;
            let g = p[1] as f64 / 255.0;
            let b = p[2] as f64 / 255.0;
            (16.0 + 65.481 * r + 128.553 * g + 24.966 * b).clamp(0.0, 255.0)
        })
        .collect();
    ImageY {
        width: img.width(),
        height: img.height(),
        data,
    }
}
