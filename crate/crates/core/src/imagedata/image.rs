use std::path::Path;

use super::{ImageDataError, Result};

/// RGB raster with values in `[0, 1]`, stored row-major with interleaved
/// channels (`data[(y * width + x) * 3 + c]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(ImageDataError::Precondition(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width * Self::CHANNELS {
            return Err(ImageDataError::Precondition(format!(
                "expected {} values for a {height}x{width} RGB image, got {}",
                height * width * Self::CHANNELS,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ImageDataError::Precondition(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(Self { height, width, data })
    }

    /// Builds an image from arbitrary finite values, clamping into `[0, 1]`.
    /// Non-finite values map to 0.
    pub fn from_vec_clamped(height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        }
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        assert!(height > 0 && width > 0, "image dimensions must be positive");
        Self {
            height,
            width,
            data: vec![value.clamp(0.0, 1.0); height * width * Self::CHANNELS],
        }
    }

    /// Builds an image by evaluating `f(y, x, c)`; results are clamped.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        assert!(height > 0 && width > 0, "image dimensions must be positive");
        let mut data = Vec::with_capacity(height * width * Self::CHANNELS);
        for y in 0..height {
            for x in 0..width {
                for c in 0..Self::CHANNELS {
                    let v = f(y, x, c);
                    data.push(if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 });
                }
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        Self::CHANNELS
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * Self::CHANNELS + c]
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Copies out the `height x width` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(ImageDataError::Precondition(format!(
                "crop {height}x{width} at ({top}, {left}) exceeds {}x{} image",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width * Self::CHANNELS);
        for y in top..top + height {
            let start = (y * self.width + left) * Self::CHANNELS;
            data.extend_from_slice(&self.data[start..start + width * Self::CHANNELS]);
        }
        Ok(Image { height, width, data })
    }

    pub fn flip_horizontal(&self) -> Image {
        Image::from_fn(self.height, self.width, |y, x, c| self.get(y, self.width - 1 - x, c))
    }

    /// Elementwise map followed by clamping into `[0, 1]`.
    pub fn map(&self, mut f: impl FnMut(f32) -> f32) -> Image {
        let data = self
            .data
            .iter()
            .map(|&v| {
                let r = f(v);
                if r.is_finite() {
                    r.clamp(0.0, 1.0)
                } else {
                    0.0
                }
            })
            .collect();
        Image {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// ITU-R BT.601 luma in `[0, 1]`, row-major.
    pub fn luma(&self) -> Vec<f64> {
        self.data
            .chunks_exact(Self::CHANNELS)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect()
    }

    /// Area-averaged resize (box filter over the source footprint of each
    /// destination pixel). Used for low-resolution feature extraction.
    pub fn resize_area(&self, height: usize, width: usize) -> Image {
        assert!(height > 0 && width > 0, "target dimensions must be positive");
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let mut data = vec![0.0f32; height * width * Self::CHANNELS];
        for oy in 0..height {
            let y0 = oy as f64 * sy;
            let y1 = y0 + sy;
            for ox in 0..width {
                let x0 = ox as f64 * sx;
                let x1 = x0 + sx;
                let mut acc = [0.0f64; 3];
                let mut total = 0.0;
                let mut y = y0.floor() as usize;
                while (y as f64) < y1 && y < self.height {
                    let wy = (y1.min(y as f64 + 1.0) - y0.max(y as f64)).max(0.0);
                    let mut x = x0.floor() as usize;
                    while (x as f64) < x1 && x < self.width {
                        let wx = (x1.min(x as f64 + 1.0) - x0.max(x as f64)).max(0.0);
                        let w = wy * wx;
                        for (c, a) in acc.iter_mut().enumerate() {
                            *a += w * self.get(y, x, c) as f64;
                        }
                        total += w;
                        x += 1;
                    }
                    y += 1;
                }
                let base = (oy * width + ox) * Self::CHANNELS;
                for c in 0..Self::CHANNELS {
                    data[base + c] = ((acc[c] / total) as f32).clamp(0.0, 1.0);
                }
            }
        }
        Image { height, width, data }
    }
}

/// Recognition sample: label 0 marks a rainy scene, 1 a rain-free scene.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub image: Image,
    pub label: f32,
}

impl LabeledSample {
    pub const RAINY: f32 = 0.0;
    pub const RAIN_FREE: f32 = 1.0;

    pub fn new(image: Image, label: f32) -> Result<Self> {
        if label != Self::RAINY && label != Self::RAIN_FREE {
            return Err(ImageDataError::Precondition(format!(
                "recognition label must be 0 or 1, got {label}"
            )));
        }
        Ok(Self { image, label })
    }
}

/// Aligned (input, target) pair of equal-size images.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    input: Image,
    target: Image,
}

impl PairedSample {
    pub fn new(input: Image, target: Image) -> Result<Self> {
        if !input.same_size(&target) {
            return Err(ImageDataError::Precondition(format!(
                "paired images differ in size: {}x{} vs {}x{}",
                input.height(),
                input.width(),
                target.height(),
                target.width()
            )));
        }
        Ok(Self { input, target })
    }

    pub fn input(&self) -> &Image {
        &self.input
    }

    pub fn target(&self) -> &Image {
        &self.target
    }

    pub fn into_parts(self) -> (Image, Image) {
        (self.input, self.target)
    }
}

/// Decodes a PNG or JPEG file; 8-bit value `v` maps to `v / 255`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| ImageDataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let decoded = image::load_from_memory(&bytes).map_err(|e| ImageDataError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = decoded.to_rgb8();
    let (width, height) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Image::new(height as usize, width as usize, data)
}

/// Writes an 8-bit image; the format follows the file extension (PNG is
/// the lossless choice).
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raw: Vec<u8> = img
        .data()
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, raw)
        .expect("buffer length matches dimensions");
    buf.save(path).map_err(|e| match e {
        image::ImageError::IoError(source) => ImageDataError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => ImageDataError::Format {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })
}
