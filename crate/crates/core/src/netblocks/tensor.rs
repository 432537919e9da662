use crate::imagedata::Image;
use crate::real::Real;

/// Activation volume in height-width-channel order: element `(y, x, c)`
/// lives at `(y * width + x) * channels + c`, so each spatial location is a
/// contiguous token vector.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Self {
        assert_eq!(
            data.len(),
            height * width * channels,
            "feature map data length does not match {height}x{width}x{channels}"
        );
        Self { height, width, channels, data }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::new(height, width, channels, vec![T::zero(); height * width * channels])
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn scalar(value: T) -> Self {
        Self::new(1, 1, 1, vec![value])
    }

    pub fn from_image(img: &Image) -> Self {
        Self::new(
            img.height(),
            img.width(),
            Image::CHANNELS,
            img.data().iter().map(|&v| T::c(v as f64)).collect(),
        )
    }

    /// Converts a 3-channel map to an image, clamping into `[0, 1]`.
    pub fn to_image(&self) -> Image {
        assert_eq!(self.channels, Image::CHANNELS, "only 3-channel maps convert to images");
        Image::from_vec_clamped(
            self.height,
            self.width,
            self.data.iter().map(|v| v.as_f64() as f32).collect(),
        )
        .expect("dimensions are positive")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: T) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &FeatureMap<T>) {
        assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn scaled(&self, s: T) -> FeatureMap<T> {
        FeatureMap {
            data: self.data.iter().map(|&v| v * s).collect(),
            ..*self
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> FeatureMap<T> {
        FeatureMap {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn cast<U: Real>(&self) -> FeatureMap<U> {
        FeatureMap {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|v| U::c(v.as_f64())).collect(),
        }
    }

    /// Copies the `height x width` window at `(top, left)`, all channels.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> FeatureMap<T> {
        assert!(top + height <= self.height && left + width <= self.width);
        let c = self.channels;
        let mut data = Vec::with_capacity(height * width * c);
        for y in top..top + height {
            let s = (y * self.width + left) * c;
            data.extend_from_slice(&self.data[s..s + width * c]);
        }
        FeatureMap::new(height, width, c, data)
    }

    /// Channel-wise spatial mean.
    pub fn channel_means(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.channels];
        for px in self.data.chunks_exact(self.channels) {
            for (o, &v) in out.iter_mut().zip(px) {
                *o = *o + v;
            }
        }
        let n = T::c(self.tokens() as f64);
        out.into_iter().map(|v| v / n).collect()
    }
}
