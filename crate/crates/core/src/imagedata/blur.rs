use super::{Image, ImageDataError, Result};

/// Normalized 1-D Gaussian taps `exp(-d^2 / (2 sigma^2)) / Z` for
/// `d in -radius..=radius`. The separable outer product of this vector with
/// itself is the normalized 2-D kernel.
pub fn gaussian_kernel_1d(sigma: f64, radius: usize) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(ImageDataError::Domain(format!("blur sigma must be positive, got {sigma}")));
    }
    let taps: Vec<f64> = (-(radius as i64)..=radius as i64)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / total).collect())
}

/// Maps an out-of-range index back into `0..n` by mirror reflection
/// without repeating the edge sample (`-1 -> 1`, `n -> n - 2`).
#[inline]
pub(crate) fn reflect_index(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    if m < n as i64 {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Separable Gaussian blur with reflective boundaries, per channel.
pub fn gaussian_blur(img: &Image, sigma: f64, radius: usize) -> Result<Image> {
    let kernel = gaussian_kernel_1d(sigma, radius)?;
    let (h, w, ch) = (img.height(), img.width(), Image::CHANNELS);
    let r = radius as i64;
    let src = img.data();

    let mut horizontal = vec![0.0f64; h * w * ch];
    for y in 0..h {
        for x in 0..w {
            for (k, &t) in kernel.iter().enumerate() {
                let sx = reflect_index(x as i64 + k as i64 - r, w);
                let s = (y * w + sx) * ch;
                let d = (y * w + x) * ch;
                for c in 0..ch {
                    horizontal[d + c] += t * src[s + c] as f64;
                }
            }
        }
    }
    let mut out = vec![0.0f32; h * w * ch];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f64; 3];
            for (k, &t) in kernel.iter().enumerate() {
                let sy = reflect_index(y as i64 + k as i64 - r, h);
                let s = (sy * w + x) * ch;
                for c in 0..ch {
                    acc[c] += t * horizontal[s + c];
                }
            }
            let d = (y * w + x) * ch;
            for c in 0..ch {
                out[d + c] = acc[c] as f32;
            }
        }
    }
    Image::from_vec_clamped(h, w, out)
}

/// Anisotropic total variation: sum of absolute horizontal and vertical
/// neighbour differences over all channels.
pub fn total_variation(img: &Image) -> f64 {
    let (h, w) = (img.height(), img.width());
    let mut tv = 0.0;
    for y in 0..h {
        for x in 0..w {
            for c in 0..Image::CHANNELS {
                let v = img.get(y, x, c) as f64;
                if x + 1 < w {
                    tv += (img.get(y, x + 1, c) as f64 - v).abs();
                }
                if y + 1 < h {
                    tv += (img.get(y + 1, x, c) as f64 - v).abs();
                }
            }
        }
    }
    tv
}
