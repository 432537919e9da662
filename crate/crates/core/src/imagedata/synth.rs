//! Procedural images for tests and toy benchmarks: natural-looking scenes
//! and a bright-streak rain overlay.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{gaussian_blur, Dataset, Image, LabeledSample, PairedSample, DEFAULT_BLUR_RADIUS};

/// Dead-leaves scene: opaque disks with power-law radii stacked front to
/// back, each with a slight colour gradient. The scale-invariant edge
/// statistics resemble natural photographs.
pub fn dead_leaves<R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R) -> Image {
    let mut covered = vec![false; height * width];
    let mut pixels = vec![[0.0f32; 3]; height * width];
    let mut remaining = height * width;
    let r_min = 2.0f64;
    let r_max = (height.max(width) as f64 / 3.0).max(r_min + 1.0);
    let mut leaves = 0;
    while remaining > 0 && leaves < 4000 {
        leaves += 1;
        // Radius density proportional to r^-3 on [r_min, r_max].
        let u: f64 = rng.random();
        let inv = 1.0 / (r_min * r_min) - u * (1.0 / (r_min * r_min) - 1.0 / (r_max * r_max));
        let radius = 1.0 / inv.sqrt();
        let cy = rng.random_range(-radius..height as f64 + radius);
        let cx = rng.random_range(-radius..width as f64 + radius);
        let base: [f32; 3] = [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)];
        let gy = rng.random_range(-0.15..0.15f32) / radius as f32;
        let gx = rng.random_range(-0.15..0.15f32) / radius as f32;
        let y0 = (cy - radius).floor().max(0.0) as usize;
        let y1 = ((cy + radius).ceil() as isize).clamp(0, height as isize) as usize;
        let x0 = (cx - radius).floor().max(0.0) as usize;
        let x1 = ((cx + radius).ceil() as isize).clamp(0, width as isize) as usize;
        for y in y0..y1 {
            for x in x0..x1 {
                let dy = y as f64 + 0.5 - cy;
                let dx = x as f64 + 0.5 - cx;
                if dy * dy + dx * dx > radius * radius {
                    continue;
                }
                let i = y * width + x;
                if covered[i] {
                    continue;
                }
                covered[i] = true;
                remaining -= 1;
                let shade = gy * dy as f32 + gx * dx as f32;
                pixels[i] = [base[0] + shade, base[1] + shade, base[2] + shade];
            }
        }
    }
    Image::from_fn(height, width, |y, x, c| pixels[y * width + x][c])
}

/// Smooth scene: a colour gradient plus a handful of soft Gaussian blobs.
/// Content varies on a scale of several pixels, so a restoration model can
/// fit it closely.
pub fn smooth_scene<R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R) -> Image {
    let base: [f32; 3] = [rng.random_range(0.2..0.6), rng.random_range(0.2..0.6), rng.random_range(0.2..0.6)];
    let grad: [[f32; 2]; 3] = std::array::from_fn(|_| [rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)]);
    let blobs: Vec<(f32, f32, f32, [f32; 3])> = (0..6)
        .map(|_| {
            (
                rng.random_range(0.0..height as f32),
                rng.random_range(0.0..width as f32),
                rng.random_range(0.08..0.25) * height.min(width) as f32,
                [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)],
            )
        })
        .collect();
    Image::from_fn(height, width, |y, x, c| {
        let fy = y as f32 / height as f32;
        let fx = x as f32 / width as f32;
        let mut v = base[c] + grad[c][0] * fy + grad[c][1] * fx;
        for (by, bx, s, amp) in &blobs {
            let d2 = (y as f32 - by).powi(2) + (x as f32 - bx).powi(2);
            v += amp[c] * (-d2 / (2.0 * s * s)).exp();
        }
        v.clamp(0.02, 0.98)
    })
}

/// Overlays `count` thin bright streaks, near-vertical with a shared slant,
/// alpha-blended toward white.
pub fn add_rain_streaks<R: Rng + ?Sized>(img: &Image, count: usize, rng: &mut R) -> Image {
    let (h, w) = (img.height(), img.width());
    let mut out = img.data().to_vec();
    let slant: f32 = rng.random_range(-0.35..0.35);
    for _ in 0..count {
        let length = rng.random_range(0.25..0.6) * h as f32;
        let y0 = rng.random_range(-0.3 * h as f32..h as f32);
        let x0 = rng.random_range(0.0..w as f32);
        let alpha: f32 = rng.random_range(0.55..0.9);
        let steps = (length.ceil() as usize).max(1);
        for s in 0..steps {
            let y = y0 + s as f32;
            let x = x0 + slant * s as f32;
            if y < 0.0 || x < 0.0 {
                continue;
            }
            let (yi, xi) = (y as usize, x as usize);
            if yi >= h || xi >= w {
                continue;
            }
            let i = (yi * w + xi) * Image::CHANNELS;
            for c in 0..Image::CHANNELS {
                out[i + c] = out[i + c] * (1.0 - alpha) + alpha;
            }
        }
    }
    Image::from_vec_clamped(h, w, out).expect("dimensions unchanged")
}

/// Streak count used by the toy datasets.
pub const TOY_STREAKS: usize = 12;

fn toy_ids(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i:04}")).collect()
}

/// `n` smooth scenes of `size x size`, deterministic in `seed`.
pub fn toy_scenes(n: usize, size: usize, seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| smooth_scene(size, size, &mut rng)).collect()
}

/// Streaked copies of `scenes`, one streak pattern per image.
pub fn toy_rainy(scenes: &[Image], seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    scenes.iter().map(|s| add_rain_streaks(s, TOY_STREAKS, &mut rng)).collect()
}

/// Recognition set: every scene once rain-free and once with streaks.
pub fn toy_recognition(scenes: &[Image], seed: u64) -> Dataset<LabeledSample> {
    let rainy = toy_rainy(scenes, seed);
    let mut ids = Vec::with_capacity(2 * scenes.len());
    let mut samples = Vec::with_capacity(2 * scenes.len());
    for (i, (clear, wet)) in scenes.iter().zip(rainy).enumerate() {
        ids.push(format!("clear{i:04}"));
        samples.push(LabeledSample::new(clear.clone(), LabeledSample::RAIN_FREE).expect("valid label"));
        ids.push(format!("rainy{i:04}"));
        samples.push(LabeledSample::new(wet, LabeledSample::RAINY).expect("valid label"));
    }
    Dataset::new(ids, samples)
}

/// (blurred, clear) pairs.
pub fn toy_blur_pairs(scenes: &[Image], sigma: f64) -> Dataset<PairedSample> {
    let samples = scenes
        .iter()
        .map(|s| {
            let blurred = gaussian_blur(s, sigma, DEFAULT_BLUR_RADIUS).expect("positive sigma");
            PairedSample::new(blurred, s.clone()).expect("same size")
        })
        .collect();
    Dataset::new(toy_ids("blur", scenes.len()), samples)
}

/// (rainy, clear) pairs.
pub fn toy_rain_pairs(scenes: &[Image], seed: u64) -> Dataset<PairedSample> {
    let samples = scenes
        .iter()
        .zip(toy_rainy(scenes, seed))
        .map(|(s, r)| PairedSample::new(r, s.clone()).expect("same size"))
        .collect();
    Dataset::new(toy_ids("pair", scenes.len()), samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn generators_are_deterministic_and_in_range() {
        let a = dead_leaves(40, 50, &mut ChaCha8Rng::seed_from_u64(1));
        let b = dead_leaves(40, 50, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        let s = smooth_scene(32, 32, &mut ChaCha8Rng::seed_from_u64(2));
        assert!(s.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn streaks_only_brighten() {
        let clean = smooth_scene(32, 32, &mut ChaCha8Rng::seed_from_u64(4));
        let rainy = add_rain_streaks(&clean, 12, &mut ChaCha8Rng::seed_from_u64(5));
        assert!(clean.data().iter().zip(rainy.data()).all(|(c, r)| r >= c));
        assert!(clean != rainy);
    }
}
