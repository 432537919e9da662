use rand::Rng;

use super::{Image, ImageDataError, PairedSample, Result};

/// Draws a uniformly distributed `(top, left)` offset for a `size x size`
/// window. Both crop functions consume the random source identically.
pub fn draw_offset<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    size: usize,
    rng: &mut R,
) -> Result<(usize, usize)> {
    if size == 0 {
        return Err(ImageDataError::Precondition("crop size must be positive".into()));
    }
    if size > height || size > width {
        return Err(ImageDataError::Precondition(format!(
            "crop size {size} exceeds image dimensions {height}x{width}"
        )));
    }
    let top = rng.random_range(0..=height - size);
    let left = rng.random_range(0..=width - size);
    Ok((top, left))
}

pub fn random_crop<R: Rng + ?Sized>(img: &Image, size: usize, rng: &mut R) -> Result<Image> {
    let (top, left) = draw_offset(img.height(), img.width(), size, rng)?;
    img.crop(top, left, size, size)
}

/// Crops input and target at the same offset.
pub fn paired_crop<R: Rng + ?Sized>(
    pair: &PairedSample,
    size: usize,
    rng: &mut R,
) -> Result<PairedSample> {
    let (top, left) = draw_offset(pair.input().height(), pair.input().width(), size, rng)?;
    PairedSample::new(
        pair.input().crop(top, left, size, size)?,
        pair.target().crop(top, left, size, size)?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |y, x, c| ((y * 31 + x * 7 + c) % 256) as f32 / 255.0)
    }

    #[test]
    fn crop_of_exact_size_is_identity() {
        let img = ramp(16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(random_crop(&img, 16, &mut rng).unwrap(), img);
    }

    #[test]
    fn crop_is_deterministic_per_seed() {
        let img = ramp(512, 512);
        let a = random_crop(&img, 256, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = random_crop(&img, 256, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn oversize_crop_is_rejected() {
        let img = ramp(10, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            random_crop(&img, 11, &mut rng),
            Err(ImageDataError::Precondition(_))
        ));
    }

    #[test]
    fn offsets_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut counts = [[0usize; 3]; 3];
        let draws = 10_000;
        for _ in 0..draws {
            let (t, l) = draw_offset(258, 258, 256, &mut rng).unwrap();
            counts[t][l] += 1;
        }
        let expected = draws as f64 / 9.0;
        let mut chi2 = 0.0;
        for row in counts {
            for c in row {
                let freq = c as f64 / draws as f64;
                assert!((freq - 1.0 / 9.0).abs() <= 0.02, "frequency {freq}");
                chi2 += (c as f64 - expected).powi(2) / expected;
            }
        }
        // 8 degrees of freedom, 0.1% critical value.
        assert!(chi2 < 26.12, "chi-square {chi2}");
    }

    #[test]
    fn paired_crop_matches_random_crop_offset() {
        let a = ramp(40, 30);
        let b = a.map(|v| 1.0 - v);
        let pair = PairedSample::new(a.clone(), b).unwrap();
        let cropped = paired_crop(&pair, 12, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let single = random_crop(&a, 12, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(cropped.input(), &single);
        for (x, y) in cropped.input().data().iter().zip(cropped.target().data()) {
            assert_eq!(*y, 1.0 - *x);
        }
    }

    #[test]
    fn paired_crop_of_identical_pair_stays_identical() {
        let a = ramp(20, 20);
        let pair = PairedSample::new(a.clone(), a).unwrap();
        let c = paired_crop(&pair, 8, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(c.input(), c.target());
    }

    proptest! {
        #[test]
        fn paired_crop_preserves_pointwise_relation(
            h in 4usize..24, w in 4usize..24, seed in any::<u64>(), frac in 0.1f64..1.0
        ) {
            let size = ((h.min(w) as f64 * frac).ceil() as usize).max(1);
            let input = ramp(h, w);
            let f = |v: f32| (v * v * 0.5 + 0.25).min(1.0);
            let pair = PairedSample::new(input.clone(), input.map(f)).unwrap();
            let c = paired_crop(&pair, size, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            for (x, y) in c.input().data().iter().zip(c.target().data()) {
                prop_assert_eq!(*y, f(*x));
            }
        }
    }
}
