use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use super::{MetricsError, Result};
use crate::imagedata::Image;

pub const DEFAULT_PATCH_SIZE: usize = 96;
pub const MIN_CORPUS: usize = 10;
pub const FEATURES_PER_SCALE: usize = 18;
pub const FEATURE_DIM: usize = 2 * FEATURES_PER_SCALE;

const MSCN_RADIUS: usize = 3;
const MSCN_SIGMA: f64 = 7.0 / 6.0;
const MSCN_C: f64 = 1.0;

/// Pristine-corpus model: mean and covariance of patch features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NiqeModel {
    pub mean: Vec<f64>,
    /// Row-major `feature_dim x feature_dim`.
    pub covariance: Vec<f64>,
    pub patch_size: usize,
    pub feature_dim: usize,
}

impl NiqeModel {
    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.feature_dim, self.feature_dim, &self.covariance)
    }

    pub fn is_consistent(&self) -> bool {
        let d = self.feature_dim;
        if self.mean.len() != d || self.covariance.len() != d * d {
            return false;
        }
        (0..d).all(|i| (0..d).all(|j| (self.covariance[i * d + j] - self.covariance[j * d + i]).abs() <= 1e-9))
    }
}

/// Asymmetric generalized Gaussian parameters. `left_sigma` and
/// `right_sigma` are the root mean squares of each side.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AggdParams {
    pub alpha: f64,
    pub left_sigma: f64,
    pub right_sigma: f64,
    pub mean: f64,
}

fn gamma_ratio(alpha: f64) -> f64 {
    (2.0 * ln_gamma(2.0 / alpha) - ln_gamma(1.0 / alpha) - ln_gamma(3.0 / alpha)).exp()
}

/// Inverts the generalized Gaussian ratio by bisection on a log scale.
/// The ratio increases monotonically in the shape parameter.
fn solve_shape(target: f64) -> Option<f64> {
    if !target.is_finite() {
        return None;
    }
    let (mut lo, mut hi) = (0.05f64, 20.0f64);
    let target = target.clamp(gamma_ratio(lo), gamma_ratio(hi));
    for _ in 0..100 {
        let mid = (lo * hi).sqrt();
        if gamma_ratio(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some((lo * hi).sqrt())
}

/// Moment-matching AGGD fit. Returns `None` for samples without spread on
/// both sides of zero.
pub fn aggd_fit(x: &[f64]) -> Option<AggdParams> {
    let (mut ls, mut ln, mut rs, mut rn) = (0.0, 0usize, 0.0, 0usize);
    let (mut abs_sum, mut sq_sum) = (0.0, 0.0);
    for &v in x {
        if v < 0.0 {
            ls += v * v;
            ln += 1;
        } else if v > 0.0 {
            rs += v * v;
            rn += 1;
        }
        abs_sum += v.abs();
        sq_sum += v * v;
    }
    if ln == 0 || rn == 0 || sq_sum == 0.0 {
        return None;
    }
    let n = x.len() as f64;
    let left = (ls / ln as f64).sqrt();
    let right = (rs / rn as f64).sqrt();
    let g = left / right;
    let r = (abs_sum / n).powi(2) / (sq_sum / n);
    let r_hat = r * (g.powi(3) + 1.0) * (g + 1.0) / (g * g + 1.0).powi(2);
    let alpha = solve_shape(r_hat)?;
    let scale = (ln_gamma(1.0 / alpha) - ln_gamma(3.0 / alpha)).exp().sqrt();
    let mean = (right - left) * (ln_gamma(2.0 / alpha) - ln_gamma(1.0 / alpha)).exp() * scale;
    let p = AggdParams {
        alpha,
        left_sigma: left,
        right_sigma: right,
        mean,
    };
    [p.alpha, p.left_sigma, p.right_sigma, p.mean].iter().all(|v| v.is_finite()).then_some(p)
}

/// Symmetric generalized Gaussian fit: (shape, variance).
pub fn ggd_fit(x: &[f64]) -> Option<(f64, f64)> {
    let n = x.len() as f64;
    let sq = x.iter().map(|v| v * v).sum::<f64>() / n;
    if sq == 0.0 || !sq.is_finite() {
        return None;
    }
    let abs = x.iter().map(|v| v.abs()).sum::<f64>() / n;
    Some((solve_shape(abs * abs / sq)?, sq))
}

/// Grayscale plane on a 0..255 scale.
struct Plane {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Plane {
    fn from_image(img: &Image) -> Self {
        Self {
            h: img.height(),
            w: img.width(),
            v: img.luma().into_iter().map(|l| l * 255.0).collect(),
        }
    }

    fn at(&self, y: usize, x: usize) -> f64 {
        self.v[y * self.w + x]
    }

    fn downsample2(&self) -> Self {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut v = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let s = self.at(2 * y, 2 * x) + self.at(2 * y, 2 * x + 1) + self.at(2 * y + 1, 2 * x) + self.at(2 * y + 1, 2 * x + 1);
                v.push(s / 4.0);
            }
        }
        Self { h, w, v }
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

fn blur(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * src[y * w + reflect(x as isize + i as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[reflect(y as isize + i as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Mean-subtracted contrast-normalized coefficients and the local
/// standard deviation map.
fn mscn(p: &Plane) -> (Vec<f64>, Vec<f64>) {
    let raw: Vec<f64> = (0..=2 * MSCN_RADIUS)
        .map(|i| {
            let d = i as f64 - MSCN_RADIUS as f64;
            (-d * d / (2.0 * MSCN_SIGMA * MSCN_SIGMA)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    let k: Vec<f64> = raw.iter().map(|v| v / s).collect();
    let mu = blur(&p.v, p.h, p.w, &k);
    let sq: Vec<f64> = p.v.iter().map(|v| v * v).collect();
    let mu_sq = blur(&sq, p.h, p.w, &k);
    let sigma: Vec<f64> = mu_sq.iter().zip(&mu).map(|(a, m)| (a - m * m).abs().sqrt()).collect();
    let coeffs = p.v.iter().zip(&mu).zip(&sigma).map(|((v, m), s)| (v - m) / (s + MSCN_C)).collect();
    (coeffs, sigma)
}

fn patch_features(coeffs: &[f64], w: usize, top: usize, left: usize, size: usize) -> Option<[f64; FEATURES_PER_SCALE]> {
    let at = |y: usize, x: usize| coeffs[(top + y) * w + left + x];
    let mut values = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            values.push(at(y, x));
        }
    }
    let mut f = [0.0; FEATURES_PER_SCALE];
    let (shape, var) = ggd_fit(&values)?;
    f[0] = shape;
    f[1] = var;
    let shifts: [(usize, isize); 4] = [(0, 1), (1, 0), (1, 1), (1, -1)];
    for (o, &(dy, dx)) in shifts.iter().enumerate() {
        let mut prods = Vec::with_capacity(size * size);
        for y in 0..size - dy {
            for x in 0..size {
                let xx = x as isize + dx;
                if xx < 0 || xx >= size as isize {
                    continue;
                }
                prods.push(at(y, x) * at(y + dy, xx as usize));
            }
        }
        let p = aggd_fit(&prods)?;
        let base = 2 + 4 * o;
        f[base] = p.alpha;
        f[base + 1] = p.mean;
        f[base + 2] = p.left_sigma * p.left_sigma;
        f[base + 3] = p.right_sigma * p.right_sigma;
    }
    Some(f)
}

/// One patch: its sharpness and its two-scale feature vector (`None` when
/// the patch statistics are degenerate).
struct PatchStats {
    sharpness: f64,
    features: Option<Vec<f64>>,
}

fn image_patches(img: &Image, patch: usize) -> Vec<PatchStats> {
    let p1 = Plane::from_image(img);
    let p2 = p1.downsample2();
    let (c1, s1) = mscn(&p1);
    let (c2, _) = mscn(&p2);
    let half = patch / 2;
    let mut out = Vec::new();
    for py in 0..p1.h / patch {
        for px in 0..p1.w / patch {
            let (top, left) = (py * patch, px * patch);
            let mut sharp = 0.0;
            for y in 0..patch {
                for x in 0..patch {
                    sharp += s1[(top + y) * p1.w + left + x];
                }
            }
            let features = patch_features(&c1, p1.w, top, left, patch).and_then(|a| {
                let b = patch_features(&c2, p2.w, top / 2, left / 2, half)?;
                let mut v = a.to_vec();
                v.extend_from_slice(&b);
                v.iter().all(|x| x.is_finite()).then_some(v)
            });
            out.push(PatchStats {
                sharpness: sharp / (patch * patch) as f64,
                features,
            });
        }
    }
    out
}

fn mean_cov(rows: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let d = rows[0].len();
    let n = rows.len();
    let mut mean = DVector::zeros(d);
    for r in rows {
        mean += DVector::from_column_slice(r);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for r in rows {
        let c = DVector::from_column_slice(r) - &mean;
        cov += &c * c.transpose();
    }
    cov /= (n.max(2) - 1) as f64;
    let sym = (&cov + cov.transpose()) * 0.5;
    (mean, sym)
}

/// Fits the pristine model on every corpus image and its mirror image.
/// Patches whose local-deviation sharpness lies above the median over the
/// whole corpus are kept.
pub fn niqe_fit(corpus: &[Image], patch_size: usize) -> Result<NiqeModel> {
    if patch_size < 8 || patch_size % 2 != 0 {
        return Err(MetricsError::Config(format!("patch size {patch_size} must be even and at least 8")));
    }
    if corpus.len() < MIN_CORPUS {
        return Err(MetricsError::Config(format!(
            "pristine corpus has {} images, at least {MIN_CORPUS} are required",
            corpus.len()
        )));
    }
    if let Some((i, img)) = corpus
        .iter()
        .enumerate()
        .find(|(_, img)| img.height() < 2 * patch_size || img.width() < 2 * patch_size)
    {
        return Err(MetricsError::Config(format!(
            "pristine image {i} is {}x{}, each side must be at least {}",
            img.height(),
            img.width(),
            2 * patch_size
        )));
    }
    let patches: Vec<PatchStats> = corpus
        .iter()
        .flat_map(|img| {
            let mut p = image_patches(img, patch_size);
            p.extend(image_patches(&img.flip_horizontal(), patch_size));
            p
        })
        .collect();
    let mut sharp: Vec<f64> = patches.iter().map(|p| p.sharpness).collect();
    sharp.sort_by(f64::total_cmp);
    let median = sharp[sharp.len() / 2];
    let rows: Vec<Vec<f64>> = patches
        .into_iter()
        .filter(|p| p.sharpness > median)
        .filter_map(|p| p.features)
        .collect();
    if rows.len() < 2 {
        return Err(MetricsError::Config(format!(
            "only {} usable sharp patches in the pristine corpus",
            rows.len()
        )));
    }
    let (mean, cov) = mean_cov(&rows);
    Ok(NiqeModel {
        mean: mean.iter().copied().collect(),
        covariance: cov.transpose().iter().copied().collect(),
        patch_size,
        feature_dim: FEATURE_DIM,
    })
}

/// Distance between the pristine model and a model fitted on all patches
/// of `img`. Higher means further from pristine statistics.
pub fn niqe_score(img: &Image, model: &NiqeModel) -> Result<f64> {
    if !model.is_consistent() || model.feature_dim != FEATURE_DIM {
        return Err(MetricsError::Contract("inconsistent NIQE model".into()));
    }
    let p = model.patch_size;
    let count = (img.height() / p) * (img.width() / p);
    if count < 4 {
        return Err(MetricsError::Contract(format!(
            "image {}x{} holds {count} patches of size {p}, at least 4 are required",
            img.height(),
            img.width()
        )));
    }
    let patches = image_patches(img, p);
    let total = patches.len();
    let rows: Vec<Vec<f64>> = patches.into_iter().filter_map(|p| p.features).collect();
    if rows.len() < 2 {
        return Err(MetricsError::Scoring(format!(
            "{} of {total} patches have degenerate statistics (flat or one-sided coefficients)",
            total - rows.len()
        )));
    }
    let (mean, cov) = mean_cov(&rows);
    let pristine_mean = DVector::from_column_slice(&model.mean);
    let avg = (model.covariance_matrix() + cov) * 0.5;
    let pinv = avg
        .pseudo_inverse(1e-12)
        .map_err(|e| MetricsError::Scoring(format!("pseudo-inverse failed: {e}")))?;
    let d = pristine_mean - mean;
    let q = (d.transpose() * pinv * &d)[(0, 0)];
    Ok(q.max(0.0).sqrt())
}
