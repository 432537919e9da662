use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{MetricsError, Result};
use crate::imagedata::Image;

pub const MAX_POINTS: usize = 5000;
pub const EXAGGERATION: f64 = 12.0;
pub const EXAGGERATION_ITERS: usize = 250;
pub const MIN_LEARNING_RATE: f64 = 50.0;
pub const INIT_STD: f64 = 1e-4;
pub const FEATURE_SIDE: usize = 32;

/// Result of an exact t-SNE run.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub points: Vec<[f64; 2]>,
    /// KL(P || Q) after each iteration, measured with the true (not
    /// exaggerated) affinities.
    pub objective: Vec<f64>,
}

/// Flattened 32x32 grayscale thumbnail used as the t-SNE representation of
/// an image.
pub fn image_features(img: &Image) -> Vec<f64> {
    img.resize_area(FEATURE_SIDE, FEATURE_SIDE).luma()
}

/// Squared distances rounded to single precision, so that inputs with equal
/// distance matrices (rotations, translations, reorderings of coordinates)
/// yield bitwise identical affinities.
fn squared_distances(x: &[Vec<f64>]) -> Vec<f64> {
    let n = x.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let s = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() as f32 as f64;
            d[i * n + j] = s;
            d[j * n + i] = s;
        }
    }
    d
}

/// Conditional affinities for one row, with the precision found by binary
/// search so that the row entropy equals `ln(perplexity)`.
fn row_affinities(dist: &[f64], i: usize, target_entropy: f64, out: &mut [f64]) {
    let n = dist.len();
    let (mut beta, mut lo, mut hi) = (1.0f64, 0.0f64, f64::INFINITY);
    let min_d = (0..n).filter(|&j| j != i).map(|j| dist[j]).fold(f64::INFINITY, f64::min);
    for _ in 0..200 {
        let mut sum = 0.0;
        let mut weighted = 0.0;
        for j in 0..n {
            if j == i {
                out[j] = 0.0;
                continue;
            }
            let p = (-(dist[j] - min_d) * beta).exp();
            out[j] = p;
            sum += p;
            weighted += (dist[j] - min_d) * p;
        }
        let entropy = sum.ln() + beta * weighted / sum;
        let diff = entropy - target_entropy;
        if diff.abs() < 1e-10 {
            break;
        }
        if diff > 0.0 {
            lo = beta;
            beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = (beta + lo) / 2.0;
        }
    }
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
}

fn joint_affinities(x: &[Vec<f64>], perplexity: f64) -> Vec<f64> {
    let n = x.len();
    let d = squared_distances(x);
    let mut cond = vec![0.0; n * n];
    let target = perplexity.ln();
    for i in 0..n {
        row_affinities(&d[i * n..(i + 1) * n], i, target, &mut cond[i * n..(i + 1) * n]);
    }
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64)).max(1e-12);
            }
        }
    }
    p
}

fn check_features(features: &[Vec<f64>]) -> Result<()> {
    let n = features.len();
    if n > MAX_POINTS {
        return Err(MetricsError::Config(format!("t-SNE supports at most {MAX_POINTS} points, got {n}")));
    }
    if n == 0 {
        return Err(MetricsError::Config("t-SNE needs at least one point".into()));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(MetricsError::Contract("feature vectors differ in length".into()));
    }
    Ok(())
}

/// Exact t-SNE into two dimensions.
///
/// Runs gradient descent with momentum (0.5, then 0.8 once early
/// exaggeration ends, when velocities and gains restart), per-coordinate
/// adaptive gains, and a seeded Gaussian initialization. The step size is
/// `max(n / 48, 50)`. Perplexity must lie in `[5, (n - 1) / 3]`.
pub fn tsne_embed(features: &[Vec<f64>], perplexity: f64, iterations: usize, seed: u64) -> Result<Embedding> {
    check_features(features)?;
    let n = features.len();
    let max_perp = (n as f64 - 1.0) / 3.0;
    if !(perplexity >= 5.0 && perplexity <= max_perp) {
        return Err(MetricsError::Config(format!(
            "perplexity {perplexity} outside [5, {max_perp}] for {n} points"
        )));
    }
    Ok(embed(features, perplexity, iterations, seed))
}

/// Like [`tsne_embed`], but lowers the perplexity to `(n - 1) / 3` (at
/// least 1) for small inputs instead of failing. Returns the perplexity
/// used.
pub fn tsne_embed_clamped(
    features: &[Vec<f64>],
    perplexity: f64,
    iterations: usize,
    seed: u64,
) -> Result<(Embedding, f64)> {
    check_features(features)?;
    if !(perplexity >= 1.0) {
        return Err(MetricsError::Config(format!("perplexity {perplexity} must be at least 1")));
    }
    let n = features.len();
    let used = perplexity.min((n as f64 - 1.0) / 3.0).max(1.0);
    Ok((embed(features, used, iterations, seed), used))
}

fn embed(features: &[Vec<f64>], perplexity: f64, iterations: usize, seed: u64) -> Embedding {
    let n = features.len();
    if n == 1 {
        return Embedding {
            points: vec![[0.0, 0.0]],
            objective: vec![0.0; iterations],
        };
    }
    let p = joint_affinities(features, perplexity);
    let lr = (n as f64 / (4.0 * EXAGGERATION)).max(MIN_LEARNING_RATE);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)]).collect();
    let mut velocity = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut num = vec![0.0; n * n];
    let mut grad = vec![[0.0; 2]; n];
    let mut objective = Vec::with_capacity(iterations);

    for iter in 0..iterations {
        let early = iter < EXAGGERATION_ITERS;
        let exag = if early { EXAGGERATION } else { 1.0 };
        let momentum = if early { 0.5 } else { 0.8 };
        if iter == EXAGGERATION_ITERS {
            velocity.iter_mut().for_each(|v| *v = [0.0; 2]);
            gains.iter_mut().for_each(|g| *g = [1.0; 2]);
        }

        let mut z = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                let q = 1.0 / (1.0 + dx * dx + dy * dy);
                num[i * n + j] = q;
                num[j * n + i] = q;
                z += 2.0 * q;
            }
        }
        let mut kl = 0.0;
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let pij = p[i * n + j];
                let qij = (num[i * n + j] / z).max(1e-12);
                kl += pij * (pij / qij).ln();
                let m = 4.0 * (exag * pij - qij) * num[i * n + j];
                g[0] += m * (y[i][0] - y[j][0]);
                g[1] += m * (y[i][1] - y[j][1]);
            }
            grad[i] = g;
        }
        objective.push(kl);

        for i in 0..n {
            for k in 0..2 {
                let same_sign = (grad[i][k] > 0.0) == (velocity[i][k] > 0.0);
                gains[i][k] = if same_sign { gains[i][k] * 0.8 } else { gains[i][k] + 0.2 };
                gains[i][k] = gains[i][k].max(0.01);
                velocity[i][k] = momentum * velocity[i][k] - lr * gains[i][k] * grad[i][k];
                y[i][k] += velocity[i][k];
            }
        }
        let mut centre = [0.0; 2];
        for pt in &y {
            centre[0] += pt[0];
            centre[1] += pt[1];
        }
        for pt in &mut y {
            pt[0] -= centre[0] / n as f64;
            pt[1] -= centre[1] / n as f64;
        }
    }
    Embedding { points: y, objective }
}

/// Mean silhouette coefficient of `labels` over Euclidean distances.
/// Points in singleton clusters contribute zero.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() || points.is_empty() {
        return Err(MetricsError::Contract("silhouette needs one label per point".into()));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let mut total = 0.0;
    for (i, pi) in points.iter().enumerate() {
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (j, pj) in points.iter().enumerate() {
            if i != j {
                sums[labels[j]] += dist(pi, pj);
                counts[labels[j]] += 1;
            }
        }
        let own = labels[i];
        if counts[own] == 0 {
            continue;
        }
        let a = sums[own] / counts[own] as f64;
        let b = (0..k)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if b.is_finite() {
            total += (b - a) / a.max(b);
        }
    }
    Ok(total / points.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_affinities_reach_the_target_perplexity() {
        let dist: Vec<f64> = (0..40).map(|j| (j as f64 * 0.37).sin().abs() * 5.0).collect();
        let mut out = vec![0.0; 40];
        row_affinities(&dist, 3, 10f64.ln(), &mut out);
        assert_eq!(out[3], 0.0);
        assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let h: f64 = -out.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
        assert!((h.exp() - 10.0).abs() < 1e-6, "perplexity {}", h.exp());
    }

    #[test]
    fn joint_affinities_are_symmetric_and_normalized() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, (i * i % 7) as f64]).collect();
        let p = joint_affinities(&x, 5.0);
        for i in 0..20 {
            for j in 0..20 {
                assert_eq!(p[i * 20 + j], p[j * 20 + i]);
            }
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn silhouette_of_separated_pairs_is_near_one() {
        let pts = vec![vec![0.0], vec![0.1], vec![10.0], vec![10.1]];
        let s = silhouette(&pts, &[0, 0, 1, 1]).unwrap();
        assert!(s > 0.98);
        let swapped = silhouette(&pts, &[0, 1, 0, 1]).unwrap();
        assert!(swapped < 0.0);
    }
}
