use super::layers::{Layer, Linear};
use super::params::{Gradients, Initializer, ParamStore};
use super::tensor::FeatureMap;
use super::Result;
use crate::real::Real;

/// Largest head count in `1..=4` that divides `channels`.
pub fn head_count(channels: usize) -> usize {
    (1..=4).rev().find(|h| channels % h == 0).unwrap_or(1)
}

/// `d x n` transpose of an `n x d` row-major matrix.
fn transpose<T: Real>(m: &[T], n: usize, d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * d];
    for i in 0..n {
        for e in 0..d {
            out[e * n + i] = m[i * d + e];
        }
    }
    out
}

/// Dot product with eight independent accumulators so the loop vectorizes.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ac, ar) = a.split_at(a.len() / 8 * 8);
    let (bc, br) = b.split_at(ac.len());
    for (x, y) in ac.chunks_exact(8).zip(bc.chunks_exact(8)) {
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut total = acc.iter().copied().sum::<T>();
    for (&x, &y) in ar.iter().zip(br) {
        total = total + x * y;
    }
    total
}

/// `y += a x`.
#[inline]
fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o = *o + a * v;
    }
}

/// Scaled dot-product attention for one head: `softmax(q k^T / sqrt(d)) v`
/// on `n x d` row-major matrices. Returns the output and the probability
/// matrix.
pub fn attention_head<T: Real>(q: &[T], k: &[T], v: &[T], n: usize, d: usize) -> (Vec<T>, Vec<T>) {
    let scale = T::one() / T::c(d as f64).sqrt();
    let kt = transpose(k, n, d);
    let vt = transpose(v, n, d);
    let mut probs = vec![T::zero(); n * n];
    let mut out = vec![T::zero(); n * d];
    for (i, row) in probs.chunks_exact_mut(n).enumerate() {
        for e in 0..d {
            axpy(row, q[i * d + e] * scale, &kt[e * n..(e + 1) * n]);
        }
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        let inv = T::one() / total;
        row.iter_mut().for_each(|v| *v = *v * inv);
        for e in 0..d {
            out[i * d + e] = dot(row, &vt[e * n..(e + 1) * n]);
        }
    }
    (out, probs)
}

/// Multi-head self-attention over all spatial tokens of a feature map.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub channels: usize,
}

pub struct SelfAttentionCache<T> {
    input: FeatureMap<T>,
    q: Vec<Vec<T>>,
    k: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    probs: Vec<Vec<T>>,
    merged: FeatureMap<T>,
}

impl SelfAttention {
    pub fn build<T: Real>(store: &mut ParamStore<T>, init: &mut Initializer, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            query: Linear::build(store, init, &format!("{name}.query"), channels, channels)?,
            key: Linear::build(store, init, &format!("{name}.key"), channels, channels)?,
            value: Linear::build(store, init, &format!("{name}.value"), channels, channels)?,
            output: Linear::build(store, init, &format!("{name}.output"), channels, channels)?,
            heads: head_count(channels),
            channels,
        })
    }

    pub fn num_params(channels: usize) -> usize {
        4 * Linear::num_params(channels, channels)
    }

    fn split_heads<T: Real>(&self, m: &FeatureMap<T>) -> Vec<Vec<T>> {
        let d = self.channels / self.heads;
        (0..self.heads)
            .map(|h| {
                m.data()
                    .chunks_exact(self.channels)
                    .flat_map(|tok| tok[h * d..(h + 1) * d].iter().copied())
                    .collect()
            })
            .collect()
    }

    fn merge_heads<T: Real>(&self, parts: &[Vec<T>], like: &FeatureMap<T>) -> FeatureMap<T> {
        let d = self.channels / self.heads;
        let n = like.tokens();
        let mut data = vec![T::zero(); n * self.channels];
        for (h, part) in parts.iter().enumerate() {
            for t in 0..n {
                data[t * self.channels + h * d..t * self.channels + (h + 1) * d]
                    .copy_from_slice(&part[t * d..(t + 1) * d]);
            }
        }
        FeatureMap::new(like.height(), like.width(), self.channels, data)
    }
}

impl<T: Real> Layer<T> for SelfAttention {
    type Cache = SelfAttentionCache<T>;

    fn forward(&self, params: &ParamStore<T>, x: &FeatureMap<T>) -> (FeatureMap<T>, Self::Cache) {
        let n = x.tokens();
        let d = self.channels / self.heads;
        let q = self.split_heads(&self.query.infer(params, x));
        let k = self.split_heads(&self.key.infer(params, x));
        let v = self.split_heads(&self.value.infer(params, x));
        let mut outs = Vec::with_capacity(self.heads);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (o, p) = attention_head(&q[h], &k[h], &v[h], n, d);
            outs.push(o);
            probs.push(p);
        }
        let merged = self.merge_heads(&outs, x);
        let y = self.output.infer(params, &merged);
        (
            y,
            SelfAttentionCache {
                input: x.clone(),
                q,
                k,
                v,
                probs,
                merged,
            },
        )
    }

    fn backward(&self, params: &ParamStore<T>, cache: &Self::Cache, dy: &FeatureMap<T>, grads: &mut Gradients<T>) -> FeatureMap<T> {
        let n = cache.input.tokens();
        let d = self.channels / self.heads;
        let scale = T::one() / T::c(d as f64).sqrt();
        let dmerged = self.output.backward(params, &cache.merged, dy, grads);
        let dheads = self.split_heads(&dmerged);
        let mut dq = Vec::with_capacity(self.heads);
        let mut dk = Vec::with_capacity(self.heads);
        let mut dv = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let p = &cache.probs[h];
            let go = &dheads[h];
            let vt = transpose(&cache.v[h], n, d);
            let kt = transpose(&cache.k[h], n, d);
            let q = &cache.q[h];
            let mut dvt = vec![T::zero(); d * n];
            let mut dkt = vec![T::zero(); d * n];
            let mut dqh = vec![T::zero(); n * d];
            let mut ds = vec![T::zero(); n];
            for i in 0..n {
                let prow = &p[i * n..(i + 1) * n];
                // dP row = dO_i V^T, dV^T += dO_i^T P_i
                ds.iter_mut().for_each(|v| *v = T::zero());
                for e in 0..d {
                    let g = go[i * d + e];
                    axpy(&mut ds, g, &vt[e * n..(e + 1) * n]);
                    axpy(&mut dvt[e * n..(e + 1) * n], g, prow);
                }
                // softmax backward with the 1/sqrt(d) scale folded in
                let rowdot = dot(&ds, prow);
                for (dv, &pv) in ds.iter_mut().zip(prow) {
                    *dv = pv * (*dv - rowdot) * scale;
                }
                for e in 0..d {
                    dqh[i * d + e] = dot(&ds, &kt[e * n..(e + 1) * n]);
                    axpy(&mut dkt[e * n..(e + 1) * n], q[i * d + e], &ds);
                }
            }
            let dvh = transpose(&dvt, d, n);
            let dkh = transpose(&dkt, d, n);
            dq.push(dqh);
            dk.push(dkh);
            dv.push(dvh);
        }
        let x = &cache.input;
        let mut dx = self.query.backward(params, x, &self.merge_heads(&dq, x), grads);
        dx.add_assign(&self.key.backward(params, x, &self.merge_heads(&dk, x), grads));
        dx.add_assign(&self.value.backward(params, x, &self.merge_heads(&dv, x), grads));
        dx
    }
}
