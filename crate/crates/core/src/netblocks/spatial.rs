use super::layers::{sigmoid, Conv2d, Layer};
use super::params::{Gradients, Initializer, ParamStore};
use super::tensor::FeatureMap;
use super::Result;
use crate::real::Real;

/// Spatial gating: a 7x7 convolution over the per-location channel max and
/// channel mean yields a sigmoid mask that scales every channel.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub conv: Conv2d,
}

pub struct SpatialAttentionCache<T> {
    input: FeatureMap<T>,
    argmax: Vec<usize>,
    conv_cache: FeatureMap<T>,
    mask: Vec<T>,
}

impl SpatialAttention {
    pub const KERNEL: usize = 7;

    pub fn build<T: Real>(store: &mut ParamStore<T>, init: &mut Initializer, name: &str) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::build(store, init, &format!("{name}.conv"), Self::KERNEL, 1, 2, 1)?,
        })
    }

    pub fn num_params() -> usize {
        Conv2d::num_params(Self::KERNEL, 2, 1)
    }

    /// Attention mask in `(0, 1)`, one value per spatial location.
    pub fn mask<T: Real>(&self, params: &ParamStore<T>, f: &FeatureMap<T>) -> FeatureMap<T> {
        let (pooled, _) = pool_channels(f);
        let (logits, _) = self.conv.forward(params, &pooled);
        logits.map(sigmoid)
    }
}

/// `[max_c f, mean_c f]` per location, and the argmax channel for backward.
fn pool_channels<T: Real>(f: &FeatureMap<T>) -> (FeatureMap<T>, Vec<usize>) {
    let c = f.channels();
    let mut data = Vec::with_capacity(f.tokens() * 2);
    let mut argmax = Vec::with_capacity(f.tokens());
    for tok in f.data().chunks_exact(c) {
        let (mut best, mut best_i) = (tok[0], 0);
        for (i, &v) in tok.iter().enumerate().skip(1) {
            if v > best {
                best = v;
                best_i = i;
            }
        }
        data.push(best);
        data.push(tok.iter().copied().sum::<T>() / T::c(c as f64));
        argmax.push(best_i);
    }
    (FeatureMap::new(f.height(), f.width(), 2, data), argmax)
}

impl<T: Real> Layer<T> for SpatialAttention {
    type Cache = SpatialAttentionCache<T>;

    fn forward(&self, params: &ParamStore<T>, f: &FeatureMap<T>) -> (FeatureMap<T>, Self::Cache) {
        let c = f.channels();
        let (pooled, argmax) = pool_channels(f);
        let (logits, conv_cache) = self.conv.forward(params, &pooled);
        let mask: Vec<T> = logits.data().iter().map(|&v| sigmoid(v)).collect();
        let mut out = f.data().to_vec();
        for (tok, &m) in out.chunks_exact_mut(c).zip(&mask) {
            tok.iter_mut().for_each(|v| *v = *v * m);
        }
        (
            FeatureMap::new(f.height(), f.width(), c, out),
            SpatialAttentionCache {
                input: f.clone(),
                argmax,
                conv_cache,
                mask,
            },
        )
    }

    fn backward(&self, params: &ParamStore<T>, cache: &Self::Cache, dy: &FeatureMap<T>, grads: &mut Gradients<T>) -> FeatureMap<T> {
        let f = &cache.input;
        let c = f.channels();
        let mut dx = Vec::with_capacity(f.data().len());
        let mut dlogit = Vec::with_capacity(f.tokens());
        for ((tok, g), &m) in f.data().chunks_exact(c).zip(dy.data().chunks_exact(c)).zip(&cache.mask) {
            let mut dm = T::zero();
            for (&v, &gv) in tok.iter().zip(g) {
                dx.push(gv * m);
                dm = dm + gv * v;
            }
            dlogit.push(dm * m * (T::one() - m));
        }
        let dlogit = FeatureMap::new(f.height(), f.width(), 1, dlogit);
        let dpooled = self.conv.backward(params, &cache.conv_cache, &dlogit, grads);
        let inv_c = T::one() / T::c(c as f64);
        for (t, (dp, &am)) in dpooled.data().chunks_exact(2).zip(&cache.argmax).enumerate() {
            let tok = &mut dx[t * c..(t + 1) * c];
            tok[am] = tok[am] + dp[0];
            tok.iter_mut().for_each(|v| *v = *v + dp[1] * inv_c);
        }
        FeatureMap::new(f.height(), f.width(), c, dx)
    }
}
