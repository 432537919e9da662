use super::attention::SelfAttention;
use super::layers::{Conv2d, Gelu, Layer, LayerNorm, Linear};
use super::params::{Gradients, Initializer, ParamId, ParamStore};
use super::tensor::FeatureMap;
use super::Result;
use crate::real::Real;

/// Transformer block that fuses a global self-attention branch and a local
/// convolutional branch with learnable scalar weights:
///
/// ```text
/// u   = f + alpha * attn(norm1(f)) + beta * local(norm1(f))
/// out = u + ffn(norm2(u))
/// ```
///
/// `local` is conv3x3 -> GELU -> conv3x3 and `ffn` is a 4x expansion MLP.
#[derive(Clone, Debug)]
pub struct AglfBlock {
    pub norm1: LayerNorm,
    pub attn: SelfAttention,
    pub local1: Conv2d,
    pub local2: Conv2d,
    pub alpha: ParamId,
    pub beta: ParamId,
    pub norm2: LayerNorm,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub channels: usize,
}

pub struct AglfCache<T: Real> {
    norm1: <LayerNorm as Layer<T>>::Cache,
    attn: <SelfAttention as Layer<T>>::Cache,
    global: FeatureMap<T>,
    local1: FeatureMap<T>,
    local_act: FeatureMap<T>,
    local2: FeatureMap<T>,
    local: FeatureMap<T>,
    norm2: <LayerNorm as Layer<T>>::Cache,
    ffn1: FeatureMap<T>,
    ffn_act: FeatureMap<T>,
    ffn2: FeatureMap<T>,
}

impl AglfBlock {
    pub const FFN_EXPANSION: usize = 4;

    pub fn build<T: Real>(store: &mut ParamStore<T>, init: &mut Initializer, name: &str, channels: usize) -> Result<Self> {
        let hidden = channels * Self::FFN_EXPANSION;
        Ok(Self {
            norm1: LayerNorm::build(store, &format!("{name}.norm1"), channels)?,
            attn: SelfAttention::build(store, init, &format!("{name}.attn"), channels)?,
            local1: Conv2d::build(store, init, &format!("{name}.local1"), 3, 1, channels, channels)?,
            local2: Conv2d::build(store, init, &format!("{name}.local2"), 3, 1, channels, channels)?,
            alpha: store.add(format!("{name}.alpha"), vec![1], vec![T::one()])?,
            beta: store.add(format!("{name}.beta"), vec![1], vec![T::zero()])?,
            norm2: LayerNorm::build(store, &format!("{name}.norm2"), channels)?,
            ffn1: Linear::build(store, init, &format!("{name}.ffn1"), channels, hidden)?,
            ffn2: Linear::build(store, init, &format!("{name}.ffn2"), hidden, channels)?,
            channels,
        })
    }

    pub fn num_params(c: usize) -> usize {
        let hidden = c * Self::FFN_EXPANSION;
        2 * c
            + SelfAttention::num_params(c)
            + 2 * Conv2d::num_params(3, c, c)
            + 2
            + 2 * c
            + Linear::num_params(c, hidden)
            + Linear::num_params(hidden, c)
    }
}

impl<T: Real> Layer<T> for AglfBlock {
    type Cache = AglfCache<T>;

    fn forward(&self, params: &ParamStore<T>, f: &FeatureMap<T>) -> (FeatureMap<T>, Self::Cache) {
        let alpha = params.value(self.alpha)[0];
        let beta = params.value(self.beta)[0];
        let (n1, norm1) = self.norm1.forward(params, f);
        let (global, attn) = self.attn.forward(params, &n1);
        let (l1, _) = self.local1.forward(params, &n1);
        let (la, _) = Gelu.forward(params, &l1);
        let (local, _) = self.local2.forward(params, &la);

        let mut u = f.clone();
        for ((o, &g), &l) in u.data_mut().iter_mut().zip(global.data()).zip(local.data()) {
            *o = *o + alpha * g + beta * l;
        }
        let (n2, norm2) = self.norm2.forward(params, &u);
        let (h1, _) = self.ffn1.forward(params, &n2);
        let (ha, _) = Gelu.forward(params, &h1);
        let (h2, _) = self.ffn2.forward(params, &ha);
        let mut out = u.clone();
        out.add_assign(&h2);
        (
            out,
            AglfCache {
                norm1,
                attn,
                global,
                local1: n1,
                local_act: l1,
                local2: la,
                local,
                norm2,
                ffn1: n2,
                ffn_act: h1,
                ffn2: ha,
            },
        )
    }

    fn backward(&self, params: &ParamStore<T>, c: &Self::Cache, dout: &FeatureMap<T>, grads: &mut Gradients<T>) -> FeatureMap<T> {
        let alpha = params.value(self.alpha)[0];
        let beta = params.value(self.beta)[0];
        // feed-forward sublayer
        let dha = self.ffn2.backward(params, &c.ffn2, dout, grads);
        let dh1 = Gelu.backward(params, &c.ffn_act, &dha, grads);
        let dn2 = self.ffn1.backward(params, &c.ffn1, &dh1, grads);
        let mut du = self.norm2.backward(params, &c.norm2, &dn2, grads);
        du.add_assign(dout);

        // fusion weights
        if let Some(g) = grads.slot(self.alpha) {
            g[0] = g[0] + du.data().iter().zip(c.global.data()).map(|(&a, &b)| a * b).sum::<T>();
        }
        if let Some(g) = grads.slot(self.beta) {
            g[0] = g[0] + du.data().iter().zip(c.local.data()).map(|(&a, &b)| a * b).sum::<T>();
        }

        let mut dn1 = self.attn.backward(params, &c.attn, &du.scaled(alpha), grads);
        let dla = self.local2.backward(params, &c.local2, &du.scaled(beta), grads);
        let dl1 = Gelu.backward(params, &c.local_act, &dla, grads);
        dn1.add_assign(&self.local1.backward(params, &c.local1, &dl1, grads));

        let mut df = self.norm1.backward(params, &c.norm1, &dn1, grads);
        df.add_assign(&du);
        df
    }
}
