use super::params::{Gradients, Initializer, ParamId, ParamStore};
use super::tensor::FeatureMap;
use super::{NetError, Result};
use crate::real::Real;

/// A differentiable block whose weights live in an external [`ParamStore`].
///
/// `forward` is pure; the returned cache carries everything `backward`
/// needs, so concurrent forward passes over one frozen store are safe.
pub trait Layer<T: Real> {
    type Cache;

    fn forward(&self, params: &ParamStore<T>, x: &FeatureMap<T>) -> (FeatureMap<T>, Self::Cache);

    /// Returns the input gradient and adds parameter gradients into `grads`.
    fn backward(
        &self,
        params: &ParamStore<T>,
        cache: &Self::Cache,
        grad_out: &FeatureMap<T>,
        grads: &mut Gradients<T>,
    ) -> FeatureMap<T>;

    fn infer(&self, params: &ParamStore<T>, x: &FeatureMap<T>) -> FeatureMap<T> {
        self.forward(params, x).0
    }
}

/// Records one forward pass so that a later backward can replay it.
pub struct Tape<'a, T: Real, L: Layer<T>> {
    layer: &'a L,
    params: &'a ParamStore<T>,
    cache: Option<L::Cache>,
}

impl<'a, T: Real, L: Layer<T>> Tape<'a, T, L> {
    pub fn new(layer: &'a L, params: &'a ParamStore<T>) -> Self {
        Self {
            layer,
            params,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &FeatureMap<T>) -> FeatureMap<T> {
        let (y, cache) = self.layer.forward(self.params, x);
        self.cache = Some(cache);
        y
    }

    /// Consumes the recorded pass.
    pub fn backward(&mut self, grad_out: &FeatureMap<T>, grads: &mut Gradients<T>) -> Result<FeatureMap<T>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| NetError::State("backward called without a recorded forward pass".into()))?;
        Ok(self.layer.backward(self.params, &cache, grad_out, grads))
    }
}

// ---------------------------------------------------------------------------
// Dense kernels on row-major matrices.

/// `a (m x k) * b (k x n)`.
pub(crate) fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[kk * n..(kk + 1) * n]) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `a (m x k) * b^T` where `b` is `n x k`.
pub(crate) fn matmul_bt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in ar.iter().zip(br) {
                acc = acc + x * y;
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// `out (k x n) += a^T * g` where `a` is `m x k` and `g` is `m x n`.
pub(crate) fn matmul_at_acc<T: Real>(a: &[T], g: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let gr = &g[i * n..(i + 1) * n];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            for (o, &gv) in out[kk * n..(kk + 1) * n].iter_mut().zip(gr) {
                *o = *o + av * gv;
            }
        }
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let k = T::c((2.0 / std::f64::consts::PI).sqrt());
    let inner = k * (x + T::c(GELU_A) * x * x * x);
    T::c(0.5) * x * (T::one() + inner.tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let k = T::c((2.0 / std::f64::consts::PI).sqrt());
    let inner = k * (x + T::c(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = k * (T::one() + T::c(3.0 * GELU_A) * x * x);
    T::c(0.5) * (T::one() + t) + T::c(0.5) * x * (T::one() - t * t) * dinner
}

/// Elementwise GELU.
#[derive(Clone, Copy, Debug, Default)]
pub struct Gelu;

impl<T: Real> Layer<T> for Gelu {
    type Cache = FeatureMap<T>;

    fn forward(&self, _: &ParamStore<T>, x: &FeatureMap<T>) -> (FeatureMap<T>, Self::Cache) {
        (x.map(gelu), x.clone())
    }

    fn backward(&self, _: &ParamStore<T>, x: &FeatureMap<T>, dy: &FeatureMap<T>, _: &mut Gradients<T>) -> FeatureMap<T> {
        let data = x.data().iter().zip(dy.data()).map(|(&x, &g)| g * gelu_grad(x)).collect();
        FeatureMap::new(x.height(), x.width(), x.channels(), data)
    }
}

// ---------------------------------------------------------------------------

/// 2-D convolution with zero padding `kernel / 2`. Weights are stored as
/// `[kernel, kernel, in, out]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    pub fn build<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        kernel: usize,
        stride: usize,
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        let n = kernel * kernel * in_channels * out_channels;
        let weight = store.add(
            format!("{name}.weight"),
            vec![kernel, kernel, in_channels, out_channels],
            init.trunc_normal_with_std(n, Self::init_std(kernel, in_channels)),
        )?;
        let bias = store.add(format!("{name}.bias"), vec![out_channels], vec![T::zero(); out_channels])?;
        Ok(Self {
            weight,
            bias,
            kernel,
            stride,
            in_channels,
            out_channels,
        })
    }

    /// Weight standard deviation at initialization: `1 / sqrt(3 fan_in)`,
    /// the variance of the usual uniform fan-in convolution init.
    pub fn init_std(kernel: usize, in_channels: usize) -> f64 {
        1.0 / (3.0 * (kernel * kernel * in_channels) as f64).sqrt()
    }

    pub fn num_params(kernel: usize, cin: usize, cout: usize) -> usize {
        kernel * kernel * cin * cout + cout
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let pad = self.kernel / 2;
        (
            (h + 2 * pad - self.kernel) / self.stride + 1,
            (w + 2 * pad - self.kernel) / self.stride + 1,
        )
    }

    /// Source row/column for output coordinate `o` and tap `k`, if in bounds.
    #[inline]
    fn source(&self, o: usize, k: usize, n: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - (self.kernel / 2) as isize;
        (pos >= 0 && (pos as usize) < n).then_some(pos as usize)
    }
}

impl<T: Real> Layer<T> for Conv2d {
    type Cache = FeatureMap<T>;

    fn forward(&self, params: &ParamStore<T>, x: &FeatureMap<T>) -> (FeatureMap<T>, Self::Cache) {
        assert_eq!(x.channels(), self.in_channels, "conv input channel mismatch");
        let (h, w) = (x.height(), x.width());
        let (oh, ow) = self.output_size(h, w);
        let (cin, cout, k) = (self.in_channels, self.out_channels, self.kernel);
        let weight = params.value(self.weight);
        let bias = params.value(self.bias);
        let src = x.data();
        let mut out = vec![T::zero(); oh * ow * cout];
        for oy in 0..oh {
            for ox in 0..ow {
                let o = &mut out[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
                o.copy_from_slice(bias);
                for ky in 0..k {
                    let Some(iy) = self.source(oy, ky, h) else { continue };
                    for kx in 0..k {
                        let Some(ix) = self.source(ox, kx, w) else { continue };
                        let xin = &src[(iy * w + ix) * cin..(iy * w + ix + 1) * cin];
                        let wbase = (ky * k + kx) * cin * cout;
                        for (ci, &xv) in xin.iter().enumerate() {
                            let wr = &weight[wbase + ci * cout..wbase + (ci + 1) * cout];
                            for (ov, &wv) in o.iter_mut().zip(wr) {
                                *ov = *ov + xv * wv;
                            }
                        }
                    }
                }
            }
        }
        (FeatureMap::new(oh, ow, cout, out), x.clone())
    }

    fn backward(&self, params: &ParamStore<T>, x: &FeatureMap<T>, dy: &FeatureMap<T>, grads: &mut Gradients<T>) -> FeatureMap<T> {
        let (h, w) = (x.height(), x.width());
        let (oh, ow) = (dy.height(), dy.width());
        let (cin, cout, k) = (self.in_channels, self.out_channels, self.kernel);
        let weight = params.value(self.weight);
        let src = x.data();
        let g = dy.data();
        let mut dx = vec![T::zero(); h * w * cin];
        let mut dw = (!grads.is_frozen()).then(|| vec![T::zero(); weight.len()]);
        for oy in 0..oh {
            for ox in 0..ow {
                let go = &g[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
                for ky in 0..k {
                    let Some(iy) = self.source(oy, ky, h) else { continue };
                    for kx in 0..k {
                        let Some(ix) = self.source(ox, kx, w) else { continue };
                        let p = (iy * w + ix) * cin;
                        let wbase = (ky * k + kx) * cin * cout;
                        for ci in 0..cin {
                            let wr = &weight[wbase + ci * cout..wbase + (ci + 1) * cout];
                            let mut acc = T::zero();
                            for (&wv, &gv) in wr.iter().zip(go) {
                                acc = acc + wv * gv;
                            }
                            dx[p + ci] = dx[p + ci] + acc;
                            if let Some(dw) = dw.as_mut() {
                                let xv = src[p + ci];
                                for (d, &gv) in dw[wbase + ci * cout..wbase + (ci + 1) * cout].iter_mut().zip(go) {
                                    *d = *d + xv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
        if let Some(dw) = dw {
            for (a, b) in grads.slot(self.weight).expect("live gradients").iter_mut().zip(dw) {
                *a = *a + b;
            }
            let db = grads.slot(self.bias).expect("live gradients");
            for px in g.chunks_exact(cout) {
                for (d, &gv) in db.iter_mut().zip(px) {
                    *d = *d + gv;
                }
            }
        }
        FeatureMap::new(h, w, cin, dx)
    }
}

/// Token-wise affine map (a 1x1 convolution). Weight shape `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn build<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        in_features: usize,
        out_features: usize,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            vec![in_features, out_features],
            init.trunc_normal(in_features * out_features),
        )?;
        let bias = store.add(format!("{name}.bias"), vec![out_features], vec![T::zero(); out_features])?;
        Ok(Self {
            weight,
            bias,
            in_features,
            out_features,
        })
    }

    pub fn num_params(cin: usize, cout: usize) -> usize {
        cin * cout + cout
    }
}

impl<T: Real> Layer<T> for Linear {
    type Cache = FeatureMap<T>;

    fn forward(&self, params: &ParamStore<T>, x: &FeatureMap<T>) -> (FeatureMap<T>, Self::Cache) {
        assert_eq!(x.channels(), self.in_features, "linear input width mismatch");
        let n = x.tokens();
        let mut out = matmul(x.data(), params.value(self.weight), n, self.in_features, self.out_features);
        let bias = params.value(self.bias);
        for row in out.chunks_exact_mut(self.out_features) {
            for (o, &b) in row.iter_mut().zip(bias) {
                *o = *o + b;
            }
        }
        (FeatureMap::new(x.height(), x.width(), self.out_features, out), x.clone())
    }

    fn backward(&self, params: &ParamStore<T>, x: &FeatureMap<T>, dy: &FeatureMap<T>, grads: &mut Gradients<T>) -> FeatureMap<T> {
        let n = x.tokens();
        let (cin, cout) = (self.in_features, self.out_features);
        let dx = matmul_bt(dy.data(), params.value(self.weight), n, cout, cin);
        if let Some(dw) = grads.slot(self.weight) {
            matmul_at_acc(x.data(), dy.data(), n, cin, cout, dw);
        }
        if let Some(db) = grads.slot(self.bias) {
            for row in dy.data().chunks_exact(cout) {
                for (d, &g) in db.iter_mut().zip(row) {
                    *d = *d + g;
                }
            }
        }
        FeatureMap::new(x.height(), x.width(), cin, dx)
    }
}

/// Per-token layer normalization over channels with learnable gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
    pub channels: usize,
}

pub struct LayerNormCache<T> {
    normalized: Vec<T>,
    inv_std: Vec<T>,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn build<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        let gain = store.add(format!("{name}.gain"), vec![channels], vec![T::one(); channels])?;
        let shift = store.add(format!("{name}.shift"), vec![channels], vec![T::zero(); channels])?;
        Ok(Self { gain, shift, channels })
    }
}

impl<T: Real> Layer<T> for LayerNorm {
    type Cache = LayerNormCache<T>;

    fn forward(&self, params: &ParamStore<T>, x: &FeatureMap<T>) -> (FeatureMap<T>, Self::Cache) {
        let c = self.channels;
        let gain = params.value(self.gain);
        let shift = params.value(self.shift);
        let cn = T::c(c as f64);
        let mut out = Vec::with_capacity(x.data().len());
        let mut normalized = Vec::with_capacity(x.data().len());
        let mut inv_std = Vec::with_capacity(x.tokens());
        for tok in x.data().chunks_exact(c) {
            let mean = tok.iter().copied().sum::<T>() / cn;
            let var = tok.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
            let is = T::one() / (var + T::c(Self::EPS)).sqrt();
            inv_std.push(is);
            for (j, &v) in tok.iter().enumerate() {
                let nrm = (v - mean) * is;
                normalized.push(nrm);
                out.push(nrm * gain[j] + shift[j]);
            }
        }
        (
            FeatureMap::new(x.height(), x.width(), c, out),
            LayerNormCache { normalized, inv_std },
        )
    }

    fn backward(&self, params: &ParamStore<T>, cache: &Self::Cache, dy: &FeatureMap<T>, grads: &mut Gradients<T>) -> FeatureMap<T> {
        let c = self.channels;
        let gain = params.value(self.gain);
        let cn = T::c(c as f64);
        let mut dx = Vec::with_capacity(dy.data().len());
        for (t, (g, nrm)) in dy.data().chunks_exact(c).zip(cache.normalized.chunks_exact(c)).enumerate() {
            let mut mean_d = T::zero();
            let mut mean_dn = T::zero();
            for j in 0..c {
                let d = g[j] * gain[j];
                mean_d = mean_d + d;
                mean_dn = mean_dn + d * nrm[j];
            }
            mean_d = mean_d / cn;
            mean_dn = mean_dn / cn;
            let is = cache.inv_std[t];
            for j in 0..c {
                dx.push(is * (g[j] * gain[j] - mean_d - nrm[j] * mean_dn));
            }
        }
        if let Some(dg) = grads.slot(self.gain) {
            for (g, nrm) in dy.data().chunks_exact(c).zip(cache.normalized.chunks_exact(c)) {
                for j in 0..c {
                    dg[j] = dg[j] + g[j] * nrm[j];
                }
            }
        }
        if let Some(ds) = grads.slot(self.shift) {
            for g in dy.data().chunks_exact(c) {
                for j in 0..c {
                    ds[j] = ds[j] + g[j];
                }
            }
        }
        FeatureMap::new(dy.height(), dy.width(), c, dx)
    }
}
