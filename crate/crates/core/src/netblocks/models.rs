use serde::{Deserialize, Serialize};

use super::aglf::AglfBlock;
use super::layers::{sigmoid, Conv2d, Gelu, Layer, Linear};
use super::params::{Gradients, Initializer, ParamStore};
use super::spatial::SpatialAttention;
use super::spp::Spp;
use super::tensor::FeatureMap;
use super::{NetError, Result};
use crate::imagedata::Image;
use crate::real::Real;

/// Structural description shared by every encoder of a pipeline run and by
/// the decoders attached to it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchDescriptor {
    pub depth: usize,
    pub base_channels: usize,
    pub downsampling: usize,
}

impl Default for ArchDescriptor {
    fn default() -> Self {
        Self {
            depth: 9,
            base_channels: 32,
            downsampling: 4,
        }
    }
}

impl ArchDescriptor {
    pub fn new(depth: usize, base_channels: usize, downsampling: usize) -> Result<Self> {
        let arch = Self {
            depth,
            base_channels,
            downsampling,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(NetError::Shape("encoder depth must be at least 1".into()));
        }
        if self.base_channels == 0 {
            return Err(NetError::Shape("base channels must be at least 1".into()));
        }
        if !self.downsampling.is_power_of_two() {
            return Err(NetError::Shape(format!(
                "downsampling factor must be a power of two, got {}",
                self.downsampling
            )));
        }
        Ok(())
    }

    /// Number of stride-2 convolutions in the shallow projection.
    pub fn stride_convs(&self) -> usize {
        self.downsampling.trailing_zeros() as usize
    }

    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let f = self.downsampling;
        if height == 0 || width == 0 || height % f != 0 || width % f != 0 {
            return Err(NetError::Shape(format!(
                "input {height}x{width} must have both sides a positive multiple of {f}"
            )));
        }
        Ok(())
    }

    /// Closed-form encoder parameter count.
    pub fn encoder_param_count(&self) -> usize {
        let c = self.base_channels;
        let convs = self.stride_convs().max(1);
        Conv2d::num_params(3, 3, c)
            + (convs - 1) * Conv2d::num_params(3, c, c)
            + SpatialAttention::num_params()
            + self.depth * AglfBlock::num_params(c)
    }
}

/// Shallow projection, spatial attention, then a stack of AGLF blocks.
#[derive(Clone, Debug)]
pub struct EncoderNet {
    pub proj: Vec<Conv2d>,
    pub attention: SpatialAttention,
    pub blocks: Vec<AglfBlock>,
}

pub struct EncoderCache<T: Real> {
    proj: Vec<FeatureMap<T>>,
    gelu: Vec<FeatureMap<T>>,
    attention: <SpatialAttention as Layer<T>>::Cache,
    blocks: Vec<<AglfBlock as Layer<T>>::Cache>,
}

impl EncoderNet {
    pub fn build<T: Real>(store: &mut ParamStore<T>, init: &mut Initializer, arch: &ArchDescriptor) -> Result<Self> {
        arch.validate()?;
        let c = arch.base_channels;
        let convs = arch.stride_convs().max(1);
        let stride = if arch.downsampling > 1 { 2 } else { 1 };
        let mut proj = Vec::with_capacity(convs);
        for i in 0..convs {
            let cin = if i == 0 { 3 } else { c };
            proj.push(Conv2d::build(store, init, &format!("proj.{i}"), 3, stride, cin, c)?);
        }
        let attention = SpatialAttention::build(store, init, "spatial_attention")?;
        let blocks = (0..arch.depth)
            .map(|i| AglfBlock::build(store, init, &format!("blocks.{i}"), c))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { proj, attention, blocks })
    }
}

impl<T: Real> Layer<T> for EncoderNet {
    type Cache = EncoderCache<T>;

    fn forward(&self, params: &ParamStore<T>, x: &FeatureMap<T>) -> (FeatureMap<T>, Self::Cache) {
        let mut proj = Vec::with_capacity(self.proj.len());
        let mut gelu = Vec::new();
        let mut h = x.clone();
        for (i, conv) in self.proj.iter().enumerate() {
            let (y, c) = conv.forward(params, &h);
            proj.push(c);
            h = if i + 1 < self.proj.len() {
                let (a, c) = Gelu.forward(params, &y);
                gelu.push(c);
                a
            } else {
                y
            };
        }
        let (mut h, attention) = self.attention.forward(params, &h);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, c) = block.forward(params, &h);
            blocks.push(c);
            h = y;
        }
        (
            h,
            EncoderCache {
                proj,
                gelu,
                attention,
                blocks,
            },
        )
    }

    fn backward(&self, params: &ParamStore<T>, cache: &Self::Cache, dy: &FeatureMap<T>, grads: &mut Gradients<T>) -> FeatureMap<T> {
        let mut g = dy.clone();
        for (block, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            g = block.backward(params, c, &g, grads);
        }
        g = self.attention.backward(params, &cache.attention, &g, grads);
        for (i, conv) in self.proj.iter().enumerate().rev() {
            if i + 1 < self.proj.len() {
                g = Gelu.backward(params, &cache.gelu[i], &g, grads);
            }
            g = conv.backward(params, &cache.proj[i], &g, grads);
        }
        g
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    Reconstruction,
    Deraining,
    Recognition,
}

impl DecoderKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DecoderKind::Reconstruction => "reconstruction",
            DecoderKind::Deraining => "deraining",
            DecoderKind::Recognition => "recognition",
        }
    }

    pub fn produces_image(&self) -> bool {
        !matches!(self, DecoderKind::Recognition)
    }
}

/// Image decoders: sub-pixel upsampling back to input resolution, SPP, a
/// 3x3 output convolution, sigmoid. Recognition decoder: SPP, global average
/// pooling, a fully connected layer, sigmoid.
#[derive(Clone, Debug)]
pub struct DecoderNet {
    pub kind: DecoderKind,
    pub upsample: Option<Linear>,
    pub factor: usize,
    pub spp: Spp,
    pub head_conv: Option<Conv2d>,
    pub head_fc: Option<Linear>,
}

pub struct DecoderCache<T: Real> {
    upsample: Option<FeatureMap<T>>,
    shuffled_shape: (usize, usize),
    spp: <Spp as Layer<T>>::Cache,
    head: FeatureMap<T>,
    pooled_from: (usize, usize),
    output: FeatureMap<T>,
}

/// Rearranges `h x w x (c r^2)` into `hr x wr x c`; channel block
/// `(i * r + j) * c` feeds sub-pixel `(i, j)`.
fn pixel_shuffle<T: Real>(x: &FeatureMap<T>, r: usize) -> FeatureMap<T> {
    let (h, w, cr) = x.shape();
    let c = cr / (r * r);
    let mut out = FeatureMap::zeros(h * r, w * r, c);
    for y in 0..h {
        for xx in 0..w {
            for i in 0..r {
                for j in 0..r {
                    for ch in 0..c {
                        out.set(y * r + i, xx * r + j, ch, x.get(y, xx, (i * r + j) * c + ch));
                    }
                }
            }
        }
    }
    out
}

fn pixel_unshuffle<T: Real>(g: &FeatureMap<T>, r: usize) -> FeatureMap<T> {
    let (hr, wr, c) = g.shape();
    let (h, w) = (hr / r, wr / r);
    let mut out = FeatureMap::zeros(h, w, c * r * r);
    for y in 0..h {
        for xx in 0..w {
            for i in 0..r {
                for j in 0..r {
                    for ch in 0..c {
                        out.set(y, xx, (i * r + j) * c + ch, g.get(y * r + i, xx * r + j, ch));
                    }
                }
            }
        }
    }
    out
}

impl DecoderNet {
    pub fn build<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        kind: DecoderKind,
        arch: &ArchDescriptor,
    ) -> Result<Self> {
        arch.validate()?;
        let c = arch.base_channels;
        let r = arch.downsampling;
        let upsample = if kind.produces_image() && r > 1 {
            Some(Linear::build(store, init, "upsample", c, c * r * r)?)
        } else {
            None
        };
        let spp = Spp::build(store, init, "spp", c)?;
        let (head_conv, head_fc) = if kind.produces_image() {
            (Some(Conv2d::build(store, init, "head", 3, 1, c, 3)?), None)
        } else {
            (None, Some(Linear::build(store, init, "head", c, 1)?))
        };
        Ok(Self {
            kind,
            upsample,
            factor: r,
            spp,
            head_conv,
            head_fc,
        })
    }

    pub fn param_count(kind: DecoderKind, arch: &ArchDescriptor) -> usize {
        let c = arch.base_channels;
        let r = arch.downsampling;
        let up = if kind.produces_image() && r > 1 {
            Linear::num_params(c, c * r * r)
        } else {
            0
        };
        let head = if kind.produces_image() {
            Conv2d::num_params(3, c, 3)
        } else {
            Linear::num_params(c, 1)
        };
        up + Spp::num_params(c) + head
    }
}

impl<T: Real> Layer<T> for DecoderNet {
    type Cache = DecoderCache<T>;

    fn forward(&self, params: &ParamStore<T>, f: &FeatureMap<T>) -> (FeatureMap<T>, Self::Cache) {
        let (x, upsample_cache) = match &self.upsample {
            Some(up) => {
                let (y, c) = up.forward(params, f);
                (pixel_shuffle(&y, self.factor), Some(c))
            }
            None => (f.clone(), None),
        };
        let shuffled_shape = (x.height(), x.width());
        let (s, spp) = self.spp.forward(params, &x);
        let (head_in, logits) = match (&self.head_conv, &self.head_fc) {
            (Some(conv), _) => {
                let (y, c) = conv.forward(params, &s);
                (c, y)
            }
            (None, Some(fc)) => {
                let pooled = FeatureMap::new(1, 1, s.channels(), s.channel_means());
                let (y, c) = fc.forward(params, &pooled);
                (c, y)
            }
            (None, None) => unreachable!("decoder has a head"),
        };
        let output = logits.map(sigmoid);
        (
            output.clone(),
            DecoderCache {
                upsample: upsample_cache,
                shuffled_shape,
                spp,
                head: head_in,
                pooled_from: (s.height(), s.width()),
                output,
            },
        )
    }

    fn backward(&self, params: &ParamStore<T>, cache: &Self::Cache, dy: &FeatureMap<T>, grads: &mut Gradients<T>) -> FeatureMap<T> {
        let dlogits = FeatureMap::new(
            dy.height(),
            dy.width(),
            dy.channels(),
            dy.data()
                .iter()
                .zip(cache.output.data())
                .map(|(&g, &o)| g * o * (T::one() - o))
                .collect(),
        );
        let ds = match (&self.head_conv, &self.head_fc) {
            (Some(conv), _) => conv.backward(params, &cache.head, &dlogits, grads),
            (None, Some(fc)) => {
                let dpooled = fc.backward(params, &cache.head, &dlogits, grads);
                let (h, w) = cache.pooled_from;
                let inv = T::one() / T::c((h * w) as f64);
                let per: Vec<T> = dpooled.data().iter().map(|&g| g * inv).collect();
                let mut data = Vec::with_capacity(h * w * per.len());
                for _ in 0..h * w {
                    data.extend_from_slice(&per);
                }
                FeatureMap::new(h, w, per.len(), data)
            }
            (None, None) => unreachable!("decoder has a head"),
        };
        let dx = self.spp.backward(params, &cache.spp, &ds, grads);
        debug_assert_eq!((dx.height(), dx.width()), cache.shuffled_shape);
        match (&self.upsample, &cache.upsample) {
            (Some(up), Some(c)) => up.backward(params, c, &pixel_unshuffle(&dx, self.factor), grads),
            _ => dx,
        }
    }
}

/// Encoder with its own parameters.
#[derive(Clone, Debug)]
pub struct EncoderModel<T: Real = f32> {
    arch: ArchDescriptor,
    net: EncoderNet,
    params: ParamStore<T>,
}

impl<T: Real> EncoderModel<T> {
    /// Fresh encoder: truncated-normal weights (std 0.02), zero biases, unit
    /// norm gains, and fusion weights alpha = 1, beta = 0.
    pub fn init(seed: u64, arch: ArchDescriptor) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut init = Initializer::new(seed);
        let net = EncoderNet::build(&mut params, &mut init, &arch)?;
        Ok(Self { arch, net, params })
    }

    /// Adopts a parameter store, checking it against the architecture.
    pub fn from_params(arch: ArchDescriptor, params: ParamStore<T>) -> Result<Self> {
        let mut model = Self::init(0, arch)?;
        if !model.params.same_layout(&params) {
            return Err(NetError::Shape(format!(
                "encoder parameters do not match architecture {arch:?}"
            )));
        }
        model.params = params;
        Ok(model)
    }

    pub fn arch(&self) -> &ArchDescriptor {
        &self.arch
    }

    pub fn net(&self) -> &EncoderNet {
        &self.net
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    pub fn cast<U: Real>(&self) -> EncoderModel<U> {
        EncoderModel {
            arch: self.arch,
            net: self.net.clone(),
            params: self.params.cast(),
        }
    }

    pub fn forward_map(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward(&self, img: &Image) -> Result<FeatureMap<T>> {
        self.forward_map(&FeatureMap::from_image(img))
    }

    pub fn forward_cached(&self, x: &FeatureMap<T>) -> Result<(FeatureMap<T>, EncoderCache<T>)> {
        self.arch.check_input(x.height(), x.width())?;
        if x.channels() != 3 {
            return Err(NetError::Shape(format!("encoder expects 3 channels, got {}", x.channels())));
        }
        Ok(self.net.forward(&self.params, x))
    }

    pub fn backward(&self, cache: &EncoderCache<T>, dy: &FeatureMap<T>, grads: &mut Gradients<T>) -> FeatureMap<T> {
        self.net.backward(&self.params, cache, dy, grads)
    }
}

/// Decoder with its own parameters. A frozen decoder never produces
/// parameter gradients.
#[derive(Clone, Debug)]
pub struct DecoderModel<T: Real = f32> {
    arch: ArchDescriptor,
    net: DecoderNet,
    params: ParamStore<T>,
    frozen: bool,
}

impl<T: Real> DecoderModel<T> {
    pub fn init(seed: u64, kind: DecoderKind, arch: ArchDescriptor) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut init = Initializer::new(seed);
        let net = DecoderNet::build(&mut params, &mut init, kind, &arch)?;
        Ok(Self {
            arch,
            net,
            params,
            frozen: false,
        })
    }

    pub fn from_params(kind: DecoderKind, arch: ArchDescriptor, params: ParamStore<T>) -> Result<Self> {
        let mut model = Self::init(0, kind, arch)?;
        if !model.params.same_layout(&params) {
            return Err(NetError::Shape(format!(
                "{} decoder parameters do not match architecture {arch:?}",
                kind.as_str()
            )));
        }
        model.params = params;
        Ok(model)
    }

    pub fn kind(&self) -> DecoderKind {
        self.net.kind
    }

    pub fn arch(&self) -> &ArchDescriptor {
        &self.arch
    }

    pub fn net(&self) -> &DecoderNet {
        &self.net
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn cast<U: Real>(&self) -> DecoderModel<U> {
        DecoderModel {
            arch: self.arch,
            net: self.net.clone(),
            params: self.params.cast(),
            frozen: self.frozen,
        }
    }

    fn check_features(&self, f: &FeatureMap<T>) -> Result<()> {
        if f.channels() != self.arch.base_channels {
            return Err(NetError::Shape(format!(
                "decoder expects {} channels, got {}",
                self.arch.base_channels,
                f.channels()
            )));
        }
        Ok(())
    }

    /// Image decoders return an `H x W x 3` map in `[0, 1]`; the recognition
    /// decoder returns a `1 x 1 x 1` map holding a probability.
    pub fn forward(&self, f: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        Ok(self.forward_cached(f)?.0)
    }

    pub fn forward_cached(&self, f: &FeatureMap<T>) -> Result<(FeatureMap<T>, DecoderCache<T>)> {
        self.check_features(f)?;
        Ok(self.net.forward(&self.params, f))
    }

    pub fn backward(&self, cache: &DecoderCache<T>, dy: &FeatureMap<T>, grads: &mut Gradients<T>) -> FeatureMap<T> {
        if self.frozen {
            let mut sink = Gradients::frozen();
            self.net.backward(&self.params, cache, dy, &mut sink)
        } else {
            self.net.backward(&self.params, cache, dy, grads)
        }
    }

    /// Reconstruction/deraining output as an image.
    pub fn decode_image(&self, f: &FeatureMap<T>) -> Result<Image> {
        if !self.kind().produces_image() {
            return Err(NetError::Shape("recognition decoder does not produce images".into()));
        }
        Ok(self.forward(f)?.to_image())
    }

    /// Recognition output as a scalar probability.
    pub fn decode_scalar(&self, f: &FeatureMap<T>) -> Result<T> {
        if self.kind().produces_image() {
            return Err(NetError::Shape(format!("{} decoder does not produce a scalar", self.kind().as_str())));
        }
        Ok(self.forward(f)?.data()[0])
    }
}
