use super::layers::{Layer, Linear};
use super::params::{Gradients, Initializer, ParamStore};
use super::tensor::FeatureMap;
use super::Result;
use crate::real::Real;

/// Half-open source range `[start, end)` of adaptive pooling cell `i` when
/// `n` samples are pooled into `cells` cells.
#[inline]
fn bin(i: usize, n: usize, cells: usize) -> (usize, usize) {
    let start = i * n / cells;
    let end = ((i + 1) * n).div_ceil(cells);
    (start, end)
}

/// Cell a location maps to when a pooled grid is upsampled back (nearest).
#[inline]
fn cell_of(pos: usize, n: usize, cells: usize) -> usize {
    pos * cells / n
}

/// Adaptive average pooling to a `scale x scale` grid.
pub fn adaptive_avg_pool<T: Real>(f: &FeatureMap<T>, scale: usize) -> FeatureMap<T> {
    let (h, w, c) = f.shape();
    let mut out = FeatureMap::zeros(scale, scale, c);
    for cy in 0..scale {
        let (y0, y1) = bin(cy, h, scale);
        for cx in 0..scale {
            let (x0, x1) = bin(cx, w, scale);
            let count = T::c(((y1 - y0) * (x1 - x0)) as f64);
            for ch in 0..c {
                let mut acc = T::zero();
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc = acc + f.get(y, x, ch);
                    }
                }
                out.set(cy, cx, ch, acc / count);
            }
        }
    }
    out
}

/// Spatial pyramid pooling: average-pool at several grid sizes, upsample
/// each back, concatenate with the input, and fuse with a 1x1 convolution
/// to the input channel count.
#[derive(Clone, Debug)]
pub struct Spp {
    pub fuse: Linear,
    pub channels: usize,
}

impl Spp {
    pub const SCALES: [usize; 4] = [1, 2, 4, 8];

    pub fn build<T: Real>(store: &mut ParamStore<T>, init: &mut Initializer, name: &str, channels: usize) -> Result<Self> {
        let width = channels * (Self::SCALES.len() + 1);
        Ok(Self {
            fuse: Linear::build(store, init, &format!("{name}.fuse"), width, channels)?,
            channels,
        })
    }

    pub fn num_params(c: usize) -> usize {
        Linear::num_params(c * (Self::SCALES.len() + 1), c)
    }

    fn concat<T: Real>(&self, f: &FeatureMap<T>) -> FeatureMap<T> {
        let (h, w, c) = f.shape();
        let pooled: Vec<FeatureMap<T>> = Self::SCALES.iter().map(|&s| adaptive_avg_pool(f, s)).collect();
        let width = c * (Self::SCALES.len() + 1);
        let mut data = Vec::with_capacity(h * w * width);
        for y in 0..h {
            for x in 0..w {
                let base = (y * w + x) * c;
                data.extend_from_slice(&f.data()[base..base + c]);
                for (p, &s) in pooled.iter().zip(&Self::SCALES) {
                    let (cy, cx) = (cell_of(y, h, s), cell_of(x, w, s));
                    let pb = (cy * s + cx) * c;
                    data.extend_from_slice(&p.data()[pb..pb + c]);
                }
            }
        }
        FeatureMap::new(h, w, width, data)
    }
}

impl<T: Real> Layer<T> for Spp {
    type Cache = FeatureMap<T>;

    fn forward(&self, params: &ParamStore<T>, f: &FeatureMap<T>) -> (FeatureMap<T>, Self::Cache) {
        let cat = self.concat(f);
        let (y, _) = self.fuse.forward(params, &cat);
        (y, cat)
    }

    fn backward(&self, params: &ParamStore<T>, cat: &Self::Cache, dy: &FeatureMap<T>, grads: &mut Gradients<T>) -> FeatureMap<T> {
        let dcat = self.fuse.backward(params, cat, dy, grads);
        let (h, w, c) = (cat.height(), cat.width(), self.channels);
        let width = cat.channels();
        let mut df = FeatureMap::zeros(h, w, c);
        for (si, &s) in Self::SCALES.iter().enumerate() {
            // gather: gradient of each pooled cell from its upsampled copies
            let mut dcell = vec![T::zero(); s * s * c];
            for y in 0..h {
                for x in 0..w {
                    let cell = cell_of(y, h, s) * s + cell_of(x, w, s);
                    let src = (y * w + x) * width + (si + 1) * c;
                    for ch in 0..c {
                        dcell[cell * c + ch] = dcell[cell * c + ch] + dcat.data()[src + ch];
                    }
                }
            }
            // scatter: average pooling spreads each cell evenly over its bin
            for cy in 0..s {
                let (y0, y1) = bin(cy, h, s);
                for cx in 0..s {
                    let (x0, x1) = bin(cx, w, s);
                    let inv = T::one() / T::c(((y1 - y0) * (x1 - x0)) as f64);
                    for y in y0..y1 {
                        for x in x0..x1 {
                            for ch in 0..c {
                                let v = df.get(y, x, ch) + dcell[(cy * s + cx) * c + ch] * inv;
                                df.set(y, x, ch, v);
                            }
                        }
                    }
                }
            }
        }
        for (t, tok) in df.data_mut().chunks_exact_mut(c).enumerate() {
            for (ch, v) in tok.iter_mut().enumerate() {
                *v = *v + dcat.data()[t * width + ch];
            }
        }
        df
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bins_cover_every_location() {
        for (n, cells) in [(16, 8), (5, 2), (2, 8), (7, 4), (1, 1)] {
            let mut seen = vec![false; n];
            for i in 0..cells {
                let (a, b) = bin(i, n, cells);
                assert!(a < b && b <= n);
                seen[a..b].iter_mut().for_each(|s| *s = true);
            }
            assert!(seen.iter().all(|&s| s));
            for p in 0..n {
                let (a, b) = bin(cell_of(p, n, cells), n, cells);
                assert!(a <= p && p < b, "location {p} outside its upsampling cell");
            }
        }
    }
}
