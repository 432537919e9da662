use super::{Result, TrainError};
use crate::imagedata::Image;
use crate::netblocks::{Checkpoint, DecoderModel, EncoderModel, FeatureMap, NetError};

/// Overlapping-tile inference settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tiling {
    pub tile: usize,
    pub overlap: usize,
}

impl Default for Tiling {
    fn default() -> Self {
        Self { tile: 256, overlap: 32 }
    }
}

/// Runs the encoder and an image decoder over `img`.
///
/// Without tiling the image sides must be multiples of the downsampling
/// factor. With tiling the image is reflect-padded to such a multiple,
/// split into overlapping tiles, and the tile outputs are blended with
/// linear ramps over the overlaps.
pub fn derain(
    encoder: &EncoderModel<f32>,
    decoder: &DecoderModel<f32>,
    img: &Image,
    tiling: Option<Tiling>,
) -> Result<Image> {
    if !decoder.kind().produces_image() {
        return Err(TrainError::Config("derain needs an image decoder".into()));
    }
    let Some(tiling) = tiling else {
        return forward(encoder, decoder, img);
    };
    let factor = encoder.arch().downsampling;
    if tiling.tile == 0 || tiling.tile % factor != 0 || tiling.overlap >= tiling.tile {
        return Err(TrainError::Config(format!(
            "tile size {} must be a positive multiple of {factor} larger than the overlap {}",
            tiling.tile, tiling.overlap
        )));
    }
    let (h, w) = (img.height(), img.width());
    let (ph, pw) = (h.div_ceil(factor) * factor, w.div_ceil(factor) * factor);
    let padded = if (ph, pw) == (h, w) { img.clone() } else { reflect_pad(img, ph, pw) };
    let ys = tile_starts(ph, tiling);
    let xs = tile_starts(pw, tiling);
    if ys.len() == 1 && xs.len() == 1 {
        let out = forward(encoder, decoder, &padded)?;
        return Ok(out.crop(0, 0, h, w)?);
    }

    let (th, tw) = (tiling.tile.min(ph), tiling.tile.min(pw));
    let ramp_y = ramp(th, tiling.overlap);
    let ramp_x = ramp(tw, tiling.overlap);
    let mut acc = vec![0.0f64; ph * pw * 3];
    let mut weight = vec![0.0f64; ph * pw];
    for &y0 in &ys {
        for &x0 in &xs {
            let tile = padded.crop(y0, x0, th, tw)?;
            let out = forward(encoder, decoder, &tile)?;
            for y in 0..th {
                for x in 0..tw {
                    let wgt = ramp_y[y] * ramp_x[x];
                    let p = (y0 + y) * pw + x0 + x;
                    weight[p] += wgt;
                    for c in 0..3 {
                        acc[p * 3 + c] += wgt * out.get(y, x, c) as f64;
                    }
                }
            }
        }
    }
    let data = acc
        .iter()
        .enumerate()
        .map(|(i, &v)| (v / weight[i / 3]) as f32)
        .collect();
    let blended = Image::from_vec_clamped(ph, pw, data)?;
    Ok(blended.crop(0, 0, h, w)?)
}

/// Loads a fine-tuned (or reconstruction) checkpoint and derains `img`.
pub fn derain_checkpoint(ckpt: &Checkpoint, img: &Image, tiling: Option<Tiling>) -> Result<Image> {
    let encoder = ckpt.encoder_model()?;
    let decoder = ckpt.decoder_model()?;
    derain(&encoder, &decoder, img, tiling)
}

fn forward(encoder: &EncoderModel<f32>, decoder: &DecoderModel<f32>, img: &Image) -> Result<Image> {
    let f = encoder.forward_map(&FeatureMap::from_image(img))?;
    let out = decoder.forward(&f)?;
    if !out.is_finite() {
        return Err(NetError::Shape("decoder produced non-finite values".into()).into());
    }
    Ok(out.to_image())
}

/// Tile origins along an axis of length `n`; the last tile ends at `n`.
fn tile_starts(n: usize, t: Tiling) -> Vec<usize> {
    if n <= t.tile {
        return vec![0];
    }
    let stride = t.tile - t.overlap;
    let mut starts: Vec<usize> = (0..).map(|k| k * stride).take_while(|&s| s + t.tile < n).collect();
    starts.push(n - t.tile);
    starts
}

/// Blend weight per position of a tile: rises linearly over the first
/// `overlap` positions and falls over the last, never reaching zero.
fn ramp(len: usize, overlap: usize) -> Vec<f64> {
    let o = overlap as f64 + 1.0;
    (0..len)
        .map(|i| {
            let from_start = (i + 1) as f64 / o;
            let from_end = (len - i) as f64 / o;
            from_start.min(from_end).min(1.0)
        })
        .collect()
}

fn reflect_pad(img: &Image, ph: usize, pw: usize) -> Image {
    let reflect = |i: usize, n: usize| -> usize {
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let m = i % period;
        if m < n {
            m
        } else {
            period - m
        }
    };
    Image::from_fn(ph, pw, |y, x, c| img.get(reflect(y, img.height()), reflect(x, img.width()), c))
}
