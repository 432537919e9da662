//! Training objectives and their gradients with respect to predictions.
//!
//! Every `‖a − b‖²` is the mean squared error over the elements of one
//! sample; per-sample values are summed over the batch.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::imagedata::Image;
use crate::netblocks::{DecoderCache, DecoderModel, FeatureMap, Gradients, NetError};
use crate::real::Real;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("loss contract violated: {0}")]
    Contract(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Scalar loss with its named components; `value` is their sum.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct LossValue {
    pub value: f64,
    pub terms: BTreeMap<String, f64>,
}

impl LossValue {
    pub fn from_terms<I, S>(terms: I) -> Self
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        let terms: BTreeMap<String, f64> = terms.into_iter().map(|(k, v)| (k.into(), v)).collect();
        Self {
            value: terms.values().sum(),
            terms,
        }
    }

    pub fn term(&self, name: &str) -> f64 {
        self.terms.get(name).copied().unwrap_or(0.0)
    }

    /// Adds another loss termwise.
    pub fn accumulate(&mut self, other: &LossValue) {
        for (k, v) in &other.terms {
            *self.terms.entry(k.clone()).or_insert(0.0) += v;
        }
        self.value = self.terms.values().sum();
    }
}

/// Forward differences along x and y, zero in the last column/row
/// respectively. Both outputs share the input's layout.
pub fn feature_gradients<T: Real>(f: &FeatureMap<T>) -> (Vec<T>, Vec<T>) {
    let (h, w, c) = f.shape();
    let mut gx = vec![T::zero(); h * w * c];
    let mut gy = vec![T::zero(); h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let i = (y * w + x) * c + ch;
                let v = f.data()[i];
                if x + 1 < w {
                    gx[i] = f.data()[i + c] - v;
                }
                if y + 1 < h {
                    gy[i] = f.data()[i + w * c] - v;
                }
            }
        }
    }
    (gx, gy)
}

/// Horizontal and vertical forward differences of an image.
pub fn image_gradients(img: &Image) -> (Vec<f64>, Vec<f64>) {
    feature_gradients(&FeatureMap::<f64>::from_image(img))
}

fn mse<T: Real>(a: &[T], b: &[T]) -> f64 {
    let n = a.len() as f64;
    a.iter().zip(b).map(|(&x, &y)| (x - y).as_f64().powi(2)).sum::<f64>() / n
}

fn check_same_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(LossError::Contract(format!("{what}: {a} predictions vs {b} targets")));
    }
    if a == 0 {
        return Err(LossError::Contract(format!("{what}: empty batch")));
    }
    Ok(())
}

fn check_shape<T: Real>(what: &str, i: usize, a: &FeatureMap<T>, b: &FeatureMap<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(LossError::Contract(format!(
            "{what}: sample {i} shape {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Recognition loss `Σ (o − l)²` with its gradient `2 (o − l)`.
pub fn recog_loss_grad<T: Real>(outputs: &[T], labels: &[T]) -> Result<(LossValue, Vec<T>)> {
    check_same_len("recognition loss", outputs.len(), labels.len())?;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(outputs.len());
    for (&o, &l) in outputs.iter().zip(labels) {
        total += (o - l).as_f64().powi(2);
        grads.push(T::c(2.0) * (o - l));
    }
    Ok((LossValue::from_terms([("recog", total)]), grads))
}

pub fn recog_loss(outputs: &[f64], labels: &[f64]) -> Result<LossValue> {
    Ok(recog_loss_grad(outputs, labels)?.0)
}

/// Pixel MSE plus gradient MSE per sample, summed over samples. The
/// gradient term is `mean(Δgx²) + mean(Δgy²)`.
pub fn recon_loss_grad<T: Real>(
    outputs: &[FeatureMap<T>],
    targets: &[FeatureMap<T>],
) -> Result<(LossValue, Vec<FeatureMap<T>>)> {
    check_same_len("reconstruction loss", outputs.len(), targets.len())?;
    let mut pixel = 0.0;
    let mut gradient = 0.0;
    let mut grads = Vec::with_capacity(outputs.len());
    for (i, (o, t)) in outputs.iter().zip(targets).enumerate() {
        check_shape("reconstruction loss", i, o, t)?;
        let (h, w, c) = o.shape();
        let n = T::c(o.data().len() as f64);
        pixel += mse(o.data(), t.data());
        let diff: Vec<T> = o.data().iter().zip(t.data()).map(|(&a, &b)| a - b).collect();
        let dmap = FeatureMap::new(h, w, c, diff);
        let (dx, dy) = feature_gradients(&dmap);
        gradient += (dx.iter().map(|v| v.as_f64().powi(2)).sum::<f64>()
            + dy.iter().map(|v| v.as_f64().powi(2)).sum::<f64>())
            / o.data().len() as f64;

        let two_n = T::c(2.0) / n;
        let mut g: Vec<T> = dmap.data().iter().map(|&d| two_n * d).collect();
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let idx = (y * w + x) * c + ch;
                    // d/dD of Σ (D[x+1] − D[x])²
                    if x + 1 < w {
                        g[idx] = g[idx] - two_n * dx[idx];
                    }
                    if x > 0 {
                        g[idx] = g[idx] + two_n * dx[idx - c];
                    }
                    if y + 1 < h {
                        g[idx] = g[idx] - two_n * dy[idx];
                    }
                    if y > 0 {
                        g[idx] = g[idx] + two_n * dy[idx - w * c];
                    }
                }
            }
        }
        grads.push(FeatureMap::new(h, w, c, g));
    }
    Ok((LossValue::from_terms([("pixel", pixel), ("gradient", gradient)]), grads))
}

pub fn recon_loss<T: Real>(outputs: &[FeatureMap<T>], targets: &[FeatureMap<T>]) -> Result<LossValue> {
    Ok(recon_loss_grad(outputs, targets)?.0)
}

pub fn recon_loss_images(outputs: &[Image], targets: &[Image]) -> Result<LossValue> {
    let o: Vec<FeatureMap<f64>> = outputs.iter().map(FeatureMap::from_image).collect();
    let t: Vec<FeatureMap<f64>> = targets.iter().map(FeatureMap::from_image).collect();
    recon_loss(&o, &t)
}

/// Fine-tuning uses the reconstruction objective unchanged.
pub fn finetune_loss_grad<T: Real>(
    outputs: &[FeatureMap<T>],
    targets: &[FeatureMap<T>],
) -> Result<(LossValue, Vec<FeatureMap<T>>)> {
    recon_loss_grad(outputs, targets)
}

pub fn finetune_loss<T: Real>(outputs: &[FeatureMap<T>], targets: &[FeatureMap<T>]) -> Result<LossValue> {
    recon_loss(outputs, targets)
}

fn mse_grad<T: Real>(s: &FeatureMap<T>, t: &FeatureMap<T>) -> (f64, Vec<T>) {
    let two_n = T::c(2.0 / s.data().len() as f64);
    let g = s.data().iter().zip(t.data()).map(|(&a, &b)| two_n * (a - b)).collect();
    (mse(s.data(), t.data()), g)
}

/// Direct feature matching: `Σᵢ MSE(Sᵢ, T_recogᵢ) + MSE(Sᵢ, T_reconᵢ)`.
///
/// A teacher may be omitted (single-teacher ablations); at least one is
/// required. Returns the gradient with respect to each student map.
pub fn kd_direct_loss_grad<T: Real>(
    student: &[FeatureMap<T>],
    teacher_recog: Option<&[FeatureMap<T>]>,
    teacher_recon: Option<&[FeatureMap<T>]>,
) -> Result<(LossValue, Vec<FeatureMap<T>>)> {
    if teacher_recog.is_none() && teacher_recon.is_none() {
        return Err(LossError::Contract("distillation needs at least one teacher".into()));
    }
    let mut grads: Vec<FeatureMap<T>> = student
        .iter()
        .map(|s| FeatureMap::zeros(s.height(), s.width(), s.channels()))
        .collect();
    let mut terms = Vec::new();
    for (name, teacher) in [("to_recog", teacher_recog), ("to_recon", teacher_recon)] {
        let Some(teacher) = teacher else { continue };
        check_same_len("direct distillation", student.len(), teacher.len())?;
        let mut total = 0.0;
        for (i, (s, t)) in student.iter().zip(teacher).enumerate() {
            check_shape("direct distillation", i, s, t)?;
            let (v, g) = mse_grad(s, t);
            total += v;
            for (a, b) in grads[i].data_mut().iter_mut().zip(g) {
                *a = *a + b;
            }
        }
        terms.push((name, total));
    }
    Ok((LossValue::from_terms(terms), grads))
}

pub fn kd_direct_loss<T: Real>(
    student: &[FeatureMap<T>],
    teacher_recog: &[FeatureMap<T>],
    teacher_recon: &[FeatureMap<T>],
) -> Result<LossValue> {
    Ok(kd_direct_loss_grad(student, Some(teacher_recog), Some(teacher_recon))?.0)
}

/// A decoder that can be run on features and differentiated with respect to
/// its input only.
pub trait FeatureDecoder<T: Real> {
    type Cache;

    fn is_frozen(&self) -> bool;

    fn decode(&self, f: &FeatureMap<T>) -> Result<(FeatureMap<T>, Self::Cache)>;

    /// Gradient with respect to the decoder input; never touches parameters.
    fn input_grad(&self, cache: &Self::Cache, dy: &FeatureMap<T>) -> FeatureMap<T>;
}

impl<T: Real> FeatureDecoder<T> for DecoderModel<T> {
    type Cache = DecoderCache<T>;

    fn is_frozen(&self) -> bool {
        DecoderModel::is_frozen(self)
    }

    fn decode(&self, f: &FeatureMap<T>) -> Result<(FeatureMap<T>, Self::Cache)> {
        Ok(self.forward_cached(f)?)
    }

    fn input_grad(&self, cache: &Self::Cache, dy: &FeatureMap<T>) -> FeatureMap<T> {
        self.backward(cache, dy, &mut Gradients::frozen())
    }
}

/// One teacher's contribution to indirect matching: its features and its
/// frozen decoder.
pub struct IndirectTeacher<'a, T: Real, D: FeatureDecoder<T>> {
    pub features: &'a [FeatureMap<T>],
    pub decoder: &'a D,
}

/// Indirect matching through frozen teacher decoders:
/// `Σᵢ MSE(D_recog(Sᵢ), D_recog(T_recogᵢ)) + MSE(D_recon(Sᵢ), D_recon(T_reconᵢ))`.
/// Gradients flow through the decoders into the student features only.
pub fn kd_indirect_loss_grad<T, A, B>(
    student: &[FeatureMap<T>],
    recog: Option<IndirectTeacher<'_, T, A>>,
    recon: Option<IndirectTeacher<'_, T, B>>,
) -> Result<(LossValue, Vec<FeatureMap<T>>)>
where
    T: Real,
    A: FeatureDecoder<T>,
    B: FeatureDecoder<T>,
{
    if recog.is_none() && recon.is_none() {
        return Err(LossError::Contract("distillation needs at least one teacher".into()));
    }
    let mut grads: Vec<FeatureMap<T>> = student
        .iter()
        .map(|s| FeatureMap::zeros(s.height(), s.width(), s.channels()))
        .collect();
    let mut terms = Vec::new();
    if let Some(t) = recog {
        terms.push(("to_recog", indirect_term(student, t, &mut grads)?));
    }
    if let Some(t) = recon {
        terms.push(("to_recon", indirect_term(student, t, &mut grads)?));
    }
    Ok((LossValue::from_terms(terms), grads))
}

fn indirect_term<T: Real, D: FeatureDecoder<T>>(
    student: &[FeatureMap<T>],
    teacher: IndirectTeacher<'_, T, D>,
    grads: &mut [FeatureMap<T>],
) -> Result<f64> {
    if !teacher.decoder.is_frozen() {
        return Err(LossError::Contract("indirect matching requires a frozen decoder".into()));
    }
    check_same_len("indirect distillation", student.len(), teacher.features.len())?;
    let mut total = 0.0;
    for (i, (s, t)) in student.iter().zip(teacher.features).enumerate() {
        check_shape("indirect distillation", i, s, t)?;
        let (ds, cache) = teacher.decoder.decode(s)?;
        let (dt, _) = teacher.decoder.decode(t)?;
        let (v, g) = mse_grad(&ds, &dt);
        total += v;
        let gmap = FeatureMap::new(ds.height(), ds.width(), ds.channels(), g);
        grads[i].add_assign(&teacher.decoder.input_grad(&cache, &gmap));
    }
    Ok(total)
}

pub fn kd_indirect_loss<T, A, B>(
    student: &[FeatureMap<T>],
    teacher_recog: &[FeatureMap<T>],
    teacher_recon: &[FeatureMap<T>],
    recog_decoder: &A,
    recon_decoder: &B,
) -> Result<LossValue>
where
    T: Real,
    A: FeatureDecoder<T>,
    B: FeatureDecoder<T>,
{
    Ok(kd_indirect_loss_grad(
        student,
        Some(IndirectTeacher {
            features: teacher_recog,
            decoder: recog_decoder,
        }),
        Some(IndirectTeacher {
            features: teacher_recon,
            decoder: recon_decoder,
        }),
    )?
    .0)
}

/// Overall distillation loss: the unweighted sum of both matchings.
pub fn kd_total_loss(direct: &LossValue, indirect: &LossValue) -> LossValue {
    LossValue::from_terms([("kdd", direct.value), ("kdi", indirect.value)])
}
