use super::{Result, TrainError};
use crate::netblocks::{Gradients, ParamStore};
use crate::real::Real;

/// Smallest learning rate the plateau schedule will decay to.
pub const MIN_LR: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction; moments are kept per parameter in store order.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    config: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[Vec<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<T>] {
        &self.v
    }

    /// Applies one update from `grads` and clears the buffer.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &mut Gradients<T>, lr: f64) -> Result<()> {
        if !grads.fits(store) || self.m.len() != store.len() {
            return Err(TrainError::State(
                "optimizer step needs a gradient buffer covering every parameter".into(),
            ));
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let (b1, b2) = (T::c(beta1), T::c(beta2));
        let (one_b1, one_b2) = (T::c(1.0 - beta1), T::c(1.0 - beta2));
        let step = T::c(lr / bc1);
        let inv_bc2 = T::c(1.0 / bc2);
        let eps = T::c(eps);
        for (((p, g), m), v) in store.iter_mut().zip(grads.slots()).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.value.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + one_b1 * gi;
                v[i] = b2 * v[i] + one_b2 * gi * gi;
                let denom = (v[i] * inv_bc2).sqrt() + eps;
                p.value[i] = p.value[i] - step * m[i] / denom;
            }
        }
        grads.clear();
        Ok(())
    }
}

/// Learning rate after the latest evaluation in `history`.
///
/// Walks the history tracking the best value; each entry that fails to
/// improve on it counts as bad, and `patience` consecutive bad entries
/// trigger a decay and reset the count. Only a decay triggered by the last
/// entry changes the returned rate, so calling this once per evaluation
/// applies every decay exactly once.
pub fn plateau_schedule(history: &[f64], patience: usize, factor: f64, lr: f64) -> f64 {
    let Some((&first, rest)) = history.split_first() else {
        return lr;
    };
    let mut best = first;
    let mut bad = 0usize;
    let mut decay_at_end = false;
    for &value in rest {
        decay_at_end = false;
        if value < best {
            best = value;
            bad = 0;
        } else {
            bad += 1;
            if bad >= patience.max(1) {
                bad = 0;
                decay_at_end = true;
            }
        }
    }
    if decay_at_end {
        (lr * factor).max(MIN_LR).min(lr)
    } else {
        lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", vec![1], vec![v]).unwrap();
        s
    }

    fn grads_with(store: &ParamStore<f64>, g: f64) -> Gradients<f64> {
        let mut grads = Gradients::for_store(store);
        grads.slot(store.id("w").unwrap()).unwrap()[0] = g;
        grads
    }

    #[test]
    fn first_step_moves_by_lr_against_the_gradient() {
        for g in [0.3, -2.0, 1e-3] {
            let mut s = scalar_store(1.0);
            let mut adam = Adam::new(&s, AdamConfig::default());
            let mut grads = grads_with(&s, g);
            adam.step(&mut s, &mut grads, 0.01).unwrap();
            // m̂ = g, v̂ = g², update = lr g / (|g| + eps)
            let expected = 1.0 - 0.01 * g / (g.abs() + 1e-8);
            assert!((s.value(s.id("w").unwrap())[0] - expected).abs() < 1e-15);
            assert!(grads.slots()[0].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zero_gradient_leaves_parameter_and_decays_moments() {
        let mut s = scalar_store(0.5);
        let mut adam = Adam::new(&s, AdamConfig::default());
        let mut g = grads_with(&s, 1.0);
        adam.step(&mut s, &mut g, 0.1).unwrap();
        let before = s.value(s.id("w").unwrap())[0];
        let (m, v) = (adam.first_moments()[0][0], adam.second_moments()[0][0]);
        let mut zero = Gradients::for_store(&s);
        let mut frozen_copy = s.clone();
        adam.step(&mut frozen_copy, &mut zero, 0.0).unwrap();
        assert_eq!(frozen_copy.value(s.id("w").unwrap())[0], before);
        assert!((adam.first_moments()[0][0] - 0.9 * m).abs() < 1e-15);
        assert!((adam.second_moments()[0][0] - 0.999 * v).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_with_fresh_moments_is_a_no_op() {
        let mut s = scalar_store(0.5);
        let mut adam = Adam::new(&s, AdamConfig::default());
        let mut g = Gradients::for_store(&s);
        adam.step(&mut s, &mut g, 0.1).unwrap();
        assert_eq!(s.value(s.id("w").unwrap())[0], 0.5);
    }

    #[test]
    fn identical_models_stay_identical() {
        let mut a = scalar_store(0.2);
        let mut b = scalar_store(0.2);
        let mut oa = Adam::new(&a, AdamConfig::default());
        let mut ob = Adam::new(&b, AdamConfig::default());
        for g in [0.5, -0.1, 0.3] {
            let (mut ga, mut gb) = (grads_with(&a, g), grads_with(&b, g));
            oa.step(&mut a, &mut ga, 1e-3).unwrap();
            ob.step(&mut b, &mut gb, 1e-3).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn missing_gradients_are_a_state_error() {
        let mut s = scalar_store(0.2);
        let mut adam = Adam::new(&s, AdamConfig::default());
        let err = adam.step(&mut s, &mut Gradients::frozen(), 1e-3).unwrap_err();
        assert!(matches!(err, TrainError::State(_)));
        let mut other = ParamStore::<f64>::new();
        other.add("x", vec![2], vec![0.0, 0.0]).unwrap();
        assert!(adam.step(&mut s, &mut Gradients::for_store(&other), 1e-3).is_err());
    }

    #[test]
    fn plateau_examples() {
        assert_eq!(plateau_schedule(&[1.0, 0.9, 0.8, 0.7, 0.6, 0.5], 3, 0.5, 0.1), 0.1);
        assert_eq!(plateau_schedule(&[0.4; 4], 3, 0.5, 0.1), 0.05);
        assert_eq!(plateau_schedule(&[0.4; 3], 3, 0.5, 0.1), 0.1);

        let h = [1.0, 0.9, 0.91, 0.92, 0.93];
        let decays: Vec<bool> = (1..=h.len()).map(|n| plateau_schedule(&h[..n], 3, 0.5, 0.1) < 0.1).collect();
        assert_eq!(decays, vec![false, false, false, false, true]);
        // the next bad evaluation starts a fresh count
        assert_eq!(plateau_schedule(&[1.0, 0.9, 0.91, 0.92, 0.93, 0.94], 3, 0.5, 0.1), 0.1);
    }

    #[test]
    fn plateau_respects_floor() {
        assert_eq!(plateau_schedule(&[1.0, 1.0], 1, 0.5, 1.5e-7), MIN_LR);
        assert_eq!(plateau_schedule(&[1.0, 1.0], 1, 0.5, 0.0), 0.0);
    }
}
