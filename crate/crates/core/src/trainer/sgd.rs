use crate::error::{Error, Result};
use crate::tensor::{Gradients, ParamStore, Tensor};

/// Momentum SGD with L2 weight decay folded into the velocity:
/// `v <- m v + g + wd p`, then `p <- p - lr v`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be finite and >= 0",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight decay {} must be >= 0",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Gradient sums over a mini-batch, one buffer per parameter, filled in
/// sample order so the result does not depend on scheduling.
#[derive(Clone, Debug)]
pub struct GradBuffer {
    sums: Vec<Vec<f32>>,
    samples: usize,
}

impl GradBuffer {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            sums: store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect(),
            samples: 0,
        }
    }

    pub fn add(&mut self, grads: &Gradients) {
        for (id, g) in grads.params() {
            for (s, v) in self.sums[id.0].iter_mut().zip(g.data()) {
                *s += v;
            }
        }
        self.samples += 1;
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    /// Per-parameter mean gradients; resets the buffer.
    pub fn take_mean(&mut self) -> Vec<Vec<f32>> {
        let scale = 1.0 / self.samples.max(1) as f32;
        self.samples = 0;
        self.sums
            .iter_mut()
            .map(|s| {
                let mean = s.iter().map(|v| v * scale).collect();
                s.iter_mut().for_each(|v| *v = 0.0);
                mean
            })
            .collect()
    }
}

/// Velocity buffers, one per parameter, zero-initialised.
#[derive(Clone, Debug)]
pub struct Velocity(pub Vec<Vec<f32>>);

impl Velocity {
    pub fn zeros(store: &ParamStore) -> Self {
        Self(store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect())
    }
}

/// One update of every parameter. `grads[i]` belongs to `ParamId(i)`.
/// Nothing is written if any updated value would be non-finite.
pub fn sgd_step(store: &mut ParamStore, grads: &[Vec<f32>], velocity: &mut Velocity, cfg: &SgdConfig) -> Result<()> {
    if grads.len() != store.len() || velocity.0.len() != store.len() {
        return Err(Error::Shape(format!(
            "sgd_step: {} gradients and {} velocities for {} parameters",
            grads.len(),
            velocity.0.len(),
            store.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    let mut new_v = Vec::with_capacity(ids.len());
    let mut new_p = Vec::with_capacity(ids.len());
    for (&id, g) in ids.iter().zip(grads) {
        let p = store.get(id);
        if g.len() != p.numel() {
            return Err(Error::Shape(format!(
                "sgd_step: gradient size mismatch for {}",
                store.name(id)
            )));
        }
        let v: Vec<f32> = velocity.0[id.0]
            .iter()
            .zip(g)
            .zip(p.data())
            .map(|((&v, &g), &w)| cfg.momentum * v + g + cfg.weight_decay * w)
            .collect();
        let w: Vec<f32> = p.data().iter().zip(&v).map(|(&w, &v)| w - cfg.lr * v).collect();
        if w.iter().chain(&v).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("update of {}", store.name(id))));
        }
        new_p.push(Tensor::new(p.shape().to_vec(), w)?);
        new_v.push(v);
    }
    for ((id, p), v) in ids.into_iter().zip(new_p).zip(new_v) {
        store.set(id, p)?;
        velocity.0[id.0] = v;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(value: f32) -> (ParamStore, Velocity) {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new([1], vec![value]).unwrap());
        let v = Velocity::zeros(&s);
        (s, v)
    }

    #[test]
    fn two_steps_on_a_quadratic() {
        // f(w) = w^2 / 2, so g = w; with m = 0.9, lr = 0.1, wd = 0:
        // v1 = w0,           w1 = 0.9 w0
        // v2 = 0.9 w0 + w1,  w2 = w1 - 0.1 v2 = 0.72 w0
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let (mut s, mut v) = one(2.0);
        for _ in 0..2 {
            let w = s.get(crate::ParamId(0)).data()[0];
            sgd_step(&mut s, &[vec![w]], &mut v, &cfg).unwrap();
        }
        assert!((s.get(crate::ParamId(0)).data()[0] - 1.44).abs() < 1e-6);
        assert!((v.0[0][0] - 3.6).abs() < 1e-6);
    }

    #[test]
    fn plain_descent_without_momentum() {
        let cfg = SgdConfig {
            lr: 0.5,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        let (mut s, mut v) = one(1.0);
        sgd_step(&mut s, &[vec![0.4]], &mut v, &cfg).unwrap();
        assert!((s.get(crate::ParamId(0)).data()[0] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_and_decay_is_identity() {
        let cfg = SgdConfig {
            lr: 0.3,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let (mut s, mut v) = one(1.5);
        for _ in 0..3 {
            sgd_step(&mut s, &[vec![0.0]], &mut v, &cfg).unwrap();
        }
        assert_eq!(s.get(crate::ParamId(0)).data()[0], 1.5);
    }

    #[test]
    fn decay_shrinks_norm() {
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.5,
            weight_decay: 0.01,
        };
        let (mut s, mut v) = one(-3.0);
        let mut last = 3.0f32;
        for _ in 0..5 {
            sgd_step(&mut s, &[vec![0.0]], &mut v, &cfg).unwrap();
            let now = s.get(crate::ParamId(0)).data()[0].abs();
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let cfg = SgdConfig {
            lr: 0.0,
            momentum: 0.9,
            weight_decay: 1e-5,
        };
        let (mut s, mut v) = one(0.25);
        for _ in 0..4 {
            sgd_step(&mut s, &[vec![7.0]], &mut v, &cfg).unwrap();
        }
        assert_eq!(s.get(crate::ParamId(0)).data()[0], 0.25);
    }

    #[test]
    fn non_finite_update_is_refused() {
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        let (mut s, mut v) = one(1.0);
        let err = sgd_step(&mut s, &[vec![f32::NAN]], &mut v, &cfg).unwrap_err();
        assert!(err.is_numerical());
        assert_eq!(s.get(crate::ParamId(0)).data()[0], 1.0);
    }
}
