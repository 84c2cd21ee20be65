use serde::{Deserialize, Serialize};

use super::{AutogradError, ParamStore, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with one pair of moment buffers per parameter.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, t)| vec![T::zero(); t.numel()])
                .collect()
        };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr`. Parameters without a gradient are
    /// left alone. A non-finite gradient anywhere aborts the whole step
    /// before anything is modified.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[Option<Vec<T>>],
        lr: f64,
    ) -> Result<(), AutogradError> {
        if grads.len() != store.len() {
            return Err(AutogradError::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for (id, g) in store.ids().zip(grads) {
            if let Some(g) = g {
                if g.len() != store.get(id).numel() {
                    return Err(AutogradError::Shape(format!(
                        "gradient for {}",
                        store.name(id)
                    )));
                }
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(AutogradError::NonFiniteGradient(store.name(id).to_string()));
                }
            }
        }
        self.step += 1;
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let (b1t, b2t) = (T::of(b1), T::of(b2));
        let (one_b1, one_b2) = (T::of(1.0 - b1), T::of(1.0 - b2));
        let step_size = T::of(lr / bc1);
        let inv_sqrt_bc2 = T::of(1.0 / bc2.sqrt());
        let eps = T::of(self.config.eps);
        for (i, (id, g)) in store.ids().zip(grads).enumerate().collect::<Vec<_>>() {
            let Some(g) = g else { continue };
            let p = store.get_mut(id).data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = b1t * m[j] + one_b1 * g[j];
                v[j] = b2t * v[j] + one_b2 * g[j] * g[j];
                p[j] -= step_size * m[j] / (v[j].sqrt() * inv_sqrt_bc2 + eps);
            }
        }
        Ok(())
    }

    /// Moment buffers as named tensors for checkpointing.
    pub fn state_tensors(&self, store: &ParamStore<T>, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (i, (name, t)) in store.iter().enumerate() {
            out.push((
                format!("{prefix}/m/{name}"),
                Tensor::new(t.shape(), self.m[i].clone()).unwrap(),
            ));
            out.push((
                format!("{prefix}/v/{name}"),
                Tensor::new(t.shape(), self.v[i].clone()).unwrap(),
            ));
        }
        out
    }

    pub fn load_state<U: Scalar>(
        &mut self,
        store: &ParamStore<T>,
        prefix: &str,
        entries: &[(String, Tensor<U>)],
        step: u64,
    ) -> Result<(), AutogradError> {
        for (i, (name, t)) in store.iter().enumerate() {
            for (kind, buf) in [("m", &mut self.m[i]), ("v", &mut self.v[i])] {
                let key = format!("{prefix}/{kind}/{name}");
                let (_, s) = entries
                    .iter()
                    .find(|(n, _)| *n == key)
                    .ok_or(AutogradError::UnknownParam(key))?;
                if s.shape() != t.shape() {
                    return Err(AutogradError::Shape(format!("{prefix} state for {name}")));
                }
                *buf = s.cast::<T>().into_data();
            }
        }
        self.step = step;
        Ok(())
    }
}

/// Constant learning rate for `constant_epochs`, then linear decay to zero
/// over `decay_epochs`. Epochs are counted from 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearDecaySchedule {
    pub lr: f64,
    pub constant_epochs: usize,
    pub decay_epochs: usize,
}

impl LinearDecaySchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch <= self.constant_epochs {
            return self.lr;
        }
        if self.decay_epochs == 0 {
            return 0.0;
        }
        let t = (epoch - self.constant_epochs) as f64 / self.decay_epochs as f64;
        self.lr * (1.0 - t).max(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_matches_table() {
        let s = LinearDecaySchedule {
            lr: 2e-4,
            constant_epochs: 200,
            decay_epochs: 200,
        };
        assert_eq!(s.lr_at(1), 2e-4);
        assert_eq!(s.lr_at(200), 2e-4);
        assert!((s.lr_at(300) - 1e-4).abs() < 1e-18);
        assert_eq!(s.lr_at(400), 0.0);
        assert_eq!(s.lr_at(450), 0.0);
    }

    fn quad_store(x: f64) -> (ParamStore<f64>, super::super::ParamId) {
        let mut s = ParamStore::new("q");
        let id = s.add("x", Tensor::scalar(x));
        (s, id)
    }

    #[test]
    fn single_step_descends() {
        let (mut s, id) = quad_store(1.0);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        // f(x) = x², f'(1) = 2
        adam.step(&mut s, &[Some(vec![2.0])], 0.1).unwrap();
        assert!(s.get(id).item() < 1.0);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let (mut s, id) = quad_store(0.7);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        for _ in 0..5 {
            adam.step(&mut s, &[Some(vec![0.0])], 0.1).unwrap();
        }
        assert_eq!(s.get(id).item(), 0.7);
    }

    #[test]
    fn converges_on_convex_quadratic() {
        // f(x, y) = (x - 3)² + 2(y + 1)², minimum at (3, -1).
        let mut s = ParamStore::new("q");
        let id = s.add("p", Tensor::new(&[2], vec![0.0f64, 0.0]).unwrap());
        let mut adam = Adam::new(
            AdamConfig {
                beta1: 0.9,
                ..AdamConfig::default()
            },
            &s,
        );
        for t in 0..200 {
            let p = s.get(id).data().to_vec();
            let g = vec![2.0 * (p[0] - 3.0), 4.0 * (p[1] + 1.0)];
            let lr = if t < 150 { 0.1 } else { 0.01 };
            adam.step(&mut s, &[Some(g)], lr).unwrap();
        }
        let p = s.get(id).data();
        assert!(
            (p[0] - 3.0).abs() < 1e-3 && (p[1] + 1.0).abs() < 1e-3,
            "{p:?}"
        );
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let (mut s, id) = quad_store(1.0);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        let err = adam.step(&mut s, &[Some(vec![f64::NAN])], 0.1).unwrap_err();
        assert!(matches!(err, AutogradError::NonFiniteGradient(_)));
        assert_eq!(s.get(id).item(), 1.0);
        assert_eq!(adam.step_count(), 0);
    }
}
