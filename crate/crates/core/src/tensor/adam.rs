use serde::{Deserialize, Serialize};

use super::tape::Gradients;
use super::{ParamId, ParamStore, Real};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moments are kept per parameter in store order.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    cfg: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, cfg: AdamConfig) -> Self {
        let zeros = |id| vec![T::zero(); store.get(id).len()];
        Adam { cfg, m: store.ids().map(zeros).collect(), v: store.ids().map(zeros).collect(), t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, id: ParamId) -> &[T] {
        &self.m[id.0]
    }

    pub fn second_moment(&self, id: ParamId) -> &[T] {
        &self.v[id.0]
    }

    /// One update. `lr(id)` gives each parameter's learning rate, which is how
    /// parameter groups get their own rates.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: impl Fn(ParamId) -> f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::InvalidArgument(format!(
                "gradients cover {} parameters, store has {}",
                grads.len(),
                store.len()
            )));
        }
        for id in store.ids() {
            if grads.get(id).iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient { name: store.name(id).to_string() });
            }
        }
        self.t += 1;
        let (b1, b2) = (T::of(self.cfg.beta1), T::of(self.cfg.beta2));
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        let eps = T::of(self.cfg.eps);
        for id in store.ids() {
            let rate = lr(id);
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let g = grads.get(id);
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
            }
            if rate == 0.0 {
                continue;
            }
            let step = T::of(rate / bc1);
            let inv_bc2 = T::of(1.0 / bc2);
            let p = store.get_mut(id).data_mut();
            for i in 0..g.len() {
                p[i] -= step * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    fn grads_for(store: &ParamStore<f64>, g: &[f64]) -> Gradients<f64> {
        // loss = sum(g * p) has gradient g
        let mut tape = Tape::new();
        let id = store.ids().next().unwrap();
        let p = tape.param(store, id);
        let c = tape.constant(Tensor::new(store.get(id).shape(), g.to_vec()).unwrap());
        let prod = tape.mul(p, c).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        tape.gradients(store)
    }

    /// Scalar re-implementation used as the oracle.
    fn scalar_adam(p0: f64, gs: &[f64], lr: f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut m, mut v, mut p) = (0.0, 0.0, p0);
        let mut out = vec![];
        for (t, &g) in gs.iter().enumerate() {
            let t = (t + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            p -= lr * mh / (vh.sqrt() + eps);
            out.push(p);
        }
        out
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap()).unwrap();
        let mut adam = Adam::new(&store, AdamConfig::default());
        let g = grads_for(&store, &[0.3, -4.0, 1e-3]);
        adam.step(&mut store, &g, |_| 0.01).unwrap();
        let moved: Vec<f64> = store.get(id).data().iter().zip([1.0, -2.0, 0.5]).map(|(a, b)| a - b).collect();
        assert!((moved[0] + 0.01).abs() < 1e-6);
        assert!((moved[1] - 0.01).abs() < 1e-6);
        assert!((moved[2] + 0.01).abs() < 1e-4);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap()).unwrap();
        let mut adam = Adam::new(&store, AdamConfig::default());
        let g = grads_for(&store, &[0.0, 0.0]);
        adam.step(&mut store, &g, |_| 0.1).unwrap();
        assert_eq!(store.get(id).data(), &[1.0, 2.0]);
    }

    #[test]
    fn matches_scalar_oracle_over_two_steps() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(0.7)).unwrap();
        let mut adam = Adam::new(&store, AdamConfig::default());
        let want = scalar_adam(0.7, &[0.25, 0.25], 0.05);
        let mut prev = 0.7;
        let mut deltas = vec![];
        for expected in want {
            let g = grads_for(&store, &[0.25]);
            adam.step(&mut store, &g, |_| 0.05).unwrap();
            let now = store.get(id).item();
            assert!((now - expected).abs() < 1e-15);
            deltas.push((now - prev).abs());
            prev = now;
        }
        assert!(deltas[1] <= deltas[0] + 1e-12);
    }

    #[test]
    fn zero_learning_rate_is_bitwise_noop() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_f64(&[3], &[-0.0, 1e-300, 3.5]).unwrap()).unwrap();
        let before: Vec<u64> = store.get(id).data().iter().map(|v| v.to_bits()).collect();
        let mut adam = Adam::new(&store, AdamConfig::default());
        for _ in 0..3 {
            let g = grads_for(&store, &[1.0, -1.0, 2.0]);
            adam.step(&mut store, &g, |_| 0.0).unwrap();
        }
        let after: Vec<u64> = store.get(id).data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut store = ParamStore::new();
        store.add("layer.weight", Tensor::from_f64(&[1], &[1.0]).unwrap()).unwrap();
        let mut adam = Adam::new(&store, AdamConfig::default());
        let g = grads_for(&store, &[f64::NAN]);
        match adam.step(&mut store, &g, |_| 0.1) {
            Err(Error::NonFiniteGradient { name }) => assert_eq!(name, "layer.weight"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
