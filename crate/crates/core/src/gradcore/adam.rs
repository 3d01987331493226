use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for a fixed group of parameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    ids: Vec<ParamId>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, store: &ParamStore, ids: Vec<ParamId>) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", config.lr)));
        }
        if !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) || config.eps <= 0.0 {
            return Err(Error::Config(format!("invalid Adam hyper-parameters {config:?}")));
        }
        let m = ids.iter().map(|&id| Tensor::zeros(store.value(id).shape())).collect();
        let v = ids.iter().map(|&id| Tensor::zeros(store.value(id).shape())).collect();
        Ok(Self {
            config,
            step: 0,
            ids,
            m,
            v,
        })
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn second_moment(&self, i: usize) -> &Tensor {
        &self.v[i]
    }

    /// One bias-corrected Adam update of every parameter in the group.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, &id) in self.ids.iter().enumerate() {
            let grad = store.grad(id).clone();
            grad.ensure_finite(store.name(id))?;
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let w = store.value_mut(id).data_mut();
            for j in 0..w.len() {
                let g = grad.data()[j] as f64;
                let mj = beta1 * m[j] as f64 + (1.0 - beta1) * g;
                let vj = beta2 * v[j] as f64 + (1.0 - beta2) * g * g;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let update = lr * (mj / c1) / ((vj / c2).sqrt() + eps);
                w[j] = (w[j] as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    state.step(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f32) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(vec![value; 4])).unwrap();
        (store, id)
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut store, id) = single(1.0);
        store.grad_mut(id).data_mut().copy_from_slice(&[0.3, -2.0, 1e-3, 50.0]);
        let lr = 0.01;
        let mut st = AdamState::new(AdamConfig::with_lr(lr), &store, vec![id]).unwrap();
        st.step(&mut store).unwrap();
        for (&w, g) in store.value(id).data().iter().zip([0.3f32, -2.0, 1e-3, 50.0]) {
            let delta = (1.0 - w) as f64;
            assert_eq!(delta.signum(), g.signum() as f64);
            assert!(delta.abs() >= 0.99 * lr && delta.abs() <= lr * (1.0 + 1e-6), "{delta}");
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut store, id) = single(0.5);
        let mut st = AdamState::new(AdamConfig::default(), &store, vec![id]).unwrap();
        st.step(&mut store).unwrap();
        assert!(store.value(id).data().iter().all(|&w| w == 0.5));
    }

    #[test]
    fn quadratic_descends_monotonically() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(1.0)).unwrap();
        let mut st = AdamState::new(AdamConfig::with_lr(0.1), &store, vec![id]).unwrap();
        let mut prev = 1.0f32;
        for _ in 0..3 {
            let w = store.value(id).item();
            store.grad_mut(id).data_mut()[0] = 2.0 * w;
            st.step(&mut store).unwrap();
            let now = store.value(id).item();
            assert!(now < prev);
            prev = now;
        }
        // Hand simulation: the first step is exactly lr, then 0.1 · m̂/√v̂.
        assert!((prev - 0.701_586).abs() < 1e-4, "{prev}");
        assert!(st.second_moment(0).data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn rejects_non_positive_learning_rate() {
        let (store, id) = single(0.0);
        let err = AdamState::new(AdamConfig::with_lr(0.0), &store, vec![id]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
