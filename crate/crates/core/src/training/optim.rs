use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Parameter, Tensor};

/// Adam with a constant learning rate and optional global-norm clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(learning_rate: f64, clip_norm: Option<f64>) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter accepted by `trainable`, using
    /// the gradients currently stored on the parameters.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        trainable: &dyn Fn(&Parameter) -> bool,
    ) -> Result<()> {
        self.step_all(&mut [params], trainable)
    }

    /// Like [`Adam::step`] over several stores sharing one clipping norm.
    /// Parameter names must be unique across the stores.
    pub fn step_all(
        &mut self,
        stores: &mut [&mut ParamStore],
        trainable: &dyn Fn(&Parameter) -> bool,
    ) -> Result<()> {
        let sq: f64 = stores
            .iter()
            .flat_map(|s| s.iter())
            .filter(|p| trainable(p))
            .map(|p| p.grad.data().iter().map(|g| g * g).sum::<f64>())
            .sum();
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient norm".into()));
        }
        let clip = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for store in stores.iter_mut() {
            for p in store.iter_mut().filter(|p| trainable(p)) {
                let (m, v) = self.moments.entry(p.name.clone()).or_insert_with(|| {
                    (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape()))
                });
                let grads = p.grad.data();
                let (md, vd) = (m.data_mut(), v.data_mut());
                for (i, x) in p.value.data_mut().iter_mut().enumerate() {
                    let gr = grads[i] * clip;
                    md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gr;
                    vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gr * gr;
                    let mhat = md[i] / bc1;
                    let vhat = vd[i] / bc2;
                    *x -= self.learning_rate * mhat / (vhat.sqrt() + self.eps);
                }
            }
        }
        Ok(())
    }
}
