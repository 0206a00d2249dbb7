//! Decoupled-weight-decay adaptive optimizer over a [`ParamStore`].
//!
//! Moments are owned here so they can be checkpointed bit-exactly; updates
//! are detached from the autograd graph.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::params::{ParamStore, TensorBag};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.8, beta2: 0.99, eps: 1e-8, weight_decay: 0.01 }
    }
}

pub struct AdamW {
    pub cfg: AdamWConfig,
    step_t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self { cfg, step_t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step_t
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// Apply one update to every parameter in `store` that has a gradient.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore) -> Result<()> {
        self.step_t += 1;
        let t = self.step_t as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);

        for (name, var) in store.iter() {
            let Some(grad) = grads.get(var) else { continue };
            let theta = var.as_tensor();
            let m_prev = match self.m.get(name) {
                Some(m) => m.clone(),
                None => theta.zeros_like()?,
            };
            let v_prev = match self.v.get(name) {
                Some(v) => v.clone(),
                None => theta.zeros_like()?,
            };
            let m = ((&m_prev * self.cfg.beta1)? + (grad * (1.0 - self.cfg.beta1))?)?.detach();
            let v = ((&v_prev * self.cfg.beta2)? + (grad.sqr()? * (1.0 - self.cfg.beta2))?)?
                .detach();
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.cfg.eps)?)?;
            let decayed = ((theta * (1.0 - self.cfg.lr * self.cfg.weight_decay))?
                - (update * self.cfg.lr)?)?
                .detach();
            var.set(&decayed)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }

    pub fn moments_bags(&self) -> Result<(TensorBag, TensorBag)> {
        let dump = |map: &BTreeMap<String, Tensor>| -> Result<TensorBag> {
            let mut bag = TensorBag::new();
            for (name, t) in map {
                let t = t.to_dtype(candle_core::DType::F64)?;
                bag.insert(name.clone(), (t.dims().to_vec(), t.flatten_all()?.to_vec1()?));
            }
            Ok(bag)
        };
        Ok((dump(&self.m)?, dump(&self.v)?))
    }

    pub fn restore_moments(
        &mut self,
        store: &ParamStore,
        m: &TensorBag,
        v: &TensorBag,
        step_t: u64,
    ) -> Result<()> {
        let load = |bag: &TensorBag| -> Result<BTreeMap<String, Tensor>> {
            let mut out = BTreeMap::new();
            for (name, (shape, data)) in bag {
                if store.get(name).is_none() {
                    return Err(ModelError::validation(format!(
                        "optimizer moment for unknown parameter {name}"
                    )));
                }
                let t = Tensor::from_vec(data.clone(), shape.as_slice(), store.device())?
                    .to_dtype(store.dtype())?;
                out.insert(name.clone(), t);
            }
            Ok(out)
        };
        self.m = load(m)?;
        self.v = load(v)?;
        self.step_t = step_t;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;
    use crate::rng::TrainRng;
    use candle_core::{DType, Device, Var};

    fn quadratic_store() -> (ParamStore, Var) {
        let mut store = ParamStore::new(DType::F64, Device::Cpu);
        let mut rng = TrainRng::seed_from(1);
        store.builder(&mut rng).tensor("x", &[4], Init::Const(3.0)).unwrap();
        let var = store.get("x").unwrap().clone();
        (store, var)
    }

    #[test]
    fn minimizes_quadratic() -> candle_core::Result<()> {
        let (store, var) = quadratic_store();
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() });
        for _ in 0..300 {
            let loss = var.as_tensor().sqr()?.sum_all()?;
            let grads = loss.backward()?;
            opt.step(&store, &grads).unwrap();
        }
        let x = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
        assert!(x.iter().all(|v| v.abs() < 1e-2), "{x:?}");
        Ok(())
    }

    #[test]
    fn decay_is_decoupled_from_gradient_magnitude() -> candle_core::Result<()> {
        let (store, var) = quadratic_store();
        let mut opt =
            AdamW::new(AdamWConfig { lr: 0.01, weight_decay: 0.5, ..Default::default() });
        // Vanishing gradient: the decoupled decay term must still shrink x.
        for _ in 0..10 {
            let loss = (var.as_tensor() * 1e-30)?.sum_all()?;
            let grads = loss.backward()?;
            opt.step(&store, &grads).unwrap();
        }
        let x = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
        let want = 3.0 * (1.0 - 0.01 * 0.5f64).powi(10);
        assert!((x[0] - want).abs() < 1e-6, "decay path off: {} vs {want}", x[0]);
        Ok(())
    }

    #[test]
    fn params_without_gradients_are_untouched() -> candle_core::Result<()> {
        let (store, var) = quadratic_store();
        let mut rng = TrainRng::seed_from(2);
        let unused = {
            let mut store = store; // shadow to extend mutably
            store.builder(&mut rng).tensor("y", &[2], Init::Const(7.0)).unwrap();
            store
        };
        let y = unused.get("y").unwrap().clone();
        let mut opt = AdamW::new(AdamWConfig::default());
        let loss = var.as_tensor().sqr()?.sum_all()?;
        let grads = loss.backward()?;
        opt.step(&unused, &grads).unwrap();
        assert_eq!(y.as_tensor().flatten_all()?.to_vec1::<f64>()?, vec![7.0, 7.0]);
        Ok(())
    }

    #[test]
    fn moments_roundtrip_continues_identically() {
        let run = |resume_at: Option<u64>| -> Vec<f64> {
            let (store, var) = quadratic_store();
            let mut opt = AdamW::new(AdamWConfig { lr: 0.05, ..Default::default() });
            let mut vals = Vec::new();
            for i in 0..20u64 {
                if Some(i) == resume_at {
                    let (m, v) = opt.moments_bags().unwrap();
                    let step_t = opt.step_count();
                    let mut opt2 = AdamW::new(opt.cfg);
                    opt2.restore_moments(&store, &m, &v, step_t).unwrap();
                    opt = opt2;
                }
                let loss = var.as_tensor().sqr().unwrap().sum_all().unwrap();
                let grads = loss.backward().unwrap();
                opt.step(&store, &grads).unwrap();
                vals.push(var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap()[0]);
            }
            vals
        };
        assert_eq!(run(None), run(Some(10)));
    }
}
