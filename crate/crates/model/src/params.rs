//! Named parameter store with deterministic initialization.
//!
//! Layers are built through a [`ParamBuilder`] that namespaces parameter
//! names like a path; the backing [`ParamStore`] owns the `Var`s, which is
//! what the optimizer updates and the checkpoint serializes. Keeping the
//! generator side and the discriminator side in two separate stores makes
//! optimizer separation structural.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};

use crate::error::{ModelError, Result};
use crate::rng::TrainRng;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    Normal { std: f64 },
    Uniform { lo: f64, hi: f64 },
    /// Torch-style conv/linear default: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    FanIn { fan_in: usize },
}

/// Ordered name -> Var map; ordering gives stable checkpoints and updates.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

/// Plain serializable tensor data: name -> (shape, f64 values).
pub type TensorBag = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self { vars: BTreeMap::new(), dtype, device }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn builder<'a>(&'a mut self, rng: &'a mut TrainRng) -> ParamBuilder<'a> {
        ParamBuilder { store: self, rng, prefix: String::new() }
    }

    fn create(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut TrainRng) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(ModelError::config(format!("duplicate parameter name {name}")));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Normal { std } => rng.normal_vec(n).into_iter().map(|v| v * std).collect(),
            Init::Uniform { lo, hi } => rng.uniform_vec(n, lo, hi),
            Init::FanIn { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                rng.uniform_vec(n, -bound, bound)
            }
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let tensor = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.vars.values().map(|v| v.as_tensor().elem_count()).sum()
    }

    pub fn to_bag(&self) -> Result<TensorBag> {
        let mut bag = TensorBag::new();
        for (name, var) in &self.vars {
            let t = var.as_tensor().to_dtype(DType::F64)?;
            let shape = t.dims().to_vec();
            let data = t.flatten_all()?.to_vec1::<f64>()?;
            bag.insert(name.clone(), (shape, data));
        }
        Ok(bag)
    }

    /// Overwrite every parameter from the bag; names and shapes must match
    /// the built model exactly.
    pub fn load_bag(&mut self, bag: &TensorBag) -> Result<()> {
        if bag.len() != self.vars.len() {
            return Err(ModelError::validation(format!(
                "checkpoint has {} parameters, model has {}",
                bag.len(),
                self.vars.len()
            )));
        }
        for (name, var) in &self.vars {
            let (shape, data) = bag
                .get(name)
                .ok_or_else(|| ModelError::validation(format!("missing parameter {name}")))?;
            if shape != var.as_tensor().dims() {
                return Err(ModelError::validation(format!(
                    "parameter {name}: checkpoint shape {:?} vs model {:?}",
                    shape,
                    var.as_tensor().dims()
                )));
            }
            let t = Tensor::from_vec(data.clone(), shape.as_slice(), &self.device)?
                .to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }
}

pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut TrainRng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder { store: self.store, rng: self.rng, prefix }
    }

    pub fn tensor(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.create(&full, shape, init, self.rng)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> Device {
        self.store.device.clone()
    }
}
