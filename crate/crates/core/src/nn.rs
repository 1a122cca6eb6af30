//! Parameter storage, equalized-learning-rate layers and the Adam optimizer.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{config_err, Result};
use crate::ops;

/// Leaky-ReLU slope used by every network in the crate.
pub const LRELU_SLOPE: f64 = 0.2;
/// He gain for leaky-ReLU layers.
pub const LRELU_GAIN: f64 = std::f64::consts::SQRT_2;

/// Named trainable tensors, iterated in name order.
#[derive(Clone, Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites an existing parameter in place.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| config_err!("unknown parameter {name}"))?;
        if var.dims() != value.dims() {
            return Err(config_err!(
                "parameter {name}: expected shape {:?}, got {:?}",
                var.dims(),
                value.dims()
            ));
        }
        var.set(&value.to_dtype(var.dtype())?)?;
        Ok(())
    }

    /// SHA-256 over parameter names, shapes and raw little-endian values.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in &self.vars {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            let values: Vec<f32> = var.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
            for v in values {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Independent copy with fresh storage.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut out = ParamStore::new();
        for (name, var) in &self.vars {
            out.insert(name.clone(), Var::from_tensor(&var.as_tensor().copy()?)?);
        }
        Ok(out)
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.vars.iter().map(|(k, v)| (k, v.as_tensor()))
    }

    pub fn from_tensors<I: IntoIterator<Item = (String, Tensor)>>(items: I) -> Result<Self> {
        let mut out = ParamStore::new();
        for (name, t) in items {
            out.insert(name, Var::from_tensor(&t)?);
        }
        Ok(out)
    }
}

/// How a fresh parameter is filled.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    StandardNormal,
    Const(f32),
}

/// Creates parameters on first use and hands back existing ones otherwise,
/// so the same network definition serves for both initialization and load.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
    strict: bool,
    frozen: bool,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
            strict: false,
            frozen: false,
        }
    }

    /// A builder that refuses to create anything: every parameter must
    /// already be present in the store.
    pub fn strict(mut self) -> Self {
        self.strict = true;
        self
    }

    /// Hands out detached views of the parameters: networks built this way
    /// pass gradients through to their inputs but never to their weights.
    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn pp(&mut self, name: &str) -> Builder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
            strict: self.strict,
            frozen: self.frozen,
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        if let Some(var) = self.store.get(&full) {
            if var.dims() != shape {
                return Err(config_err!(
                    "parameter {full}: stored shape {:?} does not match {:?}",
                    var.dims(),
                    shape
                ));
            }
            return Ok(if self.frozen {
                var.as_tensor().detach()
            } else {
                var.as_tensor().clone()
            });
        }
        if self.strict {
            return Err(config_err!("missing parameter {full}"));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::StandardNormal => (0..n).map(|_| self.rng.sample(StandardNormal)).collect(),
            Init::Const(c) => vec![c; n],
        };
        let var = Var::from_vec(data, shape, &Device::Cpu)?;
        let t = var.as_tensor().clone();
        self.store.insert(full, var);
        Ok(t)
    }
}

/// Fully connected layer with runtime weight scaling (`gain / sqrt(fan_in)`).
#[derive(Clone, Debug)]
pub struct Dense {
    weight: Tensor,
    bias: Tensor,
    scale: f64,
}

impl Dense {
    pub fn new(b: &mut Builder, n_in: usize, n_out: usize, gain: f64, bias_init: f32) -> Result<Self> {
        let weight = b.param("weight", &[n_in, n_out], Init::StandardNormal)?;
        let bias = b.param("bias", &[n_out], Init::Const(bias_init))?;
        Ok(Self {
            weight,
            bias,
            scale: gain / (n_in as f64).sqrt(),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let weight = self.weight.affine(self.scale, 0.0)?;
        Ok(x.matmul(&weight)?.broadcast_add(&self.bias)?)
    }

    /// Multiplier between the stored weight and the applied one.
    pub fn weight_scale(&self) -> f64 {
        self.scale
    }
}

/// Stride-one `k x k` convolution over NHWC tensors with "same" padding.
#[derive(Clone, Debug)]
pub struct Conv {
    weight: Tensor,
    bias: Tensor,
    k: usize,
    scale: f64,
}

impl Conv {
    pub fn new(b: &mut Builder, c_in: usize, c_out: usize, k: usize, gain: f64) -> Result<Self> {
        let fan_in = k * k * c_in;
        let weight = b.param("weight", &[fan_in, c_out], Init::StandardNormal)?;
        let bias = b.param("bias", &[c_out], Init::Const(0.0))?;
        Ok(Self {
            weight,
            bias,
            k,
            scale: gain / (fan_in as f64).sqrt(),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weight.affine(self.scale, 0.0)?;
        Ok(ops::conv_nhwc(x, &w, self.k)?.broadcast_add(&self.bias)?)
    }
}

pub fn lrelu(x: &Tensor) -> Result<Tensor> {
    Ok(ops::leaky_relu(x, LRELU_SLOPE)?)
}

/// Adam with bias correction; moments live in named tensors so the whole
/// optimizer state can be checkpointed and restored bit-exactly.
#[derive(Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every listed parameter that received a gradient.
    pub fn step<'p>(
        &mut self,
        params: impl IntoIterator<Item = (String, &'p Var)>,
        grads: &GradStore,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, var) in params {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let (m, v) = match self.moments.get(&name) {
                Some((m, v)) => (
                    ((m.affine(self.beta1, 0.0)?) + g.affine(1.0 - self.beta1, 0.0)?)?,
                    ((v.affine(self.beta2, 0.0)?) + g.sqr()?.affine(1.0 - self.beta2, 0.0)?)?,
                ),
                None => (
                    g.affine(1.0 - self.beta1, 0.0)?,
                    g.sqr()?.affine(1.0 - self.beta2, 0.0)?,
                ),
            };
            let update = m
                .affine(1.0 / c1, 0.0)?
                .div(&v.affine(1.0 / c2, 0.0)?.sqrt()?.affine(1.0, self.eps)?)?
                .affine(self.lr, 0.0)?;
            var.set(&(var.as_tensor() - update)?)?;
            self.moments.insert(name, (m, v));
        }
        Ok(())
    }

    /// Flattened state: `m.<name>` / `v.<name>` tensors plus the step count.
    pub fn state_tensors(&self) -> (u64, Vec<(String, Tensor)>) {
        let mut out = Vec::with_capacity(self.moments.len() * 2);
        for (name, (m, v)) in &self.moments {
            out.push((format!("m.{name}"), m.clone()));
            out.push((format!("v.{name}"), v.clone()));
        }
        (self.step, out)
    }

    pub fn restore(&mut self, step: u64, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step = step;
        self.moments.clear();
        for (key, m) in tensors {
            if let Some(name) = key.strip_prefix("m.") {
                let v = tensors
                    .get(&format!("v.{name}"))
                    .ok_or_else(|| config_err!("optimizer state lacks v.{name}"))?;
                self.moments.insert(name.to_string(), (m.clone(), v.clone()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn builder_reuses_existing_parameters() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = {
            let mut b = Builder::new(&mut store, &mut rng);
            Dense::new(&mut b.pp("fc"), 3, 2, 1.0, 0.0).unwrap()
        };
        assert_eq!(store.len(), 2);
        let b2 = {
            let mut b = Builder::new(&mut store, &mut rng).strict();
            Dense::new(&mut b.pp("fc"), 3, 2, 1.0, 0.0).unwrap()
        };
        let x = Tensor::ones((1, 3), DType::F32, &Device::Cpu).unwrap();
        let ya: Vec<f32> = a.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let yb: Vec<f32> = b2.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(ya, yb);

        let mut b = Builder::new(&mut store, &mut rng).strict();
        assert!(Dense::new(&mut b.pp("other"), 3, 2, 1.0, 0.0).is_err());
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", Var::new(&[3.0f32, -2.0], &Device::Cpu).unwrap());
        let mut opt = Adam::new(0.1, 0.9, 0.999);
        for _ in 0..300 {
            let x = store.get("x").unwrap();
            let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            opt.step(store.iter().map(|(k, v)| (k.clone(), v)), &grads).unwrap();
        }
        let x: Vec<f32> = store.get("x").unwrap().to_vec1().unwrap();
        assert!(x.iter().all(|v| v.abs() < 0.05), "{x:?}");
    }
}
