//! Parameter binding and the small layer structs shared by every family.

use std::collections::BTreeMap;

use qalam_nn::{init, Conv2dGeometry, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub(crate) type Named<T> = BTreeMap<String, Tensor<T>>;

pub(crate) fn is_buffer(name: &str) -> bool {
    name.ends_with("running_mean") || name.ends_with("running_var")
}

/// Builds a store from named tensors; batch-norm statistics become buffers.
pub(crate) fn store_from<T: Scalar>(tensors: Named<T>) -> ParamStore<T> {
    let mut store = ParamStore::new();
    for (name, t) in tensors {
        if name.ends_with("num_batches_tracked") {
            continue;
        }
        if is_buffer(&name) {
            store.buffer(name, t);
        } else {
            store.weight(name, t);
        }
    }
    store
}

/// Resolves names inside a store, checking shapes.
pub(crate) struct Binder<'a, T> {
    pub store: &'a ParamStore<T>,
    pub prefix: String,
}

impl<'a, T: Scalar> Binder<'a, T> {
    pub fn new(store: &'a ParamStore<T>, prefix: &str) -> Self {
        Self {
            store,
            prefix: prefix.to_string(),
        }
    }

    pub fn full(&self, name: &str) -> String {
        format!("{}{name}", self.prefix)
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.id(&self.full(name)).is_some()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        let full = self.full(name);
        self.store
            .id(&full)
            .ok_or_else(|| Error::InvalidSpec(format!("parameter {full} is missing")))
    }

    pub fn shape(&self, name: &str) -> Result<Vec<usize>> {
        Ok(self.store.value(self.id(name)?).shape().to_vec())
    }

    pub fn shaped(&self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let id = self.id(name)?;
        let got = self.store.value(id).shape();
        if got != shape {
            return Err(Error::InvalidSpec(format!(
                "parameter {} has shape {got:?}, expected {shape:?}",
                self.full(name)
            )));
        }
        Ok(id)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn bind<T: Scalar>(b: &Binder<T>, name: &str, out: usize, inp: usize) -> Result<Self> {
        let weight = b.shaped(&format!("{name}.weight"), &[out, inp])?;
        let bias_name = format!("{name}.bias");
        let bias = if b.has(&bias_name) {
            Some(b.shaped(&bias_name, &[out])?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    /// Fan-in uniform weights and zero bias.
    pub fn init<T: Scalar>(named: &mut Named<T>, name: &str, out: usize, inp: usize, rng: &mut ChaCha8Rng) {
        named.insert(format!("{name}.weight"), init::fan_in_uniform(&[out, inp], inp, rng));
        named.insert(format!("{name}.bias"), Tensor::zeros(vec![out]));
    }

    /// Normal weights with the given std and zero bias.
    pub fn init_normal<T: Scalar>(
        named: &mut Named<T>,
        name: &str,
        out: usize,
        inp: usize,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) {
        named.insert(format!("{name}.weight"), init::normal(&[out, inp], std, rng));
        named.insert(format!("{name}.bias"), Tensor::zeros(vec![out]));
    }

    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, store: &ParamStore<T>, x: Var<'g, T>) -> Var<'g, T> {
        x.linear(g.param(store, self.weight), self.bias.map(|b| g.param(store, b)))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn bind<T: Scalar>(b: &Binder<T>, name: &str, dim: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            gamma: b.shaped(&format!("{name}.weight"), &[dim])?,
            beta: b.shaped(&format!("{name}.bias"), &[dim])?,
            eps,
        })
    }

    pub fn init<T: Scalar>(named: &mut Named<T>, name: &str, dim: usize) {
        named.insert(format!("{name}.weight"), Tensor::full(vec![dim], T::one()));
        named.insert(format!("{name}.bias"), Tensor::zeros(vec![dim]));
    }

    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, store: &ParamStore<T>, x: Var<'g, T>) -> Var<'g, T> {
        x.layer_norm(g.param(store, self.gamma), g.param(store, self.beta), self.eps)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geometry: Conv2dGeometry,
}

impl Conv {
    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, store: &ParamStore<T>, x: Var<'g, T>) -> Var<'g, T> {
        x.conv2d(
            g.param(store, self.weight),
            self.bias.map(|b| g.param(store, b)),
            self.geometry,
        )
    }
}

#[derive(Clone, Debug)]
pub(crate) struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm {
    pub fn bind<T: Scalar>(b: &Binder<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.shaped(&format!("{name}.weight"), &[channels])?,
            beta: b.shaped(&format!("{name}.bias"), &[channels])?,
            mean: b.shaped(&format!("{name}.running_mean"), &[channels])?,
            var: b.shaped(&format!("{name}.running_var"), &[channels])?,
        })
    }

    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, store: &ParamStore<T>, x: Var<'g, T>) -> Var<'g, T> {
        x.batch_norm2d(
            g.param(store, self.gamma),
            g.param(store, self.beta),
            store,
            self.mean,
            self.var,
            BN_EPS,
            BN_MOMENTUM,
        )
    }
}
