//! Parameter storage, initialization and the Adam optimizer.

use std::collections::HashMap;

use autodiff::{ConvGeom, Gradients, Tape, Tensor, Var};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::seed::{rng_for, Stream};

/// A named parameter with its optional accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Named parameters in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Param {
            name,
            value,
            grad: None,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].value)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    /// Records every parameter on `tape`: as differentiable leaves when
    /// `trainable`, otherwise as constants (frozen).
    pub fn bind<'t, 's>(&'s self, tape: &'t Tape, trainable: bool) -> BoundParams<'t, 's> {
        let vars = self
            .entries
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        BoundParams { store: self, vars }
    }

    /// Binds the store to existing vars, one per parameter in store order.
    /// Used when something else owns the leaves, such as a gradient checker.
    pub fn bind_vars<'t, 's>(&'s self, vars: &[Var<'t>]) -> Result<BoundParams<'t, 's>> {
        if vars.len() != self.entries.len() {
            return Err(Error::Mismatch(format!(
                "{} vars for {} parameters",
                vars.len(),
                self.entries.len()
            )));
        }
        for (p, v) in self.entries.iter().zip(vars) {
            if v.shape() != p.value.shape() {
                return Err(Error::Mismatch(format!(
                    "{}: var shape {:?}, parameter shape {:?}",
                    p.name,
                    v.shape(),
                    p.value.shape()
                )));
            }
        }
        Ok(BoundParams {
            store: self,
            vars: vars.to_vec(),
        })
    }

    /// Adds the gradients found in `grads` to each parameter's gradient buffer.
    /// Parameters the loss does not reach receive an explicit zero gradient.
    pub fn accumulate_grads(&mut self, bound_vars: &[Var<'_>], grads: &Gradients) -> Result<()> {
        if bound_vars.len() != self.entries.len() {
            return Err(Error::Mismatch(format!(
                "bound {} vars for {} parameters",
                bound_vars.len(),
                self.entries.len()
            )));
        }
        for (p, &v) in self.entries.iter_mut().zip(bound_vars) {
            let g = grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
            p.grad = Some(match p.grad.take() {
                Some(prev) => prev.zip_map(&g, |a, b| a + b)?,
                None => g,
            });
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            p.grad = None;
        }
    }

    /// Bitwise equality of names, shapes and values (gradients ignored).
    pub fn bitwise_eq(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.value.bitwise_eq(&b.value))
    }
}

/// Parameters recorded on a tape for one forward pass.
pub struct BoundParams<'t, 's> {
    store: &'s ParamStore,
    vars: Vec<Var<'t>>,
}

impl<'t> BoundParams<'t, '_> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.store
            .index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

/// A convolution layer: `<name>.weight [cout, cin, k, k]` and `<name>.bias [cout]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub geom: ConvGeom,
    /// Multiplier on the Kaiming bound at init.
    pub init_gain: f64,
}

impl ConvSpec {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize, geom: ConvGeom) -> Self {
        Self {
            name: name.into(),
            cin,
            cout,
            kernel,
            geom,
            init_gain: 1.0,
        }
    }

    pub fn with_init_gain(mut self, gain: f64) -> Self {
        self.init_gain = gain;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.cout, self.cin, self.kernel, self.kernel]
    }

    pub fn fan_in(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    pub fn num_params(&self) -> usize {
        self.cout * self.fan_in() + self.cout
    }

    pub fn forward<'t>(&self, params: &BoundParams<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let w = params.get(&self.weight_name())?;
        let b = params.get(&self.bias_name())?;
        Ok(x.conv2d(w, Some(b), self.geom)?)
    }
}

/// Weight initialization: Kaiming-uniform over fan-in for conv weights, zero
/// biases, all drawn from one seeded stream in layer order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InitSpec {
    pub seed: u64,
}

impl InitSpec {
    pub fn kaiming_bound(fan_in: usize) -> f64 {
        (6.0 / fan_in as f64).sqrt()
    }
}

pub fn init_params(layers: &[ConvSpec], spec: InitSpec) -> Result<ParamStore> {
    let mut rng = rng_for(spec.seed, Stream::Init, 0);
    let mut store = ParamStore::new();
    for layer in layers {
        let bound = InitSpec::kaiming_bound(layer.fan_in()) * layer.init_gain;
        let weight = Tensor::from_fn(&layer.weight_shape(), |_| rng.gen_range(-bound..=bound));
        store.insert(layer.weight_name(), weight)?;
        store.insert(layer.bias_name(), Tensor::zeros(&[layer.cout]))?;
    }
    Ok(store)
}

/// Adam moments for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn bitwise_eq(&self, other: &AdamState) -> bool {
        self.t == other.t
            && self.beta1.to_bits() == other.beta1.to_bits()
            && self.beta2.to_bits() == other.beta2.to_bits()
            && self.eps.to_bits() == other.eps.to_bits()
            && self.m.len() == other.m.len()
            && self.m.iter().zip(&other.m).all(|(a, b)| a.bitwise_eq(b))
            && self.v.iter().zip(&other.v).all(|(a, b)| a.bitwise_eq(b))
    }
}

/// One bias-corrected Adam update. Consumes (clears) the gradients.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState, lr: f64) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::Mismatch(format!(
            "optimizer tracks {} tensors, store has {}",
            state.m.len(),
            params.len()
        )));
    }
    if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
        return Err(Error::MissingGradient(p.name.clone()));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let grad = p.grad.take().expect("checked above");
        let values = p.value.data_mut();
        for (((w, g), m), v) in values
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
