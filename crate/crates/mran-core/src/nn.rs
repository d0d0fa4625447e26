//! Parameter storage, initialization and the layer building blocks used by
//! the model branches.

use crate::error::{Error, Result};
use crate::tape::{Padding, Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

struct ParamEntry {
    name: String,
    value: Tensor,
    grad: Vec<f32>,
}

/// Owns every trainable tensor of a model, in creation order. Gradients live
/// alongside the values; the optimizer walks entries by index.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = vec![0.0; value.numel()];
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f32] {
        &self.entries[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub(crate) fn add_grad(&mut self, id: ParamId, grad: &[f32]) {
        for (a, b) in self.entries[id.0].grad.iter_mut().zip(grad) {
            *a += b;
        }
    }

    /// Applies `f(value, grad)` to one entry; used by the optimizer.
    pub fn update(&mut self, id: ParamId, f: impl FnOnce(&mut [f32], &[f32])) {
        let e = &mut self.entries[id.0];
        f(e.value.data_mut(), &e.grad);
    }

    pub fn named_values(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let e = self
            .entries
            .iter_mut()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Incompatible(format!("unknown parameter `{name}`")))?;
        if e.value.shape() != value.shape() {
            return Err(Error::Incompatible(format!(
                "parameter `{name}` has shape {:?}, checkpoint provides {:?}",
                e.value.shape(),
                value.shape()
            )));
        }
        e.value = value;
        Ok(())
    }

    /// Snapshot of all values, paired with names.
    pub fn snapshot(&self) -> Vec<(String, Tensor)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.value.clone()))
            .collect()
    }
}

/// Fan-in scaled uniform initialization (`U(-sqrt(6/fan_in), +sqrt(6/fan_in))`),
/// biases zero.
pub fn init_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / fan_in as f32).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("consistent shape")
}

/// Forward context: tape plus the parameter store, caching the tape handle of
/// each parameter so a forward pass registers every parameter exactly once.
pub struct Fwd<'t, 's> {
    pub tape: &'t mut Tape,
    pub store: &'s ParamStore,
    pub mode: Mode,
    cache: Vec<Option<Var>>,
}

impl<'t, 's> Fwd<'t, 's> {
    pub fn new(tape: &'t mut Tape, store: &'s ParamStore, mode: Mode) -> Self {
        let cache = vec![None; store.len()];
        Fwd {
            tape,
            store,
            mode,
            cache,
        }
    }

    pub fn pvar(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.cache[id.0] {
            return v;
        }
        let v = self.tape.param(self.store, id);
        self.cache[id.0] = Some(v);
        v
    }
}

pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: Padding,
}

impl Conv2d {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: Padding,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_ch * k * k;
        let w = store.add(format!("{name}.weight"), init_uniform(vec![out_ch, in_ch, k, k], fan_in, rng));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(vec![out_ch]));
        Conv2d { w, b, stride, pad }
    }

    pub fn forward(&self, fwd: &mut Fwd, x: Var) -> Result<Var> {
        let w = fwd.pvar(self.w);
        let b = fwd.pvar(self.b);
        fwd.tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn init(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = store.add(format!("{name}.weight"), init_uniform(vec![d_out, d_in], d_in, rng));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(vec![d_out]));
        Linear { w, b }
    }

    pub fn forward(&self, fwd: &mut Fwd, x: Var) -> Result<Var> {
        let w = fwd.pvar(self.w);
        let b = fwd.pvar(self.b);
        fwd.tape.linear(x, w, b)
    }
}

pub const BN_MOMENTUM: f32 = 0.9;
pub const BN_EPS: f32 = 1e-5;

/// Channel-wise batch normalization with running statistics for eval mode.
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    name: String,
}

impl BatchNorm {
    pub fn init(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(vec![channels], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(vec![channels]));
        BatchNorm {
            gamma,
            beta,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            name: name.to_string(),
        }
    }

    pub fn forward(&mut self, fwd: &mut Fwd, x: Var) -> Result<Var> {
        let gamma = fwd.pvar(self.gamma);
        let beta = fwd.pvar(self.beta);
        let (out, stats) = fwd.tape.batchnorm(
            x,
            gamma,
            beta,
            &self.running_mean,
            &self.running_var,
            BN_EPS,
            fwd.mode,
        )?;
        if let Some((mean, var)) = stats {
            for (r, m) in self.running_mean.iter_mut().zip(&mean) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
            }
            for (r, v) in self.running_var.iter_mut().zip(&var) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
            }
        }
        Ok(out)
    }

    /// The non-trainable state this layer contributes to a checkpoint.
    pub fn running_state(&self) -> Vec<(String, Tensor)> {
        vec![
            (
                format!("{}.running_mean", self.name),
                Tensor::new(vec![self.running_mean.len()], self.running_mean.clone()).expect("shape"),
            ),
            (
                format!("{}.running_var", self.name),
                Tensor::new(vec![self.running_var.len()], self.running_var.clone()).expect("shape"),
            ),
        ]
    }

    pub fn load_running_state(&mut self, name: &str, t: &Tensor) -> Result<bool> {
        let want = self.running_mean.len();
        if name == format!("{}.running_mean", self.name) {
            if t.numel() != want {
                return Err(Error::Incompatible(format!("{name}: expected {want} values")));
            }
            self.running_mean = t.data().to_vec();
            return Ok(true);
        }
        if name == format!("{}.running_var", self.name) {
            if t.numel() != want {
                return Err(Error::Incompatible(format!("{name}: expected {want} values")));
            }
            self.running_var = t.data().to_vec();
            return Ok(true);
        }
        Ok(false)
    }
}
