//! Parameter storage and the two basic layers (1-D convolution and dense).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{sizing, Result};
use crate::tensor::{adam_step, AdamConfig, AdamState, Gradients, Tape, Tensor, Var};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Owned, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
    names: Vec<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.tensors.push(value);
        self.names.push(name.into());
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces every tensor, keeping ids valid. Shapes must match.
    pub fn load(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        if tensors.len() != self.tensors.len() {
            return Err(sizing(format!(
                "expected {} tensors, got {}",
                self.tensors.len(),
                tensors.len()
            )));
        }
        for (i, (old, new)) in self.tensors.iter().zip(&tensors).enumerate() {
            if old.shape() != new.shape() {
                return Err(sizing(format!(
                    "tensor {i} ({}) has shape {:?}, expected {:?}",
                    self.names[i],
                    new.shape(),
                    old.shape()
                )));
            }
        }
        self.tensors = tensors;
        Ok(())
    }

    /// Places every parameter on `tape`; `trainable = false` binds them as
    /// constants so no gradient is accumulated for them.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), trainable))
            .collect();
        Bound { vars }
    }

    /// Gradients for every parameter in store order.
    pub fn collect_grads(&self, bound: &Bound, grads: &Gradients) -> Vec<Vec<f64>> {
        self.tensors
            .iter()
            .zip(&bound.vars)
            .map(|(t, &v)| grads.get_or_zeros(v, t.numel()))
            .collect()
    }

    pub fn adam_update(
        &mut self,
        grads: &[Vec<f64>],
        state: &mut AdamState,
        config: &AdamConfig,
    ) -> Result<()> {
        adam_step(&mut self.tensors, grads, state, config)
    }

    pub fn adam_state(&self) -> AdamState {
        AdamState::new(&self.tensors)
    }
}

/// Tape handles for one store, valid for a single forward pass.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps vars already on a tape, in store order (used by gradient checks).
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Convolutions feed swish or leaky activations, which roughly halve the
/// second moment; this keeps activation scale steady through depth.
const CONV_GAIN: f64 = std::f64::consts::SQRT_2;

/// Uniform initialisation in `±gain·sqrt(3 / fan_in)`.
pub(crate) fn init_uniform(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    fan_in: usize,
    gain: f64,
) -> Tensor {
    let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// 1-D convolution layer with optional bias and "same"-style padding
/// `kernel / 2`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init_uniform(rng, &[c_out, c_in, kernel], c_in * kernel, CONV_GAIN),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[c_out])));
        Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv1d(x, p.var(self.weight), self.stride, self.padding)?;
        match self.bias {
            Some(b) => tape.add_bias(y, p.var(b)),
            None => Ok(y),
        }
    }
}

/// Dense layer `y = x·Wᵀ + b` on `[N, in]` inputs; `W` is `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init_uniform(rng, &[d_out, d_in], d_in, 1.0),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[d_out])));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul_ex(x, p.var(self.weight), true)?;
        match self.bias {
            Some(b) => tape.add_bias(y, p.var(b)),
            None => Ok(y),
        }
    }
}
