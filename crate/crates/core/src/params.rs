//! Named parameter storage and the per-tape binding used during forward passes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Every learnable tensor of a model, in registration order, with a unique name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "parameter `{name}` registered twice"
        );
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// Uniform initialization in `[-1/√fan_in, 1/√fan_in]`.
    pub fn uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound));
        self.add(name, t)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Number of scalars whose parameter name starts with `prefix`.
    pub fn census(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Replace values with those of `other`, which must hold the same names and shapes.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::ConfigInvalid(
                "parameter names differ from the model layout".into(),
            ));
        }
        for ((dst, src), name) in self.tensors.iter_mut().zip(&other.tensors).zip(&self.names) {
            if dst.shape() != src.shape() {
                return Err(Error::ConfigInvalid(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src.clone();
        }
        Ok(())
    }

    /// Record every parameter on `tape`; with `track` false they become constants.
    pub fn bind<'t>(&self, tape: &'t Tape, track: bool) -> Bound<'t> {
        let vars = self
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), track))
            .collect();
        Bound { tape, vars }
    }
}

/// Parameters of a [`ParamStore`] recorded on one tape.
pub struct Bound<'t> {
    pub tape: &'t Tape,
    vars: Vec<Var>,
}

impl<'t> Bound<'t> {
    /// Binding from variables already on `tape`, one per parameter in store order.
    pub fn from_vars(tape: &'t Tape, vars: Vec<Var>) -> Self {
        Bound { tape, vars }
    }

    /// Substitute the variable used for parameter `id`.
    pub fn replace(&mut self, id: ParamId, var: Var) {
        self.vars[id.0] = var;
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients for every parameter after `backward`, zeros where none flowed.
    pub fn grads(&self, store: &ParamStore) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(store.tensors())
            .map(|(&v, t)| self.tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

/// Hidden activation of a two-layer perceptron.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

/// `W x (+ b)` applied column-wise to a `in×cols` input.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.uniform(format!("{name}.weight"), &[output, input], input, rng);
        let bias = bias.then(|| store.uniform(format!("{name}.bias"), &[output, 1], input, rng));
        Linear { weight, bias }
    }

    pub fn forward(&self, b: &Bound, x: Var) -> Result<Var> {
        let y = b.tape.matmul(b.p(self.weight), x)?;
        match self.bias {
            Some(bias) => b.tape.add_bias(y, b.p(bias)),
            None => Ok(y),
        }
    }
}

/// Perceptron with one hidden layer, applied to every column of its input.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
    pub activation: Activation,
}

impl Mlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        activation: Activation,
        out_bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Mlp {
            hidden: Linear::new(store, &format!("{name}.hidden"), input, hidden, true, rng),
            out: Linear::new(store, &format!("{name}.out"), hidden, output, out_bias, rng),
            activation,
        }
    }

    pub fn forward(&self, b: &Bound, x: Var) -> Result<Var> {
        let h = self.hidden.forward(b, x)?;
        let h = match self.activation {
            Activation::Tanh => b.tape.tanh(h)?,
            Activation::Relu => b.tape.relu(h)?,
        };
        self.out.forward(b, h)
    }
}

/// Repeat a `d×1` column `cols` times, giving `d×cols`.
pub(crate) fn broadcast_cols(tape: &Tape, column: Var, cols: usize) -> Result<Var> {
    let ones = tape.constant(Tensor::filled(&[1, cols], 1.0));
    tape.matmul(column, ones)
}
