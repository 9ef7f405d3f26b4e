use rand::Rng;
use sha2::{Digest, Sha256};

use super::{Grads, NnError, Tape, Tensor, Var};

/// Rounds every value to the nearest `f32`; parameters are stored at
/// 32-bit precision so checkpoints round-trip exactly.
pub(crate) fn round_f32(values: &mut [f64]) {
    for v in values {
        *v = f64::from(*v as f32);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    frozen: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, mut tensor: Tensor) -> Self {
        round_f32(tensor.data_mut());
        Self {
            name: name.into(),
            tensor,
            frozen: false,
        }
    }

    /// Kaiming-uniform weights, bound `sqrt(6 / fan_in)`.
    pub fn kaiming_uniform(name: &str, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        Self::new(name, Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    pub fn zeros(name: &str, shape: &[usize]) -> Self {
        Self::new(name, Tensor::zeros(shape))
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
        if frozen {
            self.tensor.clear_grad();
        }
    }
}

/// Ordered collection of named parameters belonging to one model part.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_params(params: Vec<Parameter>) -> Self {
        Self { params }
    }

    pub fn push(&mut self, p: Parameter) -> usize {
        self.params.push(p);
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, i: usize) -> &Parameter {
        &self.params[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Parameter {
        &mut self.params[i]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Parameter> {
        self.params.iter_mut()
    }

    pub fn as_mut_slice(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn freeze(&mut self) {
        self.params.iter_mut().for_each(|p| p.set_frozen(true));
    }

    pub fn all_frozen(&self) -> bool {
        self.params.iter().all(Parameter::is_frozen)
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.clear_grad());
    }

    /// Registers every parameter on the tape, in order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p)).collect()
    }

    /// Moves gradients for `bound` (as returned by [`bind`](Self::bind))
    /// into the parameters' grad slots. Frozen parameters receive nothing.
    pub fn absorb(&mut self, bound: &[Var], grads: &Grads) -> Result<(), NnError> {
        for (p, &v) in self.params.iter_mut().zip(bound) {
            if p.frozen {
                continue;
            }
            if let Some(g) = grads.get(v) {
                p.tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Little-endian `f32` payload of all parameters in order.
    pub fn payload_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.num_values() * 4);
        for p in &self.params {
            for &v in p.tensor.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    /// Hex SHA-256 of [`payload_bytes`](Self::payload_bytes).
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.payload_bytes()))
    }
}
