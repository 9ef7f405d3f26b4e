use serde::{Deserialize, Serialize};

use super::param::round_f32;
use super::{NnError, Parameter};

/// Plain gradient descent: `p <- p - lr * grad` on trainable parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub learning_rate: f64,
}

impl Sgd {
    pub fn new(learning_rate: f64) -> Self {
        Self { learning_rate }
    }

    /// Updates every non-frozen parameter, then clears all gradients.
    /// Fails without touching anything if a trainable parameter has no
    /// gradient.
    pub fn step(&self, params: &mut [Parameter]) -> Result<(), NnError> {
        if let Some(p) = params
            .iter()
            .find(|p| !p.is_frozen() && p.tensor.grad().is_none())
        {
            return Err(NnError::MissingGradient(p.name.clone()));
        }
        for p in params.iter_mut() {
            if !p.is_frozen() {
                let grad = p.tensor.grad().expect("checked above").to_vec();
                let values = p.tensor.data_mut();
                for (v, g) in values.iter_mut().zip(&grad) {
                    *v -= self.learning_rate * g;
                }
                round_f32(values);
            }
            p.tensor.clear_grad();
        }
        Ok(())
    }
}
