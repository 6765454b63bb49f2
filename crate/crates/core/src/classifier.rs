use l2p_tensor::{Graph, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::rng::{self, purpose};

/// Linear head `x·W + b` over `D` features and `C` classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Classifier<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Classifier<T> {
    pub fn new(features: usize, classes: usize, seed: u64) -> Self {
        let mut rng = rng::rng_for(seed, &[purpose::HEAD_INIT]);
        let limit = (6.0 / (features + classes) as f64).sqrt();
        let weight = Tensor::from_fn([features, classes], |_| T::of(rng.random_range(-limit..limit))).with_grad();
        let bias = Tensor::zeros([classes]).with_grad();
        Classifier { weight, bias }
    }

    pub fn num_classes(&self) -> usize {
        self.bias.numel()
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> (Var, Var) {
        if trainable {
            (g.param(&self.weight), g.param(&self.bias))
        } else {
            let w = g.constant(self.weight.shape().clone(), self.weight.data().to_vec()).expect("shape");
            let b = g.constant(self.bias.shape().clone(), self.bias.data().to_vec()).expect("shape");
            (w, b)
        }
    }

    pub fn apply(g: &mut Graph<T>, features: Var, weight: Var, bias: Var) -> Result<Var> {
        let z = g.matmul(features, weight)?;
        Ok(g.add(z, bias)?)
    }

    pub fn accumulate(&mut self, g: &Graph<T>, weight: Var, bias: Var) -> Result<()> {
        if let Some(gw) = g.grad(weight) {
            self.weight.accumulate_grad(gw)?;
        }
        if let Some(gb) = g.grad(bias) {
            self.bias.accumulate_grad(gb)?;
        }
        Ok(())
    }

    /// Argmax class per row of `features [B × D]`.
    pub fn predict(&self, features: &Tensor<T>) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let x = g.param(features);
        let (w, b) = self.bind(&mut g, false);
        let logits = Self::apply(&mut g, x, w, b)?;
        let c = self.num_classes();
        Ok(g.value(logits).chunks(c).map(l2p_tensor::kernels::argmax).collect())
    }

    pub fn cast<U: Scalar>(&self) -> Classifier<U> {
        Classifier { weight: self.weight.cast(), bias: self.bias.cast() }
    }
}
