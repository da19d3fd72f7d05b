use ndarray::{Array2, ArrayView2};
use rand::Rng;

use super::layers::{relu_backward, Linear, Param};
use crate::scalar::Scalar;

/// Two-layer perceptron: `Linear -> ReLU -> Linear`.
#[derive(Debug, Clone)]
pub struct Mlp<T> {
    pub hidden: Linear<T>,
    pub output: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    input: Array2<T>,
    hidden: Array2<T>,
}

impl<T: Scalar> Mlp<T> {
    pub fn new(rng: &mut impl Rng, input_dim: usize, hidden_dim: usize, embedding_dim: usize) -> Self {
        Mlp {
            hidden: Linear::new(rng, input_dim, hidden_dim, 2f64.sqrt()),
            output: Linear::new(rng, hidden_dim, embedding_dim, 1.0),
        }
    }

    fn hidden_activations(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        self.hidden.forward(x).mapv_into(|v| v.max(T::zero()))
    }

    pub fn infer(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        let h = self.hidden_activations(x);
        self.output.forward(h.view())
    }

    pub fn forward_train(&self, x: ArrayView2<'_, T>) -> (Array2<T>, MlpCache<T>) {
        let h = self.hidden_activations(x);
        let out = self.output.forward(h.view());
        (
            out,
            MlpCache {
                input: x.to_owned(),
                hidden: h,
            },
        )
    }

    pub fn backward(&mut self, cache: &MlpCache<T>, grad_out: ArrayView2<'_, T>) -> Array2<T> {
        let mut gh = self.output.backward(cache.hidden.view(), grad_out);
        relu_backward(&mut gh, &cache.hidden);
        self.hidden.backward(cache.input.view(), gh.view())
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let [a, b] = self.hidden.params_mut();
        let [c, d] = self.output.params_mut();
        vec![a, b, c, d]
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let [a, b] = self.hidden.params();
        let [c, d] = self.output.params();
        vec![a, b, c, d]
    }
}
