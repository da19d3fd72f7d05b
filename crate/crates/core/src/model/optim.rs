use serde::{Deserialize, Serialize};

use super::layers::Param;
use crate::scalar::Scalar;

/// SGD with heavy-ball momentum and L2 weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    pub fn step<'a, T: Scalar + 'a>(&self, params: impl IntoIterator<Item = &'a mut Param<T>>) {
        let lr = T::of(self.lr);
        let mu = T::of(self.momentum);
        let wd = T::of(self.weight_decay);
        for p in params {
            let decay = if p.decay { wd } else { T::zero() };
            ndarray::Zip::from(&mut p.value)
                .and(&mut p.velocity)
                .and(&p.grad)
                .for_each(|w, v, &g| {
                    *v = mu * *v + g + decay * *w;
                    *w -= lr * *v;
                });
        }
    }

    /// Clears momentum buffers, e.g. when a new training phase starts.
    pub fn reset<'a, T: Scalar + 'a>(params: impl IntoIterator<Item = &'a mut Param<T>>) {
        for p in params {
            p.velocity.fill(T::zero());
        }
    }
}
