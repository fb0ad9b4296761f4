//! Adam with bias correction.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    /// Per-parameter (first moment, second moment), keyed by tensor name.
    pub moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One update of `params` in place.
    pub fn step<P: Parameters<T>>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let mut by_name: HashMap<String, Tensor<T>> = HashMap::new();
        grads.for_each_tensor(&mut |name, g| {
            by_name.insert(name.to_string(), g.clone());
        });

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let corr1 = T::lit(1.0 - c.beta1.powi(t));
        let corr2 = T::lit(1.0 - c.beta2.powi(t));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        let one = T::one();

        let mut failure: Option<Error> = None;
        let moments = &mut self.moments;
        params.for_each_tensor_mut(&mut |name, p| {
            if failure.is_some() {
                return;
            }
            let Some(g) = by_name.get(name) else {
                failure = Some(Error::Config(format!("no gradient for parameter `{name}`")));
                return;
            };
            if g.shape() != p.shape() {
                failure = Some(Error::shape(
                    "adam_step",
                    format!("`{name}`: parameter {:?} vs gradient {:?}", p.shape(), g.shape()),
                ));
                return;
            }
            let (m, v) = moments
                .entry(name.to_string())
                .or_insert_with(|| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())));
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let mhat = *mi / corr1;
                let vhat = *vi / corr2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}
