//! Named convolution parameters and their differentiable views.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{backward, Gradients, Var};
use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Weight and optional bias of one convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> Layer<T> {
    /// Uniform in `[-s, s]`, `s = sqrt(6 / (fan_in + fan_out))`; zero bias.
    pub fn glorot<R: Rng>(weight_shape: Shape, with_bias: bool, bias_len: usize, rng: &mut R) -> Self {
        let k2 = weight_shape.h * weight_shape.w;
        let fan = (weight_shape.n + weight_shape.c) * k2;
        let s = (6.0 / fan as f64).sqrt();
        Layer {
            weight: Tensor::uniform(weight_shape, -s, s, rng),
            bias: with_bias.then(|| Tensor::zeros(Shape::new(bias_len, 1, 1, 1))),
        }
    }

    pub fn for_conv<R: Rng>(spec: &ConvSpec, with_bias: bool, rng: &mut R) -> Self {
        Self::glorot(spec.weight_shape(), with_bias, spec.out_channels, rng)
    }

    pub fn for_transpose<R: Rng>(spec: &ConvSpec, rng: &mut R) -> Self {
        Self::glorot(spec.transpose_weight_shape(), true, spec.out_channels, rng)
    }

    pub fn zeroed(&self) -> Self {
        Layer {
            weight: Tensor::zeros(self.weight.shape()),
            bias: self.bias.as_ref().map(|b| Tensor::zeros(b.shape())),
        }
    }
}

/// Layer identifier → parameters. Iteration order is the sorted name order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<T> {
    layers: BTreeMap<String, Layer<T>>,
}

/// Visits every parameter tensor under a stable, unique name.
pub trait Parameters<T: Scalar> {
    fn for_each_tensor(&self, f: &mut dyn FnMut(&str, &Tensor<T>));
    fn for_each_tensor_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>));

    fn numel(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(&mut |_, t| n += t.len());
        n
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            layers: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, layer: Layer<T>) {
        self.layers.insert(name.into(), layer);
    }

    pub fn get(&self, name: &str) -> Result<&Layer<T>> {
        self.layers
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing layer `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Layer<T>> {
        self.layers
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing layer `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.layers.keys().map(String::as_str)
    }

    pub fn layers(&self) -> impl Iterator<Item = (&str, &Layer<T>)> {
        self.layers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Same layout, all zeros.
    pub fn zeroed(&self) -> Self {
        ParamSet {
            layers: self.layers.iter().map(|(k, l)| (k.clone(), l.zeroed())).collect(),
        }
    }

    /// Differentiable view: parameter leaves when `trainable`, constants
    /// otherwise.
    pub fn vars(&self, trainable: bool) -> ParamVars<T> {
        let leaf = |t: &Tensor<T>| {
            if trainable {
                Var::param(t.clone())
            } else {
                Var::constant(t.clone())
            }
        };
        ParamVars {
            layers: self
                .layers
                .iter()
                .map(|(k, l)| {
                    (
                        k.clone(),
                        LayerVars {
                            weight: leaf(&l.weight),
                            bias: l.bias.as_ref().map(leaf),
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            layers: self
                .layers
                .iter()
                .map(|(k, l)| {
                    (
                        k.clone(),
                        Layer {
                            weight: l.weight.cast(),
                            bias: l.bias.as_ref().map(|b| b.cast()),
                        },
                    )
                })
                .collect(),
        }
    }
}

impl<T: Scalar> Parameters<T> for ParamSet<T> {
    fn for_each_tensor(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (name, l) in &self.layers {
            f(&format!("{name}.weight"), &l.weight);
            if let Some(b) = &l.bias {
                f(&format!("{name}.bias"), b);
            }
        }
    }

    fn for_each_tensor_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (name, l) in self.layers.iter_mut() {
            f(&format!("{name}.weight"), &mut l.weight);
            if let Some(b) = l.bias.as_mut() {
                f(&format!("{name}.bias"), b);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerVars<T: Scalar> {
    pub weight: Var<T>,
    pub bias: Option<Var<T>>,
}

impl<T: Scalar> LayerVars<T> {
    pub fn conv(&self, input: &Var<T>, spec: &ConvSpec) -> Result<Var<T>> {
        input.conv2d(&self.weight, self.bias.as_ref(), spec)
    }

    pub fn conv_transpose(&self, input: &Var<T>, spec: &ConvSpec) -> Result<Var<T>> {
        input.conv2d_transpose(&self.weight, self.bias.as_ref(), spec)
    }
}

#[derive(Clone, Debug)]
pub struct ParamVars<T: Scalar> {
    layers: BTreeMap<String, LayerVars<T>>,
}

impl<T: Scalar> ParamVars<T> {
    pub fn layer(&self, name: &str) -> Result<&LayerVars<T>> {
        self.layers
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing layer `{name}`")))
    }

    /// Collects the gradient of every layer into a `ParamSet`.
    pub fn gradients(&self, grads: &Gradients<T>) -> ParamSet<T> {
        ParamSet {
            layers: self
                .layers
                .iter()
                .map(|(k, l)| {
                    (
                        k.clone(),
                        Layer {
                            weight: grads.get(&l.weight),
                            bias: l.bias.as_ref().map(|b| grads.get(b)),
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Value and gradient of a scalar function of `params`.
pub fn grad<T, F>(params: &ParamSet<T>, loss_fn: F) -> Result<(T, ParamSet<T>)>
where
    T: Scalar,
    F: FnOnce(&ParamVars<T>) -> Result<Var<T>>,
{
    let vars = params.vars(true);
    let loss = loss_fn(&vars)?;
    let grads = backward(&loss)?;
    Ok((loss.item(), vars.gradients(&grads)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn glorot_bounds_and_zero_bias() {
        let spec = ConvSpec::new(3, 1, 1, 4, 8).unwrap();
        let l = Layer::<f64>::for_conv(&spec, true, &mut ChaCha8Rng::seed_from_u64(1));
        let s = (6.0 / ((4.0 + 8.0) * 9.0) as f64).sqrt();
        assert!(l.weight.data().iter().all(|v| v.abs() <= s));
        assert!(l.bias.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flattened_names_are_unique_and_sorted() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = ConvSpec::new(3, 1, 1, 1, 1).unwrap();
        let mut p = ParamSet::<f32>::new();
        p.insert("b", Layer::for_conv(&spec, true, &mut rng));
        p.insert("a", Layer::for_conv(&spec, false, &mut rng));
        let mut names = Vec::new();
        p.for_each_tensor(&mut |n, _| names.push(n.to_string()));
        assert_eq!(names, ["a.weight", "b.weight", "b.bias"]);
        assert_eq!(p.numel(), 9 + 9 + 1);
    }
}
