//! Parameterised layers shared by every model part.

use detr_tensor::{conv2d, Parameter, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;

pub const LN_EPS: f64 = 1e-5;

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
}

pub(crate) fn normal(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let d = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| d.sample(rng)).collect()
}

/// `y = x·W + b` with `W: [in,out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn new(name: &str, input: usize, output: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let bound = (6.0 / (input + output) as f64).sqrt();
        Self::from_values(name, input, output, uniform(rng, input * output, bound), vec![0.0; output])
    }

    pub fn zeros(name: &str, input: usize, output: usize) -> Result<Self> {
        Self::from_values(name, input, output, vec![0.0; input * output], vec![0.0; output])
    }

    pub fn from_values(name: &str, input: usize, output: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        Ok(Self {
            weight: Parameter::new(format!("{name}.weight"), &[input, output], weight)?,
            bias: Parameter::new(format!("{name}.bias"), &[output], bias)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.linear(&self.weight.tensor(), &self.bias.tensor())?)
    }

    pub fn params(&self) -> Vec<Parameter> {
        vec![self.weight.clone(), self.bias.clone()]
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Parameter,
    pub beta: Parameter,
}

impl LayerNorm {
    pub fn new(name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: Parameter::new(format!("{name}.gamma"), &[dim], vec![1.0; dim])?,
            beta: Parameter::new(format!("{name}.beta"), &[dim], vec![0.0; dim])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.layer_norm(&self.gamma.tensor(), &self.beta.tensor(), LN_EPS)?)
    }

    pub fn params(&self) -> Vec<Parameter> {
        vec![self.gamma.clone(), self.beta.clone()]
    }
}

/// Linear layers with ReLU between them (not after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`; the last layer starts at zero when `zero_last`.
    pub fn new(name: &str, dims: &[usize], zero_last: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let lname = format!("{name}.{i}");
                if zero_last && i + 1 == n {
                    Linear::zeros(&lname, dims[i], dims[i + 1])
                } else {
                    Linear::new(&lname, dims[i], dims[i + 1], rng)
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.relu();
            }
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<Parameter> {
        self.layers.iter().flat_map(Linear::params).collect()
    }
}

/// Transformer feed-forward block: `D → 4D → D`.
#[derive(Debug, Clone)]
pub struct FeedForward(pub Mlp);

impl FeedForward {
    pub fn new(name: &str, d: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self(Mlp::new(name, &[d, 4 * d, d], false, rng)?))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.0.forward(x)
    }

    pub fn params(&self) -> Vec<Parameter> {
        self.0.params()
    }
}

/// Convolution followed by single-group normalization and optional ReLU.
#[derive(Debug, Clone)]
pub struct ConvNorm {
    pub weight: Parameter,
    pub bias: Parameter,
    pub gamma: Parameter,
    pub beta: Parameter,
    pub stride: usize,
    pub padding: usize,
    pub relu: bool,
}

impl ConvNorm {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        relu: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let fan_in = (cin * kernel * kernel) as f64;
        let w = normal(rng, cout * cin * kernel * kernel, (2.0 / fan_in).sqrt());
        Ok(Self {
            weight: Parameter::new(format!("{name}.weight"), &[cout, cin, kernel, kernel], w)?,
            bias: Parameter::new(format!("{name}.bias"), &[cout], vec![0.0; cout])?,
            gamma: Parameter::new(format!("{name}.gn.gamma"), &[cout], vec![1.0; cout])?,
            beta: Parameter::new(format!("{name}.gn.beta"), &[cout], vec![0.0; cout])?,
            stride,
            padding: kernel / 2,
            relu,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, &self.weight.tensor(), Some(&self.bias.tensor()), self.stride, self.padding)?;
        let y = y.group_norm(1, &self.gamma.tensor(), &self.beta.tensor(), LN_EPS)?;
        Ok(if self.relu { y.relu() } else { y })
    }

    pub fn params(&self) -> Vec<Parameter> {
        vec![self.weight.clone(), self.bias.clone(), self.gamma.clone(), self.beta.clone()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn mlp_with_zero_last_layer_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Mlp::new("m", &[3, 5, 5, 4], true, &mut rng).unwrap();
        let x = Tensor::new(&[2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.0]).unwrap();
        assert!(m.forward(&x).unwrap().data().iter().all(|v| *v == 0.0));
        assert_eq!(m.params().len(), 6);
    }

    #[test]
    fn parameter_names_carry_prefix() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = Linear::new("enc.0.proj", 2, 2, &mut rng).unwrap();
        assert_eq!(l.weight.name(), "enc.0.proj.weight");
        assert_eq!(l.bias.name(), "enc.0.proj.bias");
    }
}
