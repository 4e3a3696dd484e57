use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{conv2d_forward, ConvSpec, Tensor};

/// A convolution's parameters together with its geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub spec: ConvSpec,
    pub weights: Tensor,
    pub bias: Vec<f32>,
}

/// Parameter gradients of one [`ConvLayer`].
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub weights: Tensor,
    pub bias: Vec<f32>,
}

impl ConvLayer {
    pub fn new(spec: ConvSpec, weights: Tensor, bias: Vec<f32>) -> Result<Self> {
        spec.weight_shape().expect_eq(&weights.shape(), "ConvLayer::new")?;
        if bias.len() != spec.out_channels {
            return Err(Error::ShapeMismatch {
                op: "ConvLayer::new",
                dim: "bias",
                expected: spec.out_channels,
                actual: bias.len(),
            });
        }
        Ok(Self { spec, weights, bias })
    }

    pub fn zeros(spec: ConvSpec) -> Self {
        Self {
            spec,
            weights: Tensor::zeros(spec.weight_shape()),
            bias: vec![0.0; spec.out_channels],
        }
    }

    /// Kaiming-uniform fan-in weights (bound `sqrt(6 / fan_in)`), zero bias.
    pub fn kaiming_uniform(spec: ConvSpec, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / spec.fan_in() as f32).sqrt();
        let weights = Tensor::from_fn(spec.weight_shape(), |_, _, _, _| rng.random_range(-bound..=bound));
        Self {
            spec,
            weights,
            bias: vec![0.0; spec.out_channels],
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d_forward(x, &self.weights, &self.bias, &self.spec)
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn zero_grads(&self) -> LayerGrads {
        LayerGrads {
            weights: Tensor::zeros(self.weights.shape()),
            bias: vec![0.0; self.bias.len()],
        }
    }
}

impl LayerGrads {
    pub fn add_assign(&mut self, other: &LayerGrads) -> Result<()> {
        self.weights.add_scaled(&other.weights, 1.0)?;
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, k: f32) {
        for v in self.weights.data_mut() {
            *v *= k;
        }
        for v in &mut self.bias {
            *v *= k;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.weights.all_finite() && self.bias.iter().all(|v| v.is_finite())
    }
}
