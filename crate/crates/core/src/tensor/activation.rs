use super::Tensor;
use crate::error::Result;

pub const LEAKY_SLOPE: f32 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    /// Slope 0.2 on the negative side.
    LeakyRelu,
    Sigmoid,
    Relu,
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::Sigmoid => sigmoid(x),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative at pre-activation `x`.
    pub fn derivative(self, x: f32) -> f32 {
        match self {
            Activation::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn forward(self, x: &Tensor) -> Tensor {
        x.map(|v| self.apply(v))
    }

    pub fn forward_in_place(self, x: &mut Tensor) {
        for v in x.data_mut() {
            *v = self.apply(*v);
        }
    }

    /// `grad * f'(x)` with `x` the pre-activation input.
    pub fn backward(self, x: &Tensor, grad: &Tensor) -> Result<Tensor> {
        x.zip_map(grad, "activation_backward", |v, g| g * self.derivative(v))
    }
}
