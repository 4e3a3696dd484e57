use super::{conv2d_backward_input, conv2d_forward, ConvSpec, Padding, Shape, Tensor};
use crate::error::{Error, Result};

const SOBEL: [f32; 18] = [
    -1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0, // d/dx
    -1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0, // d/dy
];

fn kernel() -> (Tensor, ConvSpec) {
    let spec = ConvSpec::new(2, 1, 3, 3, Padding::Reflect).expect("static spec");
    let w = Tensor::new(spec.weight_shape(), SOBEL.to_vec()).expect("static kernel");
    (w, spec)
}

fn single_channel(x: &Tensor, op: &'static str) -> Result<()> {
    if x.shape().c != 1 {
        return Err(Error::ShapeMismatch {
            op,
            dim: "c",
            expected: 1,
            actual: x.shape().c,
        });
    }
    Ok(())
}

/// Horizontal and vertical 3x3 Sobel responses with reflect padding.
pub fn sobel_gradient(x: &Tensor) -> Result<(Tensor, Tensor)> {
    single_channel(x, "sobel_gradient")?;
    let (w, spec) = kernel();
    let both = conv2d_forward(x, &w, &[0.0, 0.0], &spec)?;
    let mut parts = both.split_channels(&[1, 1])?.into_iter();
    Ok((parts.next().expect("gx"), parts.next().expect("gy")))
}

/// Transposed correlation: maps cotangents on `(gx, gy)` back to the image.
pub fn sobel_backward(grad_gx: &Tensor, grad_gy: &Tensor) -> Result<Tensor> {
    single_channel(grad_gx, "sobel_backward")?;
    let s: Shape = grad_gx.shape();
    s.expect_eq(&grad_gy.shape(), "sobel_backward")?;
    let (w, spec) = kernel();
    let both = Tensor::concat_channels(&[grad_gx, grad_gy])?;
    conv2d_backward_input(&both, &w, &spec)
}
