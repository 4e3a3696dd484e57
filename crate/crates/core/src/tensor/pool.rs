use super::{Shape, Tensor};
use crate::error::{Error, Result};

/// Flat input offsets of each pooled maximum, in output storage order.
#[derive(Clone, Debug)]
pub struct PoolIndices {
    input_shape: Shape,
    pub(crate) argmax: Vec<u32>,
}

/// 2x2 window, stride 2. Ties go to the first element in scan order.
pub fn maxpool2_forward(x: &Tensor) -> Result<(Tensor, PoolIndices)> {
    let s = x.shape();
    if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
        return Err(Error::dims(
            "maxpool2_forward",
            format!("spatial dims must be even, got {}x{}", s.h, s.w),
        ));
    }
    let os = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    let mut out = Vec::with_capacity(os.numel());
    let mut argmax = Vec::with_capacity(os.numel());
    let data = x.data();
    for nc in 0..s.n * s.c {
        let base = nc * s.plane();
        for oy in 0..os.h {
            for ox in 0..os.w {
                let mut best = base + 2 * oy * s.w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * s.w + 2 * ox + dx;
                    if data[i] > data[best] {
                        best = i;
                    }
                }
                out.push(data[best]);
                argmax.push(best as u32);
            }
        }
    }
    Ok((
        Tensor::new(os, out)?,
        PoolIndices {
            input_shape: s,
            argmax,
        },
    ))
}

pub fn maxpool2_backward(grad_out: &Tensor, idx: &PoolIndices) -> Result<Tensor> {
    if grad_out.len() != idx.argmax.len() {
        return Err(Error::ShapeMismatch {
            op: "maxpool2_backward",
            dim: "len",
            expected: idx.argmax.len(),
            actual: grad_out.len(),
        });
    }
    let mut g = Tensor::zeros(idx.input_shape);
    let gd = g.data_mut();
    for (&i, &v) in idx.argmax.iter().zip(grad_out.data()) {
        gd[i as usize] += v;
    }
    Ok(g)
}
