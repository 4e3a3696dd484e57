//! Row-streaming inference for two-layer networks.
//!
//! Rows of the reflect-padded input and hidden maps are produced on demand
//! into three-row rings, so no padded or concatenated tensor is ever
//! materialised. Accumulation order per output value is bias, then input
//! channel, kernel row, kernel column, as in `conv2d_forward`, so results are
//! bitwise identical to the layer-by-layer forward.

use crate::layer::ConvLayer;
use crate::tensor::Activation;

const LANES: usize = 16;

/// Three padded rows per channel, keyed by source row.
struct Ring {
    channels: usize,
    wp: usize,
    rows: [Option<usize>; 3],
    data: Vec<f32>,
}

impl Ring {
    fn new(channels: usize, w: usize) -> Self {
        let wp = w + 2;
        Self {
            channels,
            wp,
            rows: [None; 3],
            data: vec![0.0; 3 * channels * wp],
        }
    }

    fn slot(&self, row: usize, c: usize) -> &[f32] {
        let s = (row % 3 * self.channels + c) * self.wp;
        &self.data[s..s + self.wp]
    }

    /// Makes `row` resident, filling it with `fill(row, channel, dst)` where
    /// `dst` has room for the `w` interior values.
    fn ensure(&mut self, row: usize, mut fill: impl FnMut(usize, &mut [f32])) {
        let k = row % 3;
        if self.rows[k] == Some(row) {
            return;
        }
        let wp = self.wp;
        for c in 0..self.channels {
            let s = (k * self.channels + c) * wp;
            let r = &mut self.data[s..s + wp];
            fill(c, &mut r[1..wp - 1]);
            r[0] = r[2];
            r[wp - 1] = r[wp - 3];
        }
        self.rows[k] = Some(row);
    }
}

fn reflect(i: isize, n: usize) -> usize {
    if i < 0 {
        (-i) as usize
    } else if i as usize >= n {
        2 * (n - 1) - i as usize
    } else {
        i as usize
    }
}

/// Weights as `[o][c][ky][kx]` plus bias, with channel counts fixed at
/// compile time.
struct Kernel<const C: usize, const O: usize> {
    w: [[[[f32; 3]; 3]; C]; O],
    b: [f32; O],
}

impl<const C: usize, const O: usize> Kernel<C, O> {
    fn new(layer: &ConvLayer) -> Self {
        let d = layer.weights.data();
        let mut w = [[[[0.0; 3]; 3]; C]; O];
        for (o, wo) in w.iter_mut().enumerate() {
            for (c, wc) in wo.iter_mut().enumerate() {
                for (ky, row) in wc.iter_mut().enumerate() {
                    for (kx, v) in row.iter_mut().enumerate() {
                        *v = d[((o * C + c) * 3 + ky) * 3 + kx];
                    }
                }
            }
        }
        Self {
            w,
            b: layer.bias[..O].try_into().expect("bias length"),
        }
    }

    /// One output row: `taps[c][ky]` is padded input row `ky` of channel
    /// `c`; writes `O` rows of `w` values into `out`.
    #[inline(always)]
    fn row(&self, taps: &[[&[f32]; 3]; C], w: usize, out: &mut [f32]) {
        let mut x0 = 0;
        while x0 + LANES <= w {
            let mut acc = [[0.0f32; LANES]; O];
            for o in 0..O {
                acc[o] = [self.b[o]; LANES];
            }
            for c in 0..C {
                for ky in 0..3 {
                    let src: &[f32; LANES + 2] = taps[c][ky][x0..x0 + LANES + 2].try_into().expect("lane slice");
                    for kx in 0..3 {
                        let s: [f32; LANES] = src[kx..kx + LANES].try_into().expect("lane slice");
                        for o in 0..O {
                            let wv = self.w[o][c][ky][kx];
                            for j in 0..LANES {
                                acc[o][j] += wv * s[j];
                            }
                        }
                    }
                }
            }
            for o in 0..O {
                out[o * w + x0..o * w + x0 + LANES].copy_from_slice(&acc[o]);
            }
            x0 += LANES;
        }
        for x in x0..w {
            for o in 0..O {
                let mut a = self.b[o];
                for c in 0..C {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            a += self.w[o][c][ky][kx] * taps[c][ky][x + kx];
                        }
                    }
                }
                out[o * w + x] = a;
            }
        }
    }
}

/// Output plane of `second(act1(first([ir, vis])))` followed by `act2`, for
/// a 2-to-4 first layer and a 4-to-1 second layer with 3x3 kernels.
pub(super) fn two_layer_plane(first: &ConvLayer, second: &ConvLayer, ir: &[f32], vis: &[f32], h: usize, w: usize, out: &mut [f32]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at run time.
        unsafe { plane_avx2(first, second, ir, vis, h, w, out) };
        return;
    }
    plane(first, second, ir, vis, h, w, out);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn plane_avx2(first: &ConvLayer, second: &ConvLayer, ir: &[f32], vis: &[f32], h: usize, w: usize, out: &mut [f32]) {
    plane(first, second, ir, vis, h, w, out);
}

#[inline(always)]
fn plane(first: &ConvLayer, second: &ConvLayer, ir: &[f32], vis: &[f32], h: usize, w: usize, out: &mut [f32]) {
    let (act1, act2) = (Activation::LeakyRelu, Activation::Sigmoid);
    let (k1, k2) = (Kernel::<2, 4>::new(first), Kernel::<4, 1>::new(second));
    let mut input = Ring::new(2, w);
    let mut hidden = Ring::new(4, w);
    let mut pre = vec![0.0f32; 4 * w];
    let mut row = vec![0.0f32; w];
    let planes = [ir, vis];
    for y in 0..h {
        for dy in -1..=1 {
            let r = reflect(y as isize + dy, h);
            if hidden.rows[r % 3] == Some(r) {
                continue;
            }
            for iy in -1..=1 {
                let s = reflect(r as isize + iy, h);
                input.ensure(s, |c, dst| dst.copy_from_slice(&planes[c][s * w..(s + 1) * w]));
            }
            let rows = [-1, 0, 1].map(|d| reflect(r as isize + d, h));
            let taps = [0, 1].map(|c| rows.map(|s| input.slot(s, c)));
            k1.row(&taps, w, &mut pre);
            hidden.ensure(r, |c, dst| {
                for (d, &v) in dst.iter_mut().zip(&pre[c * w..(c + 1) * w]) {
                    *d = act1.apply(v);
                }
            });
        }
        let rows = [-1, 0, 1].map(|d| reflect(y as isize + d, h));
        let taps = [0, 1, 2, 3].map(|c| rows.map(|s| hidden.slot(s, c)));
        k2.row(&taps, w, &mut row);
        for (d, &v) in out[y * w..(y + 1) * w].iter_mut().zip(&row) {
            *d = act2.apply(v);
        }
    }
}
