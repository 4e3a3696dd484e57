use super::{Shape, Tensor};
use crate::error::{Error, Result};

/// Border handling for stride-1 "same" convolutions. The pad width is
/// `(k - 1) / 2` per axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Padding {
    Zero,
    /// Mirror without repeating the edge sample (`-1 -> 1`).
    Reflect,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub padding: Padding,
}

impl ConvSpec {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        padding: Padding,
    ) -> Result<Self> {
        if kernel_h.is_multiple_of(2) || kernel_w.is_multiple_of(2) {
            return Err(Error::dims(
                "ConvSpec::new",
                format!("kernel dims must be odd, got {kernel_h}x{kernel_w}"),
            ));
        }
        if out_channels == 0 || in_channels == 0 {
            return Err(Error::dims("ConvSpec::new", "zero channel count"));
        }
        Ok(Self {
            out_channels,
            in_channels,
            kernel_h,
            kernel_w,
            padding,
        })
    }

    pub fn pad_h(&self) -> usize {
        (self.kernel_h - 1) / 2
    }

    pub fn pad_w(&self) -> usize {
        (self.kernel_w - 1) / 2
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)
    }

    /// Length of one unrolled receptive field, `in * kh * kw`.
    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().numel() + self.out_channels
    }

    pub fn macs_per_pixel(&self) -> usize {
        self.out_channels * self.fan_in()
    }

    fn check(&self, op: &'static str, input: Shape, weights: Shape, bias: Option<usize>) -> Result<()> {
        let ws = self.weight_shape();
        let pairs = [
            ("weights.out", ws.n, weights.n),
            ("weights.in", ws.c, weights.c),
            ("weights.kh", ws.h, weights.h),
            ("weights.kw", ws.w, weights.w),
            ("input.c", self.in_channels, input.c),
        ];
        for (dim, expected, actual) in pairs {
            if expected != actual {
                return Err(Error::ShapeMismatch {
                    op,
                    dim,
                    expected,
                    actual,
                });
            }
        }
        if let Some(len) = bias {
            if len != self.out_channels {
                return Err(Error::ShapeMismatch {
                    op,
                    dim: "bias",
                    expected: self.out_channels,
                    actual: len,
                });
            }
        }
        if self.padding == Padding::Reflect && (input.h <= self.pad_h() || input.w <= self.pad_w()) {
            return Err(Error::dims(
                op,
                format!("reflect padding needs spatial dims > pad width, got {}x{}", input.h, input.w),
            ));
        }
        Ok(())
    }

    fn output_shape(&self, input: Shape) -> Shape {
        Shape { c: self.out_channels, ..input }
    }

    fn direct(&self) -> bool {
        self.out_channels <= 4
    }
}

#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Vec<f32>,
}

/// Upper bound on the unrolled patch buffer of the GEMM path, in floats.
const BAND_ELEMS: usize = 1 << 20;

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    ph: usize,
    pw: usize,
    hp: usize,
    wp: usize,
}

impl Geometry {
    fn new(spec: &ConvSpec, s: Shape) -> Self {
        let (ph, pw) = (spec.pad_h(), spec.pad_w());
        Self {
            c: s.c,
            h: s.h,
            w: s.w,
            ph,
            pw,
            hp: s.h + 2 * ph,
            wp: s.w + 2 * pw,
        }
    }

    fn padded_plane(&self) -> usize {
        self.hp * self.wp
    }

    fn pad(&self, src: &[f32], mode: Padding, dst: &mut [f32]) {
        let g = self;
        for c in 0..g.c {
            let sp = &src[c * g.h * g.w..(c + 1) * g.h * g.w];
            let dp = &mut dst[c * g.padded_plane()..(c + 1) * g.padded_plane()];
            for py in 0..g.hp {
                let sy = py as isize - g.ph as isize;
                let row = &mut dp[py * g.wp..(py + 1) * g.wp];
                let sy = match mode {
                    Padding::Zero if sy < 0 || sy >= g.h as isize => {
                        row.fill(0.0);
                        continue;
                    }
                    Padding::Zero => sy as usize,
                    Padding::Reflect => reflect(sy, g.h),
                };
                let srow = &sp[sy * g.w..(sy + 1) * g.w];
                row[g.pw..g.pw + g.w].copy_from_slice(srow);
                for px in 0..g.pw {
                    let left = -((g.pw - px) as isize);
                    let right = (g.w + px) as isize;
                    let (l, r) = match mode {
                        Padding::Zero => (0.0, 0.0),
                        Padding::Reflect => (srow[reflect(left, g.w)], srow[reflect(right, g.w)]),
                    };
                    row[px] = l;
                    row[g.pw + g.w + px] = r;
                }
            }
        }
    }

    /// Folds a gradient on the padded buffer back onto the unpadded input.
    fn unpad_accumulate(&self, grad_pad: &[f32], mode: Padding, dst: &mut [f32]) {
        let g = self;
        for c in 0..g.c {
            let gp = &grad_pad[c * g.padded_plane()..(c + 1) * g.padded_plane()];
            let dp = &mut dst[c * g.h * g.w..(c + 1) * g.h * g.w];
            for py in 0..g.hp {
                let sy = py as isize - g.ph as isize;
                let interior_row = sy >= 0 && sy < g.h as isize;
                if mode == Padding::Zero && !interior_row {
                    continue;
                }
                let sy = reflect(sy, g.h);
                let grow = &gp[py * g.wp..(py + 1) * g.wp];
                let drow = &mut dp[sy * g.w..(sy + 1) * g.w];
                for (d, &v) in drow.iter_mut().zip(&grow[g.pw..g.pw + g.w]) {
                    *d += v;
                }
                if mode == Padding::Reflect {
                    for px in 0..g.pw {
                        let left = -((g.pw - px) as isize);
                        let right = (g.w + px) as isize;
                        drow[reflect(left, g.w)] += grow[px];
                        drow[reflect(right, g.w)] += grow[g.pw + g.w + px];
                    }
                }
            }
        }
    }

    fn band_rows(&self, fan_in: usize) -> usize {
        (BAND_ELEMS / (fan_in * self.w)).clamp(1, self.h)
    }

    /// Unrolls rows `y0..y0+rows` of the padded sample into a `(fan_in, rows*w)` matrix.
    fn im2col(&self, spec: &ConvSpec, padded: &[f32], y0: usize, rows: usize, col: &mut [f32]) {
        let bw = rows * self.w;
        let (kh, kw) = (spec.kernel_h, spec.kernel_w);
        for c in 0..self.c {
            let plane = &padded[c * self.padded_plane()..];
            for ky in 0..kh {
                for kx in 0..kw {
                    let r = (c * kh + ky) * kw + kx;
                    let dst = &mut col[r * bw..(r + 1) * bw];
                    for yy in 0..rows {
                        let src = &plane[(y0 + yy + ky) * self.wp + kx..][..self.w];
                        dst[yy * self.w..(yy + 1) * self.w].copy_from_slice(src);
                    }
                }
            }
        }
    }

    fn col2im(&self, spec: &ConvSpec, col: &[f32], y0: usize, rows: usize, grad_pad: &mut [f32]) {
        let bw = rows * self.w;
        let (kh, kw) = (spec.kernel_h, spec.kernel_w);
        for c in 0..self.c {
            let plane = &mut grad_pad[c * self.padded_plane()..(c + 1) * self.padded_plane()];
            for ky in 0..kh {
                for kx in 0..kw {
                    let r = (c * kh + ky) * kw + kx;
                    let src = &col[r * bw..(r + 1) * bw];
                    for yy in 0..rows {
                        let dst = &mut plane[(y0 + yy + ky) * self.wp + kx..][..self.w];
                        for (d, &v) in dst.iter_mut().zip(&src[yy * self.w..(yy + 1) * self.w]) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// Row-major single-precision GEMM, `c = a·b + beta·c`, with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rs: usize, cs: usize, r: usize, cc: usize| (r - 1) * rs + (cc - 1) * cs;
    assert!(k == 0 || last(rsa, csa, m, k) < a.len(), "gemm: a out of bounds");
    assert!(k == 0 || last(rsb, csb, k, n) < b.len(), "gemm: b out of bounds");
    assert!(last(rsc, csc, m, n) < c.len(), "gemm: c out of bounds");
    // SAFETY: every index the kernel touches is bounded by the asserts above,
    // and `c` is uniquely borrowed so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Stride-1 same-size cross-correlation plus per-channel bias.
pub fn conv2d_forward(input: &Tensor, weights: &Tensor, bias: &[f32], spec: &ConvSpec) -> Result<Tensor> {
    let is = input.shape();
    spec.check("conv2d_forward", is, weights.shape(), Some(bias.len()))?;
    let os = spec.output_shape(is);
    let mut out = Tensor::zeros(os);
    let g = Geometry::new(spec, is);
    let mut padded = vec![0.0f32; g.c * g.padded_plane()];
    let wts = weights.data();
    let fan_in = spec.fan_in();
    let hw = is.plane();
    let mut col = if spec.direct() {
        Vec::new()
    } else {
        vec![0.0f32; fan_in * g.band_rows(fan_in) * g.w]
    };

    for n in 0..is.n {
        g.pad(input.sample_data(n), spec.padding, &mut padded);
        let out_sample = &mut out.data_mut()[n * os.sample_len()..(n + 1) * os.sample_len()];
        if spec.direct() {
            for y in 0..g.h {
                for o in 0..spec.out_channels {
                    let row = &mut out_sample[o * hw + y * g.w..o * hw + (y + 1) * g.w];
                    row.fill(bias[o]);
                    for c in 0..g.c {
                        let plane = &padded[c * g.padded_plane()..];
                        for ky in 0..spec.kernel_h {
                            let base = (y + ky) * g.wp;
                            for kx in 0..spec.kernel_w {
                                let wv = wts[((o * g.c + c) * spec.kernel_h + ky) * spec.kernel_w + kx];
                                let src = &plane[base + kx..base + kx + g.w];
                                for (r, &s) in row.iter_mut().zip(src) {
                                    *r += wv * s;
                                }
                            }
                        }
                    }
                }
            }
        } else {
            let band = g.band_rows(fan_in);
            let mut y0 = 0;
            while y0 < g.h {
                let rows = band.min(g.h - y0);
                let bw = rows * g.w;
                g.im2col(spec, &padded, y0, rows, &mut col);
                gemm(
                    spec.out_channels,
                    fan_in,
                    bw,
                    wts,
                    (fan_in, 1),
                    &col,
                    (bw, 1),
                    0.0,
                    &mut out_sample[y0 * g.w..],
                    (hw, 1),
                );
                y0 += rows;
            }
            for (o, &b) in bias.iter().enumerate() {
                for v in &mut out_sample[o * hw..(o + 1) * hw] {
                    *v += b;
                }
            }
        }
    }
    Ok(out)
}

fn backward_impl(
    grad_out: &Tensor,
    input: Option<&Tensor>,
    weights: &Tensor,
    spec: &ConvSpec,
) -> Result<(Tensor, Option<(Tensor, Vec<f32>)>)> {
    let gs = grad_out.shape();
    if gs.c != spec.out_channels {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward",
            dim: "grad_out.c",
            expected: spec.out_channels,
            actual: gs.c,
        });
    }
    let is = Shape { c: spec.in_channels, ..gs };
    if let Some(x) = input {
        x.shape().expect_eq(&is, "conv2d_backward")?;
    }
    spec.check("conv2d_backward", is, weights.shape(), None)?;

    let g = Geometry::new(spec, is);
    let fan_in = spec.fan_in();
    let hw = is.plane();
    let wts = weights.data();
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);

    let mut grad_in = Tensor::zeros(is);
    let mut grad_pad = vec![0.0f32; g.c * g.padded_plane()];
    let mut padded = vec![0.0f32; if input.is_some() { g.c * g.padded_plane() } else { 0 }];
    let mut grad_w = vec![0.0f64; if input.is_some() { wts.len() } else { 0 }];
    let mut grad_w32 = vec![0.0f32; if input.is_some() && !spec.direct() { wts.len() } else { 0 }];
    let mut grad_b = vec![0.0f64; spec.out_channels];
    let band = g.band_rows(fan_in);
    let mut col = if spec.direct() { Vec::new() } else { vec![0.0f32; fan_in * band * g.w] };
    let mut gcol = if spec.direct() { Vec::new() } else { vec![0.0f32; fan_in * band * g.w] };

    for n in 0..gs.n {
        let go = grad_out.sample_data(n);
        grad_pad.fill(0.0);
        if let Some(x) = input {
            g.pad(x.sample_data(n), spec.padding, &mut padded);
            for (o, gb) in grad_b.iter_mut().enumerate() {
                *gb += go[o * hw..(o + 1) * hw].iter().map(|&v| f64::from(v)).sum::<f64>();
            }
        }

        if spec.direct() {
            for y in 0..g.h {
                for o in 0..spec.out_channels {
                    let grow = &go[o * hw + y * g.w..o * hw + (y + 1) * g.w];
                    for c in 0..g.c {
                        let off = c * g.padded_plane();
                        for ky in 0..kh {
                            let base = off + (y + ky) * g.wp;
                            for kx in 0..kw {
                                let widx = ((o * g.c + c) * kh + ky) * kw + kx;
                                let wv = wts[widx];
                                let dst = &mut grad_pad[base + kx..base + kx + g.w];
                                for (d, &v) in dst.iter_mut().zip(grow) {
                                    *d += wv * v;
                                }
                                if input.is_some() {
                                    let src = &padded[base + kx..base + kx + g.w];
                                    let dot: f32 = src.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                                    grad_w[widx] += f64::from(dot);
                                }
                            }
                        }
                    }
                }
            }
        } else {
            let mut y0 = 0;
            while y0 < g.h {
                let rows = band.min(g.h - y0);
                let bw = rows * g.w;
                let g_band = &go[y0 * g.w..];
                if input.is_some() {
                    g.im2col(spec, &padded, y0, rows, &mut col);
                    // grad_w (O x K) += G (O x bw) * col^T (bw x K)
                    gemm(
                        spec.out_channels,
                        bw,
                        fan_in,
                        g_band,
                        (hw, 1),
                        &col,
                        (1, bw),
                        1.0,
                        &mut grad_w32,
                        (fan_in, 1),
                    );
                }
                // gcol (K x bw) = W^T (K x O) * G (O x bw)
                gemm(
                    fan_in,
                    spec.out_channels,
                    bw,
                    wts,
                    (1, fan_in),
                    g_band,
                    (hw, 1),
                    0.0,
                    &mut gcol,
                    (bw, 1),
                );
                g.col2im(spec, &gcol, y0, rows, &mut grad_pad);
                y0 += rows;
            }
        }
        let gi = &mut grad_in.data_mut()[n * is.sample_len()..(n + 1) * is.sample_len()];
        g.unpad_accumulate(&grad_pad, spec.padding, gi);
    }

    let params = input.map(|_| {
        let w: Vec<f32> = if spec.direct() {
            grad_w.iter().map(|&v| v as f32).collect()
        } else {
            grad_w32
        };
        let gw = Tensor::new(spec.weight_shape(), w).expect("weight gradient shape");
        (gw, grad_b.iter().map(|&v| v as f32).collect())
    });
    Ok((grad_in, params))
}

/// Gradients of [`conv2d_forward`] with respect to input, weights and bias.
pub fn conv2d_backward(grad_out: &Tensor, input: &Tensor, weights: &Tensor, spec: &ConvSpec) -> Result<ConvGrads> {
    let (input_grad, params) = backward_impl(grad_out, Some(input), weights, spec)?;
    let (w, bias) = params.expect("weights requested");
    Ok(ConvGrads {
        input: input_grad,
        weights: w,
        bias,
    })
}

/// Input gradient only, for frozen layers.
pub fn conv2d_backward_input(grad_out: &Tensor, weights: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    Ok(backward_impl(grad_out, None, weights, spec)?.0)
}
