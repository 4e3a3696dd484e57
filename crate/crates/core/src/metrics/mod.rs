//! Fusion quality measures.
//!
//! All metrics take single images as `(1, 1, H, W)` tensors with values in
//! [0, 1] and compute in f64. Metrics defined on the [0, 255] scale rescale
//! internally.

mod report;

pub use report::{evaluate_dataset, evaluate_images, ImageMetrics, MetricReport, METRIC_NAMES};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A single-channel f64 image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Plane {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Plane {
    fn from_tensor(t: &Tensor, op: &'static str, scale: f64) -> Result<Plane> {
        let s = t.shape();
        if s.n != 1 || s.c != 1 {
            return Err(Error::dims(op, format!("expected a (1, 1, H, W) image, got {s}")));
        }
        Ok(Plane {
            h: s.h,
            w: s.w,
            data: t.data().iter().map(|&v| f64::from(v) * scale).collect(),
        })
    }

    fn new(h: usize, w: usize, data: Vec<f64>) -> Plane {
        debug_assert_eq!(data.len(), h * w);
        Plane { h, w, data }
    }

    fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }

    /// Replicate-border access.
    fn clamped(&self, y: isize, x: isize) -> f64 {
        let y = y.clamp(0, self.h as isize - 1) as usize;
        let x = x.clamp(0, self.w as isize - 1) as usize;
        self.at(y, x)
    }

    fn zip(&self, o: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane::new(self.h, self.w, self.data.iter().zip(&o.data).map(|(&a, &b)| f(a, b)).collect())
    }

    fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Correlation with a separable kernel, keeping only fully covered positions.
    fn filter_valid(&self, k: &[f64]) -> Plane {
        let n = k.len();
        let (oh, ow) = (self.h + 1 - n, self.w + 1 - n);
        let mut rows = vec![0.0; self.h * ow];
        for y in 0..self.h {
            let src = &self.data[y * self.w..(y + 1) * self.w];
            for x in 0..ow {
                rows[y * ow + x] = k.iter().zip(&src[x..x + n]).map(|(a, b)| a * b).sum();
            }
        }
        let mut out = vec![0.0; oh * ow];
        for y in 0..oh {
            for (i, &kv) in k.iter().enumerate() {
                let src = &rows[(y + i) * ow..(y + i + 1) * ow];
                for (o, &s) in out[y * ow..(y + 1) * ow].iter_mut().zip(src) {
                    *o += kv * s;
                }
            }
        }
        Plane::new(oh, ow, out)
    }

    /// 3x3 correlation with replicate borders, same size.
    fn filter3_replicate(&self, k: &[[f64; 3]; 3]) -> Plane {
        let mut out = Vec::with_capacity(self.h * self.w);
        for y in 0..self.h as isize {
            for x in 0..self.w as isize {
                let mut acc = 0.0;
                for (dy, row) in k.iter().enumerate() {
                    for (dx, &kv) in row.iter().enumerate() {
                        if kv != 0.0 {
                            acc += kv * self.clamped(y + dy as isize - 1, x + dx as isize - 1);
                        }
                    }
                }
                out.push(acc);
            }
        }
        Plane::new(self.h, self.w, out)
    }

    /// Every second row and column starting at 0.
    fn decimate(&self) -> Plane {
        let (h, w) = (self.h.div_ceil(2), self.w.div_ceil(2));
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                out.push(self.at(2 * y, 2 * x));
            }
        }
        Plane::new(h, w, out)
    }
}

fn pair(x: &Tensor, y: &Tensor, op: &'static str, scale: f64) -> Result<(Plane, Plane)> {
    x.shape().expect_eq(&y.shape(), op)?;
    Ok((Plane::from_tensor(x, op, scale)?, Plane::from_tensor(y, op, scale)?))
}

fn check_min(p: &Plane, min: usize, op: &'static str) -> Result<()> {
    if p.h < min || p.w < min {
        return Err(Error::dims(op, format!("image {}x{} is smaller than {min}x{min}", p.h, p.w)));
    }
    Ok(())
}

/// Normalised 1-D Gaussian; its outer product is the normalised 2-D window.
pub(crate) fn gaussian_1d(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..n).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Mean SSIM over all fully covered 11x11 Gaussian windows, dynamic range 1.
pub fn ssim(x: &Tensor, y: &Tensor) -> Result<f64> {
    let (a, b) = pair(x, y, "ssim", 1.0)?;
    check_min(&a, SSIM_WINDOW, "ssim")?;
    let k = gaussian_1d(SSIM_WINDOW, SSIM_SIGMA);
    let mu_a = a.filter_valid(&k);
    let mu_b = b.filter_valid(&k);
    let aa = a.zip(&a, |p, q| p * q).filter_valid(&k);
    let bb = b.zip(&b, |p, q| p * q).filter_valid(&k);
    let ab = a.zip(&b, |p, q| p * q).filter_valid(&k);
    let n = mu_a.data.len();
    let mut sum = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a.data[i], mu_b.data[i]);
        let va = aa.data[i] - ma * ma;
        let vb = bb.data[i] - mb * mb;
        let cov = ab.data[i] - ma * mb;
        sum += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    Ok(sum / n as f64)
}

pub const GMSD_T: f64 = 170.0;

const PREWITT_X: [[f64; 3]; 3] = [
    [1.0 / 3.0, 0.0, -1.0 / 3.0],
    [1.0 / 3.0, 0.0, -1.0 / 3.0],
    [1.0 / 3.0, 0.0, -1.0 / 3.0],
];
const PREWITT_Y: [[f64; 3]; 3] = [
    [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
    [0.0, 0.0, 0.0],
    [-1.0 / 3.0, -1.0 / 3.0, -1.0 / 3.0],
];

/// 2x2 block means at stride 2; a trailing odd row or column is replicated.
fn block_mean2(p: &Plane) -> Plane {
    let (h, w) = (p.h.div_ceil(2), p.w.div_ceil(2));
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (y0, x0) = (2 * y, 2 * x);
            out.push(0.25 * (p.clamped(y0, x0) + p.clamped(y0, x0 + 1) + p.clamped(y0 + 1, x0) + p.clamped(y0 + 1, x0 + 1)));
        }
    }
    Plane::new(h, w, out)
}

fn magnitude(gx: &Plane, gy: &Plane) -> Plane {
    gx.zip(gy, |a, b| (a * a + b * b).sqrt())
}

/// Gradient magnitude similarity deviation on the [0, 255] scale.
pub fn gmsd(x: &Tensor, y: &Tensor) -> Result<f64> {
    let (a, b) = pair(x, y, "gmsd", 255.0)?;
    check_min(&a, 4, "gmsd")?;
    let (a, b) = (block_mean2(&a), block_mean2(&b));
    let ma = magnitude(&a.filter3_replicate(&PREWITT_X), &a.filter3_replicate(&PREWITT_Y));
    let mb = magnitude(&b.filter3_replicate(&PREWITT_X), &b.filter3_replicate(&PREWITT_Y));
    let gms = ma.zip(&mb, |p, q| (2.0 * p * q + GMSD_T) / (p * p + q * q + GMSD_T));
    let n = gms.data.len() as f64;
    let mean = gms.mean();
    let var = gms.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(var.sqrt())
}

/// Population standard deviation on the [0, 255] scale.
pub fn sd(x: &Tensor) -> Result<f64> {
    let p = Plane::from_tensor(x, "sd", 255.0)?;
    let m = p.mean();
    Ok((p.data.iter().map(|v| (v - m).powi(2)).sum::<f64>() / p.data.len() as f64).sqrt())
}

/// Pearson correlation; 0 when either side has zero variance.
fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut num = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        num += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        num / (va * vb).sqrt()
    }
}

fn triple(f: &Tensor, a: &Tensor, b: &Tensor, op: &'static str, scale: f64) -> Result<(Plane, Plane, Plane)> {
    f.shape().expect_eq(&a.shape(), op)?;
    f.shape().expect_eq(&b.shape(), op)?;
    Ok((
        Plane::from_tensor(f, op, scale)?,
        Plane::from_tensor(a, op, scale)?,
        Plane::from_tensor(b, op, scale)?,
    ))
}

/// Sum of correlations of the difference images: `r(F - B, A) + r(F - A, B)`.
pub fn scd(fused: &Tensor, a: &Tensor, b: &Tensor) -> Result<f64> {
    let (f, a, b) = triple(fused, a, b, "scd", 1.0)?;
    let fb = f.zip(&b, |p, q| p - q);
    let fa = f.zip(&a, |p, q| p - q);
    Ok(pearson(&fb.data, &a.data) + pearson(&fa.data, &b.data))
}

/// Mean of `r(F, A)` and `r(F, B)`.
pub fn cc(fused: &Tensor, a: &Tensor, b: &Tensor) -> Result<f64> {
    let (f, a, b) = triple(fused, a, b, "cc", 1.0)?;
    Ok(0.5 * (pearson(&f.data, &a.data) + pearson(&f.data, &b.data)))
}

pub const VIF_SCALES: usize = 4;
pub const VIF_NOISE_VAR: f64 = 2.0;
/// Smallest side for which the coarsest scale still has a valid window.
pub const VIF_MIN_SIDE: usize = 41;

/// Pixel-domain multi-scale VIF of `dist` against reference `reference`.
fn vifp(reference: &Plane, dist: &Plane) -> f64 {
    const TINY: f64 = 1e-10;
    let mut num = 0.0;
    let mut den = 0.0;
    let (mut r, mut d) = (reference.clone(), dist.clone());
    for scale in 1..=VIF_SCALES {
        let n = (1 << (VIF_SCALES - scale + 1)) + 1;
        let k = gaussian_1d(n, n as f64 / 5.0);
        if scale > 1 {
            r = r.filter_valid(&k).decimate();
            d = d.filter_valid(&k).decimate();
        }
        let mu1 = r.filter_valid(&k);
        let mu2 = d.filter_valid(&k);
        let rr = r.zip(&r, |p, q| p * q).filter_valid(&k);
        let dd = d.zip(&d, |p, q| p * q).filter_valid(&k);
        let rd = r.zip(&d, |p, q| p * q).filter_valid(&k);
        for i in 0..mu1.data.len() {
            let (m1, m2) = (mu1.data[i], mu2.data[i]);
            let mut s1 = (rr.data[i] - m1 * m1).max(0.0);
            let s2 = (dd.data[i] - m2 * m2).max(0.0);
            let s12 = rd.data[i] - m1 * m2;
            let mut g = s12 / (s1 + TINY);
            let mut sv = s2 - g * s12;
            if s1 < TINY {
                g = 0.0;
                sv = s2;
                s1 = 0.0;
            }
            if s2 < TINY {
                g = 0.0;
                sv = 0.0;
            }
            if g < 0.0 {
                sv = s2;
                g = 0.0;
            }
            if sv <= TINY {
                sv = TINY;
            }
            num += (1.0 + g * g * s1 / (sv + VIF_NOISE_VAR)).log10();
            den += (1.0 + s1 / VIF_NOISE_VAR).log10();
        }
    }
    num / den
}

/// VIF of a fused image against one source.
pub fn vif(fused: &Tensor, src: &Tensor) -> Result<f64> {
    let (f, s) = pair(fused, src, "vif", 255.0)?;
    check_min(&f, VIF_MIN_SIDE, "vif")?;
    Ok(vifp(&s, &f))
}

/// Mean VIF over both sources.
pub fn vif_fusion(fused: &Tensor, a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(0.5 * (vif(fused, a)? + vif(fused, b)?))
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

pub const QABF_TG: f64 = 0.9994;
pub const QABF_KG: f64 = -15.0;
pub const QABF_DG: f64 = 0.5;
pub const QABF_TA: f64 = 0.9879;
pub const QABF_KA: f64 = -22.0;
pub const QABF_DA: f64 = 0.8;

/// Edge strength and orientation; orientation is pi/2 where the horizontal
/// response vanishes.
fn edges(p: &Plane) -> (Plane, Plane) {
    let gx = p.filter3_replicate(&SOBEL_X);
    let gy = p.filter3_replicate(&SOBEL_Y);
    let strength = magnitude(&gx, &gy);
    let angle = gx.zip(&gy, |x, y| if x == 0.0 { std::f64::consts::FRAC_PI_2 } else { (y / x).atan() });
    (strength, angle)
}

/// Per-pixel edge preservation `Q^{XF}` of source edges `(gs, as_)` in the fused edges.
fn preservation(gs: &Plane, a_s: &Plane, gf: &Plane, a_f: &Plane) -> Vec<f64> {
    (0..gs.data.len())
        .map(|i| {
            let (g1, g2) = (gs.data[i], gf.data[i]);
            let rel_g = if g1 == 0.0 || g2 == 0.0 {
                0.0
            } else if g1 > g2 {
                g2 / g1
            } else {
                g1 / g2
            };
            let rel_a = 1.0 - (a_s.data[i] - a_f.data[i]).abs() / std::f64::consts::FRAC_PI_2;
            let qg = QABF_TG / (1.0 + (QABF_KG * (rel_g - QABF_DG)).exp());
            let qa = QABF_TA / (1.0 + (QABF_KA * (rel_a - QABF_DA)).exp());
            qg * qa
        })
        .collect()
}

/// Xydeas-Petrovic edge-preservation measure, weighted by source edge strength.
pub fn qabf(fused: &Tensor, a: &Tensor, b: &Tensor) -> Result<f64> {
    let (f, a, b) = triple(fused, a, b, "qabf", 255.0)?;
    let (gf, af) = edges(&f);
    let (ga, aa) = edges(&a);
    let (gb, ab) = edges(&b);
    let qa = preservation(&ga, &aa, &gf, &af);
    let qb = preservation(&gb, &ab, &gf, &af);
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..qa.len() {
        num += qa[i] * ga.data[i] + qb[i] * gb.data[i];
        den += ga.data[i] + gb.data[i];
    }
    Ok(if den == 0.0 { 0.0 } else { num / den })
}

/// Mean SSIM of the fused image against both sources.
pub fn ssim_fusion(fused: &Tensor, a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(0.5 * (ssim(fused, a)? + ssim(fused, b)?))
}

/// Mean GMSD of the fused image against both sources.
pub fn gmsd_fusion(fused: &Tensor, a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(0.5 * (gmsd(fused, a)? + gmsd(fused, b)?))
}
