//! Direct f64 reference implementations.

use mmdrfuse::vgg::{VggWeights, BLOCK_DEPTHS};

/// Multi-channel f64 map, `[c][y][x]` row-major.
#[derive(Clone, Debug)]
pub struct Map {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub d: Vec<f64>,
}

impl Map {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, d: vec![0.0; c * h * w] }
    }

    pub fn image(h: usize, w: usize, d: Vec<f64>) -> Self {
        assert_eq!(d.len(), h * w);
        Self { c: 1, h, w, d }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.d[(c * self.h + y) * self.w + x]
    }

    fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.d[(c * self.h + y) * self.w + x]
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    (if i < 0 { -i } else if i >= n { 2 * (n - 1) - i } else { i }) as usize
}

fn clamp(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

// ---------------------------------------------------------------- losses

pub fn max_img(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x.max(*y)).collect()
}

pub fn l1_mean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

pub fn intensity(o: &[f64], ir: &[f64], vis: &[f64]) -> f64 {
    l1_mean(o, &max_img(ir, vis))
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Sobel responses with reflect padding.
pub fn sobel(img: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            for dy in 0..3 {
                for dx in 0..3 {
                    let v = img[reflect(y as isize + dy as isize - 1, h) * w + reflect(x as isize + dx as isize - 1, w)];
                    gx[y * w + x] += SOBEL_X[dy][dx] * v;
                    gy[y * w + x] += SOBEL_Y[dy][dx] * v;
                }
            }
        }
    }
    (gx, gy)
}

pub fn sobel_sq(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let (ax, ay) = sobel(a, h, w);
    let (bx, by) = sobel(b, h, w);
    let s: f64 = (0..h * w).map(|i| (ax[i] - bx[i]).powi(2) + (ay[i] - by[i]).powi(2)).sum();
    s / (h * w) as f64
}

pub fn gradient(o: &[f64], ir: &[f64], vis: &[f64], h: usize, w: usize) -> f64 {
    sobel_sq(o, &max_img(ir, vis), h, w)
}

/// `½ Σ_taps ‖F_t/|F_t| - F_s/|F_s|‖` with `F` the channel sum.
pub fn distill(t: &[Map; 2], s: &[Map; 2]) -> f64 {
    let mut v = 0.0;
    for (tm, sm) in t.iter().zip(s) {
        let att = |m: &Map| -> Vec<f64> { (0..m.h * m.w).map(|p| (0..m.c).map(|c| m.d[c * m.h * m.w + p]).sum()).collect() };
        let (a, b) = (att(tm), att(sm));
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v += 0.5 * a.iter().zip(&b).map(|(x, y)| (x / na - y / nb).powi(2)).sum::<f64>().sqrt();
    }
    v
}

// ---------------------------------------------------------------- VGG

/// f64 copy of the VGG weights: per layer (out, in, weights, bias).
pub struct Vgg64 {
    layers: Vec<(usize, usize, Vec<f64>, Vec<f64>)>,
    mean: [f64; 3],
    std: [f64; 3],
}

impl Vgg64 {
    pub fn new(v: &VggWeights) -> Self {
        let layers = v
            .layers()
            .iter()
            .map(|l| {
                let s = l.weights.shape();
                (s.n, s.c, l.weights.data().iter().map(|&x| f64::from(x)).collect(), l.bias.iter().map(|&x| f64::from(x)).collect())
            })
            .collect();
        Self {
            layers,
            mean: v.mean().map(f64::from),
            std: v.std().map(f64::from),
        }
    }

    fn conv_relu(&self, l: usize, x: &Map) -> Map {
        let (out, inp, w, b) = &self.layers[l];
        assert_eq!(*inp, x.c);
        let (h, wd) = (x.h, x.w);
        let mut y = Map::zeros(*out, h, wd);
        for o in 0..*out {
            let plane = &mut y.d[o * h * wd..(o + 1) * h * wd];
            plane.fill(b[o]);
            for c in 0..*inp {
                let src = &x.d[c * h * wd..(c + 1) * h * wd];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wv = w[((o * inp + c) * 3 + ky) * 3 + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for yy in 0..h {
                            let sy = yy as isize + ky as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let srow = &src[sy as usize * wd..(sy as usize + 1) * wd];
                            let drow = &mut plane[yy * wd..(yy + 1) * wd];
                            for xx in 0..wd {
                                let sx = xx as isize + kx as isize - 1;
                                if sx >= 0 && sx < wd as isize {
                                    drow[xx] += wv * srow[sx as usize];
                                }
                            }
                        }
                    }
                }
            }
            for v in plane.iter_mut() {
                *v = v.max(0.0);
            }
        }
        y
    }

    fn pool(x: &Map) -> Map {
        let (h, w) = (x.h / 2, x.w / 2);
        let mut y = Map::zeros(x.c, h, w);
        for c in 0..x.c {
            for yy in 0..h {
                for xx in 0..w {
                    let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|&(dy, dx)| x.at(c, 2 * yy + dy, 2 * xx + dx))
                        .fold(f64::NEG_INFINITY, f64::max);
                    *y.at_mut(c, yy, xx) = m;
                }
            }
        }
        y
    }

    /// The first `depth` taps of a single-channel image.
    pub fn taps(&self, img: &[f64], h: usize, w: usize, depth: usize) -> Vec<Map> {
        let mut x = Map::zeros(3, h, w);
        for c in 0..3 {
            for p in 0..h * w {
                x.d[c * h * w + p] = (img[p] - self.mean[c]) / self.std[c];
            }
        }
        let mut taps = Vec::new();
        let mut l = 0;
        for (block, &n) in BLOCK_DEPTHS.iter().enumerate().take(depth) {
            if block > 0 {
                x = Self::pool(&x);
            }
            for _ in 0..n {
                x = self.conv_relu(l, &x);
                l += 1;
            }
            taps.push(x.clone());
        }
        taps
    }
}

/// `Σ_{i in idx} ‖a_i - b_i‖² / (k · |a_i|)`.
pub fn tap_sq(a: &[Map], b: &[Map], idx: &[usize]) -> f64 {
    idx.iter()
        .map(|&i| a[i].d.iter().zip(&b[i].d).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / (idx.len() * a[i].d.len()) as f64)
        .sum()
}

pub fn tap_max(a: &[Map], b: &[Map]) -> Vec<Map> {
    a.iter()
        .zip(b)
        .map(|(x, y)| Map {
            d: x.d.iter().zip(&y.d).map(|(p, q)| p.max(*q)).collect(),
            ..*x
        })
        .collect()
}

pub fn perception(vgg: &Vgg64, o: &[f64], ir: &[f64], vis: &[f64], h: usize, w: usize) -> f64 {
    let target = tap_max(&vgg.taps(ir, h, w, 5), &vgg.taps(vis, h, w, 5));
    tap_sq(&vgg.taps(o, h, w, 5), &target, &[0, 1, 2, 3, 4])
}

pub fn refresh_s(vgg: &Vgg64, o: &[f64], o_bs: &[f64], h: usize, w: usize) -> f64 {
    tap_sq(&vgg.taps(o, h, w, 5), &vgg.taps(o_bs, h, w, 5), &[3, 4]) + l1_mean(o, o_bs)
}

pub fn refresh_g(vgg: &Vgg64, o: &[f64], o_bg: &[f64], h: usize, w: usize) -> f64 {
    tap_sq(&vgg.taps(o, h, w, 3), &vgg.taps(o_bg, h, w, 3), &[0, 1, 2]) + sobel_sq(o, o_bg, h, w)
}

// ---------------------------------------------------------------- metrics

/// Normalised 2-D Gaussian window built directly in two dimensions.
fn window(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..n * n)
        .map(|i| {
            let (y, x) = ((i / n) as f64 - c, (i % n) as f64 - c);
            (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Weighted mean, variances and covariance of two images over the window
/// whose top-left corner is `(y, x)`.
fn window_stats(a: &Map, b: &Map, k: &[f64], n: usize, y: usize, x: usize) -> (f64, f64, f64, f64, f64) {
    let (mut ma, mut mb) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let wv = k[i * n + j];
            ma += wv * a.at(0, y + i, x + j);
            mb += wv * b.at(0, y + i, x + j);
        }
    }
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let wv = k[i * n + j];
            let (p, q) = (a.at(0, y + i, x + j) - ma, b.at(0, y + i, x + j) - mb);
            va += wv * p * p;
            vb += wv * q * q;
            cov += wv * p * q;
        }
    }
    (ma, mb, va, vb, cov)
}

pub fn ssim(a: &Map, b: &Map) -> f64 {
    let n = 11;
    let k = window(n, 1.5);
    let (c1, c2) = (1e-4, 9e-4);
    let (oh, ow) = (a.h - n + 1, a.w - n + 1);
    let mut s = 0.0;
    for y in 0..oh {
        for x in 0..ow {
            let (ma, mb, va, vb, cov) = window_stats(a, b, &k, n, y, x);
            s += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    s / (oh * ow) as f64
}

fn filter3_clamped(a: &Map, k: &[[f64; 3]; 3]) -> Map {
    let mut out = Map::zeros(1, a.h, a.w);
    for y in 0..a.h {
        for x in 0..a.w {
            let mut s = 0.0;
            for dy in 0..3 {
                for dx in 0..3 {
                    s += k[dy][dx] * a.at(0, clamp(y as isize + dy as isize - 1, a.h), clamp(x as isize + dx as isize - 1, a.w));
                }
            }
            *out.at_mut(0, y, x) = s;
        }
    }
    out
}

pub fn gmsd(a: &Map, b: &Map) -> f64 {
    let down = |m: &Map| {
        let (h, w) = (m.h.div_ceil(2), m.w.div_ceil(2));
        let mut o = Map::zeros(1, h, w);
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    s += 255.0 * m.at(0, clamp((2 * y + dy) as isize, m.h), clamp((2 * x + dx) as isize, m.w));
                }
                *o.at_mut(0, y, x) = s / 4.0;
            }
        }
        o
    };
    let t = 1.0 / 3.0;
    let px = [[t, 0.0, -t], [t, 0.0, -t], [t, 0.0, -t]];
    let py = [[t, t, t], [0.0, 0.0, 0.0], [-t, -t, -t]];
    let mag = |m: &Map| {
        let (gx, gy) = (filter3_clamped(m, &px), filter3_clamped(m, &py));
        gx.d.iter().zip(&gy.d).map(|(x, y)| (x * x + y * y).sqrt()).collect::<Vec<_>>()
    };
    let (ga, gb) = (mag(&down(a)), mag(&down(b)));
    let gms: Vec<f64> = ga.iter().zip(&gb).map(|(p, q)| (2.0 * p * q + 170.0) / (p * p + q * q + 170.0)).collect();
    let n = gms.len() as f64;
    let mean = gms.iter().sum::<f64>() / n;
    (gms.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

pub fn sd(a: &Map) -> f64 {
    let v: Vec<f64> = a.d.iter().map(|x| 255.0 * x).collect();
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

pub fn corr(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va.sqrt() * vb.sqrt())
    }
}

pub fn scd(f: &Map, a: &Map, b: &Map) -> f64 {
    let diff = |x: &Map, y: &Map| x.d.iter().zip(&y.d).map(|(p, q)| p - q).collect::<Vec<_>>();
    corr(&diff(f, b), &a.d) + corr(&diff(f, a), &b.d)
}

pub fn cc(f: &Map, a: &Map, b: &Map) -> f64 {
    (corr(&f.d, &a.d) + corr(&f.d, &b.d)) / 2.0
}

/// Valid-window filtering with a 2-D kernel.
fn filter_valid(a: &Map, k: &[f64], n: usize) -> Map {
    let (h, w) = (a.h - n + 1, a.w - n + 1);
    let mut o = Map::zeros(1, h, w);
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    s += k[i * n + j] * a.at(0, y + i, x + j);
                }
            }
            *o.at_mut(0, y, x) = s;
        }
    }
    o
}

/// Pixel-domain multi-scale VIF of `dist` with respect to `reference`.
pub fn vif(reference: &Map, dist: &Map) -> f64 {
    let scale255 = |m: &Map| Map { d: m.d.iter().map(|v| 255.0 * v).collect(), ..*m };
    let (mut r, mut d) = (scale255(reference), scale255(dist));
    let (mut num, mut den) = (0.0, 0.0);
    let eps = 1e-10;
    for s in 1..=4 {
        let n = (1usize << (5 - s)) + 1;
        let k = window(n, n as f64 / 5.0);
        if s > 1 {
            let sub = |m: &Map| {
                let f = filter_valid(m, &k, n);
                let (h, w) = (f.h.div_ceil(2), f.w.div_ceil(2));
                let mut o = Map::zeros(1, h, w);
                for y in 0..h {
                    for x in 0..w {
                        *o.at_mut(0, y, x) = f.at(0, 2 * y, 2 * x);
                    }
                }
                o
            };
            r = sub(&r);
            d = sub(&d);
        }
        for y in 0..=r.h - n {
            for x in 0..=r.w - n {
                let (_, _, va, vb, cov) = window_stats(&r, &d, &k, n, y, x);
                let (mut s1, s2) = (va.max(0.0), vb.max(0.0));
                let mut g = cov / (s1 + eps);
                let mut sv = s2 - g * cov;
                if s1 < eps {
                    g = 0.0;
                    sv = s2;
                    s1 = 0.0;
                }
                if s2 < eps {
                    g = 0.0;
                    sv = 0.0;
                }
                if g < 0.0 {
                    sv = s2;
                    g = 0.0;
                }
                sv = sv.max(eps);
                num += (1.0 + g * g * s1 / (sv + 2.0)).log10();
                den += (1.0 + s1 / 2.0).log10();
            }
        }
    }
    num / den
}

pub fn qabf(f: &Map, a: &Map, b: &Map) -> f64 {
    let edge = |m: &Map, y: usize, x: usize| {
        let (mut gx, mut gy) = (0.0, 0.0);
        for dy in 0..3 {
            for dx in 0..3 {
                let v = 255.0 * m.at(0, clamp(y as isize + dy as isize - 1, m.h), clamp(x as isize + dx as isize - 1, m.w));
                gx += SOBEL_X[dy][dx] * v;
                gy += SOBEL_Y[dy][dx] * v;
            }
        }
        let g = (gx * gx + gy * gy).sqrt();
        let alpha = if gx == 0.0 { std::f64::consts::FRAC_PI_2 } else { (gy / gx).atan() };
        (g, alpha)
    };
    let q = |(gs, as_): (f64, f64), (gf, af): (f64, f64)| {
        let rg = if gs == 0.0 || gf == 0.0 { 0.0 } else { gs.min(gf) / gs.max(gf) };
        let ra = 1.0 - (as_ - af).abs() / std::f64::consts::FRAC_PI_2;
        0.9994 / (1.0 + (-15.0 * (rg - 0.5)).exp()) * 0.9879 / (1.0 + (-22.0 * (ra - 0.8)).exp())
    };
    let (mut num, mut den) = (0.0, 0.0);
    for y in 0..f.h {
        for x in 0..f.w {
            let (ef, ea, eb) = (edge(f, y, x), edge(a, y, x), edge(b, y, x));
            num += q(ea, ef) * ea.0 + q(eb, ef) * eb.0;
            den += ea.0 + eb.0;
        }
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}
