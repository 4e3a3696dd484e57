//! One function per acceptance criterion.

use std::time::Instant;

use mmdrfuse::data::{patches_from_pairs, synthetic_pairs, PatchSet};
use mmdrfuse::loss::{
    comprehensive_loss, distill_loss, gradient_loss, intensity_loss, output_objective, perception_loss, refresh_g_loss,
    refresh_s_loss, total_loss, Components, LossWeights, RefreshTargets,
};
use mmdrfuse::metrics::{cc, gmsd, qabf, scd, sd, ssim, vif};
use mmdrfuse::nets::{Arch, FusionNet, NetTaps};
use mmdrfuse::refresh::{self, MemoryStore, RefreshStore, Scores};
use mmdrfuse::tensor::{Shape, Tensor};
use mmdrfuse::train::{train_student, train_teacher, LossLog, TrainConfig};
use mmdrfuse::vgg::VggWeights;
use rand::Rng;

use super::oracle::{self, Map, Vgg64};
use super::{noise, rng, textured, to_f64, Outcome};

// ---------------------------------------------------------------- budgets

pub fn parameter_budget() -> Outcome {
    let net = FusionNet::init(Arch::Student, 0);
    let (params, payload) = (net.param_count(), net.payload_len());
    let back = FusionNet::from_bytes(&net.to_bytes()).map(|b| b == net).unwrap_or(false);
    Outcome::new(
        params == 113 && payload == 452 && back,
        format!("params {params}, payload {payload} bytes ({:.3} KB), round trip {back}", payload as f64 / 1024.0),
    )
}

pub fn efficiency() -> Outcome {
    let macs = FusionNet::init(Arch::Student, 0).mac_count(1024, 1280);
    let rel = (macs as f64 / 0.142e9 - 1.0).abs();
    Outcome::new(
        macs == 141_557_760 && rel < 0.01,
        format!("{macs} MACs at 1280x1024 ({:.4} G, {:.2}% from 0.142 G)", macs as f64 / 1e9, 100.0 * rel),
    )
}

// ---------------------------------------------------------------- gradients

/// Result of one finite-difference check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: &'static str,
    pub value_err: f64,
    pub grad_err: f64,
    pub value_tol: f64,
    pub grad_tol: f64,
}

impl GradCheck {
    pub fn pass(&self) -> bool {
        self.value_err <= self.value_tol && self.grad_err <= self.grad_tol
    }

    pub fn line(&self) -> String {
        format!(
            "{}: value rel err {:.1e} (tol {:.0e}), gradient rel err {:.1e} (tol {:.0e})",
            self.name, self.value_err, self.value_tol, self.grad_err, self.grad_tol
        )
    }
}

/// Compares a library value and gradient against central differences of an
/// f64 oracle along random directions and single coordinates. Coordinate
/// errors are measured against 1% of the largest gradient entry.
fn fd_check(
    name: &'static str,
    value: f64,
    grad: &[f32],
    x: &[f64],
    f: impl Fn(&[f64]) -> f64,
    eps: f64,
    tol: (f64, f64),
    seed: u64,
) -> GradCheck {
    let mut r = rng(seed);
    let reference = f(x);
    let value_err = (value - reference).abs() / reference.abs().max(1e-12);
    let g: Vec<f64> = grad.iter().map(|&v| f64::from(v)).collect();
    let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let deriv = |d: &[f64]| {
        let plus: Vec<f64> = x.iter().zip(d).map(|(a, b)| a + eps * b).collect();
        let minus: Vec<f64> = x.iter().zip(d).map(|(a, b)| a - eps * b).collect();
        (f(&plus) - f(&minus)) / (2.0 * eps)
    };
    let mut worst = 0.0f64;
    for _ in 0..3 {
        let d: Vec<f64> = (0..x.len()).map(|_| r.random_range(-1.0..=1.0)).collect();
        let ana: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
        let num = deriv(&d);
        let dnorm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max(super::rel_err(ana, num, 1e-2 * scale * dnorm));
    }
    for _ in 0..4 {
        let i = r.random_range(0..x.len());
        let mut d = vec![0.0; x.len()];
        d[i] = 1.0;
        worst = worst.max(super::rel_err(g[i], deriv(&d), 1e-2 * scale));
    }
    GradCheck {
        name,
        value_err,
        grad_err: worst,
        value_tol: tol.0,
        grad_tol: tol.1,
    }
}

fn image_from(x: &[f64], h: usize, w: usize) -> Tensor {
    Tensor::new(Shape::new(1, 1, h, w), x.iter().map(|&v| v as f32).collect()).expect("shape")
}

/// An output image whose pixels stay at least `margin` away from each
/// reference, so L1 terms are differentiable under the FD step.
fn away_from(h: usize, w: usize, refs: &[&[f64]], margin: f64, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..h * w)
        .map(|i| loop {
            let v: f64 = f64::from(r.random_range(0.0f32..=1.0));
            if refs.iter().all(|t| (v - t[i]).abs() > margin) {
                break v;
            }
        })
        .collect()
}

const SMALL: usize = 16;
const VGG_SIDE: usize = 32;
const EPS: f64 = 1e-3;
const VGG_EPS: f64 = 1e-6;
const TOL: (f64, f64) = (1e-5, 1e-3);
const VGG_TOL: (f64, f64) = (1e-4, 1e-2);

pub fn grad_intensity() -> GradCheck {
    let (h, w) = (SMALL, SMALL);
    let (ir, vis) = (noise(h, w, 1), noise(h, w, 2));
    let (irf, visf) = (to_f64(&ir), to_f64(&vis));
    let m = oracle::max_img(&irf, &visf);
    let o = image_from(&away_from(h, w, &[&m], 4.0 * EPS, 3), h, w);
    let l = intensity_loss(&o, &ir, &vis).unwrap();
    fd_check("intensity", l.value, l.grad.data(), &to_f64(&o), |x| oracle::intensity(x, &irf, &visf), EPS, TOL, 10)
}

pub fn grad_gradient() -> GradCheck {
    let (h, w) = (SMALL, SMALL);
    let (ir, vis, o) = (noise(h, w, 4), noise(h, w, 5), noise(h, w, 6));
    let (irf, visf) = (to_f64(&ir), to_f64(&vis));
    let l = gradient_loss(&o, &ir, &vis).unwrap();
    fd_check("gradient", l.value, l.grad.data(), &to_f64(&o), |x| oracle::gradient(x, &irf, &visf, h, w), EPS, TOL, 11)
}

pub fn grad_distill() -> GradCheck {
    let (h, w) = (SMALL, SMALL);
    let mut r = rng(7);
    let mut t = |c: usize| Tensor::from_fn(Shape::new(1, c, h, w), |_, _, _, _| r.random_range(-1.0f32..=1.0));
    let teacher = NetTaps { feat: t(4), out: t(1) };
    let student = NetTaps { feat: t(4), out: t(1) };
    let d = distill_loss(&teacher, &student).unwrap();
    let to_map = |x: &Tensor| Map {
        c: x.shape().c,
        h,
        w,
        d: to_f64(x),
    };
    let tm = [to_map(&teacher.feat), to_map(&teacher.out)];
    let split = 4 * h * w;
    let mut x = to_f64(&student.feat);
    x.extend(to_f64(&student.out));
    let mut g = d.grad_feat.data().to_vec();
    g.extend_from_slice(d.grad_out.data());
    let f = |x: &[f64]| {
        let s = [Map { c: 4, h, w, d: x[..split].to_vec() }, Map { c: 1, h, w, d: x[split..].to_vec() }];
        oracle::distill(&tm, &s)
    };
    fd_check("distillation", d.value, &g, &x, f, EPS, TOL, 12)
}

struct VggCase {
    vgg: VggWeights,
    v64: Vgg64,
    ir: Tensor,
    vis: Tensor,
    hist: Tensor,
}

fn vgg_case() -> VggCase {
    let vgg = VggWeights::synthetic(3);
    let v64 = Vgg64::new(&vgg);
    VggCase {
        v64,
        vgg,
        ir: textured(VGG_SIDE, VGG_SIDE, 20),
        vis: textured(VGG_SIDE, VGG_SIDE, 21),
        hist: textured(VGG_SIDE, VGG_SIDE, 22),
    }
}

pub fn grad_perception() -> GradCheck {
    let c = vgg_case();
    let n = VGG_SIDE;
    let o = textured(n, n, 23);
    let l = perception_loss(&o, &c.ir, &c.vis, &c.vgg).unwrap();
    let target = oracle::tap_max(&c.v64.taps(&to_f64(&c.ir), n, n, 5), &c.v64.taps(&to_f64(&c.vis), n, n, 5));
    let f = |x: &[f64]| oracle::tap_sq(&c.v64.taps(x, n, n, 5), &target, &[0, 1, 2, 3, 4]);
    fd_check("perception", l.value, l.grad.data(), &to_f64(&o), f, VGG_EPS, VGG_TOL, 13)
}

pub fn grad_refresh_s() -> GradCheck {
    let c = vgg_case();
    let n = VGG_SIDE;
    let hist = to_f64(&c.hist);
    let o = image_from(&away_from(n, n, &[&hist], 1e-3, 24), n, n);
    let l = refresh_s_loss(&o, &c.hist, &c.vgg).unwrap();
    let target = c.v64.taps(&hist, n, n, 5);
    let f = |x: &[f64]| oracle::tap_sq(&c.v64.taps(x, n, n, 5), &target, &[3, 4]) + oracle::l1_mean(x, &hist);
    fd_check("refresh L_s", l.value, l.grad.data(), &to_f64(&o), f, VGG_EPS, VGG_TOL, 14)
}

pub fn grad_refresh_g() -> GradCheck {
    let c = vgg_case();
    let n = VGG_SIDE;
    let hist = to_f64(&c.hist);
    let o = textured(n, n, 25);
    let l = refresh_g_loss(&o, &c.hist, &c.vgg).unwrap();
    let target = c.v64.taps(&hist, n, n, 3);
    let f = |x: &[f64]| oracle::tap_sq(&c.v64.taps(x, n, n, 3), &target, &[0, 1, 2]) + oracle::sobel_sq(x, &hist, n, n);
    fd_check("refresh L_g", l.value, l.grad.data(), &to_f64(&o), f, VGG_EPS, VGG_TOL, 15)
}

pub fn grad_comprehensive() -> GradCheck {
    let c = vgg_case();
    let n = VGG_SIDE;
    let w = LossWeights::TEACHER;
    let (irf, visf) = (to_f64(&c.ir), to_f64(&c.vis));
    let o = image_from(&away_from(n, n, &[&oracle::max_img(&irf, &visf)], 1e-3, 26), n, n);
    let (b, g) = comprehensive_loss(&o, &c.ir, &c.vis, &w, &c.vgg).unwrap();
    let target = oracle::tap_max(&c.v64.taps(&irf, n, n, 5), &c.v64.taps(&visf, n, n, 5));
    let f = |x: &[f64]| {
        w.gamma * oracle::intensity(x, &irf, &visf)
            + w.delta * oracle::gradient(x, &irf, &visf, n, n)
            + oracle::tap_sq(&c.v64.taps(x, n, n, 5), &target, &[0, 1, 2, 3, 4])
    };
    fd_check("comprehensive", b.comprehensive, g.data(), &to_f64(&o), f, VGG_EPS, VGG_TOL, 16)
}

/// Refresh and total objective with both gaps active and student weights.
pub fn grad_total() -> GradCheck {
    let c = vgg_case();
    let n = VGG_SIDE;
    let w = LossWeights::STUDENT;
    let (irf, visf) = (to_f64(&c.ir), to_f64(&c.vis));
    let (bs, bg) = (c.hist.clone(), textured(n, n, 27));
    let (bsf, bgf) = (to_f64(&bs), to_f64(&bg));
    let o = image_from(&away_from(n, n, &[&oracle::max_img(&irf, &visf), &bsf], 1e-3, 28), n, n);
    let targets = RefreshTargets {
        o_bs: &bs,
        o_bg: &bg,
        gap_s: 0.37,
        gap_g: 0.21,
    };
    let (b, g) = output_objective(&o, &c.ir, &c.vis, &c.vgg, &w, Components::default(), Some(&targets)).unwrap();
    let assembled = total_loss(&b, &w);
    let max_t = oracle::tap_max(&c.v64.taps(&irf, n, n, 5), &c.v64.taps(&visf, n, n, 5));
    let (s_t, g_t) = (c.v64.taps(&bsf, n, n, 5), c.v64.taps(&bgf, n, n, 3));
    let f = |x: &[f64]| {
        let t = c.v64.taps(x, n, n, 5);
        let comp = w.gamma * oracle::intensity(x, &irf, &visf)
            + w.delta * oracle::gradient(x, &irf, &visf, n, n)
            + oracle::tap_sq(&t, &max_t, &[0, 1, 2, 3, 4]);
        let ls = oracle::tap_sq(&t, &s_t, &[3, 4]) + oracle::l1_mean(x, &bsf);
        let lg = oracle::tap_sq(&t[..3], &g_t, &[0, 1, 2]) + oracle::sobel_sq(x, &bgf, n, n);
        w.lambda * comp + 0.37 * ls + 0.21 * lg
    };
    let mut check = fd_check("total (comprehensive + refresh)", b.total, g.data(), &to_f64(&o), f, VGG_EPS, VGG_TOL, 17);
    let assembly = (assembled - b.total).abs() / b.total.abs();
    check.value_err = check.value_err.max(assembly);
    check
}

pub fn gradient_checks() -> Vec<GradCheck> {
    vec![
        grad_distill(),
        grad_intensity(),
        grad_gradient(),
        grad_perception(),
        grad_comprehensive(),
        grad_refresh_s(),
        grad_refresh_g(),
        grad_total(),
    ]
}

pub fn gradient_suite() -> Outcome {
    let checks = gradient_checks();
    let failed: Vec<String> = checks.iter().filter(|c| !c.pass()).map(GradCheck::line).collect();
    let worst = checks.iter().map(|c| c.grad_err).fold(0.0, f64::max);
    Outcome::new(
        failed.is_empty(),
        if failed.is_empty() {
            format!("{} losses, worst gradient rel err {worst:.1e}", checks.len())
        } else {
            failed.join("; ")
        },
    )
}

// ---------------------------------------------------------------- metrics

pub const METRIC_SIDE: usize = 48;

fn map_of(t: &Tensor) -> Map {
    let s = t.shape();
    Map::image(s.h, s.w, to_f64(t))
}

/// `(fused, a, b)` triples alternating smooth and noisy content.
pub fn metric_triples(count: usize) -> Vec<(Tensor, Tensor, Tensor)> {
    (0..count as u64)
        .map(|i| {
            let n = METRIC_SIDE;
            let a = if i % 2 == 0 { textured(n, n, 100 + i) } else { noise(n, n, 100 + i) };
            let b = textured(n, n, 200 + i);
            let f = if i % 3 == 0 {
                noise(n, n, 300 + i)
            } else {
                let k = 0.2 + 0.6 * (i as f32 / count as f32);
                a.zip_map(&b, "blend", |x, y| k * x + (1.0 - k) * y).unwrap()
            };
            (f, a, b)
        })
        .collect()
}

/// Worst error of each metric over the triples: `(name, err, tol)`.
pub fn metric_errors(triples: &[(Tensor, Tensor, Tensor)]) -> Vec<(&'static str, f64, f64)> {
    let mut worst = [("SSIM", 0.0, 1e-6), ("GMSD", 0.0, 1e-6), ("SD", 0.0, 1e-6), ("SCD", 0.0, 1e-6), ("VIF", 0.0, 1e-5), ("Qabf", 0.0, 1e-5), ("CC", 0.0, 1e-6)];
    for (f, a, b) in triples {
        let (fm, am, bm) = (map_of(f), map_of(a), map_of(b));
        let pairs = [
            (ssim(f, a).unwrap(), oracle::ssim(&fm, &am)),
            (gmsd(f, a).unwrap(), oracle::gmsd(&fm, &am)),
            (sd(f).unwrap(), oracle::sd(&fm)),
            (scd(f, a, b).unwrap(), oracle::scd(&fm, &am, &bm)),
            (vif(f, a).unwrap(), oracle::vif(&am, &fm)),
            (qabf(f, a, b).unwrap(), oracle::qabf(&fm, &am, &bm)),
            (cc(f, a, b).unwrap(), oracle::cc(&fm, &am, &bm)),
        ];
        for (slot, (lib, orc)) in worst.iter_mut().zip(pairs) {
            slot.1 = f64::max(slot.1, (lib - orc).abs() / orc.abs().max(1.0));
        }
    }
    worst.to_vec()
}

/// `ssim(x,x)-1`, `gmsd(x,x)`, `vif(x,x)-1` worst absolute deviations.
pub fn metric_identities(images: &[Tensor]) -> [f64; 3] {
    let mut w = [0.0f64; 3];
    for x in images {
        w[0] = w[0].max((ssim(x, x).unwrap() - 1.0).abs());
        w[1] = w[1].max(gmsd(x, x).unwrap().abs());
        w[2] = w[2].max((vif(x, x).unwrap() - 1.0).abs());
    }
    w
}

pub fn metric_oracle_suite() -> Outcome {
    let triples = metric_triples(20);
    let errs = metric_errors(&triples);
    let ids = metric_identities(&triples.iter().map(|t| t.1.clone()).collect::<Vec<_>>());
    let pass = errs.iter().all(|e| e.1 <= e.2) && ids.iter().all(|&d| d <= 1e-6);
    let detail = errs
        .iter()
        .map(|(n, e, t)| format!("{n} {e:.0e}{}", if e <= t { "" } else { " (over tol)" }))
        .collect::<Vec<_>>()
        .join(", ");
    Outcome::new(
        pass,
        format!("{} images; {detail}; identities ssim {:.0e} gmsd {:.0e} vif {:.0e}", triples.len(), ids[0], ids[1], ids[2]),
    )
}

// ---------------------------------------------------------------- refresh

/// Oracle scores rounded to storage precision.
fn oracle_scores(o: &Tensor, ir: &Tensor, vis: &Tensor) -> (f32, f32) {
    let (om, im, vm) = (map_of(o), map_of(ir), map_of(vis));
    (
        (oracle::ssim(&om, &im) + oracle::ssim(&om, &vm)) as f32,
        (oracle::gmsd(&om, &im) + oracle::gmsd(&om, &vm)) as f32,
    )
}

/// Runs `visits` random outputs per sample through evaluate/update and
/// checks the final records against a brute-force scan. Returns a list of
/// violations.
pub fn refresh_sequences(store: &mut dyn RefreshStore, samples: u64, visits: usize, seed: u64) -> Vec<String> {
    let mut bad = Vec::new();
    let side = 24;
    let mut r = rng(seed);
    for id in 0..samples {
        let (ir, vis) = (textured(side, side, seed + 10 * id), textured(side, side, seed + 10 * id + 1));
        let mut seen: Vec<(Tensor, f32, f32)> = Vec::new();
        for v in 0..visits {
            let k = r.random_range(0.0f32..=1.0);
            let jitter = noise(side, side, seed ^ (id << 8) ^ v as u64);
            let amp = r.random_range(0.0f32..0.5);
            let o = ir
                .zip_map(&vis, "blend", |a, b| k * a + (1.0 - k) * b)
                .unwrap()
                .zip_map(&jitter, "jitter", |a, j| (a + amp * (j - 0.5)).clamp(0.0, 1.0))
                .unwrap();
            let e = refresh::evaluate(store, id, &o, &ir, &vis).unwrap();
            if e.gap_s < 0.0 || e.gap_g < 0.0 {
                bad.push(format!("sample {id} visit {v}: negative gap"));
            }
            let (s, g) = oracle_scores(&o, &ir, &vis);
            match e.record.as_ref() {
                None if v > 0 => bad.push(format!("sample {id} visit {v}: record missing")),
                Some(_) if v == 0 => bad.push(format!("sample {id}: record before first visit")),
                None => {
                    if e.gap_s != 0.0 || e.gap_g != 0.0 {
                        bad.push(format!("sample {id}: first-visit gaps not zero"));
                    }
                }
                Some(rec) => {
                    let want_s = (f64::from(rec.s_bs) - f64::from(s)).max(0.0);
                    let want_g = (f64::from(g) - f64::from(rec.g_bg)).max(0.0);
                    if (e.gap_s - want_s).abs() > 1e-6 || (e.gap_g - want_g).abs() > 1e-6 {
                        bad.push(format!("sample {id} visit {v}: gaps {:?} vs oracle {:?}", (e.gap_s, e.gap_g), (want_s, want_g)));
                    }
                }
            }
            refresh::update(store, id, &o, e.scores, e.record.as_ref()).unwrap();
            seen.push((o, s, g));
        }
        let best_s = (0..seen.len()).fold(0, |b, i| if seen[i].1 > seen[b].1 { i } else { b });
        let best_g = (0..seen.len()).fold(0, |b, i| if seen[i].2 < seen[b].2 { i } else { b });
        let rec = store.get(id).unwrap().expect("record after visits");
        if rec.o_bs != seen[best_s].0 || rec.s_bs != seen[best_s].1 {
            bad.push(format!("sample {id}: O_bs is not the argmax-SSIM output (visit {best_s})"));
        }
        if rec.o_bg != seen[best_g].0 || rec.g_bg != seen[best_g].2 {
            bad.push(format!("sample {id}: O_bg is not the argmin-GMSD output (visit {best_g})"));
        }
        let max_s = seen.iter().map(|x| x.1).fold(f32::MIN, f32::max);
        let min_g = seen.iter().map(|x| x.2).fold(f32::MAX, f32::min);
        if rec.s_bs != max_s || rec.g_bg != min_g {
            bad.push(format!("sample {id}: stored scores are not the running extremes"));
        }
    }
    bad
}

fn tiny_patches(n: usize, side: usize, seed: u64) -> PatchSet {
    patches_from_pairs(&synthetic_pairs(n, side + 8, side + 8, seed), 1, side, seed).unwrap()
}

pub fn refresh_state_machine() -> Outcome {
    let mut bad = refresh_sequences(&mut MemoryStore::new(), 6, 10, 40);
    let dir = tempfile::tempdir().unwrap();
    let mut disk = refresh::DiskStore::open(dir.path()).unwrap();
    bad.extend(refresh_sequences(&mut disk, 3, 10, 41));

    let vgg = VggWeights::synthetic(0);
    let (ir, vis) = (textured(32, 32, 50), textured(32, 32, 51));
    let e = refresh::evaluate(&MemoryStore::new(), 0, &ir, &ir, &vis).unwrap();
    let l = refresh::refresh_loss(&e, &ir, &vgg).unwrap();
    if l.value != 0.0 || l.grad.data().iter().any(|&g| g != 0.0) {
        bad.push("first-visit refresh loss not zero".into());
    }
    let config = TrainConfig {
        epochs: 1,
        batch_size: 2,
        lr: 1e-3,
        ..TrainConfig::teacher()
    };
    let (_, log) = train_teacher(&config, FusionNet::init(Arch::Teacher, 0), &tiny_patches(4, 32, 52), &vgg, Box::new(MemoryStore::new()), None).unwrap();
    if log.rows.iter().any(|r| r.losses.refresh != 0.0) {
        bad.push("epoch-1 training logged a nonzero refresh loss".into());
    }
    Outcome::new(
        bad.is_empty(),
        if bad.is_empty() {
            "9 samples x 10 outputs (memory and disk stores): argmax-SSIM/argmin-GMSD kept, gaps >= 0 and exact, epoch-1 refresh 0".into()
        } else {
            bad.join("; ")
        },
    )
}

/// The score type is only constructed through `refresh::score`.
pub fn scores_of(o: &Tensor, ir: &Tensor, vis: &Tensor) -> Scores {
    refresh::score(o, ir, vis).unwrap()
}

// ---------------------------------------------------------------- distillation

pub fn distillation_invariance() -> Outcome {
    let (h, w) = (12, 12);
    let mut r = rng(60);
    let mut t = |c: usize| Tensor::from_fn(Shape::new(1, c, h, w), |_, _, _, _| r.random_range(-1.0f32..=1.0));
    let teacher = NetTaps { feat: t(4), out: t(1) };
    let mut worst_scaled = 0.0f64;
    for k in [1e-3f32, 0.5, 1.0, 3.0, 250.0] {
        let s = NetTaps {
            feat: teacher.feat.scale(k),
            out: teacher.out.scale(k),
        };
        worst_scaled = worst_scaled.max(distill_loss(&teacher, &s).unwrap().value);
    }
    let spike = |c: usize, p: usize| {
        Tensor::from_fn(Shape::new(1, c, h, w), |_, ch, y, x| if y * w + x == p { if ch == 0 { 2.0 } else { 0.5 } } else { 0.0 })
    };
    let a = NetTaps { feat: spike(4, 5), out: spike(1, 17) };
    let b = NetTaps { feat: spike(4, 40), out: spike(1, 99) };
    let d = distill_loss(&a, &b).unwrap().value;
    let orth_err = (d - std::f64::consts::SQRT_2).abs();
    Outcome::new(
        worst_scaled < 1e-6 && orth_err < 1e-6,
        format!("scaled taps: max loss {worst_scaled:.1e}; orthonormal attention: loss {d:.7} (sqrt 2 err {orth_err:.1e})"),
    )
}

// ---------------------------------------------------------------- smoke training

pub const SMOKE_PAIRS: usize = 20;
pub const SMOKE_SIDE: usize = 48;
pub const SMOKE_PATCH: usize = 32;
pub const SMOKE_CROPS: usize = 4;
pub const SMOKE_BATCH: usize = 4;
pub const SMOKE_LR: f64 = 3e-3;

pub struct SmokeRun {
    pub teacher: FusionNet,
    pub student: FusionNet,
    pub teacher_log: LossLog,
    pub student_log: LossLog,
    pub outputs_in_range: bool,
}

pub fn smoke_config(phase: Arch) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: SMOKE_BATCH,
        lr: SMOKE_LR,
        seed: 1,
        ..TrainConfig::for_phase(phase)
    }
}

pub fn smoke_run() -> SmokeRun {
    let pairs = synthetic_pairs(SMOKE_PAIRS, SMOKE_SIDE, SMOKE_SIDE, 11);
    let patches = patches_from_pairs(&pairs, SMOKE_CROPS, SMOKE_PATCH, 12).unwrap();
    let vgg = VggWeights::synthetic(0);
    let (teacher, teacher_log) = train_teacher(
        &smoke_config(Arch::Teacher),
        FusionNet::init(Arch::Teacher, 1),
        &patches,
        &vgg,
        Box::new(MemoryStore::new()),
        None,
    )
    .unwrap();
    let (student, student_log) = train_student(
        &smoke_config(Arch::Student),
        FusionNet::init(Arch::Student, 2),
        &teacher,
        &patches,
        &vgg,
        Box::new(MemoryStore::new()),
        None,
    )
    .unwrap();
    let outputs_in_range = pairs.iter().all(|p| {
        [&teacher, &student].iter().all(|n| {
            n.forward(&p.ir, &p.vis)
                .unwrap()
                .out
                .data()
                .iter()
                .all(|v| (0.0..=1.0).contains(v))
        })
    });
    SmokeRun {
        teacher,
        student,
        teacher_log,
        student_log,
        outputs_in_range,
    }
}

pub fn epoch_ratio(log: &LossLog) -> f64 {
    log.epoch_mean(log.epochs() - 1).unwrap() / log.epoch_mean(0).unwrap()
}

pub fn smoke_training() -> Outcome {
    let t0 = Instant::now();
    let a = smoke_run();
    let b = smoke_run();
    let identical = a.teacher.to_bytes() == b.teacher.to_bytes()
        && a.student.to_bytes() == b.student.to_bytes()
        && a.teacher_log.to_csv() == b.teacher_log.to_csv()
        && a.student_log.to_csv() == b.student_log.to_csv();
    let (rt, rs) = (epoch_ratio(&a.teacher_log), epoch_ratio(&a.student_log));
    Outcome::new(
        rt <= 0.5 && rs <= 0.5 && a.outputs_in_range && identical,
        format!(
            "final/first epoch mean loss: teacher {rt:.3}, student {rs:.3} (need <= 0.5); outputs in [0,1] {}; reruns byte-identical {identical}; {:.0} s for two runs",
            a.outputs_in_range,
            t0.elapsed().as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- inference

pub fn inference_ms() -> Vec<f64> {
    let (ir, vis) = (textured(1024, 1280, 70), textured(1024, 1280, 71));
    let net = FusionNet::init(Arch::Student, 0);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    pool.install(|| {
        net.fuse(&ir, &vis).unwrap();
        let mut times: Vec<f64> = (0..7)
            .map(|_| {
                let t = Instant::now();
                std::hint::black_box(net.fuse(&ir, &vis).unwrap());
                t.elapsed().as_secs_f64() * 1e3
            })
            .collect();
        times.sort_by(f64::total_cmp);
        times
    })
}

pub fn inference_performance() -> Outcome {
    let t = inference_ms();
    let median = t[t.len() / 2];
    Outcome::new(median < 50.0, format!("1280x1024 single-threaded: median {median:.1} ms, best {:.1} ms (need < 50)", t[0]))
}

// ---------------------------------------------------------------- full run

pub const TRAIN_ENV: &str = "MMDRFUSE_TRAIN_DATA";
pub const TEST_ENV: &str = "MMDRFUSE_TEST_DATA";

/// `(name, target)` for the extended run.
pub const TABLE_TARGETS: [(&str, f64); 4] = [("SD", 43.08), ("VIF", 0.90), ("Qabf", 0.60), ("SSIM", 0.97)];

/// None when the datasets are not configured.
pub fn full_reproduction() -> Option<Outcome> {
    use clap::Parser;
    use mmdrfuse::cli::{run, Cli};
    let train = std::env::var(TRAIN_ENV).ok()?;
    let test = std::env::var(TEST_ENV).ok()?;
    std::env::var(mmdrfuse::cli::VGG_ENV).ok()?;
    let work = tempfile::tempdir().unwrap();
    let w = |p: &str| work.path().join(p).display().to_string();
    let steps: [Vec<String>; 5] = [
        vec!["prepare-data".into(), "--data".into(), train, "--out".into(), w("data")],
        vec!["train-teacher".into(), "--data".into(), w("data"), "--out".into(), w("model")],
        vec!["train-student".into(), "--data".into(), w("data"), "--teacher".into(), w("model/teacher.mmdr"), "--out".into(), w("model")],
        vec!["fuse".into(), "--weights".into(), w("model/student.mmdr"), "--data".into(), test.clone(), "--out".into(), w("fused")],
        vec!["evaluate".into(), "--data".into(), test, "--fused".into(), w("fused"), "--out".into(), w("eval")],
    ];
    for args in &steps {
        let cli = Cli::try_parse_from(std::iter::once("mmdrfuse".to_string()).chain(args.iter().cloned())).unwrap();
        if let Err(e) = run(&cli) {
            return Some(Outcome::new(false, format!("{} failed: {e}", args[0])));
        }
    }
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(work.path().join("eval/metrics.json")).unwrap()).unwrap();
    let mut pass = true;
    let parts: Vec<String> = TABLE_TARGETS
        .iter()
        .map(|(name, target)| {
            let got = json["mean"][name].as_f64().unwrap_or(f64::NAN);
            let ok = ((got - target) / target).abs() <= 0.10;
            pass &= ok;
            format!("{name} {got:.3} vs {target}{}", if ok { "" } else { " (outside 10%)" })
        })
        .collect();
    Some(Outcome::new(pass, parts.join(", ")))
}
