//! Training objectives and their gradients with respect to the fused output.
//!
//! Every loss accepts batched tensors and averages per-sample values over the
//! batch, so a batch of one gives the per-image definition. Scalars are f64.

use crate::error::{Error, Result};
use crate::nets::NetTaps;
use crate::tensor::{mean_abs, mean_abs_backward, sobel_backward, sobel_gradient, Shape, Tensor};
use crate::vgg::{TapSet, VggWeights, TAP_COUNT};

/// Norm floor of the attention vectors in the distillation loss.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    /// Intensity weight.
    pub gamma: f64,
    /// Gradient weight.
    pub delta: f64,
    /// Distillation weight.
    pub theta: f64,
    /// Comprehensive-loss weight.
    pub lambda: f64,
}

impl LossWeights {
    pub const TEACHER: LossWeights = LossWeights {
        gamma: 2.0,
        delta: 0.1,
        theta: 0.0,
        lambda: 1.0,
    };

    pub const STUDENT: LossWeights = LossWeights {
        gamma: 0.5,
        delta: 0.05,
        theta: 5.0,
        lambda: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("gamma", self.gamma),
            ("delta", self.delta),
            ("theta", self.theta),
            ("lambda", self.lambda),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// A scalar loss and its gradient with respect to the fused output.
#[derive(Clone, Debug)]
pub struct Loss {
    pub value: f64,
    pub grad: Tensor,
}

/// Distillation loss with gradients on both student taps.
#[derive(Clone, Debug)]
pub struct DistillLoss {
    pub value: f64,
    pub grad_feat: Tensor,
    pub grad_out: Tensor,
}

/// Per-term values of one evaluation of the training objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize)]
pub struct LossBreakdown {
    pub distill: f64,
    pub intensity: f64,
    pub gradient: f64,
    pub perception: f64,
    pub comprehensive: f64,
    /// `gap_s * L_s + gap_g * L_g`.
    pub refresh: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Names and values in log-column order.
    pub fn terms(&self) -> [(&'static str, f64); 7] {
        [
            ("distill", self.distill),
            ("intensity", self.intensity),
            ("gradient", self.gradient),
            ("perception", self.perception),
            ("comprehensive", self.comprehensive),
            ("refresh", self.refresh),
            ("total", self.total),
        ]
    }

    /// First term that is not finite.
    pub fn non_finite(&self) -> Option<&'static str> {
        self.terms().into_iter().find(|t| !t.1.is_finite()).map(|t| t.0)
    }

    pub fn add_assign(&mut self, o: &LossBreakdown) {
        self.distill += o.distill;
        self.intensity += o.intensity;
        self.gradient += o.gradient;
        self.perception += o.perception;
        self.comprehensive += o.comprehensive;
        self.refresh += o.refresh;
        self.total += o.total;
    }

    pub fn scaled(&self, k: f64) -> LossBreakdown {
        LossBreakdown {
            distill: self.distill * k,
            intensity: self.intensity * k,
            gradient: self.gradient * k,
            perception: self.perception * k,
            comprehensive: self.comprehensive * k,
            refresh: self.refresh * k,
            total: self.total * k,
        }
    }
}

fn check_pair(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.shape().c != 1 {
        return Err(Error::ShapeMismatch {
            op,
            dim: "c",
            expected: 1,
            actual: a.shape().c,
        });
    }
    a.shape().expect_eq(&b.shape(), op)
}

fn max_image(ir: &Tensor, vis: &Tensor) -> Result<Tensor> {
    ir.elementwise_max(vis)
}

/// Channel sum `F(X) = Σ_c x_c`, one channel out.
pub fn spatial_attention(x: &Tensor) -> Tensor {
    let s = x.shape();
    Tensor::from_fn(Shape { c: 1, ..s }, |n, _, y, xx| (0..s.c).map(|c| x.at(n, c, y, xx)).sum())
}

/// `‖u_t - u_s‖` for unit-normalised vectors and its gradient on the raw
/// student vector `s`.
fn unit_distance(t: &[f32], s: &[f32]) -> (f64, Vec<f64>) {
    let norm = |v: &[f32]| v.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt().max(NORM_EPS);
    let (nt, ns) = (norm(t), norm(s));
    let d: Vec<f64> = s
        .iter()
        .zip(t)
        .map(|(&sv, &tv)| f64::from(sv) / ns - f64::from(tv) / nt)
        .collect();
    let dist = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    if dist == 0.0 {
        return (0.0, vec![0.0; s.len()]);
    }
    // d/ds of ‖s/|s| - u_t‖ = (I - u u^T) d / (|s| dist), u = s/|s|
    let u: Vec<f64> = s.iter().map(|&v| f64::from(v) / ns).collect();
    let ud: f64 = u.iter().zip(&d).map(|(a, b)| a * b).sum();
    let floored = s.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt() < NORM_EPS;
    let grad = d
        .iter()
        .zip(&u)
        .map(|(&di, &ui)| if floored { di / (ns * dist) } else { (di - ui * ud) / (ns * dist) })
        .collect();
    (dist, grad)
}

/// Mean over the two taps of the distance between unit attention vectors,
/// averaged over the batch. The teacher side is constant.
pub fn distill_loss(teacher: &NetTaps, student: &NetTaps) -> Result<DistillLoss> {
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(2);
    for (t, s) in [(&teacher.feat, &student.feat), (&teacher.out, &student.out)] {
        let (ts, ss) = (t.shape(), s.shape());
        if (ts.n, ts.h, ts.w) != (ss.n, ss.h, ss.w) {
            return Err(Error::dims("distill_loss", format!("teacher tap {ts} vs student tap {ss}")));
        }
        let (ft, fs) = (spatial_attention(t), spatial_attention(s));
        let mut g = Tensor::zeros(ss);
        let plane = ss.h * ss.w;
        for n in 0..ss.n {
            let (dist, gv) = unit_distance(ft.sample_data(n), fs.sample_data(n));
            value += 0.5 * dist / ss.n as f64;
            let k = 0.5 / ss.n as f64;
            for c in 0..ss.c {
                for (dst, &src) in g.plane_mut(n, c).iter_mut().zip(&gv[..plane]) {
                    *dst = (k * src) as f32;
                }
            }
        }
        grads.push(g);
    }
    let grad_out = grads.pop().expect("two taps");
    let grad_feat = grads.pop().expect("two taps");
    Ok(DistillLoss {
        value,
        grad_feat,
        grad_out,
    })
}

/// `‖O - max(ir, vis)‖₁ / HW`.
pub fn intensity_loss(o: &Tensor, ir: &Tensor, vis: &Tensor) -> Result<Loss> {
    check_pair(o, ir, "intensity_loss")?;
    check_pair(o, vis, "intensity_loss")?;
    l1_to(o, &max_image(ir, vis)?)
}

fn l1_to(o: &Tensor, target: &Tensor) -> Result<Loss> {
    let diff = o.sub(target)?;
    Ok(Loss {
        value: mean_abs(&diff)?,
        grad: mean_abs_backward(&diff, 1.0),
    })
}

/// `Σ_axis ‖Sobel(O) - Sobel(target)‖² / HW`.
fn sobel_sq_to(o: &Tensor, target: &Tensor) -> Result<Loss> {
    let (ox, oy) = sobel_gradient(o)?;
    let (tx, ty) = sobel_gradient(target)?;
    let (dx, dy) = (ox.sub(&tx)?, oy.sub(&ty)?);
    let hw = o.len() as f64;
    let sq = |t: &Tensor| t.data().iter().map(|&v| f64::from(v).powi(2)).sum::<f64>();
    let value = (sq(&dx) + sq(&dy)) / hw;
    let k = (2.0 / hw) as f32;
    let grad = sobel_backward(&dx.scale(k), &dy.scale(k))?;
    Ok(Loss { value, grad })
}

/// Gradient of the max image, not the max of gradients.
pub fn gradient_loss(o: &Tensor, ir: &Tensor, vis: &Tensor) -> Result<Loss> {
    check_pair(o, ir, "gradient_loss")?;
    check_pair(o, vis, "gradient_loss")?;
    sobel_sq_to(o, &max_image(ir, vis)?)
}

/// `Σ_{i in taps} ‖a_i - b_i‖² / (k · N·H_i·W_i·D_i)` and the cotangents on `a`.
fn tap_distance(a: &TapSet, b: &TapSet, taps: &[usize], k: f64, weight: f64, cot: &mut [Option<Tensor>]) -> Result<f64> {
    let mut value = 0.0;
    for &i in taps {
        let diff = a.tap(i).sub(b.tap(i))?;
        let denom = k * diff.len() as f64;
        value += diff.data().iter().map(|&v| f64::from(v).powi(2)).sum::<f64>() / denom;
        if weight != 0.0 {
            let g = diff.scale((2.0 * weight / denom) as f32);
            match &mut cot[i] {
                Some(acc) => acc.add_scaled(&g, 1.0)?,
                slot => *slot = Some(g),
            }
        }
    }
    Ok(value)
}

const ALL_TAPS: [usize; 5] = [0, 1, 2, 3, 4];
const DEEP_TAPS: [usize; 2] = [3, 4];
const SHALLOW_TAPS: [usize; 3] = [0, 1, 2];

fn vgg_loss(vgg: &VggWeights, o: &Tensor, target: &TapSet, taps: &[usize]) -> Result<Loss> {
    let depth = taps.iter().max().map_or(0, |&m| m + 1);
    let (o_taps, cache) = vgg.forward_cached(o, depth)?;
    let mut cot = vec![None; depth];
    let value = tap_distance(&o_taps, target, taps, taps.len() as f64, 1.0, &mut cot)?;
    let grad = vgg.backward_to_input(&cot, &cache)?;
    Ok(Loss { value, grad })
}

/// Feature distance between O and the elementwise max of the source taps,
/// each tap normalised by `5·H_i·W_i·D_i`.
pub fn perception_loss(o: &Tensor, ir: &Tensor, vis: &Tensor, vgg: &VggWeights) -> Result<Loss> {
    check_pair(o, ir, "perception_loss")?;
    check_pair(o, vis, "perception_loss")?;
    let target = vgg.extract_taps(ir)?.max(&vgg.extract_taps(vis)?)?;
    vgg_loss(vgg, o, &target, &ALL_TAPS)
}

/// `γ·L_int + δ·L_grad + L_percep`; returns (intensity, gradient, perception, total)
/// and the gradient of the total.
pub fn comprehensive_loss(
    o: &Tensor,
    ir: &Tensor,
    vis: &Tensor,
    w: &LossWeights,
    vgg: &VggWeights,
) -> Result<(LossBreakdown, Tensor)> {
    let int = intensity_loss(o, ir, vis)?;
    let grad = gradient_loss(o, ir, vis)?;
    let per = perception_loss(o, ir, vis, vgg)?;
    let total = w.gamma * int.value + w.delta * grad.value + per.value;
    let mut g = per.grad;
    g.add_scaled(&int.grad, w.gamma as f32)?;
    g.add_scaled(&grad.grad, w.delta as f32)?;
    let b = LossBreakdown {
        intensity: int.value,
        gradient: grad.value,
        perception: per.value,
        comprehensive: total,
        ..Default::default()
    };
    Ok((b, g))
}

/// Deep-tap feature distance plus L1 distance to the best-SSIM history.
pub fn refresh_s_loss(o: &Tensor, o_bs: &Tensor, vgg: &VggWeights) -> Result<Loss> {
    check_pair(o, o_bs, "refresh_s_loss")?;
    let target = vgg.extract_taps(o_bs)?;
    let mut l = vgg_loss(vgg, o, &target, &DEEP_TAPS)?;
    let l1 = l1_to(o, o_bs)?;
    l.value += l1.value;
    l.grad.add_scaled(&l1.grad, 1.0)?;
    Ok(l)
}

/// Shallow-tap feature distance plus Sobel distance to the best-GMSD history.
pub fn refresh_g_loss(o: &Tensor, o_bg: &Tensor, vgg: &VggWeights) -> Result<Loss> {
    check_pair(o, o_bg, "refresh_g_loss")?;
    let target = vgg.extract_taps_upto(o_bg, 3)?;
    let mut l = vgg_loss(vgg, o, &target, &SHALLOW_TAPS)?;
    let sq = sobel_sq_to(o, o_bg)?;
    l.value += sq.value;
    l.grad.add_scaled(&sq.grad, 1.0)?;
    Ok(l)
}

/// `θ·L_distill + λ·L_comp + L_refresh`.
pub fn total_loss(b: &LossBreakdown, w: &LossWeights) -> f64 {
    w.theta * b.distill + w.lambda * b.comprehensive + b.refresh
}

/// Historical outputs and gap coefficients for the refresh term of one sample.
#[derive(Clone, Debug)]
pub struct RefreshTargets<'a> {
    pub o_bs: &'a Tensor,
    pub o_bg: &'a Tensor,
    pub gap_s: f64,
    pub gap_g: f64,
}

/// Which comprehensive-loss components take part, for ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Components {
    pub intensity: bool,
    pub gradient: bool,
    pub perception: bool,
}

impl Default for Components {
    fn default() -> Self {
        Self {
            intensity: true,
            gradient: true,
            perception: true,
        }
    }
}

/// Output-side objective `λ·L_comp + L_refresh`, sharing one VGG pass over O
/// between the perception and refresh terms. Distillation is added by the
/// caller since it acts on the network taps, not only on O.
pub fn output_objective(
    o: &Tensor,
    ir: &Tensor,
    vis: &Tensor,
    vgg: &VggWeights,
    w: &LossWeights,
    parts: Components,
    refresh: Option<&RefreshTargets<'_>>,
) -> Result<(LossBreakdown, Tensor)> {
    check_pair(o, ir, "output_objective")?;
    check_pair(o, vis, "output_objective")?;
    let mut b = LossBreakdown::default();
    let mut grad = Tensor::zeros(o.shape());
    let m = max_image(ir, vis)?;

    if parts.intensity {
        let l = l1_to(o, &m)?;
        b.intensity = l.value;
        grad.add_scaled(&l.grad, (w.lambda * w.gamma) as f32)?;
    }
    if parts.gradient {
        let l = sobel_sq_to(o, &m)?;
        b.gradient = l.value;
        grad.add_scaled(&l.grad, (w.lambda * w.delta) as f32)?;
    }

    let (gap_s, gap_g) = refresh.map_or((0.0, 0.0), |r| (r.gap_s, r.gap_g));
    let depth = if parts.perception || gap_s > 0.0 {
        TAP_COUNT
    } else if gap_g > 0.0 {
        3
    } else {
        0
    };
    let mut cot: Vec<Option<Tensor>> = vec![None; depth];
    let mut cache = None;
    if depth > 0 {
        let (o_taps, c) = vgg.forward_cached(o, depth)?;
        if parts.perception {
            let target = vgg.extract_taps(ir)?.max(&vgg.extract_taps(vis)?)?;
            b.perception = tap_distance(&o_taps, &target, &ALL_TAPS, 5.0, w.lambda, &mut cot)?;
        }
        if let Some(r) = refresh {
            if gap_s > 0.0 {
                let t = vgg.extract_taps(r.o_bs)?;
                let mut l = tap_distance(&o_taps, &t, &DEEP_TAPS, 2.0, gap_s, &mut cot)?;
                let l1 = l1_to(o, r.o_bs)?;
                l += l1.value;
                grad.add_scaled(&l1.grad, gap_s as f32)?;
                b.refresh += gap_s * l;
            }
            if gap_g > 0.0 {
                let t = vgg.extract_taps_upto(r.o_bg, 3)?;
                let mut l = tap_distance(&o_taps, &t, &SHALLOW_TAPS, 3.0, gap_g, &mut cot)?;
                let sq = sobel_sq_to(o, r.o_bg)?;
                l += sq.value;
                grad.add_scaled(&sq.grad, gap_g as f32)?;
                b.refresh += gap_g * l;
            }
        }
        cache = Some(c);
    }
    if let Some(c) = cache {
        grad.add_scaled(&vgg.backward_to_input(&cot, &c)?, 1.0)?;
    }
    b.comprehensive = w.gamma * b.intensity + w.delta * b.gradient + b.perception;
    b.total = total_loss(&b, w);
    Ok((b, grad))
}
