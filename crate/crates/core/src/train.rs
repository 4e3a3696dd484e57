//! Adam and the two-phase schedule.
//!
//! A batch is processed sample by sample: forward, refresh evaluation against
//! the stored history, losses and parameter gradients. Samples of a batch are
//! computed in parallel, then gradients are averaged and the refresh store is
//! updated in sample order, so results do not depend on thread count.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::codec::{Reader, Writer};
use crate::data::{batches, PatchSet};
use crate::error::{Error, Result};
use crate::layer::LayerGrads;
use crate::loss::{distill_loss, output_objective, Components, DistillLoss, LossBreakdown, LossWeights, RefreshTargets};
use crate::nets::{Arch, FusionNet, NetTaps};
use crate::refresh::{self, Evaluation, RefreshStore};
use crate::tensor::Tensor;
use crate::vgg::VggWeights;

pub const DEFAULT_LR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// One bias-corrected update. Rejects non-finite gradients before
    /// touching any state.
    pub fn update(&mut self, params: &mut [f32], grads: &[f32]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                op: "Adam::update",
                dim: "len",
                expected: self.m.len(),
                actual: if params.len() != self.m.len() { params.len() } else { grads.len() },
            });
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                what: "gradient".into(),
                context: format!("parameter {i} at step {}", self.step + 1),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let mh = f64::from(self.m[i]) / c1;
            let vh = f64::from(self.v[i]) / c2;
            params[i] -= (self.lr * mh / (vh.sqrt() + self.eps)) as f32;
        }
        Ok(())
    }
}

/// Table-1 style switches. Each `true` removes one component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize)]
pub struct Ablation {
    pub no_intensity: bool,
    pub no_gradient: bool,
    pub no_perception: bool,
    pub no_refresh: bool,
    pub no_distill: bool,
    /// Distil the output tap only, without the 4-channel feature tap.
    pub no_digestible: bool,
}

impl Ablation {
    pub fn components(&self) -> Components {
        Components {
            intensity: !self.no_intensity,
            gradient: !self.no_gradient,
            perception: !self.no_perception,
        }
    }

    fn describe(&self) -> String {
        let names = [
            (self.no_intensity, "no-intensity"),
            (self.no_gradient, "no-gradient"),
            (self.no_perception, "no-perception"),
            (self.no_refresh, "no-refresh"),
            (self.no_distill, "no-distill"),
            (self.no_digestible, "no-digestible"),
        ];
        let on: Vec<&str> = names.iter().filter(|n| n.0).map(|n| n.1).collect();
        if on.is_empty() {
            "none".into()
        } else {
            on.join(",")
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct TrainConfig {
    pub phase: Arch,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub ablation: Ablation,
}

impl serde::Serialize for Arch {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl TrainConfig {
    pub fn teacher() -> Self {
        Self {
            phase: Arch::Teacher,
            epochs: 8,
            batch_size: 36,
            lr: DEFAULT_LR,
            weights: LossWeights::TEACHER,
            seed: 0,
            ablation: Ablation::default(),
        }
    }

    pub fn student() -> Self {
        Self {
            phase: Arch::Student,
            epochs: 10,
            batch_size: 26,
            lr: DEFAULT_LR,
            weights: LossWeights::STUDENT,
            seed: 0,
            ablation: Ablation::default(),
        }
    }

    pub fn for_phase(phase: Arch) -> Self {
        match phase {
            Arch::Teacher => Self::teacher(),
            Arch::Student => Self::student(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.phase == Arch::Teacher && self.weights.theta != 0.0 {
            return Err(Error::Config(format!(
                "teacher training has no distillation term; theta must be 0, got {}",
                self.weights.theta
            )));
        }
        Ok(())
    }

    /// Shuffle seed of a zero-based epoch.
    pub fn epoch_seed(&self, epoch: usize) -> u64 {
        self.seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
    }

    /// The `#`-prefixed first line of the loss log.
    pub fn header(&self) -> String {
        let w = &self.weights;
        format!(
            "# phase={} epochs={} batch_size={} lr={} gamma={} delta={} theta={} lambda={} seed={} ablation={}",
            self.phase,
            self.epochs,
            self.batch_size,
            self.lr,
            w.gamma,
            w.delta,
            w.theta,
            w.lambda,
            self.seed,
            self.ablation.describe()
        )
    }
}

/// Mean loss terms of one batch.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct LogRow {
    pub epoch: usize,
    pub batch: usize,
    pub samples: usize,
    pub losses: LossBreakdown,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossLog {
    pub header: String,
    pub rows: Vec<LogRow>,
}

pub const LOG_COLUMNS: &str = "epoch,batch,L_int,L_grad,L_percep,L_distill,L_refresh,L_total";

impl LossLog {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n{LOG_COLUMNS}\n", self.header);
        for r in &self.rows {
            let l = &r.losses;
            writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.epoch, r.batch, l.intensity, l.gradient, l.perception, l.distill, l.refresh, l.total
            )
            .expect("write to string");
        }
        s
    }

    /// Sample-weighted mean of the total loss over one epoch.
    pub fn epoch_mean(&self, epoch: usize) -> Option<f64> {
        let rows: Vec<&LogRow> = self.rows.iter().filter(|r| r.epoch == epoch).collect();
        let n: usize = rows.iter().map(|r| r.samples).sum();
        (n > 0).then(|| rows.iter().map(|r| r.losses.total * r.samples as f64).sum::<f64>() / n as f64)
    }

    pub fn epochs(&self) -> usize {
        self.rows.iter().map(|r| r.epoch + 1).max().unwrap_or(0)
    }
}

struct SampleResult {
    losses: LossBreakdown,
    grads: Vec<f32>,
    eval: Option<Evaluation>,
    out: Tensor,
}

fn flatten(grads: &[LayerGrads], into: &mut [f32]) {
    let mut at = 0;
    for g in grads {
        for v in g.weights.data().iter().chain(&g.bias) {
            into[at] += v;
            at += 1;
        }
    }
}

/// Output-tap-only distillation: the same unit-vector distance on `out`.
fn output_only_distill(t: &NetTaps, s: &NetTaps) -> Result<DistillLoss> {
    let strip = |x: &NetTaps| NetTaps {
        feat: x.out.clone(),
        out: x.out.clone(),
    };
    let l = distill_loss(&strip(t), &strip(s))?;
    let mut grad_out = l.grad_out;
    grad_out.add_scaled(&l.grad_feat, 1.0)?;
    Ok(DistillLoss {
        value: l.value,
        grad_feat: Tensor::zeros(s.feat.shape()),
        grad_out,
    })
}

/// Training state of one phase.
pub struct Trainer<'a> {
    config: TrainConfig,
    net: FusionNet,
    teacher: Option<&'a FusionNet>,
    vgg: &'a VggWeights,
    adam: Adam,
    store: Box<dyn RefreshStore + 'a>,
    epochs_done: usize,
    log: LossLog,
}

impl<'a> Trainer<'a> {
    /// `teacher` is required for the student phase unless distillation is
    /// ablated, and must be absent for the teacher phase.
    pub fn new(
        config: TrainConfig,
        net: FusionNet,
        teacher: Option<&'a FusionNet>,
        vgg: &'a VggWeights,
        store: Box<dyn RefreshStore + 'a>,
    ) -> Result<Self> {
        config.validate()?;
        if net.arch() != config.phase {
            return Err(Error::ArchMismatch {
                expected: config.phase.to_string(),
                found: net.arch().to_string(),
            });
        }
        match (config.phase, teacher) {
            (Arch::Teacher, Some(_)) => {
                return Err(Error::Config("the teacher phase takes no teacher network".into()));
            }
            (Arch::Student, None) if !config.ablation.no_distill && config.weights.theta != 0.0 => {
                return Err(Error::Config("student training needs a trained teacher".into()));
            }
            (_, Some(t)) if t.arch() != Arch::Teacher => {
                return Err(Error::ArchMismatch {
                    expected: "teacher".into(),
                    found: t.arch().to_string(),
                });
            }
            _ => {}
        }
        Ok(Self {
            adam: Adam::new(net.param_count(), config.lr),
            log: LossLog {
                header: config.header(),
                rows: Vec::new(),
            },
            config,
            net,
            teacher,
            vgg,
            store,
            epochs_done: 0,
        })
    }

    pub fn net(&self) -> &FusionNet {
        &self.net
    }

    pub fn into_net(self) -> FusionNet {
        self.net
    }

    pub fn log(&self) -> &LossLog {
        &self.log
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn adam(&self) -> &Adam {
        &self.adam
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    fn distills(&self) -> bool {
        self.teacher.is_some() && !self.config.ablation.no_distill && self.config.weights.theta != 0.0
    }

    fn sample(&self, patches: &PatchSet, idx: usize) -> Result<SampleResult> {
        let s = &patches.samples[idx];
        let (ir, vis) = (s.ir_tensor(patches.patch_size), s.vis_tensor(patches.patch_size));
        let (taps, cache) = self.net.forward_cached(&ir, &vis)?;
        let o = &taps.out;
        let eval = if self.config.ablation.no_refresh {
            None
        } else {
            Some(refresh::evaluate(self.store.as_ref(), s.sample_id, o, &ir, &vis)?)
        };
        let targets = eval.as_ref().and_then(|e| {
            e.record.as_ref().map(|r| RefreshTargets {
                o_bs: &r.o_bs,
                o_bg: &r.o_bg,
                gap_s: e.gap_s,
                gap_g: e.gap_g,
            })
        });
        let w = self.config.weights;
        let (mut losses, mut grad_out) =
            output_objective(o, &ir, &vis, self.vgg, &w, self.config.ablation.components(), targets.as_ref())?;
        let mut grad_feat = None;
        if self.distills() {
            let t = self.teacher.expect("checked by distills").forward(&ir, &vis)?;
            let d = if self.config.ablation.no_digestible {
                output_only_distill(&t, &taps)?
            } else {
                distill_loss(&t, &taps)?
            };
            losses.distill = d.value;
            losses.total += w.theta * d.value;
            grad_out.add_scaled(&d.grad_out, w.theta as f32)?;
            grad_feat = Some(d.grad_feat.scale(w.theta as f32));
        }
        let layer_grads = self.net.backward(&cache, grad_feat.as_ref(), &grad_out)?;
        let mut grads = vec![0.0; self.net.param_count()];
        flatten(&layer_grads, &mut grads);
        Ok(SampleResult {
            losses,
            grads,
            eval,
            out: taps.out,
        })
    }

    fn check_finite(&self, r: &SampleResult, epoch: usize, batch: usize, sample_id: u64) -> Result<()> {
        let context = || format!("epoch {}, batch {}, sample {sample_id}", epoch + 1, batch + 1);
        if let Some(term) = r.losses.non_finite() {
            return Err(Error::NonFinite {
                what: format!("loss term {term}"),
                context: context(),
            });
        }
        if r.grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                what: "parameter gradient".into(),
                context: context(),
            });
        }
        Ok(())
    }

    /// Runs one epoch; returns its sample-weighted mean total loss.
    pub fn run_epoch(&mut self, patches: &PatchSet) -> Result<f64> {
        if patches.is_empty() {
            return Err(Error::Empty { op: "run_epoch" });
        }
        let epoch = self.epochs_done;
        let order = batches(patches.len(), self.config.batch_size, self.config.epoch_seed(epoch));
        for (b, idx) in order.iter().enumerate() {
            let results = idx
                .par_iter()
                .map(|&i| self.sample(patches, i))
                .collect::<Result<Vec<_>>>()?;
            let n = results.len();
            let mut mean = LossBreakdown::default();
            let mut grads = vec![0.0f32; self.net.param_count()];
            for (r, &i) in results.iter().zip(idx) {
                self.check_finite(r, epoch, b, patches.samples[i].sample_id)?;
                mean.add_assign(&r.losses);
                for (g, v) in grads.iter_mut().zip(&r.grads) {
                    *g += v;
                }
            }
            let k = 1.0 / n as f32;
            grads.iter_mut().for_each(|g| *g *= k);
            let mean = mean.scaled(1.0 / n as f64);
            let mut params = self.net.flat_params();
            self.adam.update(&mut params, &grads)?;
            self.net.set_flat_params(&params)?;
            for (r, &i) in results.iter().zip(idx) {
                if let Some(e) = &r.eval {
                    refresh::update(self.store.as_mut(), patches.samples[i].sample_id, &r.out, e.scores, e.record.as_ref())?;
                }
            }
            self.log.rows.push(LogRow {
                epoch,
                batch: b,
                samples: n,
                losses: mean,
            });
        }
        self.epochs_done += 1;
        Ok(self.log.epoch_mean(epoch).expect("epoch has rows"))
    }

    /// Runs the remaining configured epochs, writing a checkpoint after each
    /// when `checkpoint_dir` is given.
    pub fn train(&mut self, patches: &PatchSet, checkpoint_dir: Option<&Path>) -> Result<()> {
        while self.epochs_done < self.config.epochs {
            self.run_epoch(patches)?;
            if let Some(dir) = checkpoint_dir {
                let path = checkpoint_path(dir, self.config.phase, self.epochs_done);
                std::fs::write(&path, self.checkpoint()).map_err(|e| Error::io(&path, e))?;
            }
        }
        Ok(())
    }

    /// The network weight container followed by the optimiser sidecar.
    pub fn checkpoint(&self) -> Vec<u8> {
        let mut bytes = self.net.to_bytes();
        let mut w = Writer::new();
        w.bytes(&crate::nets::MAGIC);
        w.u32(crate::nets::VERSION);
        w.u32(ADAM_ARCH_ID);
        w.u32(self.net.layers().len() as u32);
        w.u64(self.adam.step);
        w.u32(self.epochs_done as u32);
        let mut at = 0;
        for l in self.net.layers() {
            let s = l.spec;
            for d in [s.out_channels, s.in_channels, s.kernel_h, s.kernel_w] {
                w.u32(d as u32);
            }
            let n = l.param_count();
            w.f32s(&self.adam.m[at..at + n]);
            w.f32s(&self.adam.v[at..at + n]);
            at += n;
        }
        bytes.extend(w.finish());
        bytes
    }

    /// Restores network, optimiser state and epoch counter. The refresh
    /// store passed to [`Trainer::new`] must be the one used before.
    pub fn resume(&mut self, checkpoint: &[u8]) -> Result<()> {
        let (net, adam, epochs) = parse_checkpoint(checkpoint, self.config.lr)?;
        if net.arch() != self.config.phase {
            return Err(Error::ArchMismatch {
                expected: self.config.phase.to_string(),
                found: net.arch().to_string(),
            });
        }
        self.net = net;
        self.adam = adam;
        self.epochs_done = epochs;
        Ok(())
    }
}

/// Arch-id of the optimiser sidecar container.
pub const ADAM_ARCH_ID: u32 = 3;

pub fn checkpoint_path(dir: &Path, phase: Arch, epoch: usize) -> PathBuf {
    dir.join(format!("{phase}-epoch{epoch:03}.ckpt"))
}

/// Splits a checkpoint into network, optimiser state and completed epochs.
pub fn parse_checkpoint(bytes: &[u8], lr: f64) -> Result<(FusionNet, Adam, usize)> {
    let mut r = Reader::new(bytes);
    let net = FusionNet::read_from(&mut r)?;
    let start = r.position();
    r.magic(crate::nets::MAGIC)?;
    let version = r.u32()?;
    if version != crate::nets::VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let id = r.u32()?;
    if id != ADAM_ARCH_ID {
        return Err(Error::ArchMismatch {
            expected: format!("optimiser sidecar (arch-id {ADAM_ARCH_ID})"),
            found: format!("arch-id {id}"),
        });
    }
    let count = r.u32()? as usize;
    if count != net.layers().len() {
        return Err(Error::Format {
            what: "checkpoint",
            reason: format!("sidecar has {count} layers, network has {}", net.layers().len()),
        });
    }
    let mut adam = Adam::new(net.param_count(), lr);
    adam.step = r.u64()?;
    let epochs = r.u32()? as usize;
    let mut at = 0;
    for (i, l) in net.layers().iter().enumerate() {
        let s = l.spec;
        let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|d| d as usize);
        if dims != [s.out_channels, s.in_channels, s.kernel_h, s.kernel_w] {
            return Err(Error::Format {
                what: "checkpoint",
                reason: format!("sidecar layer {i} dims {dims:?} do not match the network"),
            });
        }
        let n = l.param_count();
        adam.m[at..at + n].copy_from_slice(&r.f32s(n)?);
        adam.v[at..at + n].copy_from_slice(&r.f32s(n)?);
        at += n;
    }
    let end = r.finish(start)?;
    if end != bytes.len() {
        return Err(Error::Format {
            what: "checkpoint",
            reason: format!("{} trailing bytes", bytes.len() - end),
        });
    }
    Ok((net, adam, epochs))
}

/// Trains a teacher from `init` and returns it with its loss log.
pub fn train_teacher(
    config: &TrainConfig,
    init: FusionNet,
    patches: &PatchSet,
    vgg: &VggWeights,
    store: Box<dyn RefreshStore + '_>,
    checkpoint_dir: Option<&Path>,
) -> Result<(FusionNet, LossLog)> {
    if config.phase != Arch::Teacher {
        return Err(Error::Config("train_teacher needs a teacher-phase config".into()));
    }
    let mut t = Trainer::new(config.clone(), init, None, vgg, store)?;
    t.train(patches, checkpoint_dir)?;
    let log = t.log().clone();
    Ok((t.into_net(), log))
}

/// Trains a student against a frozen teacher.
pub fn train_student(
    config: &TrainConfig,
    init: FusionNet,
    teacher: &FusionNet,
    patches: &PatchSet,
    vgg: &VggWeights,
    store: Box<dyn RefreshStore + '_>,
    checkpoint_dir: Option<&Path>,
) -> Result<(FusionNet, LossLog)> {
    if config.phase != Arch::Student {
        return Err(Error::Config("train_student needs a student-phase config".into()));
    }
    let mut t = Trainer::new(config.clone(), init, Some(teacher), vgg, store)?;
    t.train(patches, checkpoint_dir)?;
    let log = t.log().clone();
    Ok((t.into_net(), log))
}
