//! Teacher and student fusion networks.
//!
//! Both networks map the channel concatenation `[ir, vis]` to a 4-channel
//! feature map (`feat`) and a 1-channel sigmoid output (`out`). They share one
//! representation: a list of reflect-padded convolutions plus a fixed wiring
//! table saying which earlier tensors each layer reads.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::layer::{ConvLayer, LayerGrads};
use crate::tensor::{conv2d_backward, Activation, ConvSpec, Padding, Shape, Tensor};

mod stream;

pub const MAGIC: [u8; 4] = *b"MMDR";
pub const VERSION: u32 = 1;

pub const STUDENT_PARAMS: usize = 113;

/// Dense-block growth rate and depth of the teacher.
const GROWTH: usize = 16;
const DENSE_LAYERS: usize = 5;
const DEEP_WIDTH: usize = 64;
const REFINE_LAYERS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arch {
    Student,
    Teacher,
}

impl Arch {
    pub fn id(self) -> u32 {
        match self {
            Arch::Student => 1,
            Arch::Teacher => 2,
        }
    }

    pub fn from_id(id: u32) -> Option<Arch> {
        match id {
            1 => Some(Arch::Student),
            2 => Some(Arch::Teacher),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arch::Student => "student",
            Arch::Teacher => "teacher",
        }
    }

    /// Layer shapes in execution order.
    pub fn specs(self) -> Vec<ConvSpec> {
        let spec = |o, i, k| ConvSpec::new(o, i, k, k, Padding::Reflect).expect("static layer table");
        match self {
            Arch::Student => vec![spec(4, 2, 3), spec(1, 4, 3)],
            Arch::Teacher => {
                let mut v = vec![spec(GROWTH, 2, 3)];
                for k in 0..DENSE_LAYERS {
                    v.push(spec(GROWTH, GROWTH * (k + 1), 3));
                }
                v.push(spec(DEEP_WIDTH, GROWTH * (DENSE_LAYERS + 1), 1));
                for _ in 0..REFINE_LAYERS {
                    v.push(spec(DEEP_WIDTH, DEEP_WIDTH, 3));
                }
                v.push(spec(4, DEEP_WIDTH, 3));
                v.push(spec(1, 4, 3));
                v
            }
        }
    }

    /// For each layer, the tensors concatenated to form its input. Source 0
    /// is the network input; source `j > 0` is the activated output of layer
    /// `j - 1`.
    pub fn wiring(self) -> Vec<Vec<usize>> {
        match self {
            Arch::Student => vec![vec![0], vec![1]],
            Arch::Teacher => {
                let mut v = vec![vec![0]];
                // layers 1..=5 read the stem and every earlier dense output,
                // the transition reads all six
                for k in 1..=DENSE_LAYERS + 1 {
                    v.push((1..=k).collect());
                }
                for l in DENSE_LAYERS + 2..DENSE_LAYERS + 4 + REFINE_LAYERS {
                    v.push(vec![l]);
                }
                v
            }
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// The two distillation tap points.
#[derive(Clone, Debug, PartialEq)]
pub struct NetTaps {
    /// 4-channel penultimate features.
    pub feat: Tensor,
    /// 1-channel fused output in [0, 1].
    pub out: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionNet {
    arch: Arch,
    layers: Vec<ConvLayer>,
}

/// Intermediate values kept by [`FusionNet::forward_cached`] for backward.
#[derive(Clone, Debug)]
pub struct NetCache {
    /// Source tensors: the input followed by each layer's activated output.
    sources: Vec<Tensor>,
    pre: Vec<Tensor>,
}

impl FusionNet {
    pub fn new(arch: Arch, layers: Vec<ConvLayer>) -> Result<Self> {
        let specs = arch.specs();
        if layers.len() != specs.len() {
            return Err(Error::ArchMismatch {
                expected: format!("{arch} with {} layers", specs.len()),
                found: format!("{} layers", layers.len()),
            });
        }
        for (i, (l, s)) in layers.iter().zip(&specs).enumerate() {
            if l.spec != *s {
                return Err(Error::ArchMismatch {
                    expected: format!("{arch} layer {i} {:?}", s.weight_shape()),
                    found: format!("{:?}", l.spec.weight_shape()),
                });
            }
        }
        let net = Self { arch, layers };
        if arch == Arch::Student {
            assert_eq!(net.param_count(), STUDENT_PARAMS);
        }
        Ok(net)
    }

    pub fn zeros(arch: Arch) -> Self {
        let layers = arch.specs().into_iter().map(ConvLayer::zeros).collect();
        Self::new(arch, layers).expect("zero layers match the table")
    }

    /// Kaiming-uniform weights and zero biases, deterministic in `seed`.
    pub fn init(arch: Arch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = arch
            .specs()
            .into_iter()
            .map(|s| ConvLayer::kaiming_uniform(s, &mut rng))
            .collect();
        Self::new(arch, layers).expect("initialised layers match the table")
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(ConvLayer::param_count).sum()
    }

    /// Multiply-accumulates of all convolutions on an `h x w` input.
    pub fn mac_count(&self, h: usize, w: usize) -> u64 {
        self.layers.iter().map(|l| l.spec.macs_per_pixel() as u64).sum::<u64>() * (h * w) as u64
    }

    /// Parameters in storage order: per layer, weights then bias.
    pub fn flat_params(&self) -> Vec<f32> {
        let mut v = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            v.extend_from_slice(l.weights.data());
            v.extend_from_slice(&l.bias);
        }
        v
    }

    pub fn set_flat_params(&mut self, flat: &[f32]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::ShapeMismatch {
                op: "set_flat_params",
                dim: "len",
                expected: self.param_count(),
                actual: flat.len(),
            });
        }
        let mut at = 0;
        for l in &mut self.layers {
            let n = l.weights.len();
            l.weights.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
            let b = l.bias.len();
            l.bias.copy_from_slice(&flat[at..at + b]);
            at += b;
        }
        Ok(())
    }

    pub fn zero_grads(&self) -> Vec<LayerGrads> {
        self.layers.iter().map(ConvLayer::zero_grads).collect()
    }

    fn input(ir: &Tensor, vis: &Tensor) -> Result<Tensor> {
        Self::check_inputs(ir, vis)?;
        Tensor::concat_channels(&[ir, vis])
    }

    fn check_inputs(ir: &Tensor, vis: &Tensor) -> Result<()> {
        let (a, b) = (ir.shape(), vis.shape());
        for (s, name) in [(a, "ir"), (b, "vis")] {
            if s.c != 1 {
                return Err(Error::ShapeMismatch {
                    op: "fusion forward",
                    dim: if name == "ir" { "ir channels" } else { "vis channels" },
                    expected: 1,
                    actual: s.c,
                });
            }
        }
        a.expect_eq(&b, "fusion forward")?;
        if a.h < 2 || a.w < 2 {
            return Err(Error::dims("fusion forward", format!("input {a} too small for reflect padding")));
        }
        Ok(())
    }

    fn gather(sources: &[Tensor], idx: &[usize]) -> Result<Tensor> {
        if let [only] = idx {
            return Ok(sources[*only].clone());
        }
        let parts: Vec<&Tensor> = idx.iter().map(|&i| &sources[i]).collect();
        Tensor::concat_channels(&parts)
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            Activation::Sigmoid
        } else {
            Activation::LeakyRelu
        }
    }

    /// The fused image only. Equal to `forward(..).out`; the student runs a
    /// row-streaming kernel that never builds intermediate tensors.
    pub fn fuse(&self, ir: &Tensor, vis: &Tensor) -> Result<Tensor> {
        if self.arch != Arch::Student {
            return Ok(self.forward(ir, vis)?.out);
        }
        Self::check_inputs(ir, vis)?;
        let s = ir.shape();
        let mut out = Tensor::zeros(Shape { c: 1, ..s });
        for n in 0..s.n {
            stream::two_layer_plane(
                &self.layers[0],
                &self.layers[1],
                ir.sample_data(n),
                vis.sample_data(n),
                s.h,
                s.w,
                out.plane_mut(n, 0),
            );
        }
        Ok(out)
    }

    pub fn forward(&self, ir: &Tensor, vis: &Tensor) -> Result<NetTaps> {
        let (taps, _) = self.run(ir, vis, false)?;
        Ok(taps)
    }

    pub fn forward_cached(&self, ir: &Tensor, vis: &Tensor) -> Result<(NetTaps, NetCache)> {
        self.run(ir, vis, true)
    }

    fn run(&self, ir: &Tensor, vis: &Tensor, keep: bool) -> Result<(NetTaps, NetCache)> {
        let mut sources = vec![Self::input(ir, vis)?];
        let mut pre = Vec::with_capacity(if keep { self.layers.len() } else { 0 });
        for (l, idx) in self.arch.wiring().iter().enumerate() {
            let x = Self::gather(&sources, idx)?;
            let mut z = self.layers[l].forward(&x)?;
            if keep {
                sources.push(self.activation(l).forward(&z));
                pre.push(z);
            } else {
                self.activation(l).forward_in_place(&mut z);
                sources.push(z);
            }
        }
        let out = sources.pop().expect("output");
        let feat = if keep { sources[sources.len() - 1].clone() } else { sources.pop().expect("feat") };
        if keep {
            sources.push(out.clone());
        }
        Ok((NetTaps { feat, out }, NetCache { sources, pre }))
    }

    /// Parameter gradients given cotangents on the two taps. A missing
    /// `grad_feat` is treated as zero.
    pub fn backward(&self, cache: &NetCache, grad_feat: Option<&Tensor>, grad_out: &Tensor) -> Result<Vec<LayerGrads>> {
        let n = self.layers.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n + 1];
        grads[n] = Some(grad_out.clone());
        if let Some(g) = grad_feat {
            grads[n - 1] = Some(g.clone());
        }
        let wiring = self.arch.wiring();
        let mut out = vec![None; n];
        for l in (0..n).rev() {
            let spec = &self.layers[l].spec;
            let g = match grads[l + 1].take() {
                Some(g) => g,
                None => {
                    out[l] = Some(self.layers[l].zero_grads());
                    continue;
                }
            };
            let g = self.activation(l).backward(&cache.pre[l], &g)?;
            let x = Self::gather(&cache.sources, &wiring[l])?;
            let cg = conv2d_backward(&g, &x, &self.layers[l].weights, spec)?;
            out[l] = Some(LayerGrads {
                weights: cg.weights,
                bias: cg.bias,
            });
            if l == 0 {
                continue;
            }
            let sizes: Vec<usize> = wiring[l].iter().map(|&j| cache.sources[j].shape().c).collect();
            for (part, &j) in cg.input.split_channels(&sizes)?.into_iter().zip(&wiring[l]) {
                match &mut grads[j] {
                    Some(acc) => acc.add_scaled(&part, 1.0)?,
                    slot => *slot = Some(part),
                }
            }
        }
        Ok(out.into_iter().map(|g| g.expect("every layer visited")).collect())
    }

    /// Serialized parameter values only, excluding header and dims.
    pub fn payload_len(&self) -> usize {
        self.param_count() * 4
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.write_into(&mut w);
        w.finish()
    }

    pub(crate) fn write_into(&self, w: &mut Writer) {
        w.bytes(&MAGIC);
        w.u32(VERSION);
        w.u32(self.arch.id());
        w.u32(self.layers.len() as u32);
        for l in &self.layers {
            let s = l.spec;
            for d in [s.out_channels, s.in_channels, s.kernel_h, s.kernel_w] {
                w.u32(d as u32);
            }
            w.f32s(l.weights.data());
            w.f32s(&l.bias);
        }
    }

    /// Parses one weight container starting at the reader's position.
    pub(crate) fn read_from(r: &mut Reader<'_>) -> Result<Self> {
        let start = r.position();
        r.magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let id = r.u32()?;
        let arch = Arch::from_id(id).ok_or_else(|| Error::ArchMismatch {
            expected: "arch-id 1 (student) or 2 (teacher)".into(),
            found: format!("arch-id {id}"),
        })?;
        let count = r.u32()? as usize;
        let specs = arch.specs();
        if count != specs.len() {
            return Err(Error::ArchMismatch {
                expected: format!("{arch} with {} layers", specs.len()),
                found: format!("{count} layers"),
            });
        }
        let mut layers = Vec::with_capacity(count);
        for (i, spec) in specs.into_iter().enumerate() {
            let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|d| d as usize);
            let want = [spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w];
            if dims != want {
                return Err(Error::ArchMismatch {
                    expected: format!("{arch} layer {i} dims {want:?}"),
                    found: format!("{dims:?}"),
                });
            }
            let weights = Tensor::new(spec.weight_shape(), r.f32s(spec.weight_shape().numel())?)?;
            let bias = r.f32s(spec.out_channels)?;
            layers.push(ConvLayer::new(spec, weights, bias)?);
        }
        Self::new(arch, layers)
            .and_then(|net| r.finish(start).map(|_| net))
            .and_then(|net| {
                if net.layers.iter().all(|l| l.weights.all_finite() && l.bias.iter().all(|b| b.is_finite())) {
                    Ok(net)
                } else {
                    Err(Error::NonFinite {
                        what: "weights".into(),
                        context: format!("{arch} weight file"),
                    })
                }
            })
    }

    pub fn from_bytes(blob: &[u8]) -> Result<Self> {
        let mut r = Reader::new(blob);
        let net = Self::read_from(&mut r)?;
        let end = r.position();
        if end != blob.len() {
            return Err(Error::Format {
                what: "weight file",
                reason: format!("{} trailing bytes", blob.len() - end),
            });
        }
        Ok(net)
    }

    /// Loads a weight file and checks it holds the expected architecture.
    pub fn from_bytes_as(arch: Arch, blob: &[u8]) -> Result<Self> {
        let net = Self::from_bytes(blob)?;
        if net.arch != arch {
            return Err(Error::ArchMismatch {
                expected: arch.to_string(),
                found: net.arch.to_string(),
            });
        }
        Ok(net)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let blob = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&blob)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Output shape of either network for a given luminance shape.
pub fn output_shape(input: Shape) -> Shape {
    Shape::new(input.n, 1, input.h, input.w)
}
