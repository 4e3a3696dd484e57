//! Frozen VGG-19 feature extractor.
//!
//! Single-channel images are duplicated to three channels, normalised with
//! the stored per-channel constants and run through the sixteen 3x3
//! convolutions. Taps are the last ReLU output of each block, before its
//! max-pool: relu1_2, relu2_2, relu3_4, relu4_4, relu5_4.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::layer::ConvLayer;
use crate::tensor::{
    conv2d_backward_input, maxpool2_backward, maxpool2_forward, Activation, ConvSpec, Padding, PoolIndices,
    Shape, Tensor,
};

pub const MAGIC: [u8; 4] = *b"VGGB";
pub const VERSION: u32 = 1;

/// `(out, in)` channel counts of conv1_1 .. conv5_4.
pub const LAYER_CHANNELS: [(usize, usize); 16] = [
    (64, 3),
    (64, 64),
    (128, 64),
    (128, 128),
    (256, 128),
    (256, 256),
    (256, 256),
    (256, 256),
    (512, 256),
    (512, 512),
    (512, 512),
    (512, 512),
    (512, 512),
    (512, 512),
    (512, 512),
    (512, 512),
];

/// Convolutions per block.
pub const BLOCK_DEPTHS: [usize; 5] = [2, 2, 4, 4, 4];

pub const TAP_CHANNELS: [usize; 5] = [64, 128, 256, 512, 512];

pub const TAP_COUNT: usize = 5;

/// Smallest accepted image side.
pub const MIN_SIDE: usize = 32;

/// Canonical ImageNet normalisation of the pretrained torchvision weights.
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Debug, PartialEq)]
pub struct VggWeights {
    layers: Vec<ConvLayer>,
    mean: [f32; 3],
    std: [f32; 3],
}

/// Feature maps at the first `len()` taps.
#[derive(Clone, Debug)]
pub struct TapSet {
    taps: Vec<Tensor>,
}

impl TapSet {
    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    /// Zero-based: `tap(0)` is relu1_2.
    pub fn tap(&self, i: usize) -> &Tensor {
        &self.taps[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.taps.iter()
    }

    /// Elementwise maximum of two tap sets of equal depth.
    pub fn max(&self, other: &TapSet) -> Result<TapSet> {
        if self.len() != other.len() {
            return Err(Error::ShapeMismatch {
                op: "TapSet::max",
                dim: "taps",
                expected: self.len(),
                actual: other.len(),
            });
        }
        let taps = self
            .taps
            .iter()
            .zip(&other.taps)
            .map(|(a, b)| a.elementwise_max(b))
            .collect::<Result<_>>()?;
        Ok(TapSet { taps })
    }
}

/// State kept by [`VggWeights::forward_cached`] for the input backward pass.
#[derive(Debug)]
pub struct VggCache {
    input_shape: Shape,
    depth: usize,
    /// Post-ReLU output of every convolution that ran.
    activations: Vec<Tensor>,
    pools: Vec<PoolIndices>,
}

impl VggCache {
    pub fn depth(&self) -> usize {
        self.depth
    }
}

fn layer_spec(out: usize, inp: usize) -> ConvSpec {
    ConvSpec::new(out, inp, 3, 3, Padding::Zero).expect("static VGG spec")
}

impl VggWeights {
    pub fn new(layers: Vec<ConvLayer>, mean: [f32; 3], std: [f32; 3]) -> Result<Self> {
        if layers.len() != LAYER_CHANNELS.len() {
            return Err(Error::Format {
                what: "VGG weights",
                reason: format!("expected 16 layers, got {}", layers.len()),
            });
        }
        for (i, (layer, &(out, inp))) in layers.iter().zip(&LAYER_CHANNELS).enumerate() {
            if layer.spec != layer_spec(out, inp) {
                return Err(Error::Format {
                    what: "VGG weights",
                    reason: format!("layer {i} has shape {}, expected ({out}, {inp}, 3, 3)", layer.weights.shape()),
                });
            }
        }
        if std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Format {
                what: "VGG weights",
                reason: format!("normalisation std must be positive, got {std:?}"),
            });
        }
        Ok(Self { layers, mean, std })
    }

    /// Random He-scaled weights with the exact VGG-19 layout, for tests and
    /// smoke runs where no pretrained blob is available.
    pub fn synthetic(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = LAYER_CHANNELS
            .iter()
            .map(|&(out, inp)| {
                let mut layer = ConvLayer::kaiming_uniform(layer_spec(out, inp), &mut rng);
                for b in &mut layer.bias {
                    *b = rng.random_range(-0.05..=0.05);
                }
                layer
            })
            .collect();
        Self::new(layers, IMAGENET_MEAN, IMAGENET_STD).expect("synthetic layout")
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn mean(&self) -> [f32; 3] {
        self.mean
    }

    pub fn std(&self) -> [f32; 3] {
        self.std
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(&MAGIC);
        w.u32(VERSION);
        w.u32(self.layers.len() as u32);
        for layer in &self.layers {
            let s = layer.spec;
            for d in [s.out_channels, s.in_channels, s.kernel_h, s.kernel_w] {
                w.u32(d as u32);
            }
            w.f32s(layer.weights.data());
            w.f32s(&layer.bias);
        }
        w.f32s(&self.mean);
        w.f32s(&self.std);
        w.finish()
    }

    pub fn from_bytes(blob: &[u8]) -> Result<Self> {
        let mut r = Reader::new(blob);
        r.magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let count = r.u32()? as usize;
        if count != LAYER_CHANNELS.len() {
            return Err(Error::Format {
                what: "VGG blob",
                reason: format!("expected 16 layers, found {count}"),
            });
        }
        let mut layers = Vec::with_capacity(count);
        for (i, &(out, inp)) in LAYER_CHANNELS.iter().enumerate() {
            let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|d| d as usize);
            if dims != [out, inp, 3, 3] {
                return Err(Error::Format {
                    what: "VGG blob",
                    reason: format!("layer {i} has dims {dims:?}, expected [{out}, {inp}, 3, 3]"),
                });
            }
            let spec = layer_spec(out, inp);
            let weights = Tensor::new(spec.weight_shape(), r.f32s(spec.weight_shape().numel())?)?;
            let bias = r.f32s(out)?;
            layers.push(ConvLayer::new(spec, weights, bias)?);
        }
        let mean: [f32; 3] = r.f32s(3)?.try_into().expect("3 values");
        let std: [f32; 3] = r.f32s(3)?.try_into().expect("3 values");
        let end = r.finish(0)?;
        if end != blob.len() {
            return Err(Error::Format {
                what: "VGG blob",
                reason: format!("{} trailing bytes", blob.len() - end),
            });
        }
        Self::new(layers, mean, std)
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

    fn check_input(&self, image: &Tensor, depth: usize) -> Result<()> {
        let s = image.shape();
        if s.c != 1 {
            return Err(Error::ShapeMismatch {
                op: "extract_taps",
                dim: "c",
                expected: 1,
                actual: s.c,
            });
        }
        if depth == 0 || depth > TAP_COUNT {
            return Err(Error::dims("extract_taps", format!("tap depth must be 1..=5, got {depth}")));
        }
        let stride = 1 << (depth - 1);
        if s.h < MIN_SIDE || s.w < MIN_SIDE || !s.h.is_multiple_of(stride) || !s.w.is_multiple_of(stride) {
            return Err(Error::dims(
                "extract_taps",
                format!(
                    "image {}x{} must be at least {MIN_SIDE}x{MIN_SIDE} and divisible by {stride}",
                    s.h, s.w
                ),
            ));
        }
        if !image.all_finite() {
            return Err(Error::NonFinite {
                what: "VGG input".into(),
                context: format!("image {}", s),
            });
        }
        Ok(())
    }

    fn normalise(&self, image: &Tensor) -> Tensor {
        let s = image.shape();
        Tensor::from_fn(Shape { c: 3, ..s }, |n, c, y, x| (image.at(n, 0, y, x) - self.mean[c]) / self.std[c])
    }

    fn run(&self, image: &Tensor, depth: usize, keep: bool) -> Result<(TapSet, Option<VggCache>)> {
        self.check_input(image, depth)?;
        let mut x = self.normalise(image);
        let mut taps = Vec::with_capacity(depth);
        let mut activations = Vec::new();
        let mut pools = Vec::new();
        let mut layers = self.layers.iter();
        for (block, &convs) in BLOCK_DEPTHS.iter().enumerate().take(depth) {
            for _ in 0..convs {
                let layer = layers.next().expect("16 layers");
                x = layer.forward(&x)?;
                Activation::Relu.forward_in_place(&mut x);
                if keep {
                    activations.push(x.clone());
                }
            }
            if block + 1 < depth {
                let (pooled, idx) = maxpool2_forward(&x)?;
                taps.push(std::mem::replace(&mut x, pooled));
                if keep {
                    pools.push(idx);
                }
            }
        }
        taps.push(x);
        let cache = keep.then(|| VggCache {
            input_shape: image.shape(),
            depth,
            activations,
            pools,
        });
        Ok((TapSet { taps }, cache))
    }

    /// All five taps.
    pub fn extract_taps(&self, image: &Tensor) -> Result<TapSet> {
        self.extract_taps_upto(image, TAP_COUNT)
    }

    /// The first `depth` taps; later blocks are not evaluated.
    pub fn extract_taps_upto(&self, image: &Tensor, depth: usize) -> Result<TapSet> {
        Ok(self.run(image, depth, false)?.0)
    }

    pub fn forward_cached(&self, image: &Tensor, depth: usize) -> Result<(TapSet, VggCache)> {
        let (taps, cache) = self.run(image, depth, true)?;
        Ok((taps, cache.expect("cache requested")))
    }

    /// Gradient with respect to the single-channel input image of
    /// `Σ_i <cotangents[i], tap_i>`. Missing or `None` entries contribute nothing.
    pub fn backward_to_input(&self, cotangents: &[Option<Tensor>], cache: &VggCache) -> Result<Tensor> {
        let top = match cotangents.iter().rposition(Option::is_some) {
            Some(i) => i,
            None => return Ok(Tensor::zeros(cache.input_shape)),
        };
        if top >= cache.depth {
            return Err(Error::dims(
                "backward_to_input",
                format!("cotangent on tap {} but forward cache only reaches tap {}", top + 1, cache.depth),
            ));
        }
        let first_layer: Vec<usize> = BLOCK_DEPTHS
            .iter()
            .scan(0, |acc, &d| {
                let start = *acc;
                *acc += d;
                Some(start)
            })
            .collect();

        let mut grad: Option<Tensor> = None;
        for block in (0..=top).rev() {
            if let Some(c) = &cotangents[block] {
                cache.activations[first_layer[block] + BLOCK_DEPTHS[block] - 1]
                    .shape()
                    .expect_eq(&c.shape(), "backward_to_input")?;
                match &mut grad {
                    Some(g) => g.add_scaled(c, 1.0)?,
                    None => grad = Some(c.clone()),
                }
            }
            let mut g = match grad.take() {
                Some(g) => g,
                None => continue,
            };
            for l in (first_layer[block]..first_layer[block] + BLOCK_DEPTHS[block]).rev() {
                let act = &cache.activations[l];
                for (gv, &a) in g.data_mut().iter_mut().zip(act.data()) {
                    if a <= 0.0 {
                        *gv = 0.0;
                    }
                }
                let layer = &self.layers[l];
                g = conv2d_backward_input(&g, &layer.weights, &layer.spec)?;
            }
            grad = Some(if block > 0 {
                maxpool2_backward(&g, &cache.pools[block - 1])?
            } else {
                g
            });
        }

        let g3 = grad.expect("top tap had a cotangent");
        let s = cache.input_shape;
        Ok(Tensor::from_fn(s, |n, _, y, x| {
            (0..3).map(|c| g3.at(n, c, y, x) / self.std[c]).sum()
        }))
    }
}
