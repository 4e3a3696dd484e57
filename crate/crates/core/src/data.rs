//! Image loading, colour conversion, manifests, patches and batching.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const PATCH_SIZE: usize = 128;
pub const CROPS_PER_PAIR: usize = 80;

/// Chroma planes of a colour visible image, offset so neutral is 0.5.
#[derive(Clone, Debug, PartialEq)]
pub struct Chroma {
    pub cb: Tensor,
    pub cr: Tensor,
}

/// A registered source pair with luminance in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub id: String,
    pub ir: Tensor,
    pub vis: Tensor,
    /// Present when the visible image is colour.
    pub chroma: Option<Chroma>,
}

impl ImagePair {
    pub fn height(&self) -> usize {
        self.ir.shape().h
    }

    pub fn width(&self) -> usize {
        self.ir.shape().w
    }
}

/// Full-range BT.601 luma and chroma of an 8-bit RGB triple, scaled to [0, 1].
pub fn rgb_to_ycbcr(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let y = 0.299 * r + 0.587 * g + 0.114 * b;
    let cb = 0.5 - 0.168_736 * r - 0.331_264 * g + 0.5 * b;
    let cr = 0.5 + 0.5 * r - 0.418_688 * g - 0.081_312 * b;
    (y, cb, cr)
}

pub fn ycbcr_to_rgb(y: f32, cb: f32, cr: f32) -> (f32, f32, f32) {
    let (cb, cr) = (cb - 0.5, cr - 0.5);
    (y + 1.402 * cr, y - 0.344_136 * cb - 0.714_136 * cr, y + 1.772 * cb)
}

/// `[0, 1] -> 0..=255`, rounding half away from zero.
pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn open(path: &Path) -> Result<DynamicImage> {
    let reader = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn is_colour(img: &DynamicImage) -> bool {
    img.color().has_color()
}

fn plane(h: usize, w: usize, data: Vec<f32>) -> Tensor {
    Tensor::image(h, w, data).expect("plane size matches")
}

/// Luminance plus chroma when the image is colour.
fn decompose(img: &DynamicImage) -> (Tensor, Option<Chroma>) {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if !is_colour(img) {
        let g = img.to_luma8();
        return (plane(h, w, g.pixels().map(|p| f32::from(p.0[0]) / 255.0).collect()), None);
    }
    let rgb = img.to_rgb8();
    let mut y = Vec::with_capacity(h * w);
    let mut cb = Vec::with_capacity(h * w);
    let mut cr = Vec::with_capacity(h * w);
    for p in rgb.pixels() {
        let [r, g, b] = p.0.map(|v| f32::from(v) / 255.0);
        let (a, c, d) = rgb_to_ycbcr(r, g, b);
        y.push(a);
        cb.push(c);
        cr.push(d);
    }
    (
        plane(h, w, y),
        Some(Chroma {
            cb: plane(h, w, cb),
            cr: plane(h, w, cr),
        }),
    )
}

/// Luminance of any supported image in [0, 1].
pub fn load_luma(path: impl AsRef<Path>) -> Result<Tensor> {
    Ok(decompose(&open(path.as_ref())?).0)
}

pub fn load_pair(id: impl Into<String>, ir_path: impl AsRef<Path>, vis_path: impl AsRef<Path>) -> Result<ImagePair> {
    let (ir_path, vis_path) = (ir_path.as_ref(), vis_path.as_ref());
    let (ir, _) = decompose(&open(ir_path)?);
    let (vis, chroma) = decompose(&open(vis_path)?);
    if ir.shape() != vis.shape() {
        return Err(Error::dims(
            "load_pair",
            format!(
                "{} is {}x{} but {} is {}x{}",
                ir_path.display(),
                ir.shape().w,
                ir.shape().h,
                vis_path.display(),
                vis.shape().w,
                vis.shape().h
            ),
        ));
    }
    Ok(ImagePair {
        id: id.into(),
        ir,
        vis,
        chroma,
    })
}

/// Writes a fused luminance image as 8-bit PNG, recombined with `chroma`
/// into RGB when given.
pub fn save_fused(path: impl AsRef<Path>, fused: &Tensor, chroma: Option<&Chroma>) -> Result<()> {
    let path = path.as_ref();
    let s = fused.shape();
    if s.n != 1 || s.c != 1 {
        return Err(Error::dims("save_fused", format!("expected a (1, 1, H, W) image, got {s}")));
    }
    let (w, h) = (s.w as u32, s.h as u32);
    let encoded = match chroma {
        None => {
            let px = fused.data().iter().map(|&v| to_u8(v)).collect();
            DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, px).expect("buffer size"))
        }
        Some(c) => {
            s.expect_eq(&c.cb.shape(), "save_fused")?;
            let mut px = Vec::with_capacity(3 * fused.len());
            for ((&y, &cb), &cr) in fused.data().iter().zip(c.cb.data()).zip(c.cr.data()) {
                let (r, g, b) = ycbcr_to_rgb(y, cb, cr);
                px.extend([to_u8(r), to_u8(g), to_u8(b)]);
            }
            DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, px).expect("buffer size"))
        }
    };
    encoded
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub ir: PathBuf,
    pub vis: PathBuf,
}

/// The set of source pairs of a dataset, in id order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

const IMAGE_EXTS: [&str; 3] = ["png", "jpg", "jpeg"];

fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| IMAGE_EXTS.contains(&e.as_str())) {
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            out.insert(name, path);
        }
    }
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string()
}

impl Manifest {
    /// Pairs files with identical names under `root/ir` and `root/vis`;
    /// the id is the file stem.
    pub fn scan(root: impl AsRef<Path>) -> Result<Manifest> {
        let root = root.as_ref();
        let ir = list_images(&root.join("ir"))?;
        let vis = list_images(&root.join("vis"))?;
        let mut missing: Vec<String> = Vec::new();
        missing.extend(ir.keys().filter(|k| !vis.contains_key(*k)).map(|k| format!("vis/{k}")));
        missing.extend(vis.keys().filter(|k| !ir.contains_key(*k)).map(|k| format!("ir/{k}")));
        if !missing.is_empty() {
            return Err(Error::Missing(missing));
        }
        let entries = ir
            .into_iter()
            .map(|(name, ir_path)| ManifestEntry {
                id: stem(&ir_path),
                ir: ir_path,
                vis: vis[&name].clone(),
            })
            .collect();
        Manifest::new(root, entries)
    }

    pub fn new(root: impl Into<PathBuf>, mut entries: Vec<ManifestEntry>) -> Result<Manifest> {
        entries.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(w) = entries.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::Format {
                what: "manifest",
                reason: format!("duplicate id {:?}", w[0].id),
            });
        }
        Ok(Manifest {
            root: root.into(),
            entries,
        })
    }

    /// `id<TAB>ir<TAB>vis` lines; relative paths are resolved against the
    /// manifest's directory. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str, base: impl AsRef<Path>) -> Result<Manifest> {
        let base = base.as_ref();
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 || f.iter().any(|s| s.is_empty()) {
                return Err(Error::Format {
                    what: "manifest",
                    reason: format!("line {}: expected id<TAB>ir<TAB>vis", n + 1),
                });
            }
            entries.push(ManifestEntry {
                id: f[0].to_string(),
                ir: base.join(f[1]),
                vis: base.join(f[2]),
            });
        }
        Manifest::new(base, entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Manifest::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// A manifest file if `path` is a file, otherwise a directory scan.
    pub fn open(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        if path.is_file() {
            Manifest::load(path)
        } else {
            Manifest::scan(path)
        }
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&format!("{}\t{}\t{}\n", e.id, e.ir.display(), e.vis.display()));
        }
        s
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load_pair(&self, i: usize) -> Result<ImagePair> {
        let e = &self.entries[i];
        load_pair(e.id.clone(), &e.ir, &e.vis)
    }
}

/// One training crop. Pixels are 8-bit luminance levels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchSample {
    pub sample_id: u64,
    pub source_id: String,
    /// Top-left corner `(y, x)` in the source pair.
    pub origin: (u32, u32),
    pub ir: Vec<u8>,
    pub vis: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchSet {
    pub seed: u64,
    pub patch_size: usize,
    pub samples: Vec<PatchSample>,
}

pub const PATCH_MAGIC: [u8; 4] = *b"MMPS";
pub const PATCH_VERSION: u32 = 1;

fn quantise(t: &Tensor) -> Vec<u8> {
    t.data().iter().map(|&v| to_u8(v)).collect()
}

fn crop(t: &Tensor, y0: usize, x0: usize, p: usize) -> Tensor {
    Tensor::from_fn(Shape::new(1, 1, p, p), |_, _, y, x| t.at(0, 0, y0 + y, x0 + x))
}

impl PatchSample {
    fn tensor(&self, data: &[u8], p: usize) -> Tensor {
        plane(p, p, data.iter().map(|&v| f32::from(v) / 255.0).collect())
    }

    pub fn ir_tensor(&self, patch_size: usize) -> Tensor {
        self.tensor(&self.ir, patch_size)
    }

    pub fn vis_tensor(&self, patch_size: usize) -> Tensor {
        self.tensor(&self.vis, patch_size)
    }
}

/// Crops from in-memory pairs; see [`make_patches`].
pub fn patches_from_pairs(pairs: &[ImagePair], crops_per_pair: usize, patch_size: usize, seed: u64) -> Result<PatchSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(pairs.len() * crops_per_pair);
    for pair in pairs {
        let (h, w) = (pair.height(), pair.width());
        if h < patch_size || w < patch_size {
            return Err(Error::dims(
                "make_patches",
                format!("pair {:?} is {w}x{h}, smaller than the {patch_size}x{patch_size} patch", pair.id),
            ));
        }
        for _ in 0..crops_per_pair {
            let y = rng.random_range(0..=h - patch_size);
            let x = rng.random_range(0..=w - patch_size);
            samples.push(PatchSample {
                sample_id: samples.len() as u64,
                source_id: pair.id.clone(),
                origin: (y as u32, x as u32),
                ir: quantise(&crop(&pair.ir, y, x, patch_size)),
                vis: quantise(&crop(&pair.vis, y, x, patch_size)),
            });
        }
    }
    Ok(PatchSet {
        seed,
        patch_size,
        samples,
    })
}

/// `crops_per_pair` seeded random crops per pair, one shared origin for both
/// modalities. Pairs are visited in manifest order.
pub fn make_patches(manifest: &Manifest, crops_per_pair: usize, patch_size: usize, seed: u64) -> Result<PatchSet> {
    let pairs = (0..manifest.len()).map(|i| manifest.load_pair(i)).collect::<Result<Vec<_>>>()?;
    patches_from_pairs(&pairs, crops_per_pair, patch_size, seed)
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(&PATCH_MAGIC);
        w.u32(PATCH_VERSION);
        w.u64(self.seed);
        w.u32(self.patch_size as u32);
        w.u32(self.samples.len() as u32);
        for s in &self.samples {
            w.u64(s.sample_id);
            w.u32(s.source_id.len() as u32);
            w.bytes(s.source_id.as_bytes());
            w.u32(s.origin.0);
            w.u32(s.origin.1);
            w.bytes(&s.ir);
            w.bytes(&s.vis);
        }
        w.finish()
    }

    pub fn from_bytes(blob: &[u8]) -> Result<PatchSet> {
        let mut r = Reader::new(blob);
        r.magic(PATCH_MAGIC)?;
        let version = r.u32()?;
        if version != PATCH_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let seed = r.u64()?;
        let patch_size = r.u32()? as usize;
        let count = r.u32()? as usize;
        let px = patch_size * patch_size;
        let mut samples = Vec::with_capacity(count.min(blob.len() / px.max(1)));
        for _ in 0..count {
            let sample_id = r.u64()?;
            let n = r.u32()? as usize;
            let source_id = String::from_utf8(r.bytes(n)?.to_vec()).map_err(|e| Error::Format {
                what: "patch archive",
                reason: format!("source id is not UTF-8: {e}"),
            })?;
            let origin = (r.u32()?, r.u32()?);
            let ir = r.bytes(px)?.to_vec();
            let vis = r.bytes(px)?.to_vec();
            samples.push(PatchSample {
                sample_id,
                source_id,
                origin,
                ir,
                vis,
            });
        }
        let end = r.finish(0)?;
        if end != blob.len() {
            return Err(Error::Format {
                what: "patch archive",
                reason: format!("{} trailing bytes", blob.len() - end),
            });
        }
        Ok(PatchSet {
            seed,
            patch_size,
            samples,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<PatchSet> {
        let path = path.as_ref();
        let blob = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        PatchSet::from_bytes(&blob)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Indices `0..len` shuffled by `epoch_seed` and cut into batches; the last
/// batch may be short.
pub fn batches(len: usize, batch_size: usize, epoch_seed: u64) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Seeded infrared/visible look-alikes: the infrared plane is a dark
/// background with a few bright blobs, the visible plane mid-grey texture
/// with hard-edged rectangles. Both share one scene layout.
pub fn synthetic_pairs(n: usize, h: usize, w: usize, seed: u64) -> Vec<ImagePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let blobs: Vec<(f32, f32, f32, f32)> = (0..rng.random_range(2..=4))
                .map(|_| {
                    let cy = rng.random_range(0.0..h as f32);
                    let cx = rng.random_range(0.0..w as f32);
                    let r = rng.random_range(0.05..0.2) * h.min(w) as f32;
                    (cy, cx, r, rng.random_range(0.6f32..1.0))
                })
                .collect();
            let rects: Vec<(usize, usize, usize, usize, f32)> = (0..rng.random_range(2..=5))
                .map(|_| {
                    let (y0, x0) = (rng.random_range(0..h), rng.random_range(0..w));
                    let (y1, x1) = (rng.random_range(y0..=h), rng.random_range(x0..=w));
                    (y0, x0, y1, x1, rng.random_range(-0.3f32..0.3))
                })
                .collect();
            let (fy, fx) = (rng.random_range(0.05f32..0.4), rng.random_range(0.05f32..0.4));
            let (phase, base) = (rng.random_range(0.0f32..std::f32::consts::TAU), rng.random_range(0.05f32..0.2));
            let shape = Shape::new(1, 1, h, w);
            let ir = Tensor::from_fn(shape, |_, _, y, x| {
                let (yf, xf) = (y as f32, x as f32);
                let heat = blobs
                    .iter()
                    .map(|&(cy, cx, r, a)| a * (-((yf - cy).powi(2) + (xf - cx).powi(2)) / (2.0 * r * r)).exp())
                    .fold(0.0f32, f32::max);
                (base + 0.05 * (0.07 * yf + phase).sin() + heat).clamp(0.0, 1.0)
            });
            let vis = Tensor::from_fn(shape, |_, _, y, x| {
                let (yf, xf) = (y as f32, x as f32);
                let edges: f32 = rects
                    .iter()
                    .filter(|r| (r.0..r.2).contains(&y) && (r.1..r.3).contains(&x))
                    .map(|r| r.4)
                    .sum();
                (0.5 + 0.15 * (fy * yf + phase).sin() * (fx * xf).cos() + edges).clamp(0.0, 1.0)
            });
            ImagePair {
                id: format!("syn{i:03}"),
                ir,
                vis,
                chroma: None,
            }
        })
        .collect()
}

/// Writes pairs as `ir/{id}.png` and `vis/{id}.png` under `root`, the layout
/// [`Manifest::scan`] reads.
pub fn write_dataset(root: impl AsRef<Path>, pairs: &[ImagePair]) -> Result<Manifest> {
    let root = root.as_ref();
    for sub in ["ir", "vis"] {
        let d = root.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for p in pairs {
        save_fused(root.join("ir").join(format!("{}.png", p.id)), &p.ir, None)?;
        save_fused(root.join("vis").join(format!("{}.png", p.id)), &p.vis, p.chroma.as_ref())?;
    }
    Manifest::scan(root)
}
