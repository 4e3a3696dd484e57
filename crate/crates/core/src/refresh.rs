//! Dynamic refresh: per-sample best historical outputs under SSIM and GMSD.
//!
//! Each training step first [`evaluate`]s the current output against the
//! stored bests (yielding the gaps and references for the loss), then
//! [`update`]s the store. Scores are stored as f32 and compared after the
//! current score is rounded the same way, so the stored value is exactly the
//! running best of the presented scores.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::loss::{refresh_g_loss, refresh_s_loss, Loss};
use crate::metrics::{gmsd, ssim};
use crate::tensor::{Shape, Tensor};
use crate::vgg::VggWeights;

pub const RECORD_MAGIC: [u8; 4] = *b"MMRR";

#[derive(Clone, Debug, PartialEq)]
pub struct RefreshRecord {
    pub sample_id: u64,
    /// Output with the best SSIM score so far.
    pub o_bs: Tensor,
    /// `SSIM(O_bs, ir) + SSIM(O_bs, vis)`.
    pub s_bs: f32,
    /// Output with the best (lowest) GMSD score so far.
    pub o_bg: Tensor,
    /// `GMSD(O_bg, ir) + GMSD(O_bg, vis)`.
    pub g_bg: f32,
}

impl RefreshRecord {
    pub fn to_bytes(&self) -> Vec<u8> {
        let s = self.o_bs.shape();
        let mut w = Writer::new();
        w.bytes(&RECORD_MAGIC);
        w.u64(self.sample_id);
        w.u32(s.h as u32);
        w.u32(s.w as u32);
        w.f32(self.s_bs);
        w.f32(self.g_bg);
        w.f32s(self.o_bs.data());
        w.f32s(self.o_bg.data());
        w.finish()
    }

    pub fn from_bytes(blob: &[u8]) -> Result<RefreshRecord> {
        let mut r = Reader::new(blob);
        r.magic(RECORD_MAGIC)?;
        let sample_id = r.u64()?;
        let (h, w) = (r.u32()? as usize, r.u32()? as usize);
        let s_bs = r.f32()?;
        let g_bg = r.f32()?;
        let shape = Shape::new(1, 1, h, w);
        let o_bs = Tensor::new(shape, r.f32s(h * w)?)?;
        let o_bg = Tensor::new(shape, r.f32s(h * w)?)?;
        let end = r.finish(0)?;
        if end != blob.len() {
            return Err(Error::Format {
                what: "refresh record",
                reason: format!("{} trailing bytes", blob.len() - end),
            });
        }
        Ok(RefreshRecord {
            sample_id,
            o_bs,
            s_bs,
            o_bg,
            g_bg,
        })
    }
}

/// Keyed storage of refresh records, at most one per sample.
pub trait RefreshStore: Send + Sync {
    fn get(&self, sample_id: u64) -> Result<Option<RefreshRecord>>;
    fn put(&mut self, record: &RefreshRecord) -> Result<()>;
    fn len(&self) -> Result<usize>;

    fn is_empty(&self) -> Result<bool> {
        Ok(self.len()? == 0)
    }
}

#[derive(Clone, Debug, Default)]
pub struct MemoryStore {
    records: HashMap<u64, RefreshRecord>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl RefreshStore for MemoryStore {
    fn get(&self, sample_id: u64) -> Result<Option<RefreshRecord>> {
        Ok(self.records.get(&sample_id).cloned())
    }

    fn put(&mut self, record: &RefreshRecord) -> Result<()> {
        self.records.insert(record.sample_id, record.clone());
        Ok(())
    }

    fn len(&self) -> Result<usize> {
        Ok(self.records.len())
    }
}

/// One file per sample under a run directory, read lazily. Writes go to a
/// temporary file that is renamed into place.
#[derive(Clone, Debug)]
pub struct DiskStore {
    dir: PathBuf,
}

impl DiskStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, sample_id: u64) -> PathBuf {
        self.dir.join(format!("{sample_id:016x}.mmrr"))
    }
}

impl RefreshStore for DiskStore {
    fn get(&self, sample_id: u64) -> Result<Option<RefreshRecord>> {
        let path = self.path(sample_id);
        let blob = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(path, e)),
        };
        let rec = RefreshRecord::from_bytes(&blob)?;
        if rec.sample_id != sample_id {
            return Err(Error::Format {
                what: "refresh record",
                reason: format!("{} holds sample {}", path.display(), rec.sample_id),
            });
        }
        Ok(Some(rec))
    }

    fn put(&mut self, record: &RefreshRecord) -> Result<()> {
        let path = self.path(record.sample_id);
        let tmp = path.with_extension("tmp");
        let wrap = |source| Error::StoreWrite {
            sample_id: record.sample_id,
            source,
        };
        std::fs::write(&tmp, record.to_bytes()).map_err(wrap)?;
        std::fs::rename(&tmp, &path).map_err(wrap)
    }

    fn len(&self) -> Result<usize> {
        let mut n = 0;
        for e in std::fs::read_dir(&self.dir).map_err(|e| Error::io(&self.dir, e))? {
            let p = e.map_err(|e| Error::io(&self.dir, e))?.path();
            n += usize::from(p.extension().is_some_and(|x| x == "mmrr"));
        }
        Ok(n)
    }
}

/// Current scores of one output.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scores {
    /// `SSIM(O, ir) + SSIM(O, vis)`, higher is better.
    pub ssim: f64,
    /// `GMSD(O, ir) + GMSD(O, vis)`, lower is better.
    pub gmsd: f64,
}

impl Scores {
    /// The scores at storage precision.
    pub fn stored(&self) -> (f32, f32) {
        (self.ssim as f32, self.gmsd as f32)
    }
}

pub fn score(o: &Tensor, ir: &Tensor, vis: &Tensor) -> Result<Scores> {
    Ok(Scores {
        ssim: ssim(o, ir)? + ssim(o, vis)?,
        gmsd: gmsd(o, ir)? + gmsd(o, vis)?,
    })
}

/// Result of comparing the current output with the history of its sample.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub scores: Scores,
    /// `max(0, S_bs - S_cur)`.
    pub gap_s: f64,
    /// `max(0, G_cur - G_bg)`.
    pub gap_g: f64,
    /// Absent on the first visit.
    pub record: Option<RefreshRecord>,
}

/// Scores `o` and derives the gaps against the stored bests. Gaps are 0 when
/// the sample has no history yet.
pub fn evaluate(store: &dyn RefreshStore, sample_id: u64, o: &Tensor, ir: &Tensor, vis: &Tensor) -> Result<Evaluation> {
    let scores = score(o, ir, vis)?;
    let record = store.get(sample_id)?;
    let (gap_s, gap_g) = match &record {
        None => (0.0, 0.0),
        Some(r) => {
            let (s_cur, g_cur) = scores.stored();
            (
                (f64::from(r.s_bs) - f64::from(s_cur)).max(0.0),
                (f64::from(g_cur) - f64::from(r.g_bg)).max(0.0),
            )
        }
    };
    Ok(Evaluation {
        scores,
        gap_s,
        gap_g,
        record,
    })
}

/// Which slots an [`update`] replaced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct UpdateOutcome {
    pub created: bool,
    pub replaced_s: bool,
    pub replaced_g: bool,
}

/// Replaces `O_bs` iff the SSIM score strictly improves and `O_bg` iff the
/// GMSD score strictly improves; a missing record is initialised from `o`.
pub fn update(
    store: &mut dyn RefreshStore,
    sample_id: u64,
    o: &Tensor,
    scores: Scores,
    existing: Option<&RefreshRecord>,
) -> Result<UpdateOutcome> {
    let (s_cur, g_cur) = scores.stored();
    let (record, outcome) = match existing {
        None => (
            RefreshRecord {
                sample_id,
                o_bs: o.clone(),
                s_bs: s_cur,
                o_bg: o.clone(),
                g_bg: g_cur,
            },
            UpdateOutcome {
                created: true,
                replaced_s: true,
                replaced_g: true,
            },
        ),
        Some(r) => {
            let replaced_s = s_cur > r.s_bs;
            let replaced_g = g_cur < r.g_bg;
            if !replaced_s && !replaced_g {
                return Ok(UpdateOutcome::default());
            }
            let mut n = r.clone();
            if replaced_s {
                n.o_bs = o.clone();
                n.s_bs = s_cur;
            }
            if replaced_g {
                n.o_bg = o.clone();
                n.g_bg = g_cur;
            }
            (
                n,
                UpdateOutcome {
                    created: false,
                    replaced_s,
                    replaced_g,
                },
            )
        }
    };
    store.put(&record)?;
    Ok(outcome)
}

/// `gap_s·L_s(O, O_bs) + gap_g·L_g(O, O_bg)`; branches with a zero gap are
/// skipped.
pub fn refresh_loss(eval: &Evaluation, o: &Tensor, vgg: &VggWeights) -> Result<Loss> {
    let mut value = 0.0;
    let mut grad = Tensor::zeros(o.shape());
    if let Some(r) = &eval.record {
        if eval.gap_s > 0.0 {
            let l = refresh_s_loss(o, &r.o_bs, vgg)?;
            value += eval.gap_s * l.value;
            grad.add_scaled(&l.grad, eval.gap_s as f32)?;
        }
        if eval.gap_g > 0.0 {
            let l = refresh_g_loss(o, &r.o_bg, vgg)?;
            value += eval.gap_g * l.value;
            grad.add_scaled(&l.grad, eval.gap_g as f32)?;
        }
    }
    Ok(Loss { value, grad })
}
