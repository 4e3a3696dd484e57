use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{load_luma, ImagePair, Manifest};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Column names in report order.
pub const METRIC_NAMES: [&str; 7] = ["SD", "SCD", "VIF", "Qabf", "SSIM", "CC", "GMSD"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageMetrics {
    pub id: String,
    #[serde(rename = "SD")]
    pub sd: f64,
    #[serde(rename = "SCD")]
    pub scd: f64,
    #[serde(rename = "VIF")]
    pub vif: f64,
    #[serde(rename = "Qabf")]
    pub qabf: f64,
    #[serde(rename = "SSIM")]
    pub ssim: f64,
    #[serde(rename = "CC")]
    pub cc: f64,
    #[serde(rename = "GMSD")]
    pub gmsd: f64,
}

impl ImageMetrics {
    pub fn compute(id: impl Into<String>, fused: &Tensor, ir: &Tensor, vis: &Tensor) -> Result<ImageMetrics> {
        Ok(ImageMetrics {
            id: id.into(),
            sd: super::sd(fused)?,
            scd: super::scd(fused, ir, vis)?,
            vif: super::vif_fusion(fused, ir, vis)?,
            qabf: super::qabf(fused, ir, vis)?,
            ssim: super::ssim_fusion(fused, ir, vis)?,
            cc: super::cc(fused, ir, vis)?,
            gmsd: super::gmsd_fusion(fused, ir, vis)?,
        })
    }

    pub fn values(&self) -> [f64; 7] {
        [self.sd, self.scd, self.vif, self.qabf, self.ssim, self.cc, self.gmsd]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub count: usize,
    pub images: Vec<ImageMetrics>,
    pub mean: ImageMetrics,
}

impl MetricReport {
    /// Per-image rows must already be in their final order.
    pub fn from_images(images: Vec<ImageMetrics>) -> Result<MetricReport> {
        if images.is_empty() {
            return Err(Error::Empty { op: "metric report" });
        }
        let n = images.len() as f64;
        let mut sums = [0.0; 7];
        for m in &images {
            for (s, v) in sums.iter_mut().zip(m.values()) {
                *s += v;
            }
        }
        let [sd, scd, vif, qabf, ssim, cc, gmsd] = sums.map(|s| s / n);
        Ok(MetricReport {
            count: images.len(),
            images,
            mean: ImageMetrics {
                id: "MEAN".into(),
                sd,
                scd,
                vif,
                qabf,
                ssim,
                cc,
                gmsd,
            },
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("id,{}\n", METRIC_NAMES.join(","));
        for m in self.images.iter().chain(std::iter::once(&self.mean)) {
            s.push_str(&m.id);
            for v in m.values() {
                write!(s, ",{v:.6}").expect("write to string");
            }
            s.push('\n');
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

/// Metrics of already-fused images; rows follow the input order.
pub fn evaluate_images(items: &[(ImagePair, Tensor)]) -> Result<MetricReport> {
    let rows = items
        .par_iter()
        .map(|(p, f)| ImageMetrics::compute(p.id.clone(), f, &p.ir, &p.vis))
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_images(rows)
}

/// Scores `fused_dir/{id}.png` against each manifest pair, in id order.
pub fn evaluate_dataset(manifest: &Manifest, fused_dir: impl AsRef<Path>) -> Result<MetricReport> {
    let dir = fused_dir.as_ref();
    if manifest.is_empty() {
        return Err(Error::Empty { op: "evaluate_dataset" });
    }
    let paths: Vec<_> = manifest.entries.iter().map(|e| dir.join(format!("{}.png", e.id))).collect();
    let missing: Vec<String> = paths.iter().filter(|p| !p.is_file()).map(|p| p.display().to_string()).collect();
    if !missing.is_empty() {
        return Err(Error::Missing(missing));
    }
    let rows = (0..manifest.len())
        .into_par_iter()
        .map(|i| {
            let pair = manifest.load_pair(i)?;
            let fused = load_luma(&paths[i])?;
            if fused.shape() != pair.ir.shape() {
                return Err(Error::dims(
                    "evaluate_dataset",
                    format!("{} is {} but its sources are {}", paths[i].display(), fused.shape(), pair.ir.shape()),
                ));
            }
            ImageMetrics::compute(pair.id, &fused, &pair.ir, &pair.vis)
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_images(rows)
}
