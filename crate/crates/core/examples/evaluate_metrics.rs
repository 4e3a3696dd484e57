//! The seven fusion metrics on a synthetic pair, for three candidate
//! fusions: each source alone and the pixelwise mean.

use mmdrfuse::data::synthetic_pairs;
use mmdrfuse::metrics::{ImageMetrics, MetricReport, METRIC_NAMES};

fn main() -> mmdrfuse::Result<()> {
    let pair = synthetic_pairs(1, 96, 96, 5).remove(0);
    let mean = pair.ir.zip_map(&pair.vis, "mean", |a, b| 0.5 * (a + b))?;
    let rows = [("ir", &pair.ir), ("vis", &pair.vis), ("mean", &mean)]
        .into_iter()
        .map(|(name, fused)| ImageMetrics::compute(name, fused, &pair.ir, &pair.vis))
        .collect::<mmdrfuse::Result<Vec<_>>>()?;
    println!("{:>6} {}", "", METRIC_NAMES.map(|n| format!("{n:>8}")).join(""));
    for r in &rows {
        println!("{:>6} {}", r.id, r.values().map(|v| format!("{v:>8.4}")).join(""));
    }
    let report = MetricReport::from_images(rows)?;
    println!("\n{}", report.to_csv());
    Ok(())
}
