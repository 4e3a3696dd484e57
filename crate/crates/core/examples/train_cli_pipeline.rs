//! The full command-line workflow on a tiny synthetic dataset, driven
//! through the library's CLI entry point.

use clap::Parser;
use mmdrfuse::cli::{run, Cli};
use mmdrfuse::vgg::VggWeights;

fn step(args: &[&str]) -> mmdrfuse::Result<()> {
    println!("$ mmdrfuse {}", args.join(" "));
    let cli = Cli::try_parse_from(std::iter::once("mmdrfuse").chain(args.iter().copied())).expect("arguments");
    println!("{}\n", run(&cli)?);
    Ok(())
}

fn main() -> mmdrfuse::Result<()> {
    let dir = std::env::temp_dir().join("mmdrfuse-pipeline");
    let d = |p: &str| dir.join(p).to_string_lossy().into_owned();
    VggWeights::synthetic(0).save(d("vgg.vggb"))?;
    step(&["prepare-data", "--synthetic", "4", "--synthetic-res", "48x48", "--crops", "2", "--patch-size", "32", "--out", &d("data")])?;
    let common = ["--data", &d("data"), "--vgg", &d("vgg.vggb"), "--epochs", "1", "--batch-size", "4", "--lr", "1e-3"];
    step(&[&["train-teacher", "--out", &d("teacher")][..], &common].concat())?;
    step(&[&["train-student", "--out", &d("student"), "--teacher", &d("teacher/teacher.mmdr")][..], &common].concat())?;
    step(&["fuse", "--weights", &d("student/student.mmdr"), "--data", &d("data/manifest.tsv"), "--out", &d("fused")])?;
    step(&["evaluate", "--data", &d("data/manifest.tsv"), "--fused", &d("fused")])?;
    step(&["inspect-model", "--weights", &d("student/student.mmdr")])?;
    Ok(())
}
