//! Two-phase training on synthetic pairs with a random-weight VGG.
//!
//! cargo run --example train_smoke -- [lr] [crops] [pairs]

use mmdrfuse::data::{patches_from_pairs, synthetic_pairs};
use mmdrfuse::nets::{Arch, FusionNet};
use mmdrfuse::refresh::MemoryStore;
use mmdrfuse::train::{train_student, train_teacher, LossLog, TrainConfig};
use mmdrfuse::vgg::VggWeights;

fn summary(name: &str, log: &LossLog) {
    let first = log.epoch_mean(0).unwrap();
    let last = log.epoch_mean(log.epochs() - 1).unwrap();
    for e in 0..log.epochs() {
        let rows: Vec<_> = log.rows.iter().filter(|r| r.epoch == e).collect();
        let k = 1.0 / rows.len() as f64;
        let mean = |f: fn(&mmdrfuse::loss::LossBreakdown) -> f64| rows.iter().map(|r| f(&r.losses)).sum::<f64>() * k;
        println!(
            "  epoch {}: int {:.4} grad {:.4} percep {:.4} distill {:.4} refresh {:.4}",
            e + 1,
            mean(|l| l.intensity),
            mean(|l| l.gradient),
            mean(|l| l.perception),
            mean(|l| l.distill),
            mean(|l| l.refresh)
        );
    }
    println!("{name}: first {first:.5} last {last:.5} ratio {:.3}", last / first);
}

fn main() -> mmdrfuse::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let lr: f64 = args.first().map_or(3e-3, |s| s.parse().expect("lr"));
    let crops: usize = args.get(1).map_or(4, |s| s.parse().expect("crops"));
    let n: usize = args.get(2).map_or(20, |s| s.parse().expect("pairs"));

    let pairs = synthetic_pairs(n, 48, 48, 11);
    let patches = patches_from_pairs(&pairs, crops, 32, 12)?;
    let vgg = VggWeights::synthetic(0);
    let phase = |arch| TrainConfig {
        epochs: 2,
        batch_size: 4,
        lr,
        seed: 1,
        ..TrainConfig::for_phase(arch)
    };

    let t0 = std::time::Instant::now();
    let (teacher, tlog) = train_teacher(&phase(Arch::Teacher), FusionNet::init(Arch::Teacher, 1), &patches, &vgg, Box::new(MemoryStore::new()), None)?;
    summary("teacher", &tlog);
    let (_, slog) = train_student(&phase(Arch::Student), FusionNet::init(Arch::Student, 2), &teacher, &patches, &vgg, Box::new(MemoryStore::new()), None)?;
    summary("student", &slog);
    println!("elapsed {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}
