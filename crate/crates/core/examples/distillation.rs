//! Spatial-attention distillation between a teacher and a student.
//!
//! The distance compares unit-normalised attention maps, so it ignores the
//! overall scale of the features.

use mmdrfuse::data::synthetic_pairs;
use mmdrfuse::loss::{distill_loss, spatial_attention};
use mmdrfuse::nets::{Arch, FusionNet, NetTaps};

fn main() -> mmdrfuse::Result<()> {
    let pair = synthetic_pairs(1, 48, 48, 2).remove(0);
    let teacher = FusionNet::init(Arch::Teacher, 1).forward(&pair.ir, &pair.vis)?;
    let student = FusionNet::init(Arch::Student, 1).forward(&pair.ir, &pair.vis)?;
    println!("teacher taps: feat {}, out {}", teacher.feat.shape(), teacher.out.shape());
    println!("attention map: {}", spatial_attention(&teacher.feat).shape());

    let d = distill_loss(&teacher, &student)?;
    println!("fresh student vs teacher: {:.5}", d.value);

    for k in [0.1f32, 1.0, 7.5] {
        let scaled = NetTaps {
            feat: teacher.feat.scale(k),
            out: teacher.out.scale(k),
        };
        println!("teacher taps x{k}: {:.2e}", distill_loss(&teacher, &scaled)?.value);
    }
    let g = d.grad_feat.data().iter().map(|v| v * v).sum::<f32>().sqrt();
    println!("gradient norm on the student feature tap: {g:.4e}");
    Ok(())
}
