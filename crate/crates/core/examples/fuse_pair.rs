//! Fuses one infrared/visible pair with a student network and saves the
//! result as PNG, recombining colour when the visible image has it.
//!
//! cargo run --example fuse_pair -- [ir.png vis.png out.png [weights.mmdr]]
//!
//! Without arguments a synthetic pair and a freshly initialised student are
//! used, and the output goes to fused.png.

use mmdrfuse::data::{load_pair, save_fused, synthetic_pairs};
use mmdrfuse::nets::{Arch, FusionNet};

fn main() -> mmdrfuse::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (pair, out, net) = match args.as_slice() {
        [ir, vis, out, rest @ ..] => {
            let net = match rest.first() {
                Some(w) => FusionNet::load(w)?,
                None => FusionNet::init(Arch::Student, 0),
            };
            (load_pair("pair", ir, vis)?, out.clone(), net)
        }
        _ => (synthetic_pairs(1, 256, 320, 3).remove(0), "fused.png".into(), FusionNet::init(Arch::Student, 0)),
    };
    let t = std::time::Instant::now();
    let fused = net.fuse(&pair.ir, &pair.vis)?;
    let ms = t.elapsed().as_secs_f64() * 1e3;
    save_fused(&out, &fused, pair.chroma.as_ref())?;
    let (lo, hi) = fused.data().iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    println!("{}x{} fused in {ms:.2} ms, range [{lo:.3}, {hi:.3}], wrote {out}", pair.width(), pair.height());
    Ok(())
}
