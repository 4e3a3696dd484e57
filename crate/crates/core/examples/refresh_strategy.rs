//! The refresh store across repeated visits of one sample: it keeps the
//! best-SSIM and best-GMSD outputs seen so far and turns the shortfall of
//! the current output into loss weights.

use mmdrfuse::data::synthetic_pairs;
use mmdrfuse::refresh::{evaluate, refresh_loss, update, MemoryStore, RefreshStore};
use mmdrfuse::vgg::VggWeights;

fn main() -> mmdrfuse::Result<()> {
    let pair = synthetic_pairs(1, 48, 48, 4).remove(0);
    let vgg = VggWeights::synthetic(0);
    let mut store = MemoryStore::new();
    for (visit, w) in [0.5f32, 0.8, 0.2, 0.6, 0.95].into_iter().enumerate() {
        let o = pair.ir.zip_map(&pair.vis, "blend", |a, b| w * a + (1.0 - w) * b)?;
        let e = evaluate(&store, 0, &o, &pair.ir, &pair.vis)?;
        let loss = refresh_loss(&e, &o, &vgg)?;
        let u = update(&mut store, 0, &o, e.scores, e.record.as_ref())?;
        println!(
            "visit {}: ir weight {w:.2}  S {:.4}  G {:.4}  gap_s {:.4}  gap_g {:.4}  L_refresh {:.5}  replaced S/G {}/{}",
            visit + 1,
            e.scores.ssim,
            e.scores.gmsd,
            e.gap_s,
            e.gap_g,
            loss.value,
            u.replaced_s || u.created,
            u.replaced_g || u.created
        );
    }
    let r = store.get(0)?.expect("record");
    println!("best S {:.4}, best G {:.4}, {} record(s)", r.s_bs, r.g_bg, store.len()?);
    Ok(())
}
