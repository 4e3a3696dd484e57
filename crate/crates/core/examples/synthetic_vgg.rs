//! Writes a random-weight VGG blob usable wherever a converted VGG-19 is
//! expected, and shows the five perception taps of an image.
//!
//! cargo run --example synthetic_vgg -- [out.vggb] [seed]

use mmdrfuse::data::synthetic_pairs;
use mmdrfuse::vgg::VggWeights;

fn main() -> mmdrfuse::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "synthetic.vggb".into());
    let seed = args.next().map_or(0, |s| s.parse().expect("seed"));
    let vgg = VggWeights::synthetic(seed);
    vgg.save(&out)?;
    let reloaded = VggWeights::load(&out)?;
    assert_eq!(reloaded.to_bytes(), vgg.to_bytes());
    println!("wrote {out}: {} conv layers, {} bytes", vgg.layers().len(), vgg.to_bytes().len());

    let image = &synthetic_pairs(1, 64, 64, seed)[0].vis;
    let taps = vgg.extract_taps(image)?;
    for (i, t) in taps.iter().enumerate() {
        let mean = t.data().iter().map(|&v| f64::from(v)).sum::<f64>() / t.len() as f64;
        println!("tap {}: {} mean activation {mean:.4}", i + 1, t.shape());
    }
    Ok(())
}
