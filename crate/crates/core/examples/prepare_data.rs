//! Builds a dataset directory, scans it into a manifest and crops a patch
//! archive, the same steps `mmdrfuse prepare-data` performs.
//!
//! cargo run --example prepare_data -- [out-dir]

use mmdrfuse::data::{make_patches, synthetic_pairs, write_dataset, PatchSet};

fn main() -> mmdrfuse::Result<()> {
    let out = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "prepared".into()));
    let manifest = write_dataset(out.join("pairs"), &synthetic_pairs(6, 72, 80, 9))?;
    print!("{}", manifest.to_tsv());
    let patches = make_patches(&manifest, 5, 32, 1)?;
    patches.save(out.join("patches.mmps"))?;
    let back = PatchSet::load(out.join("patches.mmps"))?;
    assert_eq!(back, patches);
    for s in patches.samples.iter().take(5) {
        println!("sample {} from {} at {:?}", s.sample_id, s.source_id, s.origin);
    }
    println!("{} patches written to {}", patches.len(), out.display());
    Ok(())
}
