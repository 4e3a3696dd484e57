//! Single-threaded student inference time at 1280x1024.

use mmdrfuse::data::synthetic_pairs;
use mmdrfuse::nets::{Arch, FusionNet};

fn main() -> mmdrfuse::Result<()> {
    let pair = synthetic_pairs(1, 1024, 1280, 0).remove(0);
    let net = FusionNet::init(Arch::Student, 0);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().expect("pool");
    pool.install(|| {
        net.fuse(&pair.ir, &pair.vis)?;
        let mut times = Vec::new();
        for _ in 0..10 {
            let t = std::time::Instant::now();
            std::hint::black_box(net.fuse(&pair.ir, &pair.vis)?);
            times.push(t.elapsed().as_secs_f64() * 1e3);
        }
        times.sort_by(f64::total_cmp);
        println!("1280x1024 student forward: median {:.2} ms, best {:.2} ms", times[5], times[0]);
        Ok(())
    })
}
