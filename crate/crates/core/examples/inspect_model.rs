//! Parameter, payload and MAC counts of both networks.
//!
//! cargo run --example inspect_model -- [WIDTHxHEIGHT]

use mmdrfuse::cli::{inspect_report, parse_res};
use mmdrfuse::nets::{Arch, FusionNet};

fn main() {
    let res = std::env::args().nth(1).unwrap_or_else(|| "1280x1024".into());
    let (w, h) = parse_res(&res).expect("resolution");
    for arch in [Arch::Student, Arch::Teacher] {
        let net = FusionNet::init(arch, 0);
        println!("{}\n", inspect_report(&net, w, h));
    }
    let student = FusionNet::init(Arch::Student, 0);
    println!("student MACs per pixel: {}", student.mac_count(1, 1));
    println!("student weight file: {} bytes", student.to_bytes().len());
}
