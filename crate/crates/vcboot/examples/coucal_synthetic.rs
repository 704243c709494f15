//! Writes the synthetic coucal growth data as a CSV.
//!
//! ```text
//! cargo run --release -p vcboot --example coucal_synthetic -- coucal.csv 3
//! vcboot test --data coucal.csv --model crates/vcboot/examples/coucal.cfg \
//!     --tested-rows 2,3 --plan sequential --B 500
//! ```

use std::fs::File;

fn main() {
    let mut args = std::env::args().skip(1);
    let path = args.next().unwrap_or_else(|| "coucal.csv".to_string());
    let seed: u64 = args.next().map_or(3, |s| s.parse().expect("seed must be an integer"));
    let data = vcboot::coucal::synthetic(seed);
    let file = File::create(&path).unwrap_or_else(|e| panic!("cannot create {path}: {e}"));
    vcboot::io::write_dataset(file, &data).expect("write failed");
    println!("{} nestlings, {} weighings written to {path}", data.n(), data.n_obs());
}
