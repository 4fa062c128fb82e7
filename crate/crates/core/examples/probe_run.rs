//! Trains the reduced model on the main setting and writes its outputs.
//!
//! `cargo run --release --example probe_run -- <out_dir> [seed] [epochs]`

use std::path::PathBuf;

use relclip::dataset::{build_splits, DatasetConfig};
use relclip::model::ClipConfig;
use relclip::training::{train, TrainConfig};

fn main() {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().expect("output directory"));
    let seed: u64 = args.next().map(|s| s.parse().expect("seed")).unwrap_or(0);
    let epochs: usize = args.next().map(|s| s.parse().expect("epochs")).unwrap_or(10_000);
    let data = DatasetConfig { seed, ..DatasetConfig::standard(20, 10) };
    let bundle = build_splits(&data).expect("valid dataset");
    let cfg = ClipConfig::reduced(&data);
    let tc = TrainConfig { seed, epochs, ..TrainConfig::default() };
    let (_, log) = train(&bundle, &cfg, &tc, Some(&out)).expect("training");
    println!("{:?}", log.last());
}
