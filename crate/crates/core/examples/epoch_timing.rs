//! Times a few training epochs of the reduced model.
//!
//! `cargo run --release --example epoch_timing -- <n_tot> <n2> [epochs]`

use std::time::Instant;

use relclip::dataset::{build_splits, DatasetConfig};
use relclip::model::ClipConfig;
use relclip::training::{train_epoch, TrainConfig, TrainState};

fn main() {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("integer argument")).collect();
    let (n_tot, n2) = (args.first().copied().unwrap_or(20), args.get(1).copied().unwrap_or(10));
    let epochs = args.get(2).copied().unwrap_or(3);
    let data = DatasetConfig::standard(n_tot, n2);
    let bundle = build_splits(&data).expect("valid dataset");
    let cfg = ClipConfig::reduced(&data);
    let tc = TrainConfig::default();
    let mut state = TrainState::new(&cfg, &tc);
    for _ in 0..epochs {
        let t = Instant::now();
        let loss = train_epoch(&mut state, &bundle, &tc).expect("finite loss");
        println!("epoch {} loss {loss:.4} train images {} took {:.3}s", state.epoch, bundle.train.len(), t.elapsed().as_secs_f64());
    }
}
