//! Trains a small siamese network on synthetic pedestrians and reports the
//! per-epoch cost and the similarity gap between matching and non-matching pairs.
//!
//! cargo run --example train_synthetic --release

use siamnet::dataio::synthetic::{generate, SyntheticConfig};
use siamnet::dataio::{augment_with_mirrors, PartGeometry};
use siamnet::trainer::{prepare_samples, train_from, TrainConfig};
use siamnet::{Branch, NetworkConfig, NetworkParams};

fn main() -> siamnet::Result<()> {
    let images = generate(&SyntheticConfig {
        subjects: 20,
        ..SyntheticConfig::default()
    })?;
    let parts = PartGeometry::for_height(48)?;
    let samples = prepare_samples(&augment_with_mirrors(&images), &parts)?;
    let config = TrainConfig {
        epochs: 15,
        batch_size: 20,
        ..TrainConfig::default()
    };
    let init = NetworkParams::init(NetworkConfig::toy(parts.band_height, 16, 8, 32), config.mode, config.seed)?;
    let out = train_from(&config, init, &samples, None, |r| {
        println!("epoch {:>2}  cost {:.4}  {:.2}s", r.epoch, r.train_cost, r.seconds)
    })?;

    let feats: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| out.params.features(&s.stack, Branch::A))
        .collect::<siamnet::Result<_>>()?;
    let unit: Vec<Vec<f64>> = feats
        .iter()
        .map(|f| {
            let n = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            f.iter().map(|v| v / n).collect()
        })
        .collect();
    let (mut pos, mut neg) = ((0.0, 0), (0.0, 0));
    for i in 0..unit.len() {
        for j in i + 1..unit.len() {
            let s: f64 = unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum();
            let acc = if samples[i].label == samples[j].label { &mut pos } else { &mut neg };
            acc.0 += s;
            acc.1 += 1;
        }
    }
    println!(
        "mean S: matching {:.3}, non-matching {:.3}",
        pos.0 / pos.1 as f64,
        neg.0 / neg.1 as f64
    );
    Ok(())
}
