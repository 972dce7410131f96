//! Part cropping and feature extraction through shared and view-specific
//! networks, plus a model save/load round trip.
//!
//! cargo run --example siamese_features --release

use siamnet::dataio::synthetic::{generate, SyntheticConfig};
use siamnet::dataio::{crop_parts, PartGeometry};
use siamnet::{Branch, NetworkConfig, NetworkParams, SharingMode};

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (a.iter().map(|v| v * v).sum::<f64>() * b.iter().map(|v| v * v).sum::<f64>()).sqrt()
}

fn main() -> siamnet::Result<()> {
    let images = generate(&SyntheticConfig {
        subjects: 2,
        ..SyntheticConfig::default()
    })?;
    let parts = PartGeometry::for_height(48)?;
    println!("bands of {} rows at offsets {:?}", parts.band_height, parts.offsets);
    let stacks = images.iter().map(|i| crop_parts(i, &parts)).collect::<siamnet::Result<Vec<_>>>()?;

    let config = NetworkConfig::toy(parts.band_height, 16, 8, 32);
    for mode in [SharingMode::General, SharingMode::ViewSpecific] {
        let net = NetworkParams::init(config, mode, 1)?;
        let a = net.features(&stacks[0], Branch::A)?;
        let b = net.features(&stacks[1], Branch::B)?;
        println!("{mode:?}: {} parameters, {}-d features, S = {:.4}", net.parameter_count(), a.len(), cosine(&a, &b));
    }

    let full = NetworkParams::init(NetworkConfig::default(), SharingMode::General, 0)?;
    println!("default network has {} parameters", full.parameter_count());

    let dir = std::env::temp_dir().join("siamnet_example_model.snet");
    full.save(&dir)?;
    let back = NetworkParams::load(&dir)?;
    println!("round trip identical: {}", back.branches() == full.branches());
    std::fs::remove_file(&dir).ok();
    Ok(())
}
