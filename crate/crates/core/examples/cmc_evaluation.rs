//! Probe/gallery scoring with mirror and multi-model fusion, CMC curves and
//! their aggregation over splits.
//!
//! cargo run --example cmc_evaluation --release

use ndarray::array;
use siamnet::dataio::synthetic::{generate, SyntheticConfig};
use siamnet::dataio::{make_split, PartGeometry, Protocol, SplitSpec};
use siamnet::eval::{aggregate_splits, cmc, match_ranks, score_set, ScoreTable};
use siamnet::{NetworkConfig, NetworkParams, SharingMode};

fn main() -> siamnet::Result<()> {
    // ties count against the probe: the true match at 0.5 shares rank with the impostor
    let ids: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
    let table = ScoreTable::new(array![[0.9, 0.1, 0.2], [0.5, 0.5, 0.1], [0.3, 0.8, 0.7]], ids.clone(), ids)?;
    println!("ranks {:?}, CMC {:?}", match_ranks(&table)?, cmc(&table)?.mean);

    let data = generate(&SyntheticConfig {
        subjects: 20,
        ..SyntheticConfig::default()
    })?;
    let parts = PartGeometry::for_height(48)?;
    let models: Vec<NetworkParams> = (0..2)
        .map(|seed| NetworkParams::init(NetworkConfig::toy(parts.band_height, 16, 8, 32), SharingMode::General, seed))
        .collect::<siamnet::Result<_>>()?;

    let mut curves = Vec::new();
    for repeat in 1..=3 {
        let sets = make_split(&data, &SplitSpec { protocol: Protocol::ViperStyle, repeat, seed: 0 })?.apply(&data)?;
        for (label, fused_models, mirror) in [("single", &models[..1], false), ("mirror", &models[..1], true), ("2 models + mirror", &models[..], true)] {
            let curve = cmc(&score_set(fused_models, &sets.probe, &sets.gallery, &parts, mirror)?)?;
            println!("split {repeat} {label:<18} rank-1 {:.2} rank-5 {:.2}", curve.rate(1), curve.rate(5));
            if label == "mirror" {
                curves.push(curve);
            }
        }
    }
    let mean = aggregate_splits(&curves)?;
    println!("untrained mirror-fused mean rank-1 {:.3} over {} splits", mean.rate(1), mean.per_split.len());
    Ok(())
}
