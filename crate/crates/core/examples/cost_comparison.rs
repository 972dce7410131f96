//! Trains the same network with binomial deviance and with the Fisher
//! criterion and compares held-out cost gaps and rank-1 rates.
//!
//! cargo run --example cost_comparison --release

use siamnet::dataio::synthetic::{generate, SyntheticConfig};
use siamnet::dataio::{augment_with_mirrors, make_split, PartGeometry, Protocol, SplitSpec};
use siamnet::eval::{cmc, score_set};
use siamnet::trainer::{evaluate_cost, prepare_samples, train, CostKind, TrainConfig};
use siamnet::NetworkConfig;

fn main() -> siamnet::Result<()> {
    let data = generate(&SyntheticConfig {
        subjects: 40,
        noise_std: 40.0,
        gain_jitter: 0.4,
        max_shift: 3,
        ..SyntheticConfig::default()
    })?;
    let parts = PartGeometry::for_height(48)?;
    let sets = make_split(&data, &SplitSpec { protocol: Protocol::ViperStyle, repeat: 1, seed: 0 })?.apply(&data)?;
    let train_samples = prepare_samples(&augment_with_mirrors(&sets.train), &parts)?;
    let held_out: Vec<_> = sets.probe.iter().chain(&sets.gallery).cloned().collect();
    let held_out = prepare_samples(&held_out, &parts)?;

    for cost_kind in [CostKind::Deviance, CostKind::Fisher] {
        let config = TrainConfig {
            cost_kind,
            epochs: 20,
            batch_size: 20,
            ..TrainConfig::default()
        };
        let out = train(&config, NetworkConfig::toy(parts.band_height, 16, 8, 32), &train_samples, None)?;
        let tr = evaluate_cost(&out.params, &train_samples, &config)?;
        let ho = evaluate_cost(&out.params, &held_out, &config)?;
        let curve = cmc(&score_set(&[out.params], &sets.probe, &sets.gallery, &parts, true)?)?;
        println!(
            "{cost_kind:?}: train {tr:.4}, held-out {ho:.4}, relative gap {:.3}, rank-1 {:.3}",
            (ho - tr) / tr.abs(),
            curve.rate(1)
        );
    }
    Ok(())
}
