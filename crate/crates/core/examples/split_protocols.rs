//! Builds both split protocols on a synthetic two-camera dataset and writes
//! the split files.
//!
//! cargo run --example split_protocols --release

use siamnet::dataio::synthetic::{generate, SyntheticConfig};
use siamnet::dataio::{make_split, Protocol, Split, SplitSpec, SPLIT_REPEATS};

fn main() -> siamnet::Result<()> {
    let data = generate(&SyntheticConfig {
        subjects: 240,
        geometry: siamnet::dataio::ImageGeometry { height: 8, width: 4 },
        ..SyntheticConfig::default()
    })?;
    let dir = std::env::temp_dir().join("siamnet_example_splits");
    std::fs::create_dir_all(&dir).map_err(|source| siamnet::Error::Io { path: dir.clone(), source })?;
    for protocol in [Protocol::ViperStyle, Protocol::PridStyle] {
        for repeat in 0..SPLIT_REPEATS {
            let split = make_split(&data, &SplitSpec { protocol, repeat, seed: 0 })?;
            if repeat < 2 {
                println!(
                    "{protocol:?} repeat {repeat}: {} train, {} probe, {} gallery, first train ids {:?}",
                    split.train.len(),
                    split.probe.len(),
                    split.gallery.len(),
                    &split.train[..3]
                );
            }
            let path = dir.join(format!("{protocol:?}_{repeat:02}.csv"));
            split.write_csv(&path)?;
            assert_eq!(Split::read_csv(&path)?, split);
        }
    }
    println!("{} split files in {}", 2 * SPLIT_REPEATS, dir.display());
    Ok(())
}
