//! Renders first-layer filters as a hue-sorted PNG grid.
//!
//! cargo run --example filter_grid --release -- [model.snet] [out.png]

use std::path::PathBuf;

use siamnet::filters::write_filter_grid;
use siamnet::{NetworkConfig, NetworkParams, SharingMode};

fn main() -> siamnet::Result<()> {
    let mut args = std::env::args().skip(1);
    let params = match args.next() {
        Some(model) => NetworkParams::load(model.as_ref())?,
        None => NetworkParams::init(NetworkConfig::default(), SharingMode::General, 0)?,
    };
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("siamnet_filters.png"));
    let grid = write_filter_grid(&params, &out)?;
    println!(
        "{}x{} grid, {}x{} px, tile order {:?}... written to {}",
        grid.columns,
        grid.rows,
        grid.width,
        grid.height,
        &grid.order[..8.min(grid.order.len())],
        out.display()
    );
    Ok(())
}
