//! Cosine similarity matrix, pair masks and the two costs on a small batch,
//! with the matrix-form gradient compared to the pair-by-pair reference.
//!
//! cargo run --example pairwise_cost --release

use ndarray::Array2;
use siamnet::pairwise::{cosine_matrix, pairwise_oracle};
use siamnet::{CostFunction, PairMasks};

fn main() -> siamnet::Result<()> {
    // 4-d features for 6 samples of 3 subjects, one per column
    let x = Array2::from_shape_fn((4, 6), |(r, c)| ((r * 7 + c * 3) as f64 * 0.9).sin() + (c / 2) as f64 * 0.5);
    let labels = [0, 0, 1, 1, 2, 2];

    let masks = PairMasks::general(&labels, 2.0)?;
    println!("positive pairs {}, negative pairs {}", masks.n1, masks.n2);
    let s = cosine_matrix(&x, &x)?;
    println!("similarities:\n{s:.3}");

    let deviance = CostFunction::default();
    let (j, grad) = deviance.general(&x, &masks)?;
    let (oracle_j, oracle_grad) = pairwise_oracle(&x, &masks, 2.0, 0.5)?;
    let diff = (&grad - &oracle_grad).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    println!("deviance {j:.6} (pair loop {oracle_j:.6}), max gradient difference {diff:.1e}");

    let (f, _) = CostFunction::Fisher.general(&x, &masks)?;
    println!("fisher {f:.6}");

    let specific = PairMasks::view_specific(&[0, 1, 2], &[0, 1, 2], 2.0)?;
    println!("view-specific 3x3 batch: {} positive, {} negative", specific.n1, specific.n2);
    Ok(())
}
