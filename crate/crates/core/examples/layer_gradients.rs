//! Checks every layer's backward pass against central finite differences.
//!
//! cargo run --example layer_gradients --release

use siamnet::gradcheck::{layer_suite, rel_error};
use siamnet::layers::{conv2d, ConvSpec};
use siamnet::Tensor;

fn main() -> siamnet::Result<()> {
    let spec = ConvSpec::same(3, 2, 3);
    let input = Tensor::from_fn(&[1, 3, 5, 4], |i| (i as f64 * 0.7).sin());
    let filters = Tensor::from_fn(&spec.filter_shape(), |i| (i as f64 * 0.3).cos() * 0.2);
    let out = conv2d(&input, &filters, &Tensor::zeros(&[2]), &spec)?;
    println!("conv2d {:?} -> {:?}", input.shape(), out.shape());
    println!("rel_error(1.0, 1.0 + 1e-9) = {:.1e}", rel_error(1.0, 1.0 + 1e-9));

    let report = layer_suite(20, 7)?;
    print!("{report}");
    println!("all layers pass: {}", report.passed());
    Ok(())
}
