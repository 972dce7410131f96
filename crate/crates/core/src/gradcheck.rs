//! Finite-difference verification of every analytic gradient in the crate.
//!
//! Suites return a [`GradCheckReport`] listing the largest relative error per
//! target. Relative error is `|a - n| / max(|a|, |n|, REL_FLOOR)` with central
//! differences of step [`STEP`].

use std::fmt;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataio::{crop_parts, PartGeometry, PersonImage};
use crate::error::{Error, Result};
use crate::layers::{self, ConvSpec, CrossChannelNorm};
use crate::pairwise::{self, cosine_matrix, CostFunction, PairMasks};
use crate::scnn::{Branch, NetworkConfig, NetworkParams, SharingMode};
use crate::tensor::Tensor;
use crate::trainer::{batch_cost, batch_gradient, Sample};

pub const STEP: f64 = 1e-5;
pub const REL_FLOOR: f64 = 1e-3;
pub const LAYER_THRESHOLD: f64 = 1e-6;
/// ReLU away from its kink, where the difference quotient is exact up to rounding of `x +- h`.
pub const EXACT_LAYER_THRESHOLD: f64 = 1e-8;
pub const LAYER_SHAPES_THRESHOLD: f64 = 1e-5;
pub const PAIRWISE_THRESHOLD: f64 = 1e-6;
pub const EQUIVALENCE_THRESHOLD: f64 = 1e-10;
pub const FULLNET_THRESHOLD: f64 = 1e-4;
/// Parameters sampled per full-network trial.
pub const FULLNET_SAMPLES: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Module {
    Layers,
    Pairwise,
    Fullnet,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central difference of `f` with respect to `values[index]`; `values` is restored.
pub fn central_difference(values: &mut [f64], index: usize, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = values[index];
    values[index] = orig + STEP;
    let plus = f(values);
    values[index] = orig - STEP;
    let minus = f(values);
    values[index] = orig;
    (plus - minus) / (2.0 * STEP)
}

/// Largest relative error between `analytic` and central differences of `f`
/// over every entry of `values`.
pub fn max_rel_error(values: &[f64], analytic: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let mut v = values.to_vec();
    (0..v.len())
        .map(|i| rel_error(analytic[i], central_difference(&mut v, i, &mut f)))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub target: String,
    pub max_rel_error: f64,
    pub threshold: f64,
    pub trials: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.threshold
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub results: Vec<CheckResult>,
}

impl GradCheckReport {
    fn record(&mut self, target: &str, threshold: f64, error: f64) {
        match self.results.iter_mut().find(|r| r.target == target) {
            Some(r) => {
                r.max_rel_error = r.max_rel_error.max(error);
                r.trials += 1;
            }
            None => self.results.push(CheckResult {
                target: target.to_string(),
                max_rel_error: error,
                threshold,
                trials: 1,
            }),
        }
    }

    pub fn passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }

    /// Target with the largest error relative to its threshold.
    pub fn worst(&self) -> Option<&CheckResult> {
        self.results
            .iter()
            .max_by(|a, b| (a.max_rel_error / a.threshold).total_cmp(&(b.max_rel_error / b.threshold)))
    }

    pub fn max_error(&self, target: &str) -> Option<f64> {
        self.results.iter().find(|r| r.target == target).map(|r| r.max_rel_error)
    }

    /// `Err(GradientCheck)` naming the worst offender if any target fails.
    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            return Ok(self);
        }
        let w = self.worst().expect("a failing report is non-empty");
        Err(Error::GradientCheck {
            target: w.target.clone(),
            rel_error: w.max_rel_error,
            threshold: w.threshold,
        })
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.results {
            writeln!(
                f,
                "{:<28} max_rel_error={:.3e} threshold={:.0e} trials={} {}",
                r.target,
                r.max_rel_error,
                r.threshold,
                r.trials,
                if r.passed() { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

pub fn run(module: Module, trials: usize, seed: u64) -> Result<GradCheckReport> {
    match module {
        Module::Layers => layer_suite(trials, seed),
        Module::Pairwise => pairwise_suite(trials, seed),
        Module::Fullnet => fullnet_suite(trials, seed),
    }
}

fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (trial as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

/// Standard normal matrix, `rows x cols`.
pub fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// Like [`max_rel_error`] for the objective `sum(r * f(values))`, but the
/// outputs are differenced before the weighted sum so untouched outputs cancel exactly.
fn projected_rel_error(r: &Tensor, values: &[f64], analytic: &[f64], mut f: impl FnMut(&[f64]) -> Tensor) -> f64 {
    let mut v = values.to_vec();
    (0..v.len())
        .map(|i| {
            let orig = v[i];
            v[i] = orig + STEP;
            let plus = f(&v);
            v[i] = orig - STEP;
            let minus = f(&v);
            v[i] = orig;
            let numeric = plus
                .data()
                .iter()
                .zip(minus.data())
                .zip(r.data())
                .map(|((p, m), w)| w * (p - m))
                .sum::<f64>()
                / (2.0 * STEP);
            rel_error(analytic[i], numeric)
        })
        .fold(0.0, f64::max)
}

fn with_data(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).expect("shape preserved")
}

fn check_conv(report: &mut GradCheckReport, rng: &mut ChaCha8Rng, prefix: &str, input: &[usize], spec: ConvSpec, t: f64) -> Result<()> {
    let input = normal_tensor(rng, input);
    let filters = normal_tensor(rng, &spec.filter_shape());
    let bias = normal_tensor(rng, &[spec.out_channels]);
    let r = normal_tensor(rng, layers::conv2d(&input, &filters, &bias, &spec)?.shape());
    let g = layers::conv2d_backward(&input, &filters, &spec, &r)?;
    let out = |i: &Tensor, f: &Tensor, b: &Tensor| layers::conv2d(i, f, b, &spec).unwrap();
    report.record(&format!("{prefix}/input"), t, projected_rel_error(&r, input.data(), g.input.data(), |v| {
        out(&with_data(input.shape(), v), &filters, &bias)
    }));
    report.record(&format!("{prefix}/filters"), t, projected_rel_error(&r, filters.data(), g.filters.data(), |v| {
        out(&input, &with_data(filters.shape(), v), &bias)
    }));
    report.record(&format!("{prefix}/bias"), t, projected_rel_error(&r, bias.data(), g.bias.data(), |v| {
        out(&input, &filters, &with_data(bias.shape(), v))
    }));
    Ok(())
}

/// Lifts each 2x2 window's maximum at least `gap` above the runner-up so the
/// finite-difference stencil never switches the argmax.
fn separate_window_maxima(input: &mut Tensor, gap: f64) {
    let (h, w) = (input.dim(2), input.dim(3));
    for plane in input.data_mut().chunks_mut(h * w) {
        for y in (0..h).step_by(2) {
            for x in (0..w).step_by(2) {
                let mut cells = [y * w + x, y * w + x + 1, (y + 1) * w + x, (y + 1) * w + x + 1];
                cells.sort_by(|&a, &b| plane[b].total_cmp(&plane[a]));
                if plane[cells[0]] - plane[cells[1]] < gap {
                    plane[cells[0]] = plane[cells[1]] + gap;
                }
            }
        }
    }
}

fn check_maxpool(report: &mut GradCheckReport, rng: &mut ChaCha8Rng, target: &str, shape: &[usize], t: f64) -> Result<()> {
    let mut input = normal_tensor(rng, shape);
    separate_window_maxima(&mut input, 1e-3);
    let (out, idx) = layers::maxpool2(&input)?;
    let r = normal_tensor(rng, out.shape());
    let g = layers::maxpool2_backward(&r, &idx)?;
    report.record(target, t, projected_rel_error(&r, input.data(), g.data(), |v| {
        layers::maxpool2(&with_data(input.shape(), v)).unwrap().0
    }));
    Ok(())
}

fn check_norm(report: &mut GradCheckReport, rng: &mut ChaCha8Rng, target: &str, shape: &[usize], t: f64) -> Result<()> {
    // a larger alpha than the default so the normalization is far from the identity
    let norm = CrossChannelNorm {
        alpha: 0.05,
        ..CrossChannelNorm::default()
    };
    let input = normal_tensor(rng, shape);
    let r = normal_tensor(rng, shape);
    let g = norm.backward(&input, &r)?;
    report.record(target, t, projected_rel_error(&r, input.data(), g.data(), |v| {
        norm.forward(&with_data(input.shape(), v)).unwrap()
    }));
    Ok(())
}

fn check_relu(report: &mut GradCheckReport, rng: &mut ChaCha8Rng, target: &str, shape: &[usize], t: f64) -> Result<()> {
    // keep every entry well away from the kink at 0
    let input = normal_tensor(rng, shape).map(|v| if v.abs() < 1e-3 { v + 0.01 } else { v });
    let r = normal_tensor(rng, shape);
    let g = layers::relu_backward(&input, &r)?;
    report.record(target, t, projected_rel_error(&r, input.data(), g.data(), |v| {
        layers::relu(&with_data(input.shape(), v))
    }));
    Ok(())
}

fn check_fc(report: &mut GradCheckReport, rng: &mut ChaCha8Rng, prefix: &str, n: usize, d_in: usize, d_out: usize, t: f64) -> Result<()> {
    let input = normal_tensor(rng, &[n, d_in]);
    let weights = normal_tensor(rng, &[d_out, d_in]);
    let bias = normal_tensor(rng, &[d_out]);
    let r = normal_tensor(rng, &[n, d_out]);
    let g = layers::fully_connected_backward(&input, &weights, &r)?;
    let out = |i: &Tensor, w: &Tensor, b: &Tensor| layers::fully_connected(i, w, b).unwrap();
    report.record(&format!("{prefix}/input"), t, projected_rel_error(&r, input.data(), g.input.data(), |v| {
        out(&with_data(input.shape(), v), &weights, &bias)
    }));
    report.record(&format!("{prefix}/weights"), t, projected_rel_error(&r, weights.data(), g.weights.data(), |v| {
        out(&input, &with_data(weights.shape(), v), &bias)
    }));
    report.record(&format!("{prefix}/bias"), t, projected_rel_error(&r, bias.data(), g.bias.data(), |v| {
        out(&input, &weights, &with_data(bias.shape(), v))
    }));
    Ok(())
}

/// Every layer's backward pass on fixed reference shapes, plus a rotation of
/// three further shapes per layer under the looser [`LAYER_SHAPES_THRESHOLD`].
pub fn layer_suite(trials: usize, seed: u64) -> Result<GradCheckReport> {
    let mut report = GradCheckReport::default();
    let r = &mut report;
    for trial in 0..trials {
        let rng = &mut trial_rng(seed, trial);
        check_conv(r, rng, "conv2d", &[1, 2, 5, 5], ConvSpec::same(2, 3, 3), LAYER_THRESHOLD)?;
        check_maxpool(r, rng, "maxpool2/input", &[1, 4, 8, 8], LAYER_THRESHOLD)?;
        check_norm(r, rng, "cross_channel_norm/input", &[1, 6, 3, 3], LAYER_THRESHOLD)?;
        check_relu(r, rng, "relu/input", &[3, 7], EXACT_LAYER_THRESHOLD)?;
        check_fc(r, rng, "fully_connected", 4, 6, 3, LAYER_THRESHOLD)?;

        let v = trial % 3;
        let t = LAYER_SHAPES_THRESHOLD;
        let conv_shapes = [
            ([2, 3, 6, 4], ConvSpec::same(3, 2, 3)),
            ([1, 1, 7, 7], ConvSpec::same(1, 4, 5)),
            ([2, 2, 5, 6], ConvSpec { zero_pad: false, ..ConvSpec::same(2, 3, 3) }),
        ];
        check_conv(r, rng, "conv2d/shapes", &conv_shapes[v].0, conv_shapes[v].1, t)?;
        check_maxpool(r, rng, "maxpool2/shapes", &[[2, 2, 4, 6], [1, 3, 2, 2], [3, 1, 6, 4]][v], t)?;
        check_norm(r, rng, "cross_channel_norm/shapes", &[[2, 3, 2, 2], [1, 8, 2, 3], [2, 5, 4, 1]][v], t)?;
        check_relu(r, rng, "relu/shapes", [&[2, 2, 3, 3][..], &[10], &[4, 5]][v], t)?;
        let (n, d_in, d_out) = [(1, 9, 2), (5, 3, 7), (2, 12, 12)][v];
        check_fc(r, rng, "fully_connected/shapes", n, d_in, d_out, t)?;
    }
    Ok(report)
}

fn matrix_with(shape: (usize, usize), v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec(shape, v.to_vec()).expect("shape preserved")
}

fn fd_matrix(x: &Array2<f64>, analytic: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> f64 {
    let x = x.as_standard_layout().to_owned();
    let a = analytic.as_standard_layout().to_owned();
    max_rel_error(x.as_slice().expect("standard layout"), a.as_slice().expect("standard layout"), |v| {
        f(&matrix_with(x.dim(), v))
    })
}

fn max_pair_error(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| rel_error(*x, *y)).fold(0.0, f64::max)
}

/// Deviance and Fisher gradients against finite differences, and the matrix
/// form against the pair-by-pair loop.
pub fn pairwise_suite(trials: usize, seed: u64) -> Result<GradCheckReport> {
    let mut report = GradCheckReport::default();
    let (alpha, beta, c) = (2.0, 0.5, 2.0);
    let t = PAIRWISE_THRESHOLD;
    for trial in 0..trials {
        let mut rng = trial_rng(seed, trial);

        let masks = PairMasks::general(&[1, 1, 2, 2, 3, 3], c)?;
        let x = normal_matrix(&mut rng, 5, 6);
        let s = cosine_matrix(&x, &x)?;
        let g = pairwise::deviance_grad_general(&x, &s, &masks, alpha, beta)?;
        let cost = |x: &Array2<f64>| pairwise::deviance_cost(&cosine_matrix(x, x).unwrap(), &masks, alpha, beta).unwrap();
        report.record("deviance_grad_general", t, fd_matrix(&x, &g, cost));

        let g = pairwise::fisher_grad(&x, &s, &masks)?;
        let cost = |x: &Array2<f64>| pairwise::fisher_cost(&cosine_matrix(x, x).unwrap(), &masks).unwrap();
        report.record("fisher_grad", t, fd_matrix(&x, &g, cost));

        let masks = PairMasks::view_specific(&[1, 2, 3, 4], &[1, 2, 3], c)?;
        let x = normal_matrix(&mut rng, 5, 4);
        let y = normal_matrix(&mut rng, 5, 3);
        let s = cosine_matrix(&x, &y)?;
        let (gx, gy) = pairwise::deviance_grad_specific(&x, &y, &s, &masks, alpha, beta)?;
        let dev = |x: &Array2<f64>, y: &Array2<f64>| {
            pairwise::deviance_cost(&cosine_matrix(x, y).unwrap(), &masks, alpha, beta).unwrap()
        };
        report.record("deviance_grad_specific/x", t, fd_matrix(&x, &gx, |v| dev(v, &y)));
        report.record("deviance_grad_specific/y", t, fd_matrix(&y, &gy, |v| dev(&x, v)));

        let (gx, gy) = pairwise::fisher_grad_specific(&x, &y, &s, &masks)?;
        let fis = |x: &Array2<f64>, y: &Array2<f64>| pairwise::fisher_cost(&cosine_matrix(x, y).unwrap(), &masks).unwrap();
        report.record("fisher_grad_specific/x", t, fd_matrix(&x, &gx, |v| fis(v, &y)));
        report.record("fisher_grad_specific/y", t, fd_matrix(&y, &gy, |v| fis(&x, v)));

        // matrix form against the pair loop on a random labelling
        let n = rng.random_range(4..=16);
        let d = rng.random_range(2..=8);
        let labels: Vec<usize> = loop {
            let l: Vec<usize> = (0..n).map(|_| rng.random_range(0..n / 2)).collect();
            if PairMasks::general(&l, c).is_ok() {
                break l;
            }
        };
        let masks = PairMasks::general(&labels, c)?;
        let x = normal_matrix(&mut rng, d, n);
        let (mc, mg) = CostFunction::Deviance { alpha, beta }.general(&x, &masks)?;
        let (lc, lg) = pairwise::pairwise_oracle(&x, &masks, alpha, beta)?;
        report.record("matrix_vs_loop/cost", EQUIVALENCE_THRESHOLD, rel_error(mc, lc));
        report.record("matrix_vs_loop/grad", EQUIVALENCE_THRESHOLD, max_pair_error(&mg, &lg));

        let m = rng.random_range(2..=8);
        let xl: Vec<usize> = (0..n).map(|i| i % m).collect();
        let yl: Vec<usize> = (0..m).collect();
        let masks = PairMasks::view_specific(&xl, &yl, c)?;
        let y = normal_matrix(&mut rng, d, m);
        let (mc, mgx, mgy) = CostFunction::Deviance { alpha, beta }.specific(&x, &y, &masks)?;
        let (lc, lgx, lgy) = pairwise::pairwise_oracle_specific(&x, &y, &masks, alpha, beta)?;
        report.record("matrix_vs_loop_specific/cost", EQUIVALENCE_THRESHOLD, rel_error(mc, lc));
        report.record(
            "matrix_vs_loop_specific/grad",
            EQUIVALENCE_THRESHOLD,
            max_pair_error(&mgx, &lgx).max(max_pair_error(&mgy, &lgy)),
        );
    }
    Ok(report)
}

/// The toy network used for end-to-end checks: 16x48 images, 8 channels per
/// convolution layer and 20-d features.
pub fn toy_network() -> (NetworkConfig, PartGeometry) {
    let parts = PartGeometry::for_height(48).expect("valid height");
    (NetworkConfig::toy(parts.band_height, 16, 8, 20), parts)
}

/// Six random toy images of three subjects, alternating between two cameras.
pub fn toy_batch(rng: &mut ChaCha8Rng, parts: &PartGeometry) -> Result<Vec<Sample>> {
    (0..6)
        .map(|k| {
            let img = PersonImage {
                subject_id: format!("{}", k / 2),
                camera_id: if k % 2 == 0 { "a" } else { "b" }.into(),
                index: 0,
                pixels: Tensor::from_fn(&[3, 48, 16], |_| rng.random_range(-1.0..1.0)),
                mirrored: false,
            };
            Ok(Sample {
                stack: crop_parts(&img, parts)?,
                label: k / 2,
                view: if k % 2 == 0 { Branch::A } else { Branch::B },
            })
        })
        .collect()
}

fn routing(params: &NetworkParams, samples: &[Sample]) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for s in samples {
        let branch = match params.mode() {
            SharingMode::General => Branch::A,
            SharingMode::ViewSpecific => s.view,
        };
        out.extend(params.forward(&[&s.stack], branch)?.1.activation_pattern());
    }
    Ok(out)
}

/// Derivative of the batch cost along one parameter by finite differences
/// that avoid ReLU and max-pool kinks. The central stencil is used when the
/// routing at `x - h` and `x + h` matches the routing at `x`; otherwise a
/// second-order one-sided stencil on the side without a kink; otherwise the
/// step shrinks tenfold, down to `STEP / 1000`.
pub fn kink_aware_difference(
    params: &mut NetworkParams,
    samples: &[Sample],
    cost: &CostFunction,
    negative_cost: f64,
    tensor: usize,
    offset: usize,
) -> Result<f64> {
    let batch: Vec<usize> = (0..samples.len()).collect();
    let orig = params.tensors()[tensor].data()[offset];
    let mut probe = |delta: f64| -> Result<(f64, Vec<usize>)> {
        params.tensors_mut()[tensor].data_mut()[offset] = orig + delta;
        let out = batch_cost(params, samples, &batch, cost, negative_cost)
            .and_then(|j| Ok((j, routing(params, samples)?)));
        params.tensors_mut()[tensor].data_mut()[offset] = orig;
        out
    };
    let (f0, base) = probe(0.0)?;
    let mut h = STEP;
    loop {
        let (fp, rp) = probe(h)?;
        let (fm, rm) = probe(-h)?;
        if rp == base && rm == base {
            return Ok((fp - fm) / (2.0 * h));
        }
        if rp == base {
            let (fp2, rp2) = probe(2.0 * h)?;
            if rp2 == base {
                return Ok((-3.0 * f0 + 4.0 * fp - fp2) / (2.0 * h));
            }
        }
        if rm == base {
            let (fm2, rm2) = probe(-2.0 * h)?;
            if rm2 == base {
                return Ok((3.0 * f0 - 4.0 * fm + fm2) / (2.0 * h));
            }
        }
        if h <= STEP / 1000.0 {
            return Ok((fp - fm) / (2.0 * h));
        }
        h /= 10.0;
    }
}

/// End-to-end deviance gradient of the toy network against finite
/// differences on [`FULLNET_SAMPLES`] randomly chosen parameters per trial.
/// Odd trials use view-specific parameters.
pub fn fullnet_suite(trials: usize, seed: u64) -> Result<GradCheckReport> {
    let mut report = GradCheckReport::default();
    let cost = CostFunction::default();
    let (config, parts) = toy_network();
    for trial in 0..trials {
        let mut rng = trial_rng(seed, trial);
        let mode = if trial % 2 == 0 {
            SharingMode::General
        } else {
            SharingMode::ViewSpecific
        };
        let target = match mode {
            SharingMode::General => "fullnet/general",
            SharingMode::ViewSpecific => "fullnet/view_specific",
        };
        let mut params = NetworkParams::init(config, mode, rng.random())?;
        let samples = toy_batch(&mut rng, &parts)?;
        let batch: Vec<usize> = (0..samples.len()).collect();
        let (_, grads) = batch_gradient(&params, &samples, &batch, &cost, 2.0)?;
        let analytic: Vec<f64> = grads.tensors().iter().flat_map(|t| t.data().iter().copied()).collect();
        let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        let mut worst: f64 = 0.0;
        for _ in 0..FULLNET_SAMPLES {
            let flat = rng.random_range(0..analytic.len());
            let (mut tensor, mut offset) = (0, flat);
            while offset >= sizes[tensor] {
                offset -= sizes[tensor];
                tensor += 1;
            }
            let numeric = kink_aware_difference(&mut params, &samples, &cost, 2.0, tensor, offset)?;
            worst = worst.max(rel_error(analytic[flat], numeric));
        }
        report.record(target, FULLNET_THRESHOLD, worst);
    }
    Ok(report)
}
