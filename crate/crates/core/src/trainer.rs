//! Mini-batch SGD over the siamese network with in-batch pair generation.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{camera_pair, crop_parts, PartGeometry, PersonImage};
use crate::error::{Error, Result};
use crate::pairwise::{CostFunction, PairMasks};
use crate::scnn::{Branch, FeatureCache, NetworkConfig, NetworkParams, ParamGrads, PartStack, SharingMode, NUM_PARTS};
use crate::tensor::Tensor;

/// Samples per forward/backward work unit. Fixed so that results do not
/// depend on the number of worker threads.
const CHUNK: usize = 8;
/// Keep forward caches for a whole batch only below this many cached floats.
const CACHE_BUDGET: usize = 32 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    Deviance,
    Fisher,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub negative_cost: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub cost_kind: CostKind,
    pub mode: SharingMode,
    /// Update only the fully connected layers.
    pub freeze_convolutions: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 0.5,
            negative_cost: 2.0,
            batch_size: 128,
            epochs: 180,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            cost_kind: CostKind::Deviance,
            mode: SharingMode::General,
            freeze_convolutions: false,
        }
    }
}

impl TrainConfig {
    pub fn cost_function(&self) -> CostFunction {
        match self.cost_kind {
            CostKind::Deviance => CostFunction::Deviance {
                alpha: self.alpha,
                beta: self.beta,
            },
            CostKind::Fisher => CostFunction::Fisher,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Usage(format!("batch size must be >= 2, got {}", self.batch_size)));
        }
        if self.epochs < 1 {
            return Err(Error::Usage("epochs must be >= 1".into()));
        }
        if !(self.negative_cost >= 1.0) {
            return Err(Error::Usage(format!("negative cost must be >= 1, got {}", self.negative_cost)));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Usage(format!("alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_cost: f64,
    pub dev_cost: Option<f64>,
    pub seconds: f64,
}

/// A preprocessed training example.
#[derive(Debug, Clone)]
pub struct Sample {
    pub stack: PartStack,
    pub label: usize,
    pub view: Branch,
}

/// Crops parts and assigns integer labels (by subject) and views (by camera).
pub fn prepare_samples(images: &[PersonImage], parts: &PartGeometry) -> Result<Vec<Sample>> {
    let labels: BTreeMap<&String, usize> = {
        let mut ids: Vec<&String> = images.iter().map(|i| &i.subject_id).collect();
        ids.sort();
        ids.dedup();
        ids.into_iter().enumerate().map(|(i, s)| (s, i)).collect()
    };
    let first_camera = match camera_pair(images) {
        Ok((a, _)) => Some(a),
        Err(_) => None,
    };
    images
        .par_iter()
        .map(|img| {
            Ok(Sample {
                stack: crop_parts(img, parts)?,
                label: labels[&img.subject_id],
                view: match &first_camera {
                    Some(a) if *a != img.camera_id => Branch::B,
                    _ => Branch::A,
                },
            })
        })
        .collect()
}

fn batch_is_valid(samples: &[Sample], batch: &[usize], mode: SharingMode) -> bool {
    let (mut pos, mut neg) = (false, false);
    for (k, &i) in batch.iter().enumerate() {
        for &j in &batch[k + 1..] {
            let (a, b) = (&samples[i], &samples[j]);
            if mode == SharingMode::ViewSpecific && a.view == b.view {
                continue;
            }
            if a.label == b.label {
                pos = true;
            } else {
                neg = true;
            }
            if pos && neg {
                return true;
            }
        }
    }
    false
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ (epoch as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Shuffles sample indices deterministically per `(seed, epoch)` and cuts
/// them into batches. Batches without both a positive and a negative pair
/// are repaired by swapping samples with another batch.
pub fn make_batches(
    samples: &[Sample],
    batch_size: usize,
    seed: u64,
    epoch: usize,
    mode: SharingMode,
) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::Usage(format!("batch size must be >= 2, got {batch_size}")));
    }
    let subjects = samples.iter().map(|s| s.label).collect::<std::collections::BTreeSet<_>>().len();
    if subjects < 2 {
        return Err(Error::Protocol(format!(
            "unusable dataset: training needs at least 2 subjects, found {subjects}"
        )));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut epoch_rng(seed, epoch));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        let tail = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(tail);
    }
    for i in 0..batches.len() {
        if batch_is_valid(samples, &batches[i], mode) {
            continue;
        }
        if !repair(samples, &mut batches, i, mode) {
            return Err(Error::Protocol(format!(
                "unusable dataset: cannot form batch {i} with both positive and negative pairs"
            )));
        }
    }
    Ok(batches)
}

fn repair(samples: &[Sample], batches: &mut [Vec<usize>], i: usize, mode: SharingMode) -> bool {
    let n = batches.len();
    let mut partners: Vec<usize> = Vec::new();
    if i + 1 < n {
        partners.push(i + 1);
    }
    if i > 0 {
        partners.push(i - 1);
    }
    partners.extend((0..n).filter(|&j| j != i && j + 1 != i && j != i + 1));
    for j in partners {
        for a in 0..batches[i].len() {
            for b in 0..batches[j].len() {
                let (x, y) = (batches[i][a], batches[j][b]);
                batches[i][a] = y;
                batches[j][b] = x;
                if batch_is_valid(samples, &batches[i], mode) && batch_is_valid(samples, &batches[j], mode) {
                    return true;
                }
                batches[i][a] = x;
                batches[j][b] = y;
            }
        }
    }
    false
}

/// Candidate pairs seen per epoch: `sum b (b - 1) / 2` over batch sizes `b`.
pub fn candidate_pairs(batches: &[Vec<usize>]) -> usize {
    batches.iter().map(|b| b.len() * (b.len() - 1) / 2).sum()
}

/// Momentum SGD with L2 weight decay:
/// `v <- momentum * v - lr * (g + weight_decay * p)`, `p <- p + v`.
pub fn sgd_step(
    params: &mut NetworkParams,
    grads: &ParamGrads,
    learning_rate: f64,
    momentum: f64,
    weight_decay: f64,
    velocity: &mut ParamGrads,
) -> Result<()> {
    apply_sgd(params, grads, learning_rate, momentum, weight_decay, velocity, false)
}

fn apply_sgd(
    params: &mut NetworkParams,
    grads: &ParamGrads,
    learning_rate: f64,
    momentum: f64,
    weight_decay: f64,
    velocity: &mut ParamGrads,
    freeze_convolutions: bool,
) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::NonFinite {
            context: "parameter gradient".into(),
        });
    }
    let per_branch = 2 + 4 * NUM_PARTS;
    let first_dense = 2 + 2 * NUM_PARTS;
    let g = grads.tensors();
    let mut v = velocity.tensors_mut();
    if g.len() != v.len() {
        return Err(Error::dim("sgd_step", "velocity tensors", g.len(), v.len()));
    }
    for (k, p) in params.tensors_mut().into_iter().enumerate() {
        if freeze_convolutions && k % per_branch < first_dense {
            continue;
        }
        let (gk, vk) = (g[k], &mut v[k]);
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(gk.data()).zip(vk.data_mut()) {
            *vv = momentum * *vv - learning_rate * (gv + weight_decay * *pv);
            *pv += *vv;
        }
    }
    Ok(())
}

struct Forwarded {
    /// `d x n` feature matrix, columns in the order of `members`.
    features: Array2<f64>,
    members: Vec<usize>,
    chunks: Vec<(Vec<usize>, Option<FeatureCache>)>,
}

fn forward_group(
    params: &NetworkParams,
    samples: &[Sample],
    members: &[usize],
    branch: Branch,
    keep_cache: bool,
) -> Result<Forwarded> {
    let d = params.feature_dim();
    let results: Vec<(Vec<usize>, Tensor, Option<FeatureCache>)> = members
        .par_chunks(CHUNK)
        .map(|chunk| {
            let stacks: Vec<&PartStack> = chunk.iter().map(|&i| &samples[i].stack).collect();
            let (f, cache) = params.forward(&stacks, branch)?;
            Ok((chunk.to_vec(), f, keep_cache.then_some(cache)))
        })
        .collect::<Result<_>>()?;
    let mut features = Array2::zeros((d, members.len()));
    let mut col = 0;
    let mut chunks = Vec::with_capacity(results.len());
    for (idx, f, cache) in results {
        for r in 0..idx.len() {
            for (k, v) in f.outer(r).iter().enumerate() {
                features[[k, col]] = *v;
            }
            col += 1;
        }
        chunks.push((idx, cache));
    }
    Ok(Forwarded {
        features,
        members: members.to_vec(),
        chunks,
    })
}

fn backward_group(
    params: &NetworkParams,
    samples: &[Sample],
    group: &Forwarded,
    grad: &Array2<f64>,
    branch: Branch,
) -> Result<ParamGrads> {
    let d = params.feature_dim();
    let position: BTreeMap<usize, usize> = group.members.iter().enumerate().map(|(c, &i)| (i, c)).collect();
    let parts: Vec<ParamGrads> = group
        .chunks
        .par_iter()
        .map(|(idx, cache)| {
            let upstream = Tensor::from_fn(&[idx.len(), d], |flat| grad[[flat % d, position[&idx[flat / d]]]]);
            match cache {
                Some(c) => params.backward(c, &upstream),
                None => {
                    let stacks: Vec<&PartStack> = idx.iter().map(|&i| &samples[i].stack).collect();
                    let (_, c) = params.forward(&stacks, branch)?;
                    params.backward(&c, &upstream)
                }
            }
        })
        .collect::<Result<_>>()?;
    let mut total = params.zero_grads();
    for p in &parts {
        total.accumulate(p)?;
    }
    Ok(total)
}

fn activation_floats(config: &NetworkConfig) -> usize {
    let area = config.part_height * config.part_width;
    NUM_PARTS * (3 * area + config.c1_channels * area * 7 / 4 + config.c3_channels * area * 7 / 16)
}

/// Cost and parameter gradient for one batch.
pub fn batch_gradient(
    params: &NetworkParams,
    samples: &[Sample],
    batch: &[usize],
    cost: &CostFunction,
    negative_cost: f64,
) -> Result<(f64, ParamGrads)> {
    let keep = batch.len() * activation_floats(params.config()) <= CACHE_BUDGET;
    let labels = |g: &Forwarded| g.members.iter().map(|&i| samples[i].label).collect::<Vec<_>>();
    match params.mode() {
        SharingMode::General => {
            let group = forward_group(params, samples, batch, Branch::A, keep)?;
            let masks = PairMasks::general(&labels(&group), negative_cost)?;
            let (j, gx) = cost.general(&group.features, &masks)?;
            if !j.is_finite() {
                return Ok((j, params.zero_grads()));
            }
            Ok((j, backward_group(params, samples, &group, &gx, Branch::A)?))
        }
        SharingMode::ViewSpecific => {
            let (xs, ys): (Vec<usize>, Vec<usize>) = batch.iter().partition(|&&i| samples[i].view == Branch::A);
            let gx_group = forward_group(params, samples, &xs, Branch::A, keep)?;
            let gy_group = forward_group(params, samples, &ys, Branch::B, keep)?;
            let masks = PairMasks::view_specific(&labels(&gx_group), &labels(&gy_group), negative_cost)?;
            let (j, gx, gy) = cost.specific(&gx_group.features, &gy_group.features, &masks)?;
            if !j.is_finite() {
                return Ok((j, params.zero_grads()));
            }
            let mut grads = backward_group(params, samples, &gx_group, &gx, Branch::A)?;
            grads.accumulate(&backward_group(params, samples, &gy_group, &gy, Branch::B)?)?;
            Ok((j, grads))
        }
    }
}

/// Cost of one batch without gradients.
pub fn batch_cost(
    params: &NetworkParams,
    samples: &[Sample],
    batch: &[usize],
    cost: &CostFunction,
    negative_cost: f64,
) -> Result<f64> {
    let labels = |g: &Forwarded| g.members.iter().map(|&i| samples[i].label).collect::<Vec<_>>();
    match params.mode() {
        SharingMode::General => {
            let g = forward_group(params, samples, batch, Branch::A, false)?;
            let masks = PairMasks::general(&labels(&g), negative_cost)?;
            cost.cost(&crate::pairwise::cosine_matrix(&g.features, &g.features)?, &masks)
        }
        SharingMode::ViewSpecific => {
            let (xs, ys): (Vec<usize>, Vec<usize>) = batch.iter().partition(|&&i| samples[i].view == Branch::A);
            let gx = forward_group(params, samples, &xs, Branch::A, false)?;
            let gy = forward_group(params, samples, &ys, Branch::B, false)?;
            let masks = PairMasks::view_specific(&labels(&gx), &labels(&gy), negative_cost)?;
            cost.cost(&crate::pairwise::cosine_matrix(&gx.features, &gy.features)?, &masks)
        }
    }
}

/// Mean batch cost over a held-out sample set, batched with a fixed shuffle.
pub fn evaluate_cost(params: &NetworkParams, samples: &[Sample], config: &TrainConfig) -> Result<f64> {
    let batches = make_batches(samples, config.batch_size, config.seed, usize::MAX, params.mode())?;
    let cost = config.cost_function();
    let mut total = 0.0;
    for b in &batches {
        total += batch_cost(params, samples, b, &cost, config.negative_cost)?;
    }
    Ok(total / batches.len() as f64)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub history: Vec<EpochRecord>,
}

/// Trains from a fresh initialization seeded by `config.seed`.
pub fn train(
    config: &TrainConfig,
    network: NetworkConfig,
    train_set: &[Sample],
    dev_set: Option<&[Sample]>,
) -> Result<TrainOutcome> {
    let params = NetworkParams::init(network, config.mode, config.seed)?;
    train_from(config, params, train_set, dev_set, |_| {})
}

/// Continues training `params`, calling `on_epoch` after every epoch.
pub fn train_from(
    config: &TrainConfig,
    mut params: NetworkParams,
    train_set: &[Sample],
    dev_set: Option<&[Sample]>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if params.mode() != config.mode {
        return Err(Error::Usage("network sharing mode differs from training mode".into()));
    }
    let cost = config.cost_function();
    let mut velocity = params.zero_grads();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let batches = make_batches(train_set, config.batch_size, config.seed, epoch, config.mode)?;
        let mut total = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let (j, grads) = batch_gradient(&params, train_set, batch, &cost, config.negative_cost)?;
            if !j.is_finite() {
                return Err(Error::TrainingDiverged {
                    epoch,
                    batch: b,
                    cost: j,
                    param_norm: params.sq_norm().sqrt(),
                });
            }
            total += j;
            apply_sgd(
                &mut params,
                &grads,
                config.learning_rate,
                config.momentum,
                config.weight_decay,
                &mut velocity,
                config.freeze_convolutions,
            )
            .map_err(|_| Error::TrainingDiverged {
                epoch,
                batch: b,
                cost: j,
                param_norm: params.sq_norm().sqrt(),
            })?;
        }
        let dev_cost = dev_set.map(|d| evaluate_cost(&params, d, config)).transpose()?;
        let record = EpochRecord {
            epoch,
            train_cost: total / batches.len() as f64,
            dev_cost,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        history.push(record);
    }
    Ok(TrainOutcome { params, history })
}

/// Writes `epoch,train_cost,dev_cost,seconds`; a missing dev cost is left empty.
pub fn write_epoch_csv(path: &std::path::Path, history: &[EpochRecord]) -> Result<()> {
    let err = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["epoch", "train_cost", "dev_cost", "seconds"]).map_err(err)?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            format!("{:.12e}", r.train_cost),
            r.dev_cost.map(|v| format!("{v:.12e}")).unwrap_or_default(),
            format!("{:.3}", r.seconds),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
