//! Part-based five-layer CNN and its siamese parameter sets.
//!
//! Each image arrives as three overlapping horizontal bands. All bands share
//! the first convolution; each band has its own second convolution and its
//! own fully connected projection, and the three projections are summed into
//! one feature vector:
//!
//! ```text
//! part -> C1 -> ReLU -> pool -> norm -> C3[part] -> ReLU -> pool -> norm -> F5[part] --+
//!                                                                                   sum -> feature
//! ```
//!
//! In [`SharingMode::General`] both siamese branches read one parameter set.
//! In [`SharingMode::ViewSpecific`] each branch owns an independent copy.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{self, ConvSpec, CrossChannelNorm, PoolIndices};
use crate::tensor::Tensor;

pub const NUM_PARTS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub part_height: usize,
    pub part_width: usize,
    pub c1_channels: usize,
    pub c3_channels: usize,
    pub c1_kernel: usize,
    pub c3_kernel: usize,
    pub feature_dim: usize,
    pub norm: CrossChannelNorm,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            part_height: 48,
            part_width: 48,
            c1_channels: 64,
            c3_channels: 64,
            c1_kernel: 7,
            c3_kernel: 5,
            feature_dim: 500,
            norm: CrossChannelNorm::default(),
        }
    }
}

impl NetworkConfig {
    /// Small network used for desk-scale experiments and gradient checks.
    pub fn toy(part_height: usize, part_width: usize, channels: usize, feature_dim: usize) -> Self {
        Self {
            part_height,
            part_width,
            c1_channels: channels,
            c3_channels: channels,
            feature_dim,
            ..Self::default()
        }
    }

    pub fn c1_spec(&self) -> ConvSpec {
        ConvSpec::same(3, self.c1_channels, self.c1_kernel)
    }

    pub fn c3_spec(&self) -> ConvSpec {
        ConvSpec::same(self.c1_channels, self.c3_channels, self.c3_kernel)
    }

    /// Length of a part's flattened second pooling output.
    pub fn f5_inputs(&self) -> usize {
        self.c3_channels * (self.part_height / 4) * (self.part_width / 4)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.part_height.is_multiple_of(4) || self.part_height == 0 {
            return Err(Error::Usage(format!(
                "part height must be a positive multiple of 4, got {}",
                self.part_height
            )));
        }
        if !self.part_width.is_multiple_of(4) || self.part_width == 0 {
            return Err(Error::Usage(format!(
                "part width must be a positive multiple of 4, got {}",
                self.part_width
            )));
        }
        if self.c1_kernel.is_multiple_of(2) || self.c3_kernel.is_multiple_of(2) {
            return Err(Error::Usage("convolution kernels must be odd".into()));
        }
        if self.c1_channels == 0 || self.c3_channels == 0 || self.feature_dim == 0 {
            return Err(Error::Usage("channel counts and feature dimension must be positive".into()));
        }
        Ok(())
    }

    /// Shapes of one branch's tensors in declaration order.
    pub fn tensor_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = vec![self.c1_spec().filter_shape().to_vec(), vec![self.c1_channels]];
        for _ in 0..NUM_PARTS {
            shapes.push(self.c3_spec().filter_shape().to_vec());
            shapes.push(vec![self.c3_channels]);
        }
        for _ in 0..NUM_PARTS {
            shapes.push(vec![self.feature_dim, self.f5_inputs()]);
            shapes.push(vec![self.feature_dim]);
        }
        shapes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SharingMode {
    General,
    #[value(alias = "specific")]
    ViewSpecific,
}

impl SharingMode {
    pub fn branch_count(self) -> usize {
        match self {
            SharingMode::General => 1,
            SharingMode::ViewSpecific => 2,
        }
    }
}

/// Which siamese sub-network processes an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    A,
    B,
}

/// Learnable tensors of one sub-network.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchParams {
    pub c1_filters: Tensor,
    pub c1_bias: Tensor,
    pub c3_filters: [Tensor; NUM_PARTS],
    pub c3_bias: [Tensor; NUM_PARTS],
    pub f5_weights: [Tensor; NUM_PARTS],
    pub f5_bias: [Tensor; NUM_PARTS],
}

impl BranchParams {
    pub fn zeros(config: &NetworkConfig) -> Self {
        let mut shapes = config.tensor_shapes().into_iter().map(|s| Tensor::zeros(&s));
        let mut next = || shapes.next().expect("shape table covers every tensor");
        let c1_filters = next();
        let c1_bias = next();
        let mut c3 = Vec::new();
        for _ in 0..NUM_PARTS {
            c3.push((next(), next()));
        }
        let mut f5 = Vec::new();
        for _ in 0..NUM_PARTS {
            f5.push((next(), next()));
        }
        let (c3_filters, c3_bias): (Vec<_>, Vec<_>) = c3.into_iter().unzip();
        let (f5_weights, f5_bias): (Vec<_>, Vec<_>) = f5.into_iter().unzip();
        Self {
            c1_filters,
            c1_bias,
            c3_filters: c3_filters.try_into().expect("three parts"),
            c3_bias: c3_bias.try_into().expect("three parts"),
            f5_weights: f5_weights.try_into().expect("three parts"),
            f5_bias: f5_bias.try_into().expect("three parts"),
        }
    }

    /// All tensors in declaration order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.c1_filters, &self.c1_bias];
        for p in 0..NUM_PARTS {
            out.push(&self.c3_filters[p]);
            out.push(&self.c3_bias[p]);
        }
        for p in 0..NUM_PARTS {
            out.push(&self.f5_weights[p]);
            out.push(&self.f5_bias[p]);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.c1_filters, &mut self.c1_bias];
        let mut c3: Vec<_> = self.c3_filters.iter_mut().zip(self.c3_bias.iter_mut()).collect();
        let mut f5: Vec<_> = self.f5_weights.iter_mut().zip(self.f5_bias.iter_mut()).collect();
        for (f, b) in c3.drain(..) {
            out.push(f);
            out.push(b);
        }
        for (w, b) in f5.drain(..) {
            out.push(w);
            out.push(b);
        }
        out
    }
}

/// Parameters of the siamese network: one branch set in general mode, two in
/// view-specific mode.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    config: NetworkConfig,
    mode: SharingMode,
    branches: Vec<BranchParams>,
    version: u64,
}

/// Gradients with the same layout as [`NetworkParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub branches: Vec<BranchParams>,
}

impl ParamGrads {
    pub fn zeros(config: &NetworkConfig, mode: SharingMode) -> Self {
        Self {
            branches: (0..mode.branch_count()).map(|_| BranchParams::zeros(config)).collect(),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.branches.iter().flat_map(|b| b.tensors()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.branches.iter_mut().flat_map(|b| b.tensors_mut()).collect()
    }

    pub fn accumulate(&mut self, other: &ParamGrads) -> Result<()> {
        if self.branches.len() != other.branches.len() {
            return Err(Error::dim("ParamGrads::accumulate", "branches", self.branches.len(), other.branches.len()));
        }
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors().iter().map(|t| t.sq_norm()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

/// Three overlapping image bands, each `[3, part_height, part_width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PartStack {
    pub parts: [Tensor; NUM_PARTS],
}

impl PartStack {
    pub fn new(parts: [Tensor; NUM_PARTS]) -> Result<Self> {
        let shape = parts[0].shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::dim("PartStack", "channels", 3, shape.first().copied().unwrap_or(0)));
        }
        for p in &parts[1..] {
            p.expect_shape("PartStack", &shape)?;
        }
        Ok(Self { parts })
    }
}

struct PartCache {
    input: Tensor,
    c1_pre: Tensor,
    pool1: Tensor,
    pool1_idx: PoolIndices,
    c3_in: Tensor,
    c3_pre: Tensor,
    pool2: Tensor,
    pool2_idx: PoolIndices,
    f5_in: Tensor,
}

/// Activations saved by [`NetworkParams::forward`] for the matching backward call.
pub struct FeatureCache {
    branch_index: usize,
    version: u64,
    batch: usize,
    parts: Vec<PartCache>,
}

impl FeatureCache {
    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// ReLU signs and max-pool winners of every unit. Two forward passes
    /// share a signature exactly when they follow the same piecewise-linear
    /// routing.
    pub fn activation_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for p in &self.parts {
            out.extend(p.c1_pre.data().iter().map(|&v| usize::from(v > 0.0)));
            out.extend(p.c3_pre.data().iter().map(|&v| usize::from(v > 0.0)));
            out.extend_from_slice(&p.pool1_idx.argmax);
            out.extend_from_slice(&p.pool2_idx.argmax);
        }
        out
    }
}

fn uniform_fill(rng: &mut ChaCha8Rng, tensor: &mut Tensor, bound: f64) {
    for v in tensor.data_mut() {
        *v = rng.random_range(-bound..=bound);
    }
}

impl NetworkParams {
    /// Glorot-style uniform initialization with zero biases, deterministic in `seed`.
    pub fn init(config: NetworkConfig, mode: SharingMode, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut branches = Vec::new();
        for _ in 0..mode.branch_count() {
            let mut b = BranchParams::zeros(&config);
            uniform_fill(&mut rng, &mut b.c1_filters, conv_bound(&config.c1_spec()));
            for p in 0..NUM_PARTS {
                uniform_fill(&mut rng, &mut b.c3_filters[p], conv_bound(&config.c3_spec()));
            }
            let f5_bound = (6.0 / (config.f5_inputs() + config.feature_dim) as f64).sqrt();
            for p in 0..NUM_PARTS {
                uniform_fill(&mut rng, &mut b.f5_weights[p], f5_bound);
            }
            branches.push(b);
        }
        Ok(Self {
            config,
            mode,
            branches,
            version: 0,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn mode(&self) -> SharingMode {
        self.mode
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn branches(&self) -> &[BranchParams] {
        &self.branches
    }

    /// Mutable access to the parameters; invalidates outstanding caches.
    pub fn branches_mut(&mut self) -> &mut [BranchParams] {
        self.version += 1;
        &mut self.branches
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.branches.iter().flat_map(|b| b.tensors()).collect()
    }

    /// Mutable tensors in declaration order; invalidates outstanding caches.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.version += 1;
        self.branches.iter_mut().flat_map(|b| b.tensors_mut()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors().iter().map(|t| t.sq_norm()).sum()
    }

    pub fn zero_grads(&self) -> ParamGrads {
        ParamGrads::zeros(&self.config, self.mode)
    }

    pub fn branch_index(&self, branch: Branch) -> usize {
        match (self.mode, branch) {
            (SharingMode::General, _) | (SharingMode::ViewSpecific, Branch::A) => 0,
            (SharingMode::ViewSpecific, Branch::B) => 1,
        }
    }

    /// Runs a batch of part stacks through one branch; returns `[N, feature_dim]`.
    pub fn forward(&self, stacks: &[&PartStack], branch: Branch) -> Result<(Tensor, FeatureCache)> {
        if stacks.is_empty() {
            return Err(Error::Usage("forward needs at least one image".into()));
        }
        let cfg = &self.config;
        let want = [3, cfg.part_height, cfg.part_width];
        for s in stacks {
            for p in &s.parts {
                p.expect_shape("forward parts", &want)?;
            }
        }
        let bi = self.branch_index(branch);
        let params = &self.branches[bi];
        let n = stacks.len();
        let mut features = Tensor::zeros(&[n, cfg.feature_dim]);
        let mut caches = Vec::with_capacity(NUM_PARTS);
        for p in 0..NUM_PARTS {
            let parts: Vec<&Tensor> = stacks.iter().map(|s| &s.parts[p]).collect();
            let input = Tensor::stack(&parts)?;
            let c1_pre = layers::conv2d(&input, &params.c1_filters, &params.c1_bias, &cfg.c1_spec())?;
            let (pool1, pool1_idx) = layers::maxpool2(&layers::relu(&c1_pre))?;
            let c3_in = cfg.norm.forward(&pool1)?;
            let c3_pre = layers::conv2d(&c3_in, &params.c3_filters[p], &params.c3_bias[p], &cfg.c3_spec())?;
            let (pool2, pool2_idx) = layers::maxpool2(&layers::relu(&c3_pre))?;
            let f5_in = cfg.norm.forward(&pool2)?.reshape(&[n, cfg.f5_inputs()])?;
            let out = layers::fully_connected(&f5_in, &params.f5_weights[p], &params.f5_bias[p])?;
            features.add_assign(&out)?;
            caches.push(PartCache {
                input,
                c1_pre,
                pool1,
                pool1_idx,
                c3_in,
                c3_pre,
                pool2,
                pool2_idx,
                f5_in,
            });
        }
        Ok((
            features,
            FeatureCache {
                branch_index: bi,
                version: self.version,
                batch: n,
                parts: caches,
            },
        ))
    }

    /// Feature vector of a single image.
    pub fn features(&self, stack: &PartStack, branch: Branch) -> Result<Vec<f64>> {
        Ok(self.forward(&[stack], branch)?.0.into_data())
    }

    /// Backpropagates `grad` (`[N, feature_dim]`) into parameter gradients.
    /// Only the branch that produced `cache` receives nonzero entries.
    pub fn backward(&self, cache: &FeatureCache, grad: &Tensor) -> Result<ParamGrads> {
        if cache.version != self.version {
            return Err(Error::Usage(
                "stale feature cache: parameters changed since the forward pass".into(),
            ));
        }
        if cache.parts.len() != NUM_PARTS || cache.branch_index >= self.branches.len() {
            return Err(Error::Usage("feature cache does not belong to this network".into()));
        }
        let cfg = &self.config;
        let n = cache.batch;
        grad.expect_shape("backward", &[n, cfg.feature_dim])?;
        let params = &self.branches[cache.branch_index];
        let mut grads = self.zero_grads();
        let out = &mut grads.branches[cache.branch_index];
        let (h2, w2) = (cfg.part_height / 4, cfg.part_width / 4);
        for (p, c) in cache.parts.iter().enumerate() {
            // sum fusion: each part's projection sees the full upstream gradient
            let dense = layers::fully_connected_backward(&c.f5_in, &params.f5_weights[p], grad)?;
            out.f5_weights[p] = dense.weights;
            out.f5_bias[p] = dense.bias;
            let g = dense.input.reshape(&[n, cfg.c3_channels, h2, w2])?;
            let g = cfg.norm.backward(&c.pool2, &g)?;
            let g = layers::maxpool2_backward(&g, &c.pool2_idx)?;
            let g = layers::relu_backward(&c.c3_pre, &g)?;
            let conv3 = layers::conv2d_backward(&c.c3_in, &params.c3_filters[p], &cfg.c3_spec(), &g)?;
            out.c3_filters[p] = conv3.filters;
            out.c3_bias[p] = conv3.bias;
            let g = cfg.norm.backward(&c.pool1, &conv3.input)?;
            let g = layers::maxpool2_backward(&g, &c.pool1_idx)?;
            let g = layers::relu_backward(&c.c1_pre, &g)?;
            let conv1 = layers::conv2d_backward_params(&c.input, &params.c1_filters, &cfg.c1_spec(), &g)?;
            out.c1_filters.add_assign(&conv1.filters)?;
            out.c1_bias.add_assign(&conv1.bias)?;
        }
        Ok(grads)
    }

    fn header(&self) -> Vec<u8> {
        let mut h = Vec::new();
        h.extend_from_slice(MAGIC);
        h.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        h.push(match self.mode {
            SharingMode::General => 0,
            SharingMode::ViewSpecific => 1,
        });
        for v in [self.config.part_height, self.config.part_width] {
            h.extend_from_slice(&(v as u32).to_le_bytes());
        }
        let norm = &self.config.norm;
        for v in [norm.k0, norm.alpha, norm.beta] {
            h.extend_from_slice(&v.to_le_bytes());
        }
        h.extend_from_slice(&(norm.radius as u32).to_le_bytes());
        let tensors = self.tensors();
        h.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for t in tensors {
            h.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                h.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        h
    }

    /// Encodes the parameters in the `SNET` model format.
    pub fn serialize(&self) -> Vec<u8> {
        let mut bytes = self.header();
        bytes.reserve(8 * self.parameter_count());
        for t in self.tensors() {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, expected SNET".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        let mode = match r.take(1)?[0] {
            0 => SharingMode::General,
            1 => SharingMode::ViewSpecific,
            other => return Err(Error::Format(format!("unknown sharing mode byte {other}"))),
        };
        let part_height = r.u32()? as usize;
        let part_width = r.u32()? as usize;
        let norm = CrossChannelNorm {
            k0: r.f64()?,
            alpha: r.f64()?,
            beta: r.f64()?,
            radius: r.u32()? as usize,
        };
        let count = r.u32()? as usize;
        let per_branch = 2 + 4 * NUM_PARTS;
        if count != per_branch * mode.branch_count() {
            return Err(Error::Format(format!(
                "shape table lists {count} tensors, expected {}",
                per_branch * mode.branch_count()
            )));
        }
        let mut shapes = Vec::with_capacity(count);
        for _ in 0..count {
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::Format(format!("implausible tensor rank {rank}")));
            }
            shapes.push((0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?);
        }
        let shape_err = |what: &str| Error::Format(format!("shape table mismatch: {what}"));
        let c1 = &shapes[0];
        let c3 = &shapes[2];
        let f5 = &shapes[2 + 2 * NUM_PARTS];
        if c1.len() != 4 || c3.len() != 4 || f5.len() != 2 {
            return Err(shape_err("layer ranks"));
        }
        let config = NetworkConfig {
            part_height,
            part_width,
            c1_channels: c1[0],
            c3_channels: c3[0],
            c1_kernel: c1[2],
            c3_kernel: c3[2],
            feature_dim: f5[0],
            norm,
        };
        config.validate().map_err(|e| Error::Format(e.to_string()))?;
        let expected = config.tensor_shapes();
        for (i, s) in shapes.iter().enumerate() {
            if *s != expected[i % per_branch] {
                return Err(shape_err(&format!("tensor {i} has shape {s:?}, expected {:?}", expected[i % per_branch])));
            }
        }
        let mut params = Self {
            config,
            mode,
            branches: (0..mode.branch_count()).map(|_| BranchParams::zeros(&config)).collect(),
            version: 0,
        };
        let total = params.parameter_count();
        if r.remaining() != 8 * total {
            return Err(Error::Format(format!(
                "payload holds {} bytes, expected {} for {total} parameters",
                r.remaining(),
                8 * total
            )));
        }
        for t in params.tensors_mut() {
            for v in t.data_mut() {
                *v = r.f64()?;
            }
        }
        params.version = 0;
        Ok(params)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.serialize()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::deserialize(&bytes)
    }
}

fn conv_bound(spec: &ConvSpec) -> f64 {
    let area = spec.kernel_h * spec.kernel_w;
    (6.0 / ((spec.in_channels + spec.out_channels) * area) as f64).sqrt()
}

pub const MAGIC: &[u8; 4] = b"SNET";
pub const FORMAT_VERSION: u32 = 1;

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!("truncated model file at byte {}", self.pos)));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}
