//! Point-transformation generator and point-level discriminator.
//!
//! Both networks share the "large PointNet" trunk:
//!
//! 1. five shared per-point stages (affine map, batch norm, ReLU);
//! 2. a max-pooled global feature over all points of the batch;
//! 3. a transform network of four fully connected stages that turns the
//!    global feature into an `m × m` alignment matrix (identity at init);
//! 4. a per-point concatenation `[A·x, local, global]` of the aligned
//!    coordinates, the first-stage local feature and the global feature.
//!
//! The generator projects each concatenated row to `m` coordinates through
//! four fully connected stages and a final `tanh`. The discriminator uses two
//! fully connected stages and a sigmoid, emitting one score per point.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{Frame, PointSet};
use crate::nn::{
    join, max_pool, sigmoid, BlockCache, DenseBlock, Mode, Scalar, TensorKind, TensorRef, Tensors,
};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: network expects m = {expected}, input has m = {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty input batch")]
    EmptyBatch,
    #[error("network parameters contain non-finite values")]
    NonFiniteParameters,
    #[error("invalid architecture: {0}")]
    InvalidConfig(String),
}

/// Prior the generator's input coordinates are drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NoisePrior {
    /// Uniform over `[-1, 1]^m`.
    #[default]
    Uniform,
    /// Standard normal draws (unclipped).
    Gaussian,
}

/// Layer widths of both networks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    /// Point dimension `m`.
    pub dim: usize,
    /// Widths of the five shared per-point encoder stages.
    pub encoder: Vec<usize>,
    /// Width of the max-pooled global feature (equals the last encoder width).
    pub global_feature: usize,
    /// Widths of the four transform-network stages; the last is `m·m`.
    pub stn: Vec<usize>,
    /// Widths of the four generator head stages; the last is `m`.
    pub generator_head: Vec<usize>,
    /// Widths of the two discriminator head stages; the last is `1`.
    pub discriminator_head: Vec<usize>,
    #[serde(default)]
    pub noise: NoisePrior,
}

impl ArchitectureConfig {
    /// Full-size widths.
    pub fn full_scale(dim: usize) -> Self {
        Self {
            dim,
            encoder: vec![64, 128, 256, 512, 1024],
            global_feature: 1024,
            stn: vec![512, 256, 128, dim * dim],
            generator_head: vec![512, 256, 128, dim],
            discriminator_head: vec![256, 1],
            noise: NoisePrior::Uniform,
        }
    }

    /// Reduced widths for CPU-sized runs; same depth as [`Self::full_scale`].
    pub fn desk(dim: usize) -> Self {
        Self {
            dim,
            encoder: vec![32, 64, 64, 128, 128],
            global_feature: 128,
            stn: vec![64, 32, 16, dim * dim],
            generator_head: vec![128, 64, 32, dim],
            discriminator_head: vec![64, 1],
            noise: NoisePrior::Uniform,
        }
    }

    /// Widths of at most eight, for replay and gradient checks.
    pub fn tiny(dim: usize) -> Self {
        Self {
            dim,
            encoder: vec![4, 5, 6, 7, 8],
            global_feature: 8,
            stn: vec![8, 6, 5, dim * dim],
            generator_head: vec![8, 6, 5, dim],
            discriminator_head: vec![6, 1],
            noise: NoisePrior::Uniform,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if !(2..=3).contains(&self.dim) {
            return bad(format!("m must be 2 or 3, got {}", self.dim));
        }
        let all = [&self.encoder, &self.stn, &self.generator_head, &self.discriminator_head];
        if all.iter().any(|v| v.contains(&0)) {
            return bad("all widths must be positive".into());
        }
        if self.encoder.len() != 5 {
            return bad("encoder needs 5 stages".into());
        }
        if self.stn.len() != 4 || self.stn[3] != self.dim * self.dim {
            return bad("transform network needs 4 stages ending in m·m".into());
        }
        if self.generator_head.len() != 4 || self.generator_head[3] != self.dim {
            return bad("generator head needs 4 stages ending in m".into());
        }
        if self.discriminator_head.len() != 2 || self.discriminator_head[1] != 1 {
            return bad("discriminator head needs 2 stages ending in 1".into());
        }
        if self.global_feature != self.encoder[4] {
            return bad("global feature width must equal the last encoder width".into());
        }
        Ok(())
    }

    /// Width of the per-point concatenated feature.
    pub fn concat_width(&self) -> usize {
        self.dim + self.encoder[0] + self.global_feature
    }
}

/// Shared trunk of both networks.
#[derive(Clone, Debug, PartialEq)]
pub struct Trunk<T> {
    pub encoder: Vec<DenseBlock<T>>,
    pub stn: Vec<DenseBlock<T>>,
    dim: usize,
}

#[derive(Clone, Debug)]
pub struct TrunkCache<T> {
    input: Array2<T>,
    encoder: Vec<BlockCache<T>>,
    argmax: Vec<usize>,
    global: Array1<T>,
    stn: Vec<BlockCache<T>>,
    transform: Array2<T>,
}

impl<T> TrunkCache<T> {
    pub fn global_feature(&self) -> &Array1<T> {
        &self.global
    }

    pub fn transform(&self) -> &Array2<T> {
        &self.transform
    }
}

impl<T: Scalar> Trunk<T> {
    pub fn init<R: Rng + ?Sized>(cfg: &ArchitectureConfig, rng: &mut R) -> Self {
        let mut encoder = Vec::new();
        let mut width = cfg.dim;
        for &w in &cfg.encoder {
            encoder.push(DenseBlock::hidden(width, w, rng));
            width = w;
        }
        let mut stn = Vec::new();
        for &w in &cfg.stn[..3] {
            stn.push(DenseBlock::hidden_plain(width, w, rng));
            width = w;
        }
        // Zero final stage: the alignment starts as the identity.
        let mut last = DenseBlock::linear(width, cfg.dim * cfg.dim, rng);
        last.dense.weight.fill(T::zero());
        last.dense.bias.fill(T::zero());
        stn.push(last);
        Self {
            encoder,
            stn,
            dim: cfg.dim,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.iter().map(DenseBlock::zeros_like).collect(),
            stn: self.stn.iter().map(DenseBlock::zeros_like).collect(),
            dim: self.dim,
        }
    }

    pub fn forward(&self, x: &Array2<T>, mode: Mode) -> (Array2<T>, TrunkCache<T>) {
        let m = self.dim;
        let mut encoder = Vec::with_capacity(self.encoder.len());
        let mut h = x.clone();
        for block in &self.encoder {
            let c = block.forward(&h, mode);
            h = c.output().clone();
            encoder.push(c);
        }
        let (global, argmax) = max_pool(&h);

        let mut s = global.clone().insert_axis(Axis(0));
        let mut stn = Vec::with_capacity(self.stn.len());
        for block in &self.stn {
            let c = block.forward(&s, mode);
            s = c.output().clone();
            stn.push(c);
        }
        let mut transform = s
            .into_shape_with_order((m, m))
            .expect("transform stage emits m·m values");
        for d in 0..m {
            transform[[d, d]] += T::one();
        }

        // Row i of the aligned block is A · x_i.
        let aligned = x.dot(&transform.t());
        let local = encoder[0].output();
        let n = x.nrows();
        let (c1, cg) = (local.ncols(), global.len());
        let mut features = Array2::zeros((n, m + c1 + cg));
        features.slice_mut(s![.., ..m]).assign(&aligned);
        features.slice_mut(s![.., m..m + c1]).assign(local);
        features.slice_mut(s![.., m + c1..]).assign(&global.broadcast((n, cg)).expect("broadcast"));

        let cache = TrunkCache {
            input: x.clone(),
            encoder,
            argmax,
            global,
            stn,
            transform,
        };
        (features, cache)
    }

    /// Returns the input gradient; parameter gradients accumulate into `grad`.
    pub fn backward(&self, cache: &TrunkCache<T>, d_features: &Array2<T>, grad: &mut Trunk<T>) -> Array2<T> {
        let m = self.dim;
        let c1 = cache.encoder[0].output().ncols();
        let d_aligned = d_features.slice(s![.., ..m]);
        let d_local = d_features.slice(s![.., m..m + c1]);
        let mut d_global = d_features.slice(s![.., m + c1..]).sum_axis(Axis(0));

        // aligned = X Aᵀ  ⇒  dA = dYᵀ X,  dX = dY A
        let d_transform = d_aligned.t().dot(&cache.input);
        let mut dx = d_aligned.dot(&cache.transform);

        let mut ds = d_transform
            .into_shape_with_order((1, m * m))
            .expect("m·m gradient");
        for (i, block) in self.stn.iter().enumerate().rev() {
            ds = block.backward(&cache.stn[i], &ds, &mut grad.stn[i]);
        }
        d_global += &ds.row(0);

        let last = self.encoder.len() - 1;
        let mut dh = Array2::zeros(cache.encoder[last].output().dim());
        for (j, &row) in cache.argmax.iter().enumerate() {
            dh[[row, j]] = d_global[j];
        }
        for (i, block) in self.encoder.iter().enumerate().rev() {
            if i == 0 {
                dh += &d_local;
            }
            dh = block.backward(&cache.encoder[i], &dh, &mut grad.encoder[i]);
        }
        dx += &dh;
        dx
    }

    pub fn update_running(&mut self, cache: &TrunkCache<T>) {
        for (b, c) in self.encoder.iter_mut().zip(&cache.encoder) {
            b.update_running(c);
        }
        for (b, c) in self.stn.iter_mut().zip(&cache.stn) {
            b.update_running(c);
        }
    }
}

impl<T: Scalar> Tensors<T> for Trunk<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(TensorRef<'a, T>)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.stn.visit(&join(prefix, "stn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &mut [T])) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.stn.visit_mut(&join(prefix, "stn"), f);
    }
}

fn head_init<T: Scalar, R: Rng + ?Sized>(inputs: usize, widths: &[usize], rng: &mut R) -> Vec<DenseBlock<T>> {
    let mut blocks = Vec::with_capacity(widths.len());
    let mut width = inputs;
    for (i, &w) in widths.iter().enumerate() {
        if i + 1 == widths.len() {
            blocks.push(DenseBlock::linear(width, w, rng));
        } else {
            blocks.push(DenseBlock::hidden(width, w, rng));
        }
        width = w;
    }
    blocks
}

fn head_forward<T: Scalar>(head: &[DenseBlock<T>], x: Array2<T>, mode: Mode) -> (Array2<T>, Vec<BlockCache<T>>) {
    let mut caches = Vec::with_capacity(head.len());
    let mut h = x;
    for block in head {
        let c = block.forward(&h, mode);
        h = c.output().clone();
        caches.push(c);
    }
    (h, caches)
}

fn head_backward<T: Scalar>(
    head: &[DenseBlock<T>],
    caches: &[BlockCache<T>],
    dy: Array2<T>,
    grad: &mut [DenseBlock<T>],
) -> Array2<T> {
    let mut d = dy;
    for (i, block) in head.iter().enumerate().rev() {
        d = block.backward(&caches[i], &d, &mut grad[i]);
    }
    d
}

/// Maps noise coordinates to synthetic coordinates of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T> {
    pub trunk: Trunk<T>,
    pub head: Vec<DenseBlock<T>>,
}

#[derive(Clone, Debug)]
pub struct GeneratorCache<T> {
    pub trunk: TrunkCache<T>,
    head: Vec<BlockCache<T>>,
    output: Array2<T>,
}

impl<T: Scalar> Generator<T> {
    pub fn init<R: Rng + ?Sized>(cfg: &ArchitectureConfig, rng: &mut R) -> Self {
        Self {
            trunk: Trunk::init(cfg, rng),
            head: head_init(cfg.concat_width(), &cfg.generator_head, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            trunk: self.trunk.zeros_like(),
            head: self.head.iter().map(DenseBlock::zeros_like).collect(),
        }
    }

    pub fn forward(&self, z: &Array2<T>, mode: Mode) -> (Array2<T>, GeneratorCache<T>) {
        let (features, trunk) = self.trunk.forward(z, mode);
        let (pre, head) = head_forward(&self.head, features, mode);
        let output = pre.mapv(|v| v.tanh());
        (
            output.clone(),
            GeneratorCache {
                trunk,
                head,
                output,
            },
        )
    }

    /// Backpropagates `d_out` (gradient w.r.t. the generated coordinates).
    pub fn backward(&self, cache: &GeneratorCache<T>, d_out: &Array2<T>, grad: &mut Generator<T>) -> Array2<T> {
        let mut d_pre = d_out.clone();
        d_pre.zip_mut_with(&cache.output, |d, &y| *d *= T::one() - y * y);
        let d_features = head_backward(&self.head, &cache.head, d_pre, &mut grad.head);
        self.trunk.backward(&cache.trunk, &d_features, &mut grad.trunk)
    }

    pub fn update_running(&mut self, cache: &GeneratorCache<T>) {
        self.trunk.update_running(&cache.trunk);
        for (b, c) in self.head.iter_mut().zip(&cache.head) {
            b.update_running(c);
        }
    }
}

impl<T: Scalar> Tensors<T> for Generator<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(TensorRef<'a, T>)) {
        self.trunk.visit(&join(prefix, "trunk"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &mut [T])) {
        self.trunk.visit_mut(&join(prefix, "trunk"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Emits one real/fake logit per input point.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T> {
    pub trunk: Trunk<T>,
    pub head: Vec<DenseBlock<T>>,
}

#[derive(Clone, Debug)]
pub struct DiscriminatorCache<T> {
    pub trunk: TrunkCache<T>,
    head: Vec<BlockCache<T>>,
}

impl<T: Scalar> Discriminator<T> {
    pub fn init<R: Rng + ?Sized>(cfg: &ArchitectureConfig, rng: &mut R) -> Self {
        Self {
            trunk: Trunk::init(cfg, rng),
            head: head_init(cfg.concat_width(), &cfg.discriminator_head, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            trunk: self.trunk.zeros_like(),
            head: self.head.iter().map(DenseBlock::zeros_like).collect(),
        }
    }

    /// Per-point logits, shape `(n,)`.
    pub fn forward(&self, x: &Array2<T>, mode: Mode) -> (Array1<T>, DiscriminatorCache<T>) {
        let (features, trunk) = self.trunk.forward(x, mode);
        let (logits, head) = head_forward(&self.head, features, mode);
        (logits.column(0).to_owned(), DiscriminatorCache { trunk, head })
    }

    /// Backpropagates the gradient w.r.t. the logits; returns the input
    /// gradient.
    pub fn backward(&self, cache: &DiscriminatorCache<T>, d_logits: &Array1<T>, grad: &mut Discriminator<T>) -> Array2<T> {
        let dy = d_logits.clone().insert_axis(Axis(1));
        let d_features = head_backward(&self.head, &cache.head, dy, &mut grad.head);
        self.trunk.backward(&cache.trunk, &d_features, &mut grad.trunk)
    }

    pub fn update_running(&mut self, cache: &DiscriminatorCache<T>) {
        self.trunk.update_running(&cache.trunk);
        for (b, c) in self.head.iter_mut().zip(&cache.head) {
            b.update_running(c);
        }
    }
}

impl<T: Scalar> Tensors<T> for Discriminator<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(TensorRef<'a, T>)) {
        self.trunk.visit(&join(prefix, "trunk"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &mut [T])) {
        self.trunk.visit_mut(&join(prefix, "trunk"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// All parameters of both networks plus the configuration and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T> {
    pub config: ArchitectureConfig,
    pub generator: Generator<T>,
    pub discriminator: Discriminator<T>,
    pub step: u64,
}

impl<T: Scalar> ModelState<T> {
    pub fn init<R: Rng + ?Sized>(config: ArchitectureConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let generator = Generator::init(&config, rng);
        let discriminator = Discriminator::init(&config, rng);
        Ok(Self {
            config,
            generator,
            discriminator,
            step: 0,
        })
    }

    pub fn check_finite(&self) -> Result<(), ModelError> {
        if self.generator.all_finite() && self.discriminator.all_finite() {
            Ok(())
        } else {
            Err(ModelError::NonFiniteParameters)
        }
    }
}

impl<T: Scalar> Tensors<T> for ModelState<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(TensorRef<'a, T>)) {
        self.generator.visit(&join(prefix, "generator"), f);
        self.discriminator.visit(&join(prefix, "discriminator"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &mut [T])) {
        self.generator.visit_mut(&join(prefix, "generator"), f);
        self.discriminator.visit_mut(&join(prefix, "discriminator"), f);
    }
}

/// Draws `b × m` noise coordinates as a matrix.
pub fn noise_matrix<T: Scalar, R: Rng + ?Sized>(b: usize, m: usize, prior: NoisePrior, rng: &mut R) -> Array2<T> {
    Array2::from_shape_simple_fn((b, m), || {
        T::of(match prior {
            NoisePrior::Uniform => rng.gen_range(-1.0..=1.0),
            NoisePrior::Gaussian => StandardNormal.sample(rng),
        })
    })
}

/// Draws `b` pseudo-coordinates from the noise prior.
pub fn sample_noise<R: Rng + ?Sized>(b: usize, m: usize, prior: NoisePrior, rng: &mut R) -> Result<PointSet, ModelError> {
    if b == 0 {
        return Err(ModelError::EmptyBatch);
    }
    let z: Array2<f64> = noise_matrix(b, m, prior, rng);
    Ok(to_pointset(&z))
}

pub fn to_matrix<T: Scalar>(ps: &PointSet) -> Array2<T> {
    Array2::from_shape_vec((ps.len(), ps.dim()), ps.coords().iter().map(|&v| T::of(v)).collect())
        .expect("row-major coordinates")
}

pub fn to_pointset<T: Scalar>(x: &Array2<T>) -> PointSet {
    let coords = x.iter().map(|v| v.f64()).collect();
    PointSet::new(x.ncols(), coords, Frame::Normalized).expect("dimension 2 or 3")
}

fn check_input<T: Scalar>(state: &ModelState<T>, ps: &PointSet) -> Result<(), ModelError> {
    if ps.dim() != state.config.dim {
        return Err(ModelError::DimensionMismatch {
            expected: state.config.dim,
            got: ps.dim(),
        });
    }
    if ps.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    Ok(())
}

/// Evaluation-mode generator pass.
pub fn generator_forward<T: Scalar>(state: &ModelState<T>, z: &PointSet) -> Result<PointSet, ModelError> {
    check_input(state, z)?;
    if !state.generator.all_finite() {
        return Err(ModelError::NonFiniteParameters);
    }
    let (out, _) = state.generator.forward(&to_matrix(z), Mode::Eval);
    Ok(to_pointset(&out))
}

/// Evaluation-mode discriminator pass: one score in `(0, 1)` per point.
pub fn discriminator_forward<T: Scalar>(state: &ModelState<T>, x: &PointSet) -> Result<Vec<f64>, ModelError> {
    check_input(state, x)?;
    if !state.discriminator.all_finite() {
        return Err(ModelError::NonFiniteParameters);
    }
    let (logits, _) = state.discriminator.forward(&to_matrix(x), Mode::Eval);
    let lo = T::epsilon();
    let hi = T::one() - T::epsilon();
    Ok(logits.iter().map(|&z| sigmoid(z).max(lo).min(hi).f64()).collect())
}

/// Draws `n` synthetic points in evaluation mode. Noise is pushed through the
/// generator in chunks of `chunk` points (the training batch size), since the
/// pooled global feature depends on the set it is computed over; the last
/// chunk is drawn whole and truncated.
pub fn generate<T: Scalar, R: Rng + ?Sized>(
    state: &ModelState<T>,
    n: usize,
    chunk: usize,
    rng: &mut R,
) -> Result<PointSet, ModelError> {
    if n == 0 || chunk == 0 {
        return Err(ModelError::EmptyBatch);
    }
    if !state.generator.all_finite() {
        return Err(ModelError::NonFiniteParameters);
    }
    let m = state.config.dim;
    let mut coords = Vec::with_capacity(n * m);
    while coords.len() < n * m {
        let z: Array2<T> = noise_matrix(chunk, m, state.config.noise, rng);
        let (out, _) = state.generator.forward(&z, Mode::Eval);
        let take = (n * m - coords.len()).min(out.len());
        coords.extend(out.iter().take(take).map(|v| v.f64()));
    }
    Ok(PointSet::new(m, coords, Frame::Normalized).expect("generator dimension"))
}
