//! The adversarial training loop over a privatized dataset.
//!
//! Real points carry the labels flipped once on the device side. Every step
//! draws a batch of distinct real points, fresh noise and fresh fake-label
//! flips, updates the discriminator on the combined batch and then updates
//! the generator.

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{sample_positions, IngestError};
use crate::metrics::chamfer_distance;
use crate::model::{
    generate, noise_matrix, ArchitectureConfig, Discriminator, DiscriminatorCache, Generator,
    GeneratorCache, ModelError, ModelState,
};
use crate::nn::{bce_with_logit, sigmoid, Mode, Scalar, TensorKind, Tensors};
use crate::optim::{AdamW, AdamWConfig, LrSchedule};
use crate::privacy::{flip_probability, randomize, PrivacyError, PrivatizedDataset, FAKE};
use crate::rng::{Seeds, Stream};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("dataset has {available} points but a batch needs {required}")]
    DatasetTooSmall { required: usize, available: usize },
    #[error("non-finite {what} at step {step}")]
    NonFinite { step: u64, what: &'static str },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error("epoch callback failed: {0}")]
    Callback(String),
}

impl From<IngestError> for TrainError {
    fn from(e: IngestError) -> Self {
        match e {
            IngestError::BatchTooLarge {
                requested,
                available,
            } => TrainError::DatasetTooSmall {
                required: requested,
                available,
            },
            other => TrainError::InvalidConfig(other.to_string()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps_per_epoch: u64,
    pub epochs: u64,
    pub schedule: LrSchedule,
    pub optimizer: AdamWConfig,
    /// Generated points compared against a real subsample after each epoch;
    /// 0 skips the snapshot metric.
    pub snapshot_size: usize,
}

impl TrainConfig {
    /// Full-scale settings: 7,500-point batches, 100 epochs of 1,000 steps.
    pub fn full_scale() -> Self {
        Self {
            batch_size: 7_500,
            steps_per_epoch: 1_000,
            epochs: 100,
            schedule: LrSchedule::full_scale(),
            optimizer: AdamWConfig::default(),
            snapshot_size: 0,
        }
    }

    /// CPU-sized settings: 256-point batches, 2,000 steps.
    pub fn desk() -> Self {
        Self {
            batch_size: 256,
            steps_per_epoch: 200,
            epochs: 10,
            schedule: LrSchedule {
                initial: 1e-3,
                decay_steps: vec![1_000, 1_600],
                factor: 0.1,
            },
            optimizer: AdamWConfig::default(),
            snapshot_size: 256,
        }
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch * self.epochs
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch size must be at least 1".into()));
        }
        self.schedule.validate().map_err(TrainError::InvalidConfig)?;
        let o = &self.optimizer;
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !(unit(o.beta1) && unit(o.beta2) && o.eps > 0.0 && o.weight_decay >= 0.0) {
            return Err(TrainError::InvalidConfig(format!("bad optimizer settings {o:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub d_loss: f64,
    pub g_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSnapshot {
    pub epoch: u64,
    pub step: u64,
    pub mean_d_loss: f64,
    pub mean_g_loss: f64,
    /// Chamfer distance between `snapshot_size` generated points and an
    /// equal-size real subsample.
    pub snapshot_cd: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochSnapshot>,
    /// Digest of the flipped-label table before and after training.
    pub label_digest_before: String,
    pub label_digest_after: String,
}

/// Generator targets for fake points: the flipped fake label `l̂'` enters as
/// target `1 − l̂'`, so with no flip (`l̂' = 0`) the generator pushes `D`
/// towards "real".
pub fn generator_targets<T: Scalar>(fake_labels: &[u8]) -> Array1<T> {
    fake_labels.iter().map(|&l| T::of(1.0 - l as f64)).collect()
}

pub fn label_targets<T: Scalar>(labels: &[u8]) -> Array1<T> {
    labels.iter().map(|&l| T::of(l as f64)).collect()
}

/// Mean per-point BCE of logits against targets and its gradient w.r.t. the
/// logits.
pub fn bce_mean<T: Scalar>(logits: &Array1<T>, targets: &Array1<T>) -> (f64, Array1<T>) {
    let n = T::of(logits.len() as f64);
    let loss = logits
        .iter()
        .zip(targets)
        .map(|(&z, &t)| bce_with_logit(z, t).f64())
        .sum::<f64>()
        / logits.len() as f64;
    let grad = logits
        .iter()
        .zip(targets)
        .map(|(&z, &t)| (sigmoid(z) - t) / n)
        .collect();
    (loss, grad)
}

/// Train-mode discriminator loss on `x` and the parameter gradient.
pub fn discriminator_objective<T: Scalar>(
    d: &Discriminator<T>,
    x: &Array2<T>,
    targets: &Array1<T>,
) -> (f64, Discriminator<T>, DiscriminatorCache<T>) {
    let (logits, cache) = d.forward(x, Mode::Train);
    let (loss, d_logits) = bce_mean(&logits, targets);
    let mut grad = d.zeros_like();
    d.backward(&cache, &d_logits, &mut grad);
    (loss, grad, cache)
}

/// Train-mode generator loss for noise `z` and the generator's parameter
/// gradient. The discriminator sees `real` and the generated points as one
/// batch, the same composition as in its own step, so its batch statistics
/// match; only the generated points contribute to the loss. The
/// discriminator itself is left unchanged.
pub fn generator_objective<T: Scalar>(
    g: &Generator<T>,
    d: &Discriminator<T>,
    real: &Array2<T>,
    z: &Array2<T>,
    targets: &Array1<T>,
) -> (f64, Generator<T>, GeneratorCache<T>) {
    let (fake, g_cache) = g.forward(z, Mode::Train);
    let nr = real.nrows();
    let x = concatenate![Axis(0), real.view(), fake.view()];
    let (logits, d_cache) = d.forward(&x, Mode::Train);
    let (loss, d_fake_logits) = bce_mean(&logits.slice(s![nr..]).to_owned(), targets);
    let mut d_logits = Array1::zeros(logits.len());
    d_logits.slice_mut(s![nr..]).assign(&d_fake_logits);
    let mut scratch = d.zeros_like();
    let dx = d.backward(&d_cache, &d_logits, &mut scratch);
    let d_fake = dx.slice(s![nr.., ..]).to_owned();
    let mut grad = g.zeros_like();
    g.backward(&g_cache, &d_fake, &mut grad);
    (loss, grad, g_cache)
}

fn adam_update<T: Scalar, N: Tensors<T>>(net: &mut N, grad: &N, opt: &mut AdamW<T>, lr: f64) {
    let mut params = net.flatten(TensorKind::Param);
    let grads = grad.flatten(TensorKind::Param);
    opt.step(&mut params, &grads, lr);
    net.unflatten(TensorKind::Param, &params);
}

/// Called after every epoch with the snapshot and current state.
pub type EpochHook<'h, T> = dyn FnMut(&EpochSnapshot, &ModelState<T>) -> Result<(), TrainError> + 'h;

/// Owns the model, optimizer state and randomness streams of one run.
pub struct Trainer<'a, T> {
    data: &'a PrivatizedDataset,
    real: Array2<T>,
    /// Real batch of the latest discriminator step, reused as context for
    /// the following generator step.
    last_real: Array2<T>,
    config: TrainConfig,
    q: f64,
    state: ModelState<T>,
    opt_d: AdamW<T>,
    opt_g: AdamW<T>,
    batch_rng: ChaCha20Rng,
    noise_rng: ChaCha20Rng,
    fake_flip_rng: ChaCha20Rng,
    eval_rng: ChaCha20Rng,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    /// Initializes parameters from the `ParamInit` stream of `seeds`.
    pub fn new(
        data: &'a PrivatizedDataset,
        arch: ArchitectureConfig,
        config: TrainConfig,
        seeds: Seeds,
    ) -> Result<Self, TrainError> {
        let state = ModelState::init(arch, &mut seeds.rng(Stream::ParamInit))?;
        Self::resume(data, state, config, seeds)
    }

    /// Continues from an existing state with fresh optimizer moments.
    pub fn resume(
        data: &'a PrivatizedDataset,
        state: ModelState<T>,
        config: TrainConfig,
        seeds: Seeds,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        state.config.validate()?;
        state.check_finite()?;
        if data.points().dim() != state.config.dim {
            return Err(ModelError::DimensionMismatch {
                expected: state.config.dim,
                got: data.points().dim(),
            }
            .into());
        }
        if data.len() < config.batch_size {
            return Err(TrainError::DatasetTooSmall {
                required: config.batch_size,
                available: data.len(),
            });
        }
        let q = flip_probability(data.budget())?;
        let real = crate::model::to_matrix(data.points());
        let opt_d = AdamW::new(config.optimizer, state.discriminator.count(TensorKind::Param));
        let opt_g = AdamW::new(config.optimizer, state.generator.count(TensorKind::Param));
        Ok(Self {
            data,
            last_real: Array2::zeros((0, real.ncols())),
            real,
            config,
            q,
            state,
            opt_d,
            opt_g,
            batch_rng: seeds.rng(Stream::Batch),
            noise_rng: seeds.rng(Stream::Noise),
            fake_flip_rng: seeds.rng(Stream::FakeLabelFlip),
            eval_rng: seeds.rng(Stream::Evaluation),
        })
    }

    pub fn state(&self) -> &ModelState<T> {
        &self.state
    }

    /// Mutable access for tests that pin parameters (e.g. a constant
    /// discriminator).
    pub fn state_mut(&mut self) -> &mut ModelState<T> {
        &mut self.state
    }

    pub fn into_state(self) -> ModelState<T> {
        self.state
    }

    pub fn flip_probability(&self) -> f64 {
        self.q
    }

    fn noise(&mut self) -> Array2<T> {
        let (b, m) = (self.config.batch_size, self.state.config.dim);
        noise_matrix(b, m, self.state.config.noise, &mut self.noise_rng)
    }

    fn fake_labels(&mut self) -> Vec<u8> {
        let q = self.q;
        (0..self.config.batch_size)
            .map(|_| randomize(FAKE, q, &mut self.fake_flip_rng))
            .collect()
    }

    /// One discriminator update. Returns the mean per-point loss over the
    /// combined real and fake batch.
    pub fn discriminator_step(&mut self, lr: f64) -> Result<f64, TrainError> {
        let b = self.config.batch_size;
        let pos = sample_positions(self.data.len(), b, &mut self.batch_rng)?;
        let real = self.real.select(Axis(0), &pos);
        let real_labels: Vec<u8> = pos.iter().map(|&p| self.data.label(p)).collect();
        let z = self.noise();
        let fake_labels = self.fake_labels();
        let (fake, _) = self.state.generator.forward(&z, Mode::Train);

        let x = concatenate![Axis(0), real.view(), fake.view()];
        let mut targets = label_targets::<T>(&real_labels).to_vec();
        targets.extend(label_targets::<T>(&fake_labels));
        let targets = Array1::from(targets);

        let (loss, grad, cache) = discriminator_objective(&self.state.discriminator, &x, &targets);
        if !loss.is_finite() {
            return Err(TrainError::NonFinite {
                step: self.state.step + 1,
                what: "discriminator loss",
            });
        }
        adam_update(&mut self.state.discriminator, &grad, &mut self.opt_d, lr);
        self.state.discriminator.update_running(&cache);
        self.last_real = real;
        Ok(loss)
    }

    /// One generator update with fresh noise and fresh fake-label flips.
    pub fn generator_step(&mut self, lr: f64) -> Result<f64, TrainError> {
        let z = self.noise();
        let fake_labels = self.fake_labels();
        let targets = generator_targets::<T>(&fake_labels);
        let (loss, grad, cache) =
            generator_objective(&self.state.generator, &self.state.discriminator, &self.last_real, &z, &targets);
        if !loss.is_finite() {
            return Err(TrainError::NonFinite {
                step: self.state.step + 1,
                what: "generator loss",
            });
        }
        adam_update(&mut self.state.generator, &grad, &mut self.opt_g, lr);
        self.state.generator.update_running(&cache);
        Ok(loss)
    }

    /// Runs one full training step (discriminator then generator).
    pub fn step(&mut self) -> Result<StepRecord, TrainError> {
        let step = self.state.step + 1;
        let lr = self.config.schedule.rate(step);
        let d_loss = self.discriminator_step(lr)?;
        let g_loss = self.generator_step(lr)?;
        if self.state.check_finite().is_err() {
            return Err(TrainError::NonFinite {
                step,
                what: "parameters",
            });
        }
        self.state.step = step;
        Ok(StepRecord {
            step,
            d_loss,
            g_loss,
            lr,
        })
    }

    fn snapshot_cd(&mut self) -> Result<Option<f64>, TrainError> {
        let n = self.config.snapshot_size.min(self.data.len());
        if n == 0 {
            return Ok(None);
        }
        let synth = generate(&self.state, n, self.config.batch_size, &mut self.eval_rng)?;
        let pos = sample_positions(self.data.len(), n, &mut self.eval_rng)?;
        let real = self.data.points().select(&pos);
        let cd = chamfer_distance(&real, &synth).map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        Ok(Some(cd))
    }

    /// Runs all configured steps. `on_epoch` sees the state after every
    /// epoch (checkpointing hook).
    pub fn run(
        &mut self,
        on_epoch: &mut EpochHook<'_, T>,
    ) -> Result<TrainLog, TrainError> {
        let mut log = TrainLog {
            label_digest_before: self.data.label_digest(),
            ..Default::default()
        };
        for epoch in 1..=self.config.epochs {
            let (mut d_sum, mut g_sum) = (0.0, 0.0);
            for _ in 0..self.config.steps_per_epoch {
                let rec = self.step()?;
                d_sum += rec.d_loss;
                g_sum += rec.g_loss;
                log.steps.push(rec);
            }
            let n = self.config.steps_per_epoch.max(1) as f64;
            let snap = EpochSnapshot {
                epoch,
                step: self.state.step,
                mean_d_loss: d_sum / n,
                mean_g_loss: g_sum / n,
                snapshot_cd: self.snapshot_cd()?,
            };
            log::info!(
                "epoch {epoch} step {}: d_loss {:.4} g_loss {:.4} cd {:?}",
                snap.step,
                snap.mean_d_loss,
                snap.mean_g_loss,
                snap.snapshot_cd
            );
            on_epoch(&snap, &self.state)?;
            log.epochs.push(snap);
        }
        log.label_digest_after = self.data.label_digest();
        Ok(log)
    }
}

/// Trains a fresh model on `data` and returns the final state and log.
pub fn train<T: Scalar>(
    data: &PrivatizedDataset,
    arch: ArchitectureConfig,
    config: TrainConfig,
    seeds: Seeds,
    on_epoch: &mut EpochHook<'_, T>,
) -> Result<(ModelState<T>, TrainLog), TrainError> {
    let mut trainer = Trainer::new(data, arch, config, seeds)?;
    let log = trainer.run(on_epoch)?;
    Ok((trainer.into_state(), log))
}
