mod common;

use ndarray::{concatenate, Array1, Array2, Axis};
use spatialgan::ingest::sample_positions;
use spatialgan::model::{noise_matrix, to_matrix, ArchitectureConfig, ModelState};
use spatialgan::nn::{TensorKind, Tensors};
use spatialgan::optim::{AdamWConfig, LrSchedule};
use spatialgan::privacy::{flip_probability, randomize, PrivacyBudget, FAKE};
use spatialgan::rng::{Seeds, Stream};
use spatialgan::training::*;

use common::eps;

fn config(batch: usize, steps: u64, lr: f64) -> TrainConfig {
    TrainConfig {
        batch_size: batch,
        steps_per_epoch: steps,
        epochs: 1,
        schedule: LrSchedule {
            initial: lr,
            decay_steps: vec![2],
            factor: 0.5,
        },
        optimizer: AdamWConfig::default(),
        snapshot_size: 0,
    }
}

/// Plain AdamW written out independently of the library optimizer.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, p: &mut [f64], g: &[f64], lr: f64) {
        let (b1, b2, e, wd) = (0.9f64, 0.999f64, 1e-8, 1e-4);
        self.t += 1;
        for i in 0..p.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = self.m[i] / (1.0 - b1.powi(self.t));
            let vh = self.v[i] / (1.0 - b2.powi(self.t));
            p[i] = p[i] * (1.0 - lr * wd) - lr * mh / (vh.sqrt() + e);
        }
    }
}

fn labels_to(l: &[u8], flip: bool) -> Array1<f64> {
    l.iter().map(|&x| if flip { 1.0 - x as f64 } else { x as f64 }).collect()
}

#[test]
fn replay_matches_trainer() {
    let data = common::privatized(&common::two_gaussians(60, 1), eps(1.0), 2);
    let seeds = Seeds::from_master(17);
    let (b, steps) = (8, 5);
    let cfg = config(b, steps, 1e-3);
    let arch = ArchitectureConfig::tiny(2);
    let (trained, log) = train::<f64>(&data, arch.clone(), cfg.clone(), seeds, &mut |_, _| Ok(())).unwrap();

    let mut state = ModelState::<f64>::init(arch, &mut seeds.rng(Stream::ParamInit)).unwrap();
    let q = flip_probability(data.budget()).unwrap();
    let real_all: Array2<f64> = to_matrix(data.points());
    let mut batch_rng = seeds.rng(Stream::Batch);
    let mut noise_rng = seeds.rng(Stream::Noise);
    let mut flip_rng = seeds.rng(Stream::FakeLabelFlip);
    let mut adam_d = Adam::new(state.discriminator.count(TensorKind::Param));
    let mut adam_g = Adam::new(state.generator.count(TensorKind::Param));
    for step in 1..=steps {
        let lr = if step > 2 { 5e-4 } else { 1e-3 };

        let pos = sample_positions(data.len(), b, &mut batch_rng).unwrap();
        let real = real_all.select(Axis(0), &pos);
        let real_labels: Vec<u8> = pos.iter().map(|&p| data.labels()[p]).collect();
        let z: Array2<f64> = noise_matrix(b, 2, state.config.noise, &mut noise_rng);
        let fake_labels: Vec<u8> = (0..b).map(|_| randomize(FAKE, q, &mut flip_rng)).collect();
        let (fake, _) = state.generator.forward(&z, spatialgan::nn::Mode::Train);
        let x = concatenate![Axis(0), real.view(), fake.view()];
        let mut t = labels_to(&real_labels, false).to_vec();
        t.extend(labels_to(&fake_labels, false));
        let (d_loss, grad, cache) = discriminator_objective(&state.discriminator, &x, &Array1::from(t));
        let mut p = state.discriminator.flatten(TensorKind::Param);
        adam_d.step(&mut p, &grad.flatten(TensorKind::Param), lr);
        state.discriminator.unflatten(TensorKind::Param, &p);
        state.discriminator.update_running(&cache);

        let z: Array2<f64> = noise_matrix(b, 2, state.config.noise, &mut noise_rng);
        let fake_labels: Vec<u8> = (0..b).map(|_| randomize(FAKE, q, &mut flip_rng)).collect();
        let (g_loss, grad, cache) =
            generator_objective(&state.generator, &state.discriminator, &real, &z, &labels_to(&fake_labels, true));
        let mut p = state.generator.flatten(TensorKind::Param);
        adam_g.step(&mut p, &grad.flatten(TensorKind::Param), lr);
        state.generator.unflatten(TensorKind::Param, &p);
        state.generator.update_running(&cache);

        let rec = &log.steps[step as usize - 1];
        assert!((rec.d_loss - d_loss).abs() < 1e-5 && (rec.g_loss - g_loss).abs() < 1e-5);
        assert_eq!(rec.lr, lr);
    }
    for kind in [TensorKind::Param, TensorKind::Buffer] {
        let want = state.flatten(kind);
        let got = trained.flatten(kind);
        let worst = want.iter().zip(&got).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-5, "{kind:?} differ by {worst}");
    }
}

#[test]
fn same_seed_same_run_bitwise() {
    let data = common::privatized(&common::two_gaussians(80, 3), eps(0.5), 4);
    let run = |seed: u64| {
        train::<f64>(&data, ArchitectureConfig::tiny(2), config(16, 4, 1e-3), Seeds::from_master(seed), &mut |_, _| Ok(()))
            .unwrap()
    };
    let (a, la) = run(9);
    let (b, lb) = run(9);
    let bits = |s: &ModelState<f64>| s.flatten(TensorKind::Param).iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(la, lb);
    let (c, _) = run(10);
    assert_ne!(bits(&a), bits(&c));
}

#[test]
fn flipped_labels_persist_across_training() {
    let data = common::privatized(&common::two_gaussians(600, 5), eps(1.0), 6);
    let before = data.labels().to_vec();
    // 100 steps of 256 out of 600 points: every index is drawn many times
    let (_, log) = train::<f32>(&data, ArchitectureConfig::desk(2), config(256, 100, 1e-3), Seeds::from_master(1), &mut |_, _| {
        Ok(())
    })
    .unwrap();
    assert_eq!(log.steps.len(), 100);
    assert_eq!(log.label_digest_before, log.label_digest_after);
    assert_eq!(data.labels(), &before[..]);
}

fn constant_discriminator(t: &mut Trainer<'_, f64>, bias: f64) {
    let last = t.state_mut().discriminator.head.last_mut().unwrap();
    last.dense.weight.fill(0.0);
    last.dense.bias.fill(bias);
}

#[test]
fn losses_are_ln2_against_a_coin_flip_discriminator() {
    let data = common::privatized(&common::two_gaussians(100, 7), PrivacyBudget::Infinite, 8);
    let mut t = Trainer::<f64>::new(&data, ArchitectureConfig::tiny(2), config(20, 1, 1e-3), Seeds::from_master(3)).unwrap();
    assert_eq!(t.flip_probability(), 0.0);
    constant_discriminator(&mut t, 0.0);
    let d_loss = t.discriminator_step(0.0).unwrap();
    let g_loss = t.generator_step(0.0).unwrap();
    let ln2 = std::f64::consts::LN_2;
    assert!((d_loss - ln2).abs() < 1e-9, "{d_loss}");
    assert!((g_loss - ln2).abs() < 1e-9, "{g_loss}");
}

#[test]
fn generator_loss_vanishes_against_a_fooled_discriminator() {
    let data = common::privatized(&common::two_gaussians(100, 9), PrivacyBudget::Infinite, 10);
    let mut t = Trainer::<f64>::new(&data, ArchitectureConfig::tiny(2), config(20, 1, 1e-3), Seeds::from_master(4)).unwrap();
    constant_discriminator(&mut t, 40.0);
    let g_loss = t.generator_step(0.0).unwrap();
    assert!(g_loss < 1e-15, "{g_loss}");
    assert!(g_loss >= 0.0);
    // and the discriminator pays for calling every fake real
    let d_loss = t.discriminator_step(0.0).unwrap();
    assert!((d_loss - 20.0).abs() < 1e-9, "{d_loss}");
}

#[test]
fn epoch_hook_sees_every_epoch_and_can_abort() {
    let data = common::privatized(&common::two_gaussians(100, 11), eps(2.0), 12);
    let mut cfg = config(16, 3, 1e-3);
    cfg.epochs = 3;
    cfg.snapshot_size = 32;
    let mut seen = vec![];
    let (_, log) = train::<f32>(&data, ArchitectureConfig::tiny(2), cfg.clone(), Seeds::from_master(5), &mut |s, state| {
        assert_eq!(state.step, s.step);
        seen.push(s.epoch);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, vec![1, 2, 3]);
    assert!(log.epochs.iter().all(|e| e.snapshot_cd.is_some_and(|c| c.is_finite())));

    let err = train::<f32>(&data, ArchitectureConfig::tiny(2), cfg, Seeds::from_master(5), &mut |s, _| {
        if s.epoch == 2 {
            Err(TrainError::Callback("stop".into()))
        } else {
            Ok(())
        }
    });
    assert!(matches!(err, Err(TrainError::Callback(_))));
}

#[test]
fn fake_flip_rate_follows_budget() {
    // the generator targets are 1 − l̂', so their mean is 1 − q over many draws
    let q = flip_probability(eps(0.5)).unwrap();
    let mut rng = Seeds::from_master(0).rng(Stream::FakeLabelFlip);
    let labels: Vec<u8> = (0..200_000).map(|_| randomize(FAKE, q, &mut rng)).collect();
    let targets: Array1<f64> = generator_targets(&labels);
    let mean = targets.mean().unwrap();
    assert!((mean - (1.0 - q)).abs() < 0.005);
}
