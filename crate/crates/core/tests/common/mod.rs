#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand::seq::index::sample;
use rand_distr::{Distribution, Normal, StandardNormal};
use spatialgan::model::{ArchitectureConfig, ModelState};
use spatialgan::nn::{TensorKind, Tensors};
use spatialgan::ingest::{Frame, PointSet};
use spatialgan::privacy::{privatize_real_dataset, PrivacyBudget, PrivatizedDataset};

/// Two isotropic Gaussian blobs in the normalized square, clamped to it.
pub fn two_gaussians(n: usize, seed: u64) -> PointSet {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.12).unwrap();
    let mut coords = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let c: [f64; 2] = if rng.gen_bool(0.5) { [-0.45, -0.4] } else { [0.5, 0.35] };
        for v in c {
            coords.push((v + noise.sample(&mut rng)).clamp(-1.0, 1.0));
        }
    }
    PointSet::new(2, coords, Frame::Normalized).unwrap()
}

pub fn uniform_points(n: usize, dim: usize, seed: u64) -> PointSet {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let coords = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    PointSet::new(dim, coords, Frame::Normalized).unwrap()
}

pub fn privatized(ps: &PointSet, budget: PrivacyBudget, seed: u64) -> PrivatizedDataset {
    privatize_real_dataset(ps, budget, &mut ChaCha20Rng::seed_from_u64(seed))
        .unwrap()
        .1
}

pub fn eps(e: f64) -> PrivacyBudget {
    PrivacyBudget::finite(e).unwrap()
}

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// A model whose parameters are pushed away from initialization (the last
/// transform layer starts at zero) and rounded to `f32`.
pub fn perturbed_state(m: usize, seed: u64) -> ModelState<f64> {
    let mut s = ModelState::<f64>::init(ArchitectureConfig::tiny(m), &mut rng(seed)).unwrap();
    let mut r = rng(seed + 1);
    let mut p = s.flatten(TensorKind::Param);
    for v in &mut p {
        let n: f64 = r.sample(StandardNormal);
        *v = (*v + 0.3 * n) as f32 as f64;
    }
    s.unflatten(TensorKind::Param, &p);
    s
}

pub fn to_f32(s: &ModelState<f64>) -> ModelState<f32> {
    let mut out = ModelState::<f32>::init(s.config.clone(), &mut rng(0)).unwrap();
    for kind in [TensorKind::Param, TensorKind::Buffer] {
        let v: Vec<f32> = s.flatten(kind).iter().map(|&x| x as f32).collect();
        out.unflatten(kind, &v);
    }
    out
}

/// Central differences on `count` random coordinates; returns the relative
/// error `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.
pub fn fd_relative_error(params: &[f64], analytic: &[f64], count: usize, seed: u64, loss: &dyn Fn(&[f64]) -> f64) -> f64 {
    let h = 1e-6;
    let idx = sample(&mut rng(seed), params.len(), count.min(params.len()));
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    let mut p = params.to_vec();
    for i in idx {
        let orig = p[i];
        p[i] = orig + h;
        let up = loss(&p);
        p[i] = orig - h;
        let down = loss(&p);
        p[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        diff += (analytic[i] - numeric).powi(2);
        na += analytic[i].powi(2);
        nn += numeric.powi(2);
    }
    diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-12)
}

