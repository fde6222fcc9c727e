//! Chamfer distance, exact earth mover's distance and the sampling protocol
//! that compares generated point sets against real ones.

pub mod kdtree;
pub mod lap;

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{sample_positions, PointSet};
use crate::model::{generate, ModelError, ModelState};
use crate::nn::Scalar;
use crate::rng::{stream_rng, Stream};

pub use kdtree::{squared_distance, KdTree};
pub use lap::{Assignment, LapError};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("point set is empty")]
    Empty,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("EMD needs equal sizes, got {0} and {1}")]
    SizeMismatch(usize, usize),
    #[error("assignment solver failed: {0}")]
    Solver(#[from] LapError),
    #[error("assignment optimality certificate violated by {0:e}")]
    Certificate(f64),
    #[error("need {needed} real points for a subsample, have {available}")]
    NotEnoughReal { needed: usize, available: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

fn check_pair(r: &PointSet, s: &PointSet) -> Result<(), MetricError> {
    if r.is_empty() || s.is_empty() {
        return Err(MetricError::Empty);
    }
    if r.dim() != s.dim() {
        return Err(MetricError::DimensionMismatch(r.dim(), s.dim()));
    }
    Ok(())
}

fn one_sided(from: &PointSet, to: &PointSet) -> f64 {
    let tree = KdTree::new(to.dim(), to.coords());
    from.points()
        .map(|p| tree.nearest(p).expect("nonempty").1)
        .sum()
}

/// Sum over both sets of the squared distance to the nearest point of the
/// other set.
pub fn chamfer_distance(r: &PointSet, s: &PointSet) -> Result<f64, MetricError> {
    check_pair(r, s)?;
    Ok(one_sided(r, s) + one_sided(s, r))
}

/// Quadratic-time Chamfer distance, the reference for the tree version.
pub fn chamfer_distance_brute(r: &PointSet, s: &PointSet) -> Result<f64, MetricError> {
    check_pair(r, s)?;
    let side = |a: &PointSet, b: &PointSet| -> f64 {
        a.points()
            .map(|p| {
                b.points()
                    .map(|q| squared_distance(p, q))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum()
    };
    Ok(side(r, s) + side(s, r))
}

/// Optimal bijection between equal-size sets under Euclidean cost, with its
/// dual certificate already checked.
pub fn emd_assignment(r: &PointSet, s: &PointSet) -> Result<Assignment, MetricError> {
    check_pair(r, s)?;
    if r.len() != s.len() {
        return Err(MetricError::SizeMismatch(r.len(), s.len()));
    }
    let cost = |i: usize, j: usize| squared_distance(r.point(i), s.point(j)).sqrt();
    let a = lap::solve(r.len(), cost)?;
    let residual = a.certificate_residual(cost);
    let scale = a.u.iter().chain(&a.v).fold(1.0f64, |m, x| m.max(x.abs()));
    if residual > 1e-9 * scale {
        return Err(MetricError::Certificate(residual));
    }
    Ok(a)
}

/// Minimum over bijections of the summed Euclidean distances.
pub fn emd_exact(r: &PointSet, s: &PointSet) -> Result<f64, MetricError> {
    Ok(emd_assignment(r, s)?.cost)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub samples: usize,
    pub sample_size: usize,
    /// Skip the assignment solver and report Chamfer distance only.
    pub cd_only: bool,
}

impl Default for EvalConfig {
    /// 60 samples of 7,500 points.
    fn default() -> Self {
        Self {
            samples: 60,
            sample_size: 7_500,
            cd_only: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sample_size: usize,
    pub samples: usize,
    pub cd: Vec<f64>,
    pub emd: Option<Vec<f64>>,
    pub cd_summary: Summary,
    pub emd_summary: Option<Summary>,
}

impl MetricReport {
    /// `sample_id,cd,emd` rows followed by `mean` and `std` rows. An empty
    /// `emd` column means CD-only evaluation.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "sample_id,cd,emd")?;
        let emd_at = |i: usize| self.emd.as_ref().map(|e| format!("{}", e[i])).unwrap_or_default();
        for (i, cd) in self.cd.iter().enumerate() {
            writeln!(w, "{i},{cd},{}", emd_at(i))?;
        }
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        writeln!(
            w,
            "mean,{},{}",
            self.cd_summary.mean,
            opt(self.emd_summary.map(|s| s.mean))
        )?;
        writeln!(
            w,
            "std,{},{}",
            self.cd_summary.std,
            opt(self.emd_summary.map(|s| s.std))
        )
    }
}

/// Compares `samples` synthetic sets from `synth` against as many real
/// subsamples drawn without replacement by `real_rng`.
pub fn evaluate_samples<R: Rng + ?Sized>(
    real: &PointSet,
    config: &EvalConfig,
    real_rng: &mut R,
    synth: &mut dyn FnMut(usize) -> Result<PointSet, MetricError>,
) -> Result<MetricReport, MetricError> {
    if real.len() < config.sample_size || config.sample_size == 0 {
        return Err(MetricError::NotEnoughReal {
            needed: config.sample_size.max(1),
            available: real.len(),
        });
    }
    let mut cd = Vec::with_capacity(config.samples);
    let mut emd = Vec::with_capacity(config.samples);
    for k in 0..config.samples {
        let s = synth(k)?;
        let pos = sample_positions(real.len(), config.sample_size, real_rng)
            .expect("size checked above");
        let r = real.select(&pos);
        cd.push(chamfer_distance(&r, &s)?);
        if !config.cd_only {
            emd.push(emd_exact(&r, &s)?);
        }
        log::debug!("sample {k}: cd {}", cd[k]);
    }
    let (emd, emd_summary) = if config.cd_only {
        (None, None)
    } else {
        let s = Summary::of(&emd);
        (Some(emd), Some(s))
    };
    Ok(MetricReport {
        sample_size: config.sample_size,
        samples: config.samples,
        cd_summary: Summary::of(&cd),
        cd,
        emd,
        emd_summary,
    })
}

/// The evaluation protocol for a trained generator. Generator noise and real
/// subsampling use separate streams derived from `seed`.
pub fn evaluate_generator<T: Scalar>(
    state: &ModelState<T>,
    real: &PointSet,
    config: &EvalConfig,
    chunk: usize,
    seed: u64,
) -> Result<MetricReport, MetricError> {
    let mut noise = stream_rng(seed, Stream::Noise);
    let mut real_rng = stream_rng(seed, Stream::Evaluation);
    let n = config.sample_size;
    evaluate_samples(real, config, &mut real_rng, &mut |_| {
        Ok(generate(state, n, chunk, &mut noise)?)
    })
}

/// Baseline "generator" that scatters points uniformly over `[-1, 1]^m`.
pub fn uniform_sample<R: Rng + ?Sized>(n: usize, dim: usize, rng: &mut R) -> PointSet {
    let coords = (0..n * dim).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    PointSet::new(dim, coords, crate::ingest::Frame::Normalized).expect("dimension 2 or 3")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Frame;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ps(rows: &[[f64; 2]]) -> PointSet {
        PointSet::new(2, rows.iter().flatten().copied().collect(), Frame::Normalized).unwrap()
    }

    #[test]
    fn chamfer_hand_example() {
        let r = ps(&[[0.0, 0.0], [1.0, 1.0]]);
        let s = ps(&[[0.0, 1.0]]);
        assert_eq!(chamfer_distance(&r, &s).unwrap(), 3.0);
        assert_eq!(chamfer_distance(&s, &r).unwrap(), 3.0);
        assert_eq!(chamfer_distance(&r, &r).unwrap(), 0.0);
    }

    #[test]
    fn emd_hand_example() {
        let r = ps(&[[0.0, 0.0], [0.0, 2.0]]);
        let s = ps(&[[0.0, 1.0], [0.0, 3.0]]);
        assert_eq!(emd_exact(&r, &s).unwrap(), 2.0);
        assert_eq!(emd_exact(&r, &r).unwrap(), 0.0);
    }

    #[test]
    fn errors() {
        let r = ps(&[[0.0, 0.0], [0.0, 2.0]]);
        let s = ps(&[[0.0, 1.0]]);
        let empty = PointSet::new(2, vec![], Frame::Normalized).unwrap();
        assert!(matches!(emd_exact(&r, &s), Err(MetricError::SizeMismatch(2, 1))));
        assert!(matches!(chamfer_distance(&r, &empty), Err(MetricError::Empty)));
        let r3 = PointSet::new(3, vec![0.0; 3], Frame::Normalized).unwrap();
        assert!(matches!(
            chamfer_distance(&r, &r3),
            Err(MetricError::DimensionMismatch(2, 3))
        ));
    }

    #[test]
    fn identity_generator_scores_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let real = uniform_sample(50, 2, &mut rng);
        let cfg = EvalConfig {
            samples: 3,
            sample_size: 20,
            cd_only: false,
        };
        // replay the subsampling stream so the "generator" returns the very
        // subsample it will be compared with
        let mut mirror = ChaCha8Rng::seed_from_u64(9);
        let report = evaluate_samples(&real, &cfg, &mut ChaCha8Rng::seed_from_u64(9), &mut |_| {
            let pos = sample_positions(real.len(), cfg.sample_size, &mut mirror).unwrap();
            Ok(real.select(&pos))
        })
        .unwrap();
        assert_eq!(report.cd_summary.mean, 0.0);
        assert_eq!(report.emd_summary.unwrap().mean, 0.0);
    }

    #[test]
    fn summary_and_csv() {
        let s = Summary::of(&[1.0, 3.0]);
        assert_eq!((s.mean, s.std, s.min, s.max), (2.0, 1.0, 1.0, 3.0));
        let report = MetricReport {
            sample_size: 2,
            samples: 2,
            cd: vec![1.0, 3.0],
            emd: None,
            cd_summary: s,
            emd_summary: None,
        };
        let mut out = Vec::new();
        report.write_csv(&mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "sample_id,cd,emd\n0,1,\n1,3,\nmean,2,\nstd,1,\n"
        );
    }

    #[test]
    fn full_scale_protocol_defaults() {
        let d = EvalConfig::default();
        assert_eq!((d.samples, d.sample_size, d.cd_only), (60, 7_500, false));
    }
}
