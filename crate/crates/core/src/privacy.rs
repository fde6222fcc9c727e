//! Randomized-response label flipping for ε-label-LDP.
//!
//! Real points are labelled `1` and each label is flipped exactly once with
//! probability `q = 1 / (e^ε + 1)`. Only the resulting
//! [`PrivatizedDataset`] (coordinates plus flipped labels) is handed to the
//! trainer; true labels stay in the device-side [`LabeledPoint`] records.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ingest::{Frame, PointSet};

/// Label of a real point.
pub const REAL: u8 = 1;
/// Label of a generated point.
pub const FAKE: u8 = 0;

#[derive(Debug, Error, PartialEq)]
pub enum PrivacyError {
    #[error("privacy budget must be positive, got {0}")]
    NonPositiveEpsilon(f64),
    #[error("flip probability must lie in [0, 0.5), got {0}")]
    BadFlipProbability(f64),
    #[error("at least {min} trials are required, got {got}")]
    TooFewTrials { min: usize, got: usize },
    #[error("failed to write privatized dataset: {0}")]
    Io(String),
}

/// Privacy budget ε. `Infinite` is the non-private mode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PrivacyBudget {
    Finite(f64),
    Infinite,
}

impl PrivacyBudget {
    pub fn finite(epsilon: f64) -> Result<Self, PrivacyError> {
        if epsilon.is_nan() || epsilon <= 0.0 {
            return Err(PrivacyError::NonPositiveEpsilon(epsilon));
        }
        if epsilon.is_infinite() {
            return Ok(PrivacyBudget::Infinite);
        }
        Ok(PrivacyBudget::Finite(epsilon))
    }

    pub fn epsilon(&self) -> f64 {
        match *self {
            PrivacyBudget::Finite(e) => e,
            PrivacyBudget::Infinite => f64::INFINITY,
        }
    }

    fn validate(&self) -> Result<(), PrivacyError> {
        match *self {
            PrivacyBudget::Finite(e) if e.is_nan() || e <= 0.0 => {
                Err(PrivacyError::NonPositiveEpsilon(e))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for PrivacyBudget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PrivacyBudget::Finite(e) => write!(f, "{e}"),
            PrivacyBudget::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for PrivacyBudget {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inf" | "infinity" | "∞" => Ok(PrivacyBudget::Infinite),
            other => {
                let e: f64 = other.parse().map_err(|_| format!("invalid epsilon `{s}`"))?;
                PrivacyBudget::finite(e).map_err(|e| e.to_string())
            }
        }
    }
}

impl TryFrom<String> for PrivacyBudget {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<PrivacyBudget> for String {
    fn from(b: PrivacyBudget) -> Self {
        b.to_string()
    }
}

/// `q = 1 / (e^ε + 1)`; zero for the non-private budget.
pub fn flip_probability(budget: PrivacyBudget) -> Result<f64, PrivacyError> {
    budget.validate()?;
    Ok(match budget {
        PrivacyBudget::Infinite => 0.0,
        PrivacyBudget::Finite(e) => 1.0 / (e.exp() + 1.0),
    })
}

/// Probability of reporting the true label, `p = e^ε / (e^ε + 1)`.
pub fn keep_probability(budget: PrivacyBudget) -> Result<f64, PrivacyError> {
    budget.validate()?;
    Ok(match budget {
        PrivacyBudget::Infinite => 1.0,
        PrivacyBudget::Finite(e) => {
            let t = e.exp();
            t / (t + 1.0)
        }
    })
}

/// Closed-form likelihood ratio `p / q`; infinite for the non-private budget.
pub fn analytic_ldp_ratio(budget: PrivacyBudget) -> Result<f64, PrivacyError> {
    let q = flip_probability(budget)?;
    if q == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(keep_probability(budget)? / q)
}

fn check_q(q: f64) -> Result<(), PrivacyError> {
    if !(0.0..0.5).contains(&q) {
        return Err(PrivacyError::BadFlipProbability(q));
    }
    Ok(())
}

/// One randomized-response draw: inverts `label` with probability `q`.
#[inline]
pub fn randomize<R: Rng + ?Sized>(label: u8, q: f64, rng: &mut R) -> u8 {
    // Always consume one draw so stream positions do not depend on q.
    let u: f64 = rng.gen();
    if u < q {
        1 - label
    } else {
        label
    }
}

/// Inverts each bit independently with probability `q`.
pub fn perturb_labels<R: Rng + ?Sized>(
    labels: &[u8],
    q: f64,
    rng: &mut R,
) -> Result<Vec<u8>, PrivacyError> {
    check_q(q)?;
    Ok(labels.iter().map(|&l| randomize(l, q, rng)).collect())
}

/// A real point with its true label and its once-flipped label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPoint {
    pub index: u64,
    pub coords: Vec<f64>,
    pub true_label: u8,
    pub flipped_label: u8,
}

/// The upload a central trainer receives: coordinates and flipped labels
/// only. Labels are fixed at construction and cannot be changed afterwards.
#[derive(Clone, Debug, PartialEq)]
pub struct PrivatizedDataset {
    points: PointSet,
    labels: Vec<u8>,
    epsilon: PrivacyBudget,
}

impl PrivatizedDataset {
    pub fn points(&self) -> &PointSet {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn budget(&self) -> PrivacyBudget {
        self.epsilon
    }

    /// Flipped label of the point at `position`.
    pub fn label(&self, position: usize) -> u8 {
        self.labels[position]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Digest of the `(index, flipped_label)` table.
    pub fn label_digest(&self) -> String {
        let mut h = Sha256::new();
        for (id, l) in self.points.ids().iter().zip(&self.labels) {
            h.update(id.to_le_bytes());
            h.update([*l]);
        }
        hex::encode(h.finalize())
    }

    /// Writes `index,c0,..,c{m-1},flipped_label` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), PrivacyError> {
        let io = |e: std::io::Error| PrivacyError::Io(e.to_string());
        let m = self.points.dim();
        let cols: Vec<String> = (0..m).map(|d| format!("c{d}")).collect();
        writeln!(w, "index,{},flipped_label", cols.join(",")).map_err(io)?;
        for (i, p) in self.points.points().enumerate() {
            let coords: Vec<String> = p.iter().map(|v| format!("{v}")).collect();
            writeln!(
                w,
                "{},{},{}",
                self.points.ids()[i],
                coords.join(","),
                self.labels[i]
            )
            .map_err(io)?;
        }
        Ok(())
    }
}

/// Device-side step: assigns every real point the real label and flips it
/// once. Returns the full records together with the upload view.
pub fn privatize_real_dataset<R: Rng + ?Sized>(
    ps: &PointSet,
    budget: PrivacyBudget,
    rng: &mut R,
) -> Result<(Vec<LabeledPoint>, PrivatizedDataset), PrivacyError> {
    let q = flip_probability(budget)?;
    let records: Vec<LabeledPoint> = ps
        .points()
        .zip(ps.ids())
        .map(|(p, &index)| LabeledPoint {
            index,
            coords: p.to_vec(),
            true_label: REAL,
            flipped_label: randomize(REAL, q, rng),
        })
        .collect();
    let upload = upload(&records, ps.dim(), ps.frame(), budget);
    Ok((records, upload))
}

/// Strips true labels, producing what leaves the device.
pub fn upload(
    records: &[LabeledPoint],
    dim: usize,
    frame: Frame,
    budget: PrivacyBudget,
) -> PrivatizedDataset {
    let coords = records.iter().flat_map(|r| r.coords.iter().copied()).collect();
    let ids = records.iter().map(|r| r.index).collect();
    PrivatizedDataset {
        points: PointSet::with_ids(dim, coords, ids, frame),
        labels: records.iter().map(|r| r.flipped_label).collect(),
        epsilon: budget,
    }
}

/// Monte Carlo estimate of `max_out Pr[out | in = real] / Pr[out | in = fake]`
/// over `trials` draws per input. Returns `f64::INFINITY` when a denominator
/// cell is empty (unbounded ratio).
pub fn empirical_ldp_ratio<R: Rng + ?Sized>(
    q: f64,
    trials: usize,
    rng: &mut R,
) -> Result<f64, PrivacyError> {
    const MIN_TRIALS: usize = 10_000;
    check_q(q)?;
    if trials < MIN_TRIALS {
        return Err(PrivacyError::TooFewTrials {
            min: MIN_TRIALS,
            got: trials,
        });
    }
    // counts[input][output]
    let mut counts = [[0usize; 2]; 2];
    for input in [FAKE, REAL] {
        for _ in 0..trials {
            counts[input as usize][randomize(input, q, rng) as usize] += 1;
        }
    }
    let mut ratio: f64 = 0.0;
    for (&num, &den) in counts[REAL as usize].iter().zip(&counts[FAKE as usize]) {
        if den == 0 {
            if num > 0 {
                return Ok(f64::INFINITY);
            }
            continue;
        }
        ratio = ratio.max(num as f64 / den as f64);
    }
    Ok(ratio)
}

/// Area of the convex hull of the first two coordinates divided by the area
/// of the `[-1, 1]^2` working domain. Reported only; nothing is enforced.
pub fn domain_coverage(ps: &PointSet) -> f64 {
    let mut pts: Vec<[f64; 2]> = ps.points().map(|p| [p[0], p[1]]).collect();
    hull_area(&mut pts) / 4.0
}

fn hull_area(pts: &mut [[f64; 2]]) -> f64 {
    if pts.len() < 3 {
        return 0.0;
    }
    pts.sort_by(|a, b| a.partial_cmp(b).expect("finite coordinates"));
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    };
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(pts.len() * 2);
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    let n = hull.len();
    0.5 * (0..n)
        .map(|i| {
            let (a, b) = (hull[i], hull[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        .abs()
}
