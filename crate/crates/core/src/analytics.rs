//! Location-analytics workloads used to compare real and synthetic data:
//! circular range counts, KDE hotspots and greedy facility location.
//!
//! Range and facility queries work on planar meter coordinates obtained from
//! source units with [`to_meters`]. Hotspots are computed on the normalized
//! `[-1, 1]^2` domain so real and synthetic grids share one alignment.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{sample_positions, DatasetBounds, Frame, IngestError, PointSet};
use crate::metrics::{squared_distance, KdTree};

/// Query radii in meters.
pub const RANGE_RADII_M: [f64; 5] = [50.0, 100.0, 200.0, 500.0, 1000.0];
/// Number of query places for range queries.
pub const RANGE_PLACES: usize = 200;
/// Hotspot grid granularities `2^6 ..= 2^10`.
pub const HOTSPOT_GRANULARITIES: [usize; 5] = [64, 128, 256, 512, 1024];
/// Facility counts.
pub const FACILITY_KS: [usize; 6] = [1, 5, 10, 20, 50, 75];
/// Candidate facilities.
pub const FACILITY_CANDIDATES: usize = 100;
/// Coverage radius of a facility for Max-Inf.
pub const MAX_INF_RADIUS_M: f64 = 200.0;
/// Percentile above which a KDE cell is a hotspot.
pub const HOTSPOT_PERCENTILE: f64 = 95.0;

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("place set is empty")]
    NoPlaces,
    #[error("radius must be positive, got {0}")]
    BadRadius(f64),
    #[error("grid granularity must be at least 2, got {0}")]
    BadGranularity(usize),
    #[error("hotspot analysis needs 2-dimensional points, got {0}")]
    NotPlanar(usize),
    #[error("k = {k} exceeds the {candidates} candidates")]
    TooManyFacilities { k: usize, candidates: usize },
    #[error("place {0} lies outside the dataset bounds")]
    PlaceOutOfBounds(String),
    #[error("point set is empty")]
    Empty,
    #[error("expected {expected} points, got {got}")]
    FrameMismatch { expected: &'static str, got: &'static str },
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

/// Planar meters relative to the lower bounds corner (first two dimensions).
pub fn to_meters(ps: &PointSet, bounds: &DatasetBounds) -> Result<PointSet, AnalyticsError> {
    if ps.frame() != Frame::Source {
        return Err(AnalyticsError::FrameMismatch {
            expected: "source-unit",
            got: "normalized",
        });
    }
    let coords = ps
        .points()
        .flat_map(|p| (0..2).map(move |d| (p[d] - bounds.min[d]) * bounds.meters_per_unit[d]))
        .collect();
    Ok(PointSet::new(2, coords, Frame::Source)?)
}

/// Named candidate places in source units.
#[derive(Clone, Debug, PartialEq)]
pub struct PlaceSet {
    pub names: Vec<String>,
    pub points: PointSet,
}

impl PlaceSet {
    pub fn new(names: Vec<String>, points: PointSet, bounds: &DatasetBounds) -> Result<Self, AnalyticsError> {
        if points.is_empty() {
            return Err(AnalyticsError::NoPlaces);
        }
        if let Some(i) = (0..points.len()).find(|&i| !bounds.contains(points.point(i))) {
            return Err(AnalyticsError::PlaceOutOfBounds(names[i].clone()));
        }
        Ok(Self { names, points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Reads places from a CSV with the given coordinate columns and an
    /// optional `name` column.
    pub fn load(path: &Path, columns: &[&str], bounds: &DatasetBounds) -> Result<Self, AnalyticsError> {
        let loaded = crate::ingest::load_points(path, columns, bounds.units)?;
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_path(path)
            .map_err(IngestError::from)?;
        let headers = rdr.headers().map_err(IngestError::from)?.clone();
        let names = match headers.iter().position(|h| h == "name") {
            Some(col) if loaded.skipped == 0 => rdr
                .records()
                .map(|r| Ok(r.map_err(IngestError::from)?.get(col).unwrap_or("").to_string()))
                .collect::<Result<Vec<_>, AnalyticsError>>()?,
            _ => (0..loaded.points.len()).map(|i| format!("place{i}")).collect(),
        };
        Self::new(names, loaded.points, bounds)
    }

    /// `count` distinct data points chosen uniformly as places.
    pub fn sample_from<R: Rng + ?Sized>(
        data: &PointSet,
        count: usize,
        bounds: &DatasetBounds,
        rng: &mut R,
    ) -> Result<Self, AnalyticsError> {
        let pos = sample_positions(data.len(), count.min(data.len()), rng)?;
        let names = pos.iter().map(|p| format!("place{p}")).collect();
        Self::new(names, data.select(&pos).project(2)?, bounds)
    }
}

/// Points within `radius` meters of `center` (all in planar meters).
pub fn range_count(points_m: &PointSet, center_m: &[f64], radius: f64) -> Result<usize, AnalyticsError> {
    if radius.is_nan() || radius <= 0.0 {
        return Err(AnalyticsError::BadRadius(radius));
    }
    Ok(KdTree::new(2, points_m.coords()).count_within(center_m, radius))
}

/// Counts around every place for one radius.
pub fn range_counts(points_m: &PointSet, places_m: &PointSet, radius: f64) -> Result<Vec<usize>, AnalyticsError> {
    if radius.is_nan() || radius <= 0.0 {
        return Err(AnalyticsError::BadRadius(radius));
    }
    let tree = KdTree::new(2, points_m.coords());
    Ok(places_m.points().map(|c| tree.count_within(c, radius)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeError {
    pub radius_m: f64,
    pub mae: f64,
    /// Mean relative error over places with a nonzero real count.
    pub mpe: f64,
    /// Places left out of the MPE because their real count is zero.
    pub zero_count_places: usize,
}

/// MAE and MPE between per-place counts.
pub fn mae_mpe(real: &[f64], synth: &[f64]) -> (f64, f64, usize) {
    let n = real.len().max(1) as f64;
    let mae = real.iter().zip(synth).map(|(r, s)| (r - s).abs()).sum::<f64>() / n;
    let (sum, used) = real
        .iter()
        .zip(synth)
        .filter(|(&r, _)| r >= 1.0)
        .fold((0.0, 0usize), |(acc, k), (r, s)| (acc + (r - s).abs() / r, k + 1));
    let mpe = if used == 0 { 0.0 } else { sum / used as f64 };
    (mae, mpe, real.len() - used)
}

/// Range-query error of a synthetic set against the real one. Synthetic
/// counts are scaled by `|real| / |synth|`.
pub fn range_query_error(
    real_m: &PointSet,
    synth_m: &PointSet,
    places_m: &PointSet,
    radii: &[f64],
) -> Result<Vec<RangeError>, AnalyticsError> {
    if places_m.is_empty() {
        return Err(AnalyticsError::NoPlaces);
    }
    if synth_m.is_empty() {
        return Err(AnalyticsError::Empty);
    }
    let scale = real_m.len() as f64 / synth_m.len() as f64;
    radii
        .iter()
        .map(|&radius| {
            let r: Vec<f64> = range_counts(real_m, places_m, radius)?
                .into_iter()
                .map(|c| c as f64)
                .collect();
            let s: Vec<f64> = range_counts(synth_m, places_m, radius)?
                .into_iter()
                .map(|c| c as f64 * scale)
                .collect();
            let (mae, mpe, zero_count_places) = mae_mpe(&r, &s);
            Ok(RangeError {
                radius_m: radius,
                mae,
                mpe,
                zero_count_places,
            })
        })
        .collect()
}

/// Per-dimension Gaussian bandwidths.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bandwidth {
    /// `σ_d · n^(-1/6)` with the sample standard deviation of each axis.
    Scott,
    Fixed(f64, f64),
}

impl Bandwidth {
    pub fn resolve(&self, points: &PointSet) -> (f64, f64) {
        match *self {
            Bandwidth::Fixed(hx, hy) => (hx, hy),
            Bandwidth::Scott => {
                let n = points.len() as f64;
                let factor = n.powf(-1.0 / 6.0);
                let h = |d: usize| {
                    let mean = points.points().map(|p| p[d]).sum::<f64>() / n;
                    let var = points.points().map(|p| (p[d] - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
                    // a degenerate axis still needs a usable kernel
                    (var.sqrt() * factor).max(1e-6)
                };
                (h(0), h(1))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HotspotResult {
    pub g: usize,
    pub bandwidth: (f64, f64),
    /// Row-major `g × g` densities; row `j` is the `j`-th cell along y.
    pub densities: Vec<f64>,
    pub threshold: f64,
    /// Cell indices `j * g + i` with density strictly above the threshold.
    pub hotspots: BTreeSet<usize>,
}

/// Center of cell `i` of `g` along one axis of `[-1, 1]`.
pub fn cell_center(i: usize, g: usize) -> f64 {
    -1.0 + (i as f64 + 0.5) * 2.0 / g as f64
}

fn gaussian(u: f64, h: f64) -> f64 {
    (-0.5 * (u / h) * (u / h)).exp() / (h * (2.0 * std::f64::consts::PI).sqrt())
}

/// Product-Gaussian KDE evaluated at the centers of a `g × g` grid over the
/// normalized domain.
pub fn kde_grid(points: &PointSet, g: usize, bw: (f64, f64)) -> Result<Vec<f64>, AnalyticsError> {
    if g < 2 {
        return Err(AnalyticsError::BadGranularity(g));
    }
    if points.dim() != 2 {
        return Err(AnalyticsError::NotPlanar(points.dim()));
    }
    if points.is_empty() {
        return Err(AnalyticsError::Empty);
    }
    let n = points.len();
    // the 2-D kernel factorizes, so the grid is Ky · Kxᵀ
    let kx = Array2::from_shape_fn((g, n), |(i, k)| gaussian(cell_center(i, g) - points.point(k)[0], bw.0));
    let ky = Array2::from_shape_fn((g, n), |(j, k)| gaussian(cell_center(j, g) - points.point(k)[1], bw.1));
    let grid = ky.dot(&kx.t()) / n as f64;
    Ok(grid.into_iter().collect())
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &[f64], pct: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = pct / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Hotspots from precomputed densities: cells strictly above the 95th
/// percentile.
pub fn hotspots_from_densities(g: usize, bandwidth: (f64, f64), densities: Vec<f64>) -> HotspotResult {
    let threshold = percentile(&densities, HOTSPOT_PERCENTILE);
    let hotspots = densities
        .iter()
        .enumerate()
        .filter(|(_, &d)| d > threshold)
        .map(|(i, _)| i)
        .collect();
    HotspotResult {
        g,
        bandwidth,
        densities,
        threshold,
        hotspots,
    }
}

/// KDE hotspots of normalized 2-D points on a `g × g` grid.
pub fn kde_hotspots(points: &PointSet, g: usize, bandwidth: Bandwidth) -> Result<HotspotResult, AnalyticsError> {
    if points.dim() != 2 {
        return Err(AnalyticsError::NotPlanar(points.dim()));
    }
    if points.is_empty() {
        return Err(AnalyticsError::Empty);
    }
    let bw = bandwidth.resolve(points);
    let densities = kde_grid(points, g, bw)?;
    Ok(hotspots_from_densities(g, bw, densities))
}

/// `2|A ∩ B| / (|A| + |B|)`; two empty sets count as full agreement.
pub fn sorensen_dice<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    if a.is_empty() && b.is_empty() {
        log::warn!("Sørensen-Dice of two empty sets taken as 1");
        return 1.0;
    }
    2.0 * a.intersection(b).count() as f64 / (a.len() + b.len()) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FacilityVariant {
    /// Maximize customers within the coverage radius of some facility.
    MaxInf,
    /// Minimize summed distance from customers to their nearest facility.
    MinDist,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FacilityResult {
    pub variant: FacilityVariant,
    /// Candidate indices in the order the greedy picked them.
    pub selected: Vec<usize>,
    /// Covered customers (Max-Inf) or summed distance in meters (Min-Dist).
    pub objective: f64,
}

impl FacilityResult {
    pub fn set(&self) -> BTreeSet<usize> {
        self.selected.iter().copied().collect()
    }
}

/// Greedy facility selection over planar-meter customers and candidates.
/// Ties go to the lowest candidate index.
pub fn facility_select(
    customers_m: &PointSet,
    candidates_m: &PointSet,
    k: usize,
    variant: FacilityVariant,
    radius_m: f64,
) -> Result<FacilityResult, AnalyticsError> {
    if k > candidates_m.len() {
        return Err(AnalyticsError::TooManyFacilities {
            k,
            candidates: candidates_m.len(),
        });
    }
    match variant {
        FacilityVariant::MaxInf => max_inf(customers_m, candidates_m, k, radius_m),
        FacilityVariant::MinDist => Ok(min_dist(customers_m, candidates_m, k)),
    }
}

fn max_inf(customers: &PointSet, candidates: &PointSet, k: usize, radius: f64) -> Result<FacilityResult, AnalyticsError> {
    if radius.is_nan() || radius <= 0.0 {
        return Err(AnalyticsError::BadRadius(radius));
    }
    let tree = KdTree::new(2, customers.coords());
    let reach: Vec<Vec<usize>> = candidates.points().map(|c| tree.within(c, radius)).collect();
    let mut covered = vec![false; customers.len()];
    let mut chosen = vec![false; candidates.len()];
    let mut selected = Vec::with_capacity(k);
    let mut total = 0usize;
    for _ in 0..k {
        let mut best = (usize::MAX, 0usize);
        for (j, r) in reach.iter().enumerate() {
            if chosen[j] {
                continue;
            }
            let gain = r.iter().filter(|&&c| !covered[c]).count();
            if best.0 == usize::MAX || gain > best.1 {
                best = (j, gain);
            }
        }
        let j = best.0;
        chosen[j] = true;
        selected.push(j);
        total += best.1;
        for &c in &reach[j] {
            covered[c] = true;
        }
    }
    Ok(FacilityResult {
        variant: FacilityVariant::MaxInf,
        selected,
        objective: total as f64,
    })
}

fn min_dist(customers: &PointSet, candidates: &PointSet, k: usize) -> FacilityResult {
    let dist: Vec<Vec<f64>> = candidates
        .points()
        .map(|c| customers.points().map(|p| squared_distance(c, p).sqrt()).collect())
        .collect();
    let mut nearest = vec![f64::INFINITY; customers.len()];
    let mut chosen = vec![false; candidates.len()];
    let mut selected = Vec::with_capacity(k);
    let mut objective = if customers.is_empty() { 0.0 } else { f64::INFINITY };
    for _ in 0..k {
        let mut best = (usize::MAX, f64::INFINITY);
        for (j, d) in dist.iter().enumerate() {
            if chosen[j] {
                continue;
            }
            let total: f64 = nearest.iter().zip(d).map(|(a, b)| a.min(*b)).sum();
            if best.0 == usize::MAX || total < best.1 {
                best = (j, total);
            }
        }
        let j = best.0;
        chosen[j] = true;
        selected.push(j);
        for (a, b) in nearest.iter_mut().zip(&dist[j]) {
            *a = a.min(*b);
        }
        objective = best.1;
    }
    FacilityResult {
        variant: FacilityVariant::MinDist,
        selected,
        objective,
    }
}

/// SDC between real and synthetic facility selections for each `k`. The
/// greedy order is prefix-stable, so one run up to the largest `k` serves all.
pub fn facility_agreement(
    real_m: &PointSet,
    synth_m: &PointSet,
    candidates_m: &PointSet,
    ks: &[usize],
    variant: FacilityVariant,
    radius_m: f64,
) -> Result<Vec<(usize, f64)>, AnalyticsError> {
    let k_max = ks.iter().copied().max().unwrap_or(0);
    let r = facility_select(real_m, candidates_m, k_max, variant, radius_m)?;
    let s = facility_select(synth_m, candidates_m, k_max, variant, radius_m)?;
    Ok(ks
        .iter()
        .map(|&k| {
            let a: BTreeSet<usize> = r.selected[..k].iter().copied().collect();
            let b: BTreeSet<usize> = s.selected[..k].iter().copied().collect();
            (k, sorensen_dice(&a, &b))
        })
        .collect())
}
