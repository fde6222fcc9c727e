//! Loading, region filtering, normalization and batch sampling of point data.
//!
//! Points keep the stable index they were given at load time. Privatized
//! labels attach to that index, so duplicated coordinates stay distinct
//! records all the way through training.

use std::cmp::Ordering;
use std::fs::File;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Mean earth radius used by the local equirectangular approximation.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot open {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("column `{0}` not found in header")]
    MissingColumn(String),
    #[error("no valid rows ({skipped} rejected)")]
    NoValidRows { skipped: usize },
    #[error("point dimension must be 2 or 3, got {0}")]
    BadDimension(usize),
    #[error("polygon {index} has {vertices} vertices; at least 3 are required")]
    DegeneratePolygon { index: usize, vertices: usize },
    #[error("polygon {0} is self-intersecting")]
    SelfIntersecting(usize),
    #[error("malformed region mask: {0}")]
    MalformedMask(String),
    #[error("dimension {0} has zero width")]
    ZeroWidth(usize),
    #[error("point {index} lies outside the bounds in dimension {dim}")]
    OutOfBounds { index: usize, dim: usize },
    #[error("batch of {requested} requested from {available} points")]
    BatchTooLarge { requested: usize, available: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Coordinate frame a [`PointSet`] is expressed in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Frame {
    /// Source units (degrees or meters) as read from disk.
    Source,
    /// The `[-1, 1]^m` working domain.
    Normalized,
}

/// An unordered collection of `m`-dimensional points, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    dim: usize,
    coords: Vec<f64>,
    ids: Vec<u64>,
    frame: Frame,
}

impl PointSet {
    /// Builds a point set from row-major coordinates; ids are `0..n`.
    pub fn new(dim: usize, coords: Vec<f64>, frame: Frame) -> Result<Self, IngestError> {
        if !(2..=3).contains(&dim) {
            return Err(IngestError::BadDimension(dim));
        }
        if !coords.len().is_multiple_of(dim) {
            return Err(IngestError::DimensionMismatch {
                expected: dim,
                got: coords.len() % dim,
            });
        }
        let ids = (0..(coords.len() / dim) as u64).collect();
        Ok(Self {
            dim,
            coords,
            ids,
            frame,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], frame: Frame) -> Result<Self, IngestError> {
        let dim = rows.first().map_or(2, Vec::len);
        let mut coords = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(IngestError::DimensionMismatch {
                    expected: dim,
                    got: row.len(),
                });
            }
            coords.extend_from_slice(row);
        }
        Self::new(dim, coords, frame)
    }

    pub(crate) fn with_ids(dim: usize, coords: Vec<f64>, ids: Vec<u64>, frame: Frame) -> Self {
        debug_assert_eq!(coords.len(), ids.len() * dim);
        Self {
            dim,
            coords,
            ids,
            frame,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn frame(&self) -> Frame {
        self.frame
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.coords.chunks_exact(self.dim)
    }

    /// Row-major coordinate buffer.
    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    /// Stable per-record identifiers assigned at load time.
    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    /// Selects rows by position, keeping their stable ids.
    pub fn select(&self, positions: &[usize]) -> PointSet {
        let mut coords = Vec::with_capacity(positions.len() * self.dim);
        let mut ids = Vec::with_capacity(positions.len());
        for &p in positions {
            coords.extend_from_slice(self.point(p));
            ids.push(self.ids[p]);
        }
        PointSet::with_ids(self.dim, coords, ids, self.frame)
    }

    /// Keeps only the first `k` coordinate components of every point.
    pub fn project(&self, k: usize) -> Result<PointSet, IngestError> {
        if k > self.dim {
            return Err(IngestError::DimensionMismatch {
                expected: self.dim,
                got: k,
            });
        }
        let coords = self.points().flat_map(|p| p[..k].iter().copied()).collect();
        Ok(PointSet::with_ids(k, coords, self.ids.clone(), self.frame))
    }
}

/// Unit of the raw coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Units {
    /// Longitude, latitude in decimal degrees, then optional altitude in meters.
    #[default]
    Degrees,
    Meters,
}

impl std::str::FromStr for Units {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "degrees" | "deg" => Ok(Units::Degrees),
            "meters" | "m" => Ok(Units::Meters),
            other => Err(format!("unknown units `{other}`")),
        }
    }
}

/// Per-dimension extent of a dataset in source units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetBounds {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub units: Units,
    /// Meters per source unit for each dimension.
    pub meters_per_unit: Vec<f64>,
}

impl DatasetBounds {
    pub fn new(min: Vec<f64>, max: Vec<f64>, units: Units) -> Result<Self, IngestError> {
        if min.len() != max.len() {
            return Err(IngestError::DimensionMismatch {
                expected: min.len(),
                got: max.len(),
            });
        }
        if let Some(d) = (0..min.len()).find(|&d| min[d].partial_cmp(&max[d]) != Some(Ordering::Less)) {
            return Err(IngestError::ZeroWidth(d));
        }
        let meters_per_unit = match units {
            Units::Meters => vec![1.0; min.len()],
            Units::Degrees => {
                let per_degree = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
                let mid_lat = if min.len() > 1 {
                    0.5 * (min[1] + max[1])
                } else {
                    0.0
                };
                let mut f = vec![per_degree * mid_lat.to_radians().cos(), per_degree];
                f.resize(min.len(), 1.0);
                f
            }
        };
        Ok(Self {
            min,
            max,
            units,
            meters_per_unit,
        })
    }

    /// Tight bounds around a point set.
    pub fn from_points(ps: &PointSet, units: Units) -> Result<Self, IngestError> {
        let dim = ps.dim();
        let mut min = vec![f64::INFINITY; dim];
        let mut max = vec![f64::NEG_INFINITY; dim];
        for p in ps.points() {
            for d in 0..dim {
                min[d] = min[d].min(p[d]);
                max[d] = max[d].max(p[d]);
            }
        }
        Self::new(min, max, units)
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.iter()
            .zip(self.min.iter().zip(&self.max))
            .all(|(&x, (&lo, &hi))| lo <= x && x <= hi)
    }
}

/// Result of [`load_points`].
#[derive(Clone, Debug)]
pub struct LoadedPoints {
    pub points: PointSet,
    pub bounds: DatasetBounds,
    /// Records rejected for missing or non-finite coordinates.
    pub skipped: usize,
}

/// Reads the named coordinate columns of a headed CSV file.
pub fn load_points(
    path: impl AsRef<Path>,
    columns: &[&str],
    units: Units,
) -> Result<LoadedPoints, IngestError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_points(file, columns, units)
}

pub fn read_points<R: std::io::Read>(
    reader: R,
    columns: &[&str],
    units: Units,
) -> Result<LoadedPoints, IngestError> {
    let dim = columns.len();
    if !(2..=3).contains(&dim) {
        return Err(IngestError::BadDimension(dim));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    let idx: Vec<usize> = columns
        .iter()
        .map(|c| {
            header
                .iter()
                .position(|h| h == *c)
                .ok_or_else(|| IngestError::MissingColumn((*c).to_string()))
        })
        .collect::<Result<_, _>>()?;

    let mut coords = Vec::new();
    let mut skipped = 0;
    let mut row = vec![0.0; dim];
    for record in rdr.records() {
        let record = record?;
        let ok = idx.iter().zip(row.iter_mut()).all(|(&i, slot)| {
            match record.get(i).and_then(|s| s.parse::<f64>().ok()) {
                Some(v) if v.is_finite() => {
                    *slot = v;
                    true
                }
                _ => false,
            }
        });
        if ok {
            coords.extend_from_slice(&row);
        } else {
            skipped += 1;
        }
    }
    if coords.is_empty() {
        return Err(IngestError::NoValidRows { skipped });
    }
    if skipped > 0 {
        log::warn!("rejected {skipped} rows with missing or non-finite coordinates");
    }
    let points = PointSet::new(dim, coords, Frame::Source)?;
    let bounds = DatasetBounds::from_points(&points, units)?;
    Ok(LoadedPoints {
        points,
        bounds,
        skipped,
    })
}

/// A simple polygon with optional holes, in source units.
#[derive(Clone, Debug, PartialEq)]
pub struct Polygon {
    pub outer: Vec<[f64; 2]>,
    pub holes: Vec<Vec<[f64; 2]>>,
}

impl Polygon {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        if !ring_contains(&self.outer, p) {
            return false;
        }
        // Points on a hole's boundary still count as inside the region.
        !self
            .holes
            .iter()
            .any(|h| ring_contains(h, p) && !on_ring_boundary(h, p))
    }
}

/// Set of polygons describing the valid region. Empty means "everything".
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RegionMask {
    pub polygons: Vec<Polygon>,
}

impl RegionMask {
    pub fn new(polygons: Vec<Polygon>) -> Result<Self, IngestError> {
        for (i, poly) in polygons.iter().enumerate() {
            for ring in std::iter::once(&poly.outer).chain(&poly.holes) {
                let n = open_ring(ring).len();
                if n < 3 {
                    return Err(IngestError::DegeneratePolygon {
                        index: i,
                        vertices: n,
                    });
                }
                if ring_self_intersects(open_ring(ring)) {
                    return Err(IngestError::SelfIntersecting(i));
                }
            }
        }
        Ok(Self { polygons })
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        self.polygons.iter().any(|poly| poly.contains(p))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, IngestError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|source| IngestError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let value: Value = serde_json::from_reader(std::io::BufReader::new(file))
            .map_err(|e| IngestError::MalformedMask(e.to_string()))?;
        Self::from_json(&value)
    }

    /// Accepts a bare list of rings (`[[[x, y], ...], ...]`, one polygon per
    /// ring) or a GeoJSON `Polygon`, `MultiPolygon`, `Feature` or
    /// `FeatureCollection`.
    pub fn from_json(value: &Value) -> Result<Self, IngestError> {
        let mut polygons = Vec::new();
        collect_polygons(value, &mut polygons)?;
        Self::new(polygons)
    }
}

fn malformed(msg: &str) -> IngestError {
    IngestError::MalformedMask(msg.to_string())
}

fn parse_ring(v: &Value) -> Result<Vec<[f64; 2]>, IngestError> {
    v.as_array()
        .ok_or_else(|| malformed("ring is not an array"))?
        .iter()
        .map(|pt| {
            let xy = pt.as_array().ok_or_else(|| malformed("vertex is not an array"))?;
            match (xy.first().and_then(Value::as_f64), xy.get(1).and_then(Value::as_f64)) {
                (Some(x), Some(y)) => Ok([x, y]),
                _ => Err(malformed("vertex needs two numbers")),
            }
        })
        .collect()
}

fn parse_polygon(v: &Value) -> Result<Polygon, IngestError> {
    let rings = v.as_array().ok_or_else(|| malformed("polygon is not an array"))?;
    let mut rings = rings.iter().map(parse_ring);
    let outer = rings.next().ok_or_else(|| malformed("polygon has no rings"))??;
    let holes = rings.collect::<Result<_, _>>()?;
    Ok(Polygon { outer, holes })
}

fn collect_polygons(v: &Value, out: &mut Vec<Polygon>) -> Result<(), IngestError> {
    match v {
        Value::Array(rings) => {
            for ring in rings {
                out.push(Polygon {
                    outer: parse_ring(ring)?,
                    holes: Vec::new(),
                });
            }
            Ok(())
        }
        Value::Object(obj) => match obj.get("type").and_then(Value::as_str) {
            Some("Polygon") => {
                out.push(parse_polygon(obj.get("coordinates").ok_or_else(|| malformed("missing coordinates"))?)?);
                Ok(())
            }
            Some("MultiPolygon") => {
                let polys = obj
                    .get("coordinates")
                    .and_then(Value::as_array)
                    .ok_or_else(|| malformed("missing coordinates"))?;
                for p in polys {
                    out.push(parse_polygon(p)?);
                }
                Ok(())
            }
            Some("Feature") => collect_polygons(obj.get("geometry").unwrap_or(&Value::Null), out),
            Some("FeatureCollection") => {
                for f in obj.get("features").and_then(Value::as_array).into_iter().flatten() {
                    collect_polygons(f, out)?;
                }
                Ok(())
            }
            _ => Err(malformed("unsupported geometry type")),
        },
        _ => Err(malformed("expected an array or a GeoJSON object")),
    }
}

/// Drops an explicit closing vertex if present.
fn open_ring(ring: &[[f64; 2]]) -> &[[f64; 2]] {
    match ring {
        [first, .., last] if ring.len() > 1 && first == last => &ring[..ring.len() - 1],
        _ => ring,
    }
}

fn on_segment(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> bool {
    let cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
    cross == 0.0
        && p[0] >= a[0].min(b[0])
        && p[0] <= a[0].max(b[0])
        && p[1] >= a[1].min(b[1])
        && p[1] <= a[1].max(b[1])
}

fn on_ring_boundary(ring: &[[f64; 2]], p: [f64; 2]) -> bool {
    let ring = open_ring(ring);
    let n = ring.len();
    (0..n).any(|i| on_segment(ring[i], ring[(i + 1) % n], p))
}

/// Even-odd ray casting; boundary points count as inside.
fn ring_contains(ring: &[[f64; 2]], p: [f64; 2]) -> bool {
    if on_ring_boundary(ring, p) {
        return true;
    }
    let ring = open_ring(ring);
    let n = ring.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (ring[i], ring[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if p[0] < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn segments_intersect(p1: [f64; 2], p2: [f64; 2], q1: [f64; 2], q2: [f64; 2]) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(q1, q2, p1))
        || (d2 == 0.0 && on_segment(q1, q2, p2))
        || (d3 == 0.0 && on_segment(p1, p2, q1))
        || (d4 == 0.0 && on_segment(p1, p2, q2))
}

fn ring_self_intersects(ring: &[[f64; 2]]) -> bool {
    let n = ring.len();
    for i in 0..n {
        let (a1, a2) = (ring[i], ring[(i + 1) % n]);
        for j in (i + 1)..n {
            // adjacent edges share a vertex by construction
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            if segments_intersect(a1, a2, ring[j], ring[(j + 1) % n]) {
                return true;
            }
        }
    }
    false
}

/// Keeps the points whose first two components fall inside (or on the
/// boundary of) some polygon of the mask. Order is preserved.
pub fn filter_region(ps: &PointSet, mask: &RegionMask) -> PointSet {
    if mask.polygons.is_empty() {
        return ps.clone();
    }
    let keep: Vec<usize> = (0..ps.len())
        .filter(|&i| {
            let p = ps.point(i);
            mask.contains([p[0], p[1]])
        })
        .collect();
    ps.select(&keep)
}

/// Affine per-dimension map from `bounds` onto `[-1, 1]^m`.
pub fn normalize(ps: &PointSet, bounds: &DatasetBounds) -> Result<PointSet, IngestError> {
    check_dim(ps, bounds)?;
    let dim = ps.dim();
    let mut coords = Vec::with_capacity(ps.coords().len());
    for (i, p) in ps.points().enumerate() {
        for (d, &v) in p.iter().enumerate() {
            let (lo, hi) = (bounds.min[d], bounds.max[d]);
            if !(lo..=hi).contains(&v) {
                return Err(IngestError::OutOfBounds { index: i, dim: d });
            }
            coords.push(2.0 * (v - lo) / (hi - lo) - 1.0);
        }
    }
    Ok(PointSet::with_ids(dim, coords, ps.ids().to_vec(), Frame::Normalized))
}

/// Inverse of [`normalize`]. Values outside `[-1, 1]` extrapolate linearly.
pub fn denormalize(ps: &PointSet, bounds: &DatasetBounds) -> Result<PointSet, IngestError> {
    check_dim(ps, bounds)?;
    let dim = ps.dim();
    let coords = ps
        .points()
        .flat_map(|p| {
            (0..dim).map(move |d| {
                let (lo, hi) = (bounds.min[d], bounds.max[d]);
                lo + (p[d] + 1.0) * 0.5 * (hi - lo)
            })
        })
        .collect();
    Ok(PointSet::with_ids(dim, coords, ps.ids().to_vec(), Frame::Source))
}

fn check_dim(ps: &PointSet, bounds: &DatasetBounds) -> Result<(), IngestError> {
    if ps.dim() != bounds.dim() {
        return Err(IngestError::DimensionMismatch {
            expected: bounds.dim(),
            got: ps.dim(),
        });
    }
    if let Some(d) = (0..bounds.dim()).find(|&d| bounds.min[d].partial_cmp(&bounds.max[d]) != Some(Ordering::Less)) {
        return Err(IngestError::ZeroWidth(d));
    }
    Ok(())
}

/// Positions of `batch` distinct points drawn uniformly without replacement.
pub fn sample_positions<R: Rng + ?Sized>(
    n: usize,
    batch: usize,
    rng: &mut R,
) -> Result<Vec<usize>, IngestError> {
    if batch > n {
        return Err(IngestError::BatchTooLarge {
            requested: batch,
            available: n,
        });
    }
    Ok(rand::seq::index::sample(rng, n, batch).into_vec())
}

/// Draws `batch` distinct points; each keeps its stable id.
pub fn sample_batch<R: Rng + ?Sized>(
    ps: &PointSet,
    batch: usize,
    rng: &mut R,
) -> Result<PointSet, IngestError> {
    let pos = sample_positions(ps.len(), batch, rng)?;
    Ok(ps.select(&pos))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn square(lo: f64, hi: f64) -> Polygon {
        Polygon {
            outer: vec![[lo, lo], [hi, lo], [hi, hi], [lo, hi]],
            holes: vec![],
        }
    }

    #[test]
    fn loads_two_rows_and_bounds() {
        let csv = "x,y\n0,0\n2,4\n";
        let got = read_points(csv.as_bytes(), &["x", "y"], Units::Meters).unwrap();
        assert_eq!(got.points.len(), 2);
        assert_eq!(got.bounds.min, vec![0.0, 0.0]);
        assert_eq!(got.bounds.max, vec![2.0, 4.0]);
        assert_eq!(got.skipped, 0);
    }

    #[test]
    fn non_numeric_row_is_skipped() {
        let csv = "x,y\n0,0\nabc,1\n2,4\n3,\n";
        let got = read_points(csv.as_bytes(), &["x", "y"], Units::Meters).unwrap();
        assert_eq!(got.points.len(), 2);
        assert_eq!(got.skipped, 2);
        let csv = "x,y\n0,0\n1,NaN\n2,4\n";
        let got = read_points(csv.as_bytes(), &["x", "y"], Units::Meters).unwrap();
        assert_eq!(got.skipped, 1);
    }

    #[test]
    fn three_column_file() {
        let csv = "id,lon,lat,alt\n\
                   a,10.0,56.0,5\n\
                   b,10.5,56.2,12\n\
                   c,9.8,55.9,-1\n\
                   d,10.1,56.4,30\n\
                   e,10.2,56.1,7\n";
        let got = read_points(csv.as_bytes(), &["lon", "lat", "alt"], Units::Degrees).unwrap();
        assert_eq!(got.points.dim(), 3);
        assert_eq!(got.points.len(), 5);
        assert_eq!(got.bounds.min, vec![9.8, 55.9, -1.0]);
        assert_eq!(got.bounds.max, vec![10.5, 56.4, 30.0]);
        assert_eq!(got.points.point(3), &[10.1, 56.4, 30.0]);
        assert_eq!(got.bounds.meters_per_unit[2], 1.0);
        assert!(got.bounds.meters_per_unit[0] < got.bounds.meters_per_unit[1]);
    }

    #[test]
    fn load_errors() {
        assert!(matches!(
            read_points("x,y\n1,2\n".as_bytes(), &["x", "z"], Units::Meters),
            Err(IngestError::MissingColumn(c)) if c == "z"
        ));
        assert!(matches!(
            read_points("x,y\na,b\n".as_bytes(), &["x", "y"], Units::Meters),
            Err(IngestError::NoValidRows { skipped: 1 })
        ));
        assert!(matches!(
            load_points("/nonexistent/file.csv", &["x", "y"], Units::Meters),
            Err(IngestError::Io { .. })
        ));
    }

    #[test]
    fn filter_unit_square() {
        let ps = PointSet::from_rows(&[vec![0.5, 0.5], vec![2.0, 2.0]], Frame::Source).unwrap();
        let mask = RegionMask::new(vec![square(0.0, 1.0)]).unwrap();
        let kept = filter_region(&ps, &mask);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept.point(0), &[0.5, 0.5]);
        assert_eq!(kept.ids(), &[0]);
    }

    #[test]
    fn empty_mask_is_identity() {
        let ps = PointSet::from_rows(&[vec![0.5, 0.5], vec![2.0, 2.0]], Frame::Source).unwrap();
        assert_eq!(filter_region(&ps, &RegionMask::default()), ps);
    }

    #[test]
    fn boundary_points_are_kept() {
        let ps = PointSet::from_rows(
            &[vec![0.0, 0.5], vec![1.0, 1.0], vec![1.0 + 1e-12, 0.5]],
            Frame::Source,
        )
        .unwrap();
        let mask = RegionMask::new(vec![square(0.0, 1.0)]).unwrap();
        assert_eq!(filter_region(&ps, &mask).len(), 2);
    }

    #[test]
    fn holes_exclude_interior() {
        let mut poly = square(0.0, 4.0);
        poly.holes.push(vec![[1.0, 1.0], [3.0, 1.0], [3.0, 3.0], [1.0, 3.0]]);
        let mask = RegionMask::new(vec![poly]).unwrap();
        assert!(mask.contains([0.5, 0.5]));
        assert!(!mask.contains([2.0, 2.0]));
        assert!(mask.contains([1.0, 2.0]));
    }

    #[test]
    fn degenerate_and_self_intersecting_masks() {
        let bad = Polygon {
            outer: vec![[0.0, 0.0], [1.0, 1.0]],
            holes: vec![],
        };
        assert!(matches!(
            RegionMask::new(vec![bad]),
            Err(IngestError::DegeneratePolygon { index: 0, vertices: 2 })
        ));
        let bowtie = Polygon {
            outer: vec![[0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [0.0, 1.0]],
            holes: vec![],
        };
        assert!(matches!(
            RegionMask::new(vec![bowtie]),
            Err(IngestError::SelfIntersecting(0))
        ));
    }

    #[test]
    fn mask_json_forms() {
        let bare: Value = serde_json::from_str("[[[0,0],[1,0],[1,1],[0,1],[0,0]]]").unwrap();
        let m = RegionMask::from_json(&bare).unwrap();
        assert!(m.contains([0.5, 0.5]));
        let geo: Value = serde_json::from_str(
            r#"{"type":"FeatureCollection","features":[{"type":"Feature","geometry":
               {"type":"MultiPolygon","coordinates":[[[[0,0],[1,0],[1,1],[0,1]]],[[[5,5],[6,5],[6,6]]]]}}]}"#,
        )
        .unwrap();
        let m = RegionMask::from_json(&geo).unwrap();
        assert_eq!(m.polygons.len(), 2);
        assert!(m.contains([5.9, 5.1]));
        assert!(!m.contains([3.0, 3.0]));
    }

    /// Independent crossing-number test, written without the boundary rule.
    fn brute_inside_square(p: &[f64]) -> bool {
        (0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1])
    }

    #[test]
    fn filter_matches_brute_force_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows: Vec<Vec<f64>> = (0..100)
            .map(|_| vec![rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0)])
            .collect();
        let ps = PointSet::from_rows(&rows, Frame::Source).unwrap();
        let mask = RegionMask::new(vec![square(0.0, 1.0)]).unwrap();
        let expected = rows.iter().filter(|p| brute_inside_square(p)).count();
        let kept = filter_region(&ps, &mask);
        assert_eq!(kept.len(), expected);
        assert!(kept.ids().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn normalize_examples() {
        let bounds = DatasetBounds::new(vec![0.0, 0.0], vec![2.0, 4.0], Units::Meters).unwrap();
        let ps = PointSet::from_rows(&[vec![1.0, 2.0], vec![0.0, 0.0], vec![2.0, 4.0]], Frame::Source)
            .unwrap();
        let n = normalize(&ps, &bounds).unwrap();
        assert_eq!(n.point(0), &[0.0, 0.0]);
        assert_eq!(n.point(1), &[-1.0, -1.0]);
        assert_eq!(n.point(2), &[1.0, 1.0]);
        assert_eq!(n.frame(), Frame::Normalized);
    }

    #[test]
    fn normalize_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bounds =
            DatasetBounds::new(vec![-8.7, 41.1, -20.0], vec![-8.5, 41.3, 170.0], Units::Degrees)
                .unwrap();
        let rows: Vec<Vec<f64>> = (0..1000)
            .map(|_| {
                (0..3)
                    .map(|d| rng.gen_range(bounds.min[d]..=bounds.max[d]))
                    .collect()
            })
            .collect();
        let ps = PointSet::from_rows(&rows, Frame::Source).unwrap();
        let back = denormalize(&normalize(&ps, &bounds).unwrap(), &bounds).unwrap();
        let err = ps
            .coords()
            .iter()
            .zip(back.coords())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-9, "max error {err}");
    }

    #[test]
    fn zero_width_is_rejected() {
        assert!(matches!(
            DatasetBounds::new(vec![0.0, 1.0], vec![1.0, 1.0], Units::Meters),
            Err(IngestError::ZeroWidth(1))
        ));
        let ps = PointSet::from_rows(&[vec![1.0, 1.0], vec![2.0, 1.0]], Frame::Source).unwrap();
        assert!(DatasetBounds::from_points(&ps, Units::Meters).is_err());
    }

    #[test]
    fn full_batch_is_permutation() {
        let ps = PointSet::from_rows(
            &(0..10).map(|i| vec![i as f64, 0.0]).collect::<Vec<_>>(),
            Frame::Source,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = sample_batch(&ps, 10, &mut rng).unwrap();
        let mut ids = b.ids().to_vec();
        ids.sort_unstable();
        assert_eq!(ids, (0..10).collect::<Vec<u64>>());
        assert!(matches!(
            sample_batch(&ps, 11, &mut rng),
            Err(IngestError::BatchTooLarge { .. })
        ));
    }

    #[test]
    fn seeded_batch_is_deterministic() {
        let ps = PointSet::from_rows(
            &(0..50).map(|i| vec![i as f64, 1.0]).collect::<Vec<_>>(),
            Frame::Source,
        )
        .unwrap();
        let a = sample_batch(&ps, 1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_batch(&ps, 1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn inclusion_frequency_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut hits = [0usize; 10];
        let draws = 100_000;
        for _ in 0..draws {
            let pos = sample_positions(10, 2, &mut rng).unwrap();
            assert_ne!(pos[0], pos[1]);
            for p in pos {
                hits[p] += 1;
            }
        }
        for h in hits {
            let f = h as f64 / draws as f64;
            assert!((f - 0.2).abs() < 0.01, "frequency {f}");
        }
    }
}
