//! GPS points to model features and back.
//!
//! Coordinates are z-scored around the corpus center, timestamps are split
//! into UTC calendar fields, and prediction targets are per-step deltas.
//! Everything here is plain `f64`; the model converts at its boundary.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Width of the per-point feature vector produced by [`featurize`].
pub const FEATURE_DIM: usize = 7;
/// Columns of the feature vector holding normalized position (x, y).
pub const SPATIAL_COLS: std::ops::Range<usize> = 0..2;
/// Columns holding the calendar fields and the Δt feature.
pub const TEMPORAL_COLS: std::ops::Range<usize> = 2..7;
/// Column of the normalized Δt-to-previous-point feature.
pub const DT_COL: usize = 6;
/// Default divisor turning Δt seconds into model units.
pub const DEFAULT_DT_SCALE_S: f64 = 60.0;

const MIN_SCALE: f64 = 1e-6;
const COORD_GRID: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeoError {
    #[error("latitude {0} outside [-90, 90]")]
    Latitude(f64),
    #[error("longitude {0} outside [-180, 180]")]
    Longitude(f64),
    #[error("negative timestamp {0}")]
    NegativeTime(i64),
    #[error("trajectory needs at least 2 points, got {0}")]
    TooShort(usize),
    #[error("timestamps not strictly increasing at index {index}")]
    NonMonotoneTime { index: usize },
    #[error("non-positive time delta at index {index}")]
    NonPositiveDelta { index: usize },
    #[error("no points to fit normalization on")]
    Empty,
    #[error("normalization scales must be positive")]
    BadScale,
}

pub type Result<T, E = GeoError> = std::result::Result<T, E>;

/// One GPS fix: degrees and integer unix seconds (UTC).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajPoint {
    pub lat: f64,
    pub lon: f64,
    pub t: i64,
}

impl TrajPoint {
    pub fn new(lat: f64, lon: f64, t: i64) -> Result<Self> {
        let p = Self { lat, lon, t };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(-90.0..=90.0).contains(&self.lat) {
            return Err(GeoError::Latitude(self.lat));
        }
        if !(-180.0..=180.0).contains(&self.lon) {
            return Err(GeoError::Longitude(self.lon));
        }
        if self.t < 0 {
            return Err(GeoError::NegativeTime(self.t));
        }
        Ok(())
    }
}

/// An identified, time-ordered sequence of at least two points.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: String,
    points: Vec<TrajPoint>,
}

impl Trajectory {
    pub fn new(id: impl Into<String>, points: Vec<TrajPoint>) -> Result<Self> {
        if points.len() < 2 {
            return Err(GeoError::TooShort(points.len()));
        }
        for p in &points {
            p.validate()?;
        }
        check_monotone(&points)?;
        Ok(Self {
            id: id.into(),
            points,
        })
    }

    pub fn points(&self) -> &[TrajPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn into_points(self) -> Vec<TrajPoint> {
        self.points
    }

    /// First `n` points (at least 2) as a new trajectory with the same id.
    pub fn prefix(&self, n: usize) -> Result<Self> {
        Self::new(self.id.clone(), self.points[..n.min(self.len())].to_vec())
    }

    pub fn delta_encode(&self) -> DeltaSequence {
        delta_encode(&self.points).expect("validated trajectory")
    }
}

fn check_monotone(points: &[TrajPoint]) -> Result<()> {
    match points.windows(2).position(|w| w[1].t <= w[0].t) {
        Some(i) => Err(GeoError::NonMonotoneTime { index: i + 1 }),
        None => Ok(()),
    }
}

/// Center and per-axis spread used to z-score coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub center_lat: f64,
    pub center_lon: f64,
    /// Degrees per normalized unit.
    pub scale_lat: f64,
    pub scale_lon: f64,
    /// Seconds per normalized Δt unit.
    #[serde(default = "default_dt_scale")]
    pub dt_scale_s: f64,
}

fn default_dt_scale() -> f64 {
    DEFAULT_DT_SCALE_S
}

impl NormalizationParams {
    pub fn new(center_lat: f64, center_lon: f64, scale_lat: f64, scale_lon: f64) -> Result<Self> {
        let p = Self {
            center_lat,
            center_lon,
            scale_lat,
            scale_lon,
            dt_scale_s: DEFAULT_DT_SCALE_S,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |s: f64| s.is_finite() && s > 0.0;
        if ok(self.scale_lat) && ok(self.scale_lon) && ok(self.dt_scale_s) {
            Ok(())
        } else {
            Err(GeoError::BadScale)
        }
    }

    /// `(x, y)` = (normalized longitude, normalized latitude).
    pub fn normalize(&self, p: &TrajPoint) -> (f64, f64) {
        (
            (p.lon - self.center_lon) / self.scale_lon,
            (p.lat - self.center_lat) / self.scale_lat,
        )
    }

    /// Inverse of [`normalize`](Self::normalize): returns `(lat, lon)`.
    pub fn denormalize(&self, x: f64, y: f64) -> (f64, f64) {
        (
            y * self.scale_lat + self.center_lat,
            x * self.scale_lon + self.center_lon,
        )
    }

    /// Degree/second deltas to model units, ordered `(Δlat, Δlon, Δt)`.
    pub fn normalize_delta(&self, d: &Delta) -> [f64; 3] {
        [
            d.dlat / self.scale_lat,
            d.dlon / self.scale_lon,
            d.dt as f64 / self.dt_scale_s,
        ]
    }

    /// Model-unit prediction back to degrees; Δt stays fractional seconds.
    pub fn denormalize_delta(&self, pred: [f64; 3]) -> (f64, f64, f64) {
        (
            pred[0] * self.scale_lat,
            pred[1] * self.scale_lon,
            pred[2] * self.dt_scale_s,
        )
    }
}

/// Streaming mean/variance accumulator over coordinates (Welford).
#[derive(Debug, Clone, Default)]
pub struct CenterAccumulator {
    n: u64,
    mean: [f64; 2],
    m2: [f64; 2],
}

impl CenterAccumulator {
    pub fn push(&mut self, p: &TrajPoint) {
        self.n += 1;
        let n = self.n as f64;
        for (axis, v) in [p.lat, p.lon].into_iter().enumerate() {
            let d = v - self.mean[axis];
            self.mean[axis] += d / n;
            self.m2[axis] += d * (v - self.mean[axis]);
        }
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    /// Mean center and population standard deviation, floored at 1e-6.
    pub fn finish(&self) -> Result<NormalizationParams> {
        if self.n == 0 {
            return Err(GeoError::Empty);
        }
        let std = |axis: usize| (self.m2[axis] / self.n as f64).sqrt().max(MIN_SCALE);
        NormalizationParams::new(self.mean[0], self.mean[1], std(0), std(1))
    }
}

/// Fits [`NormalizationParams`] over every point of `trajs`.
pub fn compute_center<'a>(
    trajs: impl IntoIterator<Item = &'a Trajectory>,
) -> Result<NormalizationParams> {
    let mut acc = CenterAccumulator::default();
    for t in trajs {
        t.points().iter().for_each(|p| acc.push(p));
    }
    acc.finish()
}

/// UTC calendar fields of a timestamp. `dow` is 0 for Monday.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CalendarTime {
    pub dow: u8,
    pub hod: u8,
    pub moh: u8,
    pub soh: u8,
}

impl CalendarTime {
    /// Each field divided by its period, so all values lie in [0, 1).
    pub fn scaled(&self) -> [f64; 4] {
        [
            f64::from(self.dow) / 7.0,
            f64::from(self.hod) / 24.0,
            f64::from(self.moh) / 60.0,
            f64::from(self.soh) / 60.0,
        ]
    }
}

pub fn decompose_time(t: i64) -> CalendarTime {
    let days = t.div_euclid(86_400);
    let secs = t.rem_euclid(86_400);
    CalendarTime {
        // 1970-01-01 was a Thursday
        dow: (days + 3).rem_euclid(7) as u8,
        hod: (secs / 3600) as u8,
        moh: (secs % 3600 / 60) as u8,
        soh: (secs % 60) as u8,
    }
}

/// Snaps a coordinate to the 1e-12 degree grid.
pub fn quantize_coord(x: f64) -> f64 {
    (x * COORD_GRID).round() / COORD_GRID
}

/// Change between consecutive points: degrees and whole seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Delta {
    pub dlat: f64,
    pub dlon: f64,
    pub dt: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaSequence {
    /// Absolute first point.
    pub origin: TrajPoint,
    pub deltas: Vec<Delta>,
}

pub fn delta_encode(points: &[TrajPoint]) -> Result<DeltaSequence> {
    if points.len() < 2 {
        return Err(GeoError::TooShort(points.len()));
    }
    check_monotone(points)?;
    let deltas = points
        .windows(2)
        .map(|w| Delta {
            dlat: w[1].lat - w[0].lat,
            dlon: w[1].lon - w[0].lon,
            dt: w[1].t - w[0].t,
        })
        .collect();
    Ok(DeltaSequence {
        origin: points[0],
        deltas,
    })
}

/// Applies one delta to a point, snapping the result to the coordinate grid.
///
/// For grid-aligned inputs this exactly inverts the subtraction done by
/// [`delta_encode`].
pub fn step(from: &TrajPoint, d: &Delta) -> TrajPoint {
    TrajPoint {
        lat: quantize_coord(from.lat + d.dlat),
        lon: quantize_coord(from.lon + d.dlon),
        t: from.t + d.dt,
    }
}

/// Cumulative sum from the origin.
pub fn delta_decode(ds: &DeltaSequence, id: impl Into<String>) -> Result<Trajectory> {
    let mut points = Vec::with_capacity(ds.deltas.len() + 1);
    points.push(ds.origin);
    for (i, d) in ds.deltas.iter().enumerate() {
        if d.dt <= 0 {
            return Err(GeoError::NonPositiveDelta { index: i });
        }
        let next = step(points.last().expect("origin pushed"), d);
        points.push(next);
    }
    Trajectory::new(id, points)
}

/// Model-ready view of one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Featurized {
    /// `[S, FEATURE_DIM]`.
    pub features: Tensor<f64>,
    /// `[S, 3]` normalized delta to the successor point; zero on the last row.
    pub targets: Tensor<f64>,
    pub deltas: DeltaSequence,
}

/// Per-point feature row: `[x, y, dow, hod, moh, soh, Δt]` with calendar
/// fields scaled to [0, 1) and Δt (to the previous point) in model units.
pub fn point_features(
    p: &TrajPoint,
    prev_t: Option<i64>,
    params: &NormalizationParams,
) -> [f64; FEATURE_DIM] {
    let (x, y) = params.normalize(p);
    let [dow, hod, moh, soh] = decompose_time(p.t).scaled();
    let dt = prev_t.map_or(0.0, |pt| (p.t - pt) as f64 / params.dt_scale_s);
    [x, y, dow, hod, moh, soh, dt]
}

pub fn featurize(traj: &Trajectory, params: &NormalizationParams) -> Featurized {
    let pts = traj.points();
    let s = pts.len();
    let mut features = Vec::with_capacity(s * FEATURE_DIM);
    for (i, p) in pts.iter().enumerate() {
        let prev = i.checked_sub(1).map(|j| pts[j].t);
        features.extend_from_slice(&point_features(p, prev, params));
    }
    let deltas = traj.delta_encode();
    let mut targets = vec![0.0; s * 3];
    for (i, d) in deltas.deltas.iter().enumerate() {
        targets[i * 3..i * 3 + 3].copy_from_slice(&params.normalize_delta(d));
    }
    Featurized {
        features: Tensor::new(vec![s, FEATURE_DIM], features).expect("feature shape"),
        targets: Tensor::new(vec![s, 3], targets).expect("target shape"),
        deltas,
    }
}
