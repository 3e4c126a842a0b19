//! Trajectory sources, batching and splitting.

use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::thread::JoinHandle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{
    featurize, quantize_coord, GeoError, NormalizationParams, TrajPoint, Trajectory, FEATURE_DIM,
};
use crate::masking::MaskSpec;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error("invalid batch request: {0}")]
    Batch(String),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Record {
    id: String,
    points: Vec<(f64, f64, i64)>,
}

fn parse_line(line: &str) -> std::result::Result<Trajectory, String> {
    let rec: Record = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let points = rec
        .points
        .into_iter()
        .map(|(lat, lon, t)| TrajPoint::new(lat, lon, t))
        .collect::<std::result::Result<Vec<_>, GeoError>>()
        .map_err(|e| e.to_string())?;
    Trajectory::new(rec.id, points).map_err(|e| e.to_string())
}

/// A malformed input line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineWarning {
    pub line: usize,
    pub message: String,
}

const KEPT_WARNINGS: usize = 16;

/// Line-at-a-time JSONL reader; one trajectory in memory at a time.
///
/// Each record is `{"id": string, "points": [[lat, lon, t], ...]}`. Blank
/// lines are ignored; malformed ones are logged, counted and skipped.
pub struct TrajectoryStream<R> {
    reader: R,
    path: PathBuf,
    buf: String,
    line: usize,
    malformed: usize,
    warnings: Vec<LineWarning>,
    failed: bool,
}

impl<R: BufRead> TrajectoryStream<R> {
    pub fn new(reader: R, path: impl Into<PathBuf>) -> Self {
        Self {
            reader,
            path: path.into(),
            buf: String::new(),
            line: 0,
            malformed: 0,
            warnings: Vec::new(),
            failed: false,
        }
    }

    pub fn malformed(&self) -> usize {
        self.malformed
    }

    /// The first few malformed lines.
    pub fn warnings(&self) -> &[LineWarning] {
        &self.warnings
    }
}

impl<R: BufRead> Iterator for TrajectoryStream<R> {
    type Item = Result<Trajectory>;

    fn next(&mut self) -> Option<Self::Item> {
        while !self.failed {
            self.buf.clear();
            match self.reader.read_line(&mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(source) => {
                    self.failed = true;
                    return Some(Err(DataError::Io {
                        path: self.path.clone(),
                        source,
                    }));
                }
            }
            self.line += 1;
            let text = self.buf.trim();
            if text.is_empty() {
                continue;
            }
            match parse_line(text) {
                Ok(t) => return Some(Ok(t)),
                Err(message) => {
                    log::warn!(
                        "{}:{}: skipping malformed line: {message}",
                        self.path.display(),
                        self.line
                    );
                    self.malformed += 1;
                    if self.warnings.len() < KEPT_WARNINGS {
                        self.warnings.push(LineWarning {
                            line: self.line,
                            message,
                        });
                    }
                }
            }
        }
        None
    }
}

pub fn stream_jsonl(path: impl AsRef<Path>) -> Result<TrajectoryStream<BufReader<File>>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(TrajectoryStream::new(BufReader::new(file), path))
}

pub fn write_jsonl_to<'a>(
    mut out: impl Write,
    trajs: impl IntoIterator<Item = &'a Trajectory>,
) -> io::Result<usize> {
    let mut n = 0;
    for t in trajs {
        let rec = Record {
            id: t.id.clone(),
            points: t.points().iter().map(|p| (p.lat, p.lon, p.t)).collect(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
        n += 1;
    }
    out.flush()?;
    Ok(n)
}

pub fn write_jsonl<'a>(
    path: impl AsRef<Path>,
    trajs: impl IntoIterator<Item = &'a Trajectory>,
) -> Result<usize> {
    let path = path.as_ref();
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    write_jsonl_to(io::BufWriter::new(file), trajs).map_err(io_err)
}

/// Random piecewise-linear walks through uniformly drawn waypoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_traj: usize,
    pub points_per_traj: usize,
    pub n_waypoints: usize,
    /// Distance travelled per sample along the waypoint path, degrees.
    pub speed_min: f64,
    pub speed_max: f64,
    /// Standard deviation of positional noise, degrees.
    pub noise_sigma: f64,
    pub interval_mean_s: f64,
    pub interval_std_s: f64,
    /// `[lat_min, lat_max, lon_min, lon_max]`.
    pub bbox: [f64; 4],
    /// Earliest first timestamp; each trajectory starts up to a week later.
    pub start_time: i64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_traj: 100,
            points_per_traj: 32,
            n_waypoints: 4,
            speed_min: 1e-4,
            speed_max: 5e-4,
            noise_sigma: 1e-5,
            interval_mean_s: 60.0,
            interval_std_s: 5.0,
            bbox: [39.8, 40.0, 116.2, 116.5],
            start_time: 1_700_000_000,
            seed: 0,
        }
    }
}

const WEEK_S: i64 = 7 * 86_400;

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(DataError::Config(m.to_string()));
        let [lat0, lat1, lon0, lon1] = self.bbox;
        if self.n_traj == 0 || self.points_per_traj < 2 || self.n_waypoints < 2 {
            return fail("n_traj > 0, points_per_traj >= 2 and n_waypoints >= 2 required");
        }
        if !(self.speed_min > 0.0 && self.speed_min <= self.speed_max && self.speed_max.is_finite())
        {
            return fail("need 0 < speed_min <= speed_max");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail("noise_sigma must be finite and non-negative");
        }
        if !(self.interval_mean_s >= 1.0 && self.interval_std_s >= 0.0) {
            return fail("interval mean must be >= 1 s and std >= 0");
        }
        if !(lat0 < lat1 && lon0 < lon1) || self.start_time < 0 {
            return fail("bbox must be [lat_min, lat_max, lon_min, lon_max] with min < max");
        }
        // paths may overshoot the last waypoint; keep them inside valid coordinates
        let reach = self.speed_max * self.points_per_traj as f64 + 6.0 * self.noise_sigma;
        if lat0 - reach < -90.0
            || lat1 + reach > 90.0
            || lon0 - reach < -180.0
            || lon1 + reach > 180.0
        {
            return fail("bbox plus maximum path length leaves valid coordinates");
        }
        Ok(())
    }
}

/// Lazily generated corpus; every trajectory depends only on the config and its index.
pub struct SyntheticStream {
    cfg: SyntheticConfig,
    next: usize,
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticStream> {
    cfg.validate()?;
    Ok(SyntheticStream {
        cfg: cfg.clone(),
        next: 0,
    })
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Point at arc length `s` along `path`, continuing straight past the end.
fn along(path: &[(f64, f64)], cumulative: &[f64], s: f64) -> (f64, f64) {
    let last = path.len() - 2;
    let seg = (0..=last).find(|&i| s <= cumulative[i + 1]).unwrap_or(last);
    let ((a0, b0), (a1, b1)) = (path[seg], path[seg + 1]);
    let len = cumulative[seg + 1] - cumulative[seg];
    let f = if len > 0.0 {
        (s - cumulative[seg]) / len
    } else {
        0.0
    };
    (a0 + f * (a1 - a0), b0 + f * (b1 - b0))
}

impl SyntheticStream {
    fn make(&self, index: usize) -> Trajectory {
        let c = &self.cfg;
        let mut rng = stream_rng(c.seed, 2 * index as u64);
        let mut noise_rng = stream_rng(c.seed, 2 * index as u64 + 1);
        let [lat0, lat1, lon0, lon1] = c.bbox;
        let mut path: Vec<(f64, f64)> = (0..c.n_waypoints)
            .map(|_| (rng.random_range(lat0..=lat1), rng.random_range(lon0..=lon1)))
            .collect();
        if path.windows(2).all(|w| w[0] == w[1]) {
            path[1].0 += c.speed_min;
        }
        let mut cumulative = vec![0.0];
        for w in path.windows(2) {
            let d = ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt();
            cumulative.push(cumulative.last().copied().unwrap_or(0.0) + d);
        }
        let speed = if c.speed_min < c.speed_max {
            rng.random_range(c.speed_min..=c.speed_max)
        } else {
            c.speed_min
        };
        let interval =
            Normal::new(c.interval_mean_s, c.interval_std_s).expect("validated interval");
        let noise = Normal::new(0.0, c.noise_sigma).expect("validated noise");
        let mut t = c.start_time + rng.random_range(0..WEEK_S);
        let mut points = Vec::with_capacity(c.points_per_traj);
        for i in 0..c.points_per_traj {
            if i > 0 {
                t += (interval.sample(&mut rng).round() as i64).max(1);
            }
            let (lat, lon) = along(&path, &cumulative, speed * i as f64);
            let (lat, lon) = if c.noise_sigma > 0.0 {
                (
                    lat + noise.sample(&mut noise_rng),
                    lon + noise.sample(&mut noise_rng),
                )
            } else {
                (lat, lon)
            };
            points.push(TrajPoint {
                lat: quantize_coord(lat),
                lon: quantize_coord(lon),
                t,
            });
        }
        Trajectory::new(format!("synth-{}-{index:06}", c.seed), points)
            .expect("generator keeps invariants")
    }
}

impl Iterator for SyntheticStream {
    type Item = Trajectory;

    fn next(&mut self) -> Option<Trajectory> {
        if self.next >= self.cfg.n_traj {
            return None;
        }
        self.next += 1;
        Some(self.make(self.next - 1))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.cfg.n_traj - self.next;
        (left, Some(left))
    }
}

/// Padded, model-ready group of trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[B, S_max, FEATURE_DIM]`, zero on padding.
    pub features: Tensor<f64>,
    /// `[B, S_max, 3]`, zero on padding and on each last valid row.
    pub targets: Tensor<f64>,
    /// Valid points per row; padding is the suffix beyond this.
    pub lengths: Vec<usize>,
    /// Trajectories as fed to the model (after truncation).
    pub trajectories: Vec<Trajectory>,
    pub mask_specs: Vec<Option<MaskSpec>>,
}

impl Batch {
    pub fn from_trajectories(
        trajs: Vec<Trajectory>,
        s_max: usize,
        params: &NormalizationParams,
    ) -> Result<Self> {
        if trajs.is_empty() || s_max < 2 {
            return Err(DataError::Batch(format!(
                "{} trajectories with s_max {s_max}",
                trajs.len()
            )));
        }
        let b = trajs.len();
        let mut features = vec![0.0; b * s_max * FEATURE_DIM];
        let mut targets = vec![0.0; b * s_max * 3];
        let mut lengths = Vec::with_capacity(b);
        let mut kept = Vec::with_capacity(b);
        for (i, t) in trajs.into_iter().enumerate() {
            let t = if t.len() > s_max {
                t.prefix(s_max).expect("s_max >= 2")
            } else {
                t
            };
            let f = featurize(&t, params);
            let n = t.len();
            let fo = i * s_max * FEATURE_DIM;
            features[fo..fo + n * FEATURE_DIM].copy_from_slice(f.features.data());
            let to = i * s_max * 3;
            targets[to..to + n * 3].copy_from_slice(f.targets.data());
            lengths.push(n);
            kept.push(t);
        }
        Ok(Self {
            features: Tensor::new(vec![b, s_max, FEATURE_DIM], features).expect("batch shape"),
            targets: Tensor::new(vec![b, s_max, 3], targets).expect("batch shape"),
            lengths,
            trajectories: kept,
            mask_specs: vec![None; b],
        })
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn s_max(&self) -> usize {
        self.features.shape()[1]
    }

    /// `[B·S_max]` flags, `true` on valid points.
    pub fn pad_mask(&self) -> Vec<bool> {
        let s = self.s_max();
        self.lengths
            .iter()
            .flat_map(|&n| (0..s).map(move |j| j < n))
            .collect()
    }

    /// Features of row `i` as `[S_max, FEATURE_DIM]`.
    pub fn row_features(&self, i: usize) -> Tensor<f64> {
        let w = self.s_max() * FEATURE_DIM;
        Tensor::new(
            vec![self.s_max(), FEATURE_DIM],
            self.features.data()[i * w..(i + 1) * w].to_vec(),
        )
        .expect("row shape")
    }

    /// Targets of row `i` as `[S_max, 3]`.
    pub fn row_targets(&self, i: usize) -> Tensor<f64> {
        let w = self.s_max() * 3;
        Tensor::new(
            vec![self.s_max(), 3],
            self.targets.data()[i * w..(i + 1) * w].to_vec(),
        )
        .expect("row shape")
    }
}

/// Groups a trajectory stream into batches of `batch_size` (last one may be smaller).
pub struct Batcher<I> {
    inner: I,
    batch_size: usize,
    s_max: usize,
    params: NormalizationParams,
    done: bool,
}

pub fn batchify<I>(
    trajs: I,
    batch_size: usize,
    s_max: usize,
    params: NormalizationParams,
) -> Result<Batcher<I::IntoIter>>
where
    I: IntoIterator<Item = Result<Trajectory>>,
{
    if batch_size == 0 || s_max < 2 {
        return Err(DataError::Batch(format!(
            "batch_size {batch_size}, s_max {s_max}"
        )));
    }
    Ok(Batcher {
        inner: trajs.into_iter(),
        batch_size,
        s_max,
        params,
        done: false,
    })
}

impl<I: Iterator<Item = Result<Trajectory>>> Iterator for Batcher<I> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Result<Batch>> {
        if self.done {
            return None;
        }
        let mut group = Vec::with_capacity(self.batch_size);
        while group.len() < self.batch_size {
            match self.inner.next() {
                Some(Ok(t)) => group.push(t),
                Some(Err(e)) => {
                    self.done = true;
                    return Some(Err(e));
                }
                None => {
                    self.done = true;
                    break;
                }
            }
        }
        if group.is_empty() {
            return None;
        }
        Some(Batch::from_trajectories(group, self.s_max, &self.params))
    }
}

/// Stable 64-bit hash of an id under a seed.
pub fn id_hash(id: &str, seed: u64) -> u64 {
    // FNV-1a followed by a splitmix finalizer
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(id.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

fn id_unit(id: &str, seed: u64) -> f64 {
    (id_hash(id, seed) >> 11) as f64 / (1u64 << 53) as f64
}

pub fn is_validation(id: &str, val_fraction: f64, seed: u64) -> bool {
    id_unit(id, seed) < val_fraction
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
}

/// Keeps the trajectories assigned to `which`; errors pass through.
pub fn split_stream<I>(
    trajs: I,
    which: Split,
    val_fraction: f64,
    seed: u64,
) -> impl Iterator<Item = Result<Trajectory>>
where
    I: IntoIterator<Item = Result<Trajectory>>,
{
    trajs.into_iter().filter(move |r| match r {
        Ok(t) => is_validation(&t.id, val_fraction, seed) == (which == Split::Validation),
        Err(_) => true,
    })
}

/// In-memory `(train, validation)` partition.
pub fn split(
    trajs: impl IntoIterator<Item = Trajectory>,
    val_fraction: f64,
    seed: u64,
) -> (Vec<Trajectory>, Vec<Trajectory>) {
    trajs
        .into_iter()
        .partition(|t| !is_validation(&t.id, val_fraction, seed))
}

/// Items of `iter` produced ahead by one worker thread through a bounded queue.
pub struct Prefetch<T> {
    rx: Option<Receiver<T>>,
    worker: Option<JoinHandle<()>>,
}

pub fn prefetch<I>(iter: I, depth: usize) -> Prefetch<I::Item>
where
    I: Iterator + Send + 'static,
    I::Item: Send + 'static,
{
    let (tx, rx) = sync_channel(depth.max(1));
    let worker = std::thread::spawn(move || {
        for item in iter {
            if tx.send(item).is_err() {
                break;
            }
        }
    });
    Prefetch {
        rx: Some(rx),
        worker: Some(worker),
    }
}

impl<T> Iterator for Prefetch<T> {
    type Item = T;

    fn next(&mut self) -> Option<T> {
        self.rx.as_ref()?.recv().ok()
    }
}

impl<T> Drop for Prefetch<T> {
    fn drop(&mut self) {
        self.rx.take();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}
