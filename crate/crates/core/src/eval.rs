//! Displacement metrics, autoregressive rollout and evaluation drivers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::AttentionMode;
use crate::data::{id_hash, Batch, DataError};
use crate::geo::{quantize_coord, Delta, NormalizationParams, TrajPoint, Trajectory, FEATURE_DIM};
use crate::masking::{apply_mask, sample_dimension_mask, MaskError, MaskedDims};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};
use crate::transformer::TrajectoryModel;

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset normalization {dataset:?} differs from the checkpoint's {model:?}")]
    Normalization {
        model: NormalizationParams,
        dataset: NormalizationParams,
    },
    #[error("rollout needs a causal model")]
    NotCausal,
    #[error("rollout of {needed} points exceeds the model budget of {budget}")]
    Horizon { needed: usize, budget: usize },
    #[error("rollout prefix needs at least 2 points, got {0}")]
    ShortPrefix(usize),
    #[error("infill evaluation requires patch_len = 1")]
    PatchedInfill,
    #[error("nothing to evaluate")]
    Empty,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Great-circle distance in meters between `(lat, lon)` pairs in degrees.
pub fn haversine(p: (f64, f64), q: (f64, f64)) -> f64 {
    let (phi1, phi2) = (p.0.to_radians(), q.0.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (q.1 - p.1).to_radians();
    let a = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * a.sqrt().min(1.0).asin()
}

fn point_distance(a: &TrajPoint, b: &TrajPoint) -> f64 {
    haversine((a.lat, a.lon), (b.lat, b.lon))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ade_m: f64,
    pub fde_m: f64,
    pub time_mae_s: f64,
    pub n_points: usize,
    pub n_traj: usize,
    pub objective: String,
}

pub const CSV_HEADER: &str = "ade_m,fde_m,time_mae_s,n_points,n_traj,objective";

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.ade_m, self.fde_m, self.time_mae_s, self.n_points, self.n_traj, self.objective
        )
    }

    /// Header line plus the single data row.
    pub fn to_csv(&self) -> String {
        format!("{CSV_HEADER}\n{}\n", self.to_csv_row())
    }
}

/// `(point index, normalized step prediction)` pairs for one batch row.
pub type RowPredictions = Vec<(usize, [f64; 3])>;

/// Anything that predicts normalized `(Δlat, Δlon, Δt)` steps for a batch.
pub trait Predictor {
    fn normalization(&self) -> NormalizationParams;

    fn is_causal(&self) -> bool;

    /// Longest trajectory a single forward pass accepts.
    fn point_budget(&self) -> usize;

    /// Per batch row, `(point index, prediction of the step leaving it)`.
    /// Masked features are used where `batch.mask_specs` is set.
    fn predict_rows(&self, batch: &Batch) -> Result<Vec<RowPredictions>>;
}

/// A trained model paired with the normalization it was trained under.
pub struct ModelPredictor<'a, T> {
    pub model: &'a TrajectoryModel<T>,
    pub normalization: NormalizationParams,
}

impl<T: Scalar> Predictor for ModelPredictor<'_, T> {
    fn normalization(&self) -> NormalizationParams {
        self.normalization
    }

    fn is_causal(&self) -> bool {
        self.model.config().attention == AttentionMode::Causal
    }

    fn point_budget(&self) -> usize {
        self.model.config().max_seq * self.model.config().patch_len
    }

    fn predict_rows(&self, batch: &Batch) -> Result<Vec<RowPredictions>> {
        let s = batch.s_max();
        let mut features = Vec::with_capacity(batch.features.len());
        for i in 0..batch.len() {
            let mut row = batch.row_features(i).cast::<T>();
            if let Some(spec) = &batch.mask_specs[i] {
                if self.model.config().patch_len != 1 {
                    return Err(EvalError::PatchedInfill);
                }
                row = apply_mask(&row, spec, &self.model.params().mask)?;
            }
            features.extend_from_slice(row.data());
        }
        let x = Tensor::new(vec![batch.len(), s, FEATURE_DIM], features)?;
        let y = self.model.predict(&x, &batch.lengths)?;
        let positions = y.shape()[1];
        Ok(batch
            .lengths
            .iter()
            .enumerate()
            .map(|(i, &len)| {
                self.model
                    .predicted_rows(len)
                    .into_iter()
                    .enumerate()
                    .map(|(p, r)| {
                        let o = (i * positions + p) * 3;
                        let d = &y.data()[o..o + 3];
                        (
                            r,
                            [
                                d[0].to_f64_lossy(),
                                d[1].to_f64_lossy(),
                                d[2].to_f64_lossy(),
                            ],
                        )
                    })
                    .collect()
            })
            .collect())
    }
}

/// Returns the batch targets as predictions; its next-step errors are zero.
pub struct TargetOracle {
    pub normalization: NormalizationParams,
}

impl Predictor for TargetOracle {
    fn normalization(&self) -> NormalizationParams {
        self.normalization
    }

    fn is_causal(&self) -> bool {
        true
    }

    fn point_budget(&self) -> usize {
        usize::MAX
    }

    fn predict_rows(&self, batch: &Batch) -> Result<Vec<RowPredictions>> {
        Ok((0..batch.len())
            .map(|i| {
                let t = batch.row_targets(i);
                (0..batch.lengths[i])
                    .map(|r| (r, [t.get(&[r, 0]), t.get(&[r, 1]), t.get(&[r, 2])]))
                    .collect()
            })
            .collect())
    }
}

/// Applies a normalized prediction to `from`: Δt rounded and floored at one
/// second, coordinates clamped to valid ranges and snapped to the grid.
pub fn apply_prediction(from: &TrajPoint, pred: [f64; 3], norm: &NormalizationParams) -> TrajPoint {
    let (dlat, dlon, dt) = norm.denormalize_delta(pred);
    let dt = if dt.is_finite() {
        (dt.round() as i64).max(1)
    } else {
        1
    };
    let d = Delta {
        dlat: if dlat.is_finite() { dlat } else { 0.0 },
        dlon: if dlon.is_finite() { dlon } else { 0.0 },
        dt,
    };
    TrajPoint {
        lat: quantize_coord((from.lat + d.dlat).clamp(-90.0, 90.0)),
        lon: quantize_coord((from.lon + d.dlon).clamp(-180.0, 180.0)),
        t: from.t + d.dt,
    }
}

/// Extends `prefix` by `horizon` predicted points, feeding each back in.
pub fn rollout<P: Predictor + ?Sized>(
    model: &P,
    prefix: &Trajectory,
    horizon: usize,
) -> Result<Vec<TrajPoint>> {
    if prefix.len() < 2 {
        return Err(EvalError::ShortPrefix(prefix.len()));
    }
    if horizon == 0 {
        return Ok(Vec::new());
    }
    if !model.is_causal() {
        return Err(EvalError::NotCausal);
    }
    let needed = prefix.len() + horizon - 1;
    if needed > model.point_budget() {
        return Err(EvalError::Horizon {
            needed,
            budget: model.point_budget(),
        });
    }
    let norm = model.normalization();
    let mut points = prefix.points().to_vec();
    for _ in 0..horizon {
        let running = Trajectory::new(prefix.id.clone(), points.clone())
            .expect("rollout keeps time increasing");
        let len = running.len();
        let batch = Batch::from_trajectories(vec![running], len, &norm)?;
        let rows = model.predict_rows(&batch)?;
        let pred = rows[0]
            .iter()
            .find(|&&(r, _)| r == len - 1)
            .map(|&(_, p)| p)
            .unwrap_or([0.0; 3]);
        let next = apply_prediction(&points[len - 1], pred, &norm);
        points.push(next);
    }
    Ok(points.split_off(prefix.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum EvalMode {
    NextStep,
    /// Dimension masks drawn per trajectory from `(seed, id)`.
    Infill {
        ratio: f64,
        seed: u64,
    },
    Rollout {
        horizon: usize,
    },
}

impl EvalMode {
    pub fn name(&self) -> String {
        match self {
            EvalMode::NextStep => "next_step".into(),
            EvalMode::Infill { .. } => "infill".into(),
            EvalMode::Rollout { horizon } => format!("rollout_{horizon}"),
        }
    }
}

/// Per-trajectory error sums, reduced in trajectory order.
#[derive(Debug, Default)]
struct Accumulator {
    dist_sum: f64,
    dist_n: usize,
    final_sum: f64,
    final_n: usize,
    time_sum: f64,
    time_n: usize,
    points: usize,
    trajs: usize,
}

impl Accumulator {
    fn add(&mut self, dists: &[f64], times: &[f64], points: usize) {
        if points == 0 {
            return;
        }
        self.trajs += 1;
        self.points += points;
        self.dist_sum += dists.iter().sum::<f64>();
        self.dist_n += dists.len();
        if let Some(&last) = dists.last() {
            self.final_sum += last;
            self.final_n += 1;
        }
        self.time_sum += times.iter().sum::<f64>();
        self.time_n += times.len();
    }

    fn report(&self, objective: String) -> Result<MetricsReport> {
        if self.points == 0 {
            return Err(EvalError::Empty);
        }
        let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
        Ok(MetricsReport {
            ade_m: mean(self.dist_sum, self.dist_n),
            fde_m: mean(self.final_sum, self.final_n),
            time_mae_s: mean(self.time_sum, self.time_n),
            n_points: self.points,
            n_traj: self.trajs,
            objective,
        })
    }
}

/// Mask used by infill evaluation for one trajectory.
pub fn infill_eval_mask(
    id: &str,
    valid_len: usize,
    ratio: f64,
    seed: u64,
) -> Result<crate::masking::MaskSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(id_hash(id, seed));
    Ok(sample_dimension_mask(
        valid_len.saturating_sub(1),
        ratio,
        &mut rng,
    )?)
}

/// Runs `mode` over every trajectory in `batches`.
///
/// Batches must have been built with `dataset_norm`, which has to equal the
/// predictor's normalization.
pub fn evaluate<P: Predictor + ?Sized>(
    model: &P,
    batches: impl IntoIterator<Item = Result<Batch, DataError>>,
    dataset_norm: &NormalizationParams,
    mode: EvalMode,
) -> Result<MetricsReport> {
    if model.normalization() != *dataset_norm {
        return Err(EvalError::Normalization {
            model: model.normalization(),
            dataset: *dataset_norm,
        });
    }
    let norm = *dataset_norm;
    let mut acc = Accumulator::default();
    for batch in batches {
        let mut batch = batch?;
        match mode {
            EvalMode::NextStep | EvalMode::Infill { .. } => {
                if let EvalMode::Infill { ratio, seed } = mode {
                    for i in 0..batch.len() {
                        let spec = infill_eval_mask(
                            &batch.trajectories[i].id,
                            batch.lengths[i],
                            ratio,
                            seed,
                        )?;
                        batch.mask_specs[i] = Some(spec);
                    }
                }
                let rows = model.predict_rows(&batch)?;
                for (i, preds) in rows.iter().enumerate() {
                    let pts = batch.trajectories[i].points();
                    let (mut dists, mut times, mut points) = (Vec::new(), Vec::new(), 0);
                    for &(r, pred) in preds {
                        if r + 1 >= pts.len() {
                            continue;
                        }
                        let dims = match &batch.mask_specs[i] {
                            Some(spec) => match spec.dims_at(r) {
                                Some(d) => d,
                                None => continue,
                            },
                            None => MaskedDims::BOTH,
                        };
                        let guess = apply_prediction(&pts[r], pred, &norm);
                        points += 1;
                        if dims.spatial {
                            dists.push(point_distance(&guess, &pts[r + 1]));
                        }
                        if dims.temporal {
                            times.push((guess.t - pts[r + 1].t).abs() as f64);
                        }
                    }
                    acc.add(&dists, &times, points);
                }
            }
            EvalMode::Rollout { horizon } => {
                for traj in &batch.trajectories {
                    if horizon == 0 || traj.len() < horizon + 2 {
                        continue;
                    }
                    let cut = traj.len() - horizon;
                    let prefix = traj.prefix(cut).expect("prefix has at least 2 points");
                    let predicted = rollout(model, &prefix, horizon)?;
                    let truth = &traj.points()[cut..];
                    let dists: Vec<f64> = predicted
                        .iter()
                        .zip(truth)
                        .map(|(a, b)| point_distance(a, b))
                        .collect();
                    let times: Vec<f64> = predicted
                        .iter()
                        .zip(truth)
                        .map(|(a, b)| (a.t - b.t).abs() as f64)
                        .collect();
                    acc.add(&dists, &times, horizon);
                }
            }
        }
    }
    acc.report(mode.name())
}
