//! Loss, optimizer and the training loop.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ModelConfig, OUT_DIM};
use crate::data::{Batch, DataError};
use crate::embedding::positional_encoding;
use crate::geo::NormalizationParams;
use crate::masking::{
    apply_mask_var, build_loss_mask, sample_dimension_mask, sample_segment_mask, LossMode,
    MaskError, MaskSpec, DEFAULT_MASK_RATIO,
};
use crate::params::ModelParams;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::transformer::TrajectoryModel;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at batch {batch} (epoch {epoch}, step {step})")]
    NonFinite {
        batch: usize,
        epoch: usize,
        step: u64,
    },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    NextStep,
    Infill,
    /// Next-step and infill batches interleaved 1:1.
    Alternating,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::NextStep => "next_step",
            Objective::Infill => "infill",
            Objective::Alternating => "alternating",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LossKind {
    #[default]
    Mse,
    Huber {
        delta: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub epochs: usize,
    /// Stop after this many optimizer steps in total.
    pub max_steps: Option<u64>,
    pub batch_size: usize,
    /// Points per sequence after truncation.
    pub s_max: usize,
    pub objective: Objective,
    pub mask_ratio: f64,
    pub loss: LossKind,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            epochs: 10,
            max_steps: None,
            batch_size: 16,
            s_max: 64,
            objective: Objective::NextStep,
            mask_ratio: DEFAULT_MASK_RATIO,
            loss: LossKind::Mse,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail("lr must be finite and non-negative");
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return fail("betas must lie in (0, 1)");
        }
        if !(self.eps > 0.0 && self.clip_norm > 0.0) {
            return fail("eps and clip_norm must be positive");
        }
        if self.batch_size == 0 || self.s_max < 2 {
            return fail("batch_size >= 1 and s_max >= 2 required");
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return fail("mask_ratio must lie in (0, 1)");
        }
        if !(self.val_fraction >= 0.0 && self.val_fraction < 1.0) {
            return fail("val_fraction must lie in [0, 1)");
        }
        if let LossKind::Huber { delta } = self.loss {
            if !(delta > 0.0) {
                return fail("huber delta must be positive");
            }
        }
        Ok(())
    }
}

/// Scalar loss and how many entries it averages over.
#[derive(Debug, Clone, Copy)]
pub struct LossValue<'t, T: Scalar> {
    pub value: Var<'t, T>,
    pub supervised: usize,
}

impl<T: Scalar> LossValue<'_, T> {
    /// `true` when no entry carried weight, in which case the loss is 0.
    pub fn is_empty(&self) -> bool {
        self.supervised == 0
    }
}

/// Weighted mean of per-entry MSE or Huber over entries with positive weight.
///
/// Residuals of zero-weight entries are replaced by zero before squaring, so
/// their targets cannot influence either the value or the gradient.
pub fn loss<'t, T: Scalar>(
    pred: Var<'t, T>,
    targets: &Tensor<T>,
    weights: &Tensor<T>,
    kind: LossKind,
) -> Result<LossValue<'t, T>> {
    if pred.shape() != targets.shape() || targets.shape() != weights.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "loss",
            left: pred.shape(),
            right: weights.shape().to_vec(),
        }
        .into());
    }
    let tape = pred.tape();
    let keep: Rc<[bool]> = weights.data().iter().map(|&w| w > T::zero()).collect();
    let supervised = keep.iter().filter(|&&k| k).count();
    if supervised == 0 {
        log::warn!("loss over a batch with no supervised entries");
        return Ok(LossValue {
            value: tape.constant(Tensor::scalar(T::zero())),
            supervised,
        });
    }
    let zeros = tape.constant(Tensor::zeros(targets.shape()));
    let r = pred
        .sub(tape.constant(targets.clone()))?
        .select(keep, zeros)?;
    let per = match kind {
        LossKind::Mse => r.mul(r)?,
        LossKind::Huber { delta } => r.huber(T::lit(delta))?,
    };
    let total = weights.data().iter().copied().sum::<T>();
    let value = per
        .mul(tape.constant(weights.clone()))?
        .sum()?
        .scale(T::one() / total)?;
    Ok(LossValue { value, supervised })
}

/// First and second moments mirroring the parameter tree.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: ModelParams<Tensor<T>>,
    pub v: ModelParams<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ModelParams<Tensor<T>>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        Self {
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
        }
    }
}

/// Bias-corrected Adam update.
pub fn adam_step<T: Scalar>(
    params: &mut ModelParams<Tensor<T>>,
    grads: &ModelParams<Tensor<T>>,
    state: &mut AdamState<T>,
    cfg: AdamConfig,
) {
    state.step += 1;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::one() - T::lit(cfg.beta1.powf(state.step as f64));
    let c2 = T::one() - T::lit(cfg.beta2.powf(state.step as f64));
    let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
    let leaves = params
        .leaves_mut()
        .into_iter()
        .zip(grads.leaves())
        .zip(state.m.leaves_mut())
        .zip(state.v.leaves_mut());
    for (((p, g), m), v) in leaves {
        let items = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut());
        for (((p, &g), m), v) in items {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let update = (*m / c1) / ((*v / c2).sqrt() + eps);
            *p -= lr * update;
        }
    }
}

pub fn global_norm<T: Scalar>(grads: &ModelParams<Tensor<T>>) -> T {
    let mut sq = T::zero();
    grads.for_each(|_, g| sq += g.data().iter().map(|&x| x * x).sum::<T>());
    sq.sqrt()
}

/// Rescales all gradients so their global L2 norm is at most `clip_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients<T: Scalar>(grads: &mut ModelParams<Tensor<T>>, clip_norm: f64) -> T {
    let norm = global_norm(grads);
    let clip = T::lit(clip_norm);
    if norm > clip {
        let factor = clip / norm;
        grads.for_each_mut(|_, g| g.data_mut().iter_mut().for_each(|x| *x *= factor));
    }
    norm
}

/// Targets and weights aligned with the model's output rows for one batch row.
///
/// With patching, output row `p` predicts the step after the last point of
/// patch `p`.
pub fn aligned_supervision<T: Scalar>(
    model: &TrajectoryModel<T>,
    batch: &Batch,
    row: usize,
    mode: LossMode,
    spec: Option<&MaskSpec>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = batch.s_max();
    let len = batch.lengths[row];
    let targets = batch.row_targets(row).cast::<T>();
    if model.config().patch_len == 1 {
        return Ok((targets, build_loss_mask(spec, mode, len, s)?));
    }
    if mode == LossMode::Infill {
        return Err(TrainError::Config(
            "infill training requires patch_len = 1".into(),
        ));
    }
    let positions = model.config().positions_for(s);
    let p = model.config().patch_len;
    let mut t = vec![T::zero(); positions * OUT_DIM];
    let mut w = vec![T::zero(); positions * OUT_DIM];
    for i in 0..positions {
        if i * p >= len {
            break;
        }
        let r = ((i + 1) * p).min(len) - 1;
        t[i * OUT_DIM..(i + 1) * OUT_DIM].copy_from_slice(targets.row(r));
        if r + 1 < len {
            w[i * OUT_DIM..(i + 1) * OUT_DIM]
                .iter_mut()
                .for_each(|v| *v = T::one());
        }
    }
    Ok((
        Tensor::new(vec![positions, OUT_DIM], t)?,
        Tensor::new(vec![positions, OUT_DIM], w)?,
    ))
}

/// Per-row mask over the positions that have a successor.
pub fn sample_infill_mask(
    valid_len: usize,
    ratio: f64,
    segment: bool,
    rng: &mut ChaCha8Rng,
) -> std::result::Result<MaskSpec, MaskError> {
    let candidates = valid_len.saturating_sub(1);
    if segment && candidates >= 4 {
        sample_segment_mask(candidates, ratio, rng)
    } else {
        sample_dimension_mask(candidates, ratio, rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub epoch: usize,
    pub split: String,
    pub objective: String,
    pub loss: f64,
}

/// Renders history as CSV with header `epoch,split,objective,loss`.
pub fn history_csv(history: &[HistoryEntry]) -> String {
    let mut out = String::from("epoch,split,objective,loss\n");
    for h in history {
        out.push_str(&format!(
            "{},{},{},{}\n",
            h.epoch, h.split, h.objective, h.loss
        ));
    }
    out
}

/// A stream of batches, produced afresh for each epoch.
pub type BatchIter<'a> = Box<dyn Iterator<Item = Result<Batch, DataError>> + 'a>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub mode: LossMode,
    pub supervised: usize,
    pub grad_norm: f64,
}

/// Model, optimizer state and loop counters.
#[derive(Debug, Clone)]
pub struct Trainer<T: Scalar> {
    pub model: TrajectoryModel<T>,
    pub config: TrainConfig,
    pub norm: NormalizationParams,
    pub adam: AdamState<T>,
    pub rng: ChaCha8Rng,
    pub epoch: usize,
    /// Batches already consumed in the current epoch.
    pub batch_in_epoch: usize,
    pub history: Vec<HistoryEntry>,
}

/// Stream of the mask sampler, kept apart from the weight-init stream.
pub const MASK_STREAM: u64 = 1;

pub fn mask_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(MASK_STREAM);
    rng
}

impl<T: Scalar> Trainer<T> {
    /// Fresh model initialized from `config.seed`.
    pub fn new(
        model_config: ModelConfig,
        config: TrainConfig,
        norm: NormalizationParams,
    ) -> Result<Self> {
        config.validate()?;
        let model = TrajectoryModel::seeded(model_config, config.seed)?;
        Ok(Self::with_model(model, config, norm))
    }

    pub fn with_model(
        model: TrajectoryModel<T>,
        config: TrainConfig,
        norm: NormalizationParams,
    ) -> Self {
        let adam = AdamState::new(model.params());
        let rng = mask_rng(config.seed);
        Self {
            model,
            config,
            norm,
            adam,
            rng,
            epoch: 0,
            batch_in_epoch: 0,
            history: Vec::new(),
        }
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    fn mode_for_step(&self, step: u64) -> LossMode {
        match self.config.objective {
            Objective::NextStep => LossMode::NextStep,
            Objective::Infill => LossMode::Infill,
            Objective::Alternating if step.is_multiple_of(2) => LossMode::NextStep,
            Objective::Alternating => LossMode::Infill,
        }
    }

    /// Whether the `step`-th update uses segment masks (dimension and segment alternate).
    fn segment_for_step(&self, step: u64) -> bool {
        let infill_index = match self.config.objective {
            Objective::Alternating => step / 2,
            _ => step,
        };
        infill_index % 2 == 1
    }

    /// Loss of `batch` under `mode` with gradients on a fresh tape.
    fn batch_loss(
        &mut self,
        batch: &Batch,
        mode: LossMode,
        segment: bool,
    ) -> Result<(f64, usize, ModelParams<Tensor<T>>)> {
        let tape = Tape::new();
        let bound = self.model.params().bind(&tape);
        let mut seqs = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        let mut weights = Vec::with_capacity(batch.len());
        for i in 0..batch.len() {
            let spec = match mode {
                LossMode::Infill => Some(sample_infill_mask(
                    batch.lengths[i],
                    self.config.mask_ratio,
                    segment,
                    &mut self.rng,
                )?),
                LossMode::NextStep => None,
            };
            let mut x = tape.constant(batch.row_features(i).cast::<T>());
            if let Some(spec) = &spec {
                x = apply_mask_var(x, spec, &bound.mask)?;
            }
            let (t, w) = aligned_supervision(&self.model, batch, i, mode, spec.as_ref())?;
            seqs.push(x);
            targets.push(t.into_data());
            weights.push(w.into_data());
        }
        let pred = self.model.forward(&bound, &seqs, &batch.lengths)?;
        let shape = pred.shape();
        let targets = Tensor::new(shape.clone(), targets.concat())?;
        let weights = Tensor::new(shape, weights.concat())?;
        let l = loss(pred, &targets, &weights, self.config.loss)?;
        let value = l.value.value().item().to_f64_lossy();
        let grads = bound.gradients(&tape.backward(l.value)?);
        Ok((value, l.supervised, grads))
    }

    /// Forward, backward, clip and one Adam update.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepReport> {
        let step = self.adam.step;
        let mode = self.mode_for_step(step);
        let (value, supervised, mut grads) =
            self.batch_loss(batch, mode, self.segment_for_step(step))?;
        if !value.is_finite() || !grads.is_finite() {
            return Err(TrainError::NonFinite {
                batch: self.batch_in_epoch,
                epoch: self.epoch,
                step,
            });
        }
        let grad_norm = clip_gradients(&mut grads, self.config.clip_norm).to_f64_lossy();
        let cfg = AdamConfig::from(&self.config);
        adam_step(self.model.params_mut(), &grads, &mut self.adam, cfg);
        self.batch_in_epoch += 1;
        Ok(StepReport {
            step,
            loss: value,
            mode,
            supervised,
            grad_norm,
        })
    }

    /// Mean next-step loss over `batches` without updating anything.
    pub fn evaluate_loss(
        &self,
        batches: impl IntoIterator<Item = Result<Batch, DataError>>,
    ) -> Result<f64> {
        let mut probe = self.clone();
        let mut total = 0.0;
        let mut count = 0usize;
        for b in batches {
            let (value, n, _) = probe.batch_loss(&b?, LossMode::NextStep, false)?;
            total += value * n as f64;
            count += n;
        }
        Ok(if count == 0 {
            0.0
        } else {
            total / count as f64
        })
    }

    fn budget_left(&self) -> bool {
        self.config.max_steps.is_none_or(|m| self.adam.step < m)
    }

    /// Runs the remaining epochs. `train` and `val` are called once per epoch
    /// for a fresh stream; a resumed trainer skips batches already consumed.
    pub fn fit<'a>(
        &mut self,
        mut train: impl FnMut() -> Result<BatchIter<'a>, DataError>,
        mut val: Option<&mut dyn FnMut() -> Result<BatchIter<'a>, DataError>>,
        mut on_step: impl FnMut(&StepReport),
    ) -> Result<()> {
        while self.epoch < self.config.epochs && self.budget_left() {
            let mut sum = 0.0;
            let mut n = 0usize;
            for batch in train()?.skip(self.batch_in_epoch) {
                if !self.budget_left() {
                    return Ok(());
                }
                let report = self.train_step(&batch?)?;
                on_step(&report);
                sum += report.loss;
                n += 1;
            }
            let objective = self.config.objective.name().to_string();
            if n > 0 {
                self.history.push(HistoryEntry {
                    epoch: self.epoch,
                    split: "train".into(),
                    objective: objective.clone(),
                    loss: sum / n as f64,
                });
            }
            if let Some(val) = val.as_mut() {
                let loss = self.evaluate_loss(val()?)?;
                self.history.push(HistoryEntry {
                    epoch: self.epoch,
                    split: "val".into(),
                    objective: Objective::NextStep.name().into(),
                    loss,
                });
            }
            self.epoch += 1;
            self.batch_in_epoch = 0;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretextConfig {
    pub d_latent: usize,
    pub steps: usize,
    pub lr: f64,
    pub holdout_fraction: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for PretextConfig {
    fn default() -> Self {
        Self {
            d_latent: 64,
            steps: 1500,
            lr: 1e-2,
            holdout_fraction: 0.2,
            init_std: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretextReport {
    pub rmse_raw: f64,
    pub rmse_with_pe: f64,
    pub n_train: usize,
    pub n_holdout: usize,
}

/// One-hidden-layer autoencoder `x → gelu(x·W1 + b1)·W2 + b2` fit to
/// `targets`, returning the held-out RMSE.
pub fn autoencoder_rmse(
    inputs: &Tensor<f64>,
    targets: &Tensor<f64>,
    cfg: &PretextConfig,
) -> Result<(f64, usize, usize)> {
    let (n, f_in) = crate::tensor::matrix_dims("autoencoder", inputs.shape())?;
    let (n_t, f_out) = crate::tensor::matrix_dims("autoencoder", targets.shape())?;
    if n != n_t || n < 2 {
        return Err(TrainError::Config(format!("{n} inputs for {n_t} targets")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_hold = ((n as f64 * cfg.holdout_fraction).round() as usize).clamp(1, n - 1);
    let (hold, fit) = order.split_at(n_hold);
    let pick = |t: &Tensor<f64>, rows: &[usize]| {
        Tensor::from_rows(&rows.iter().map(|&r| t.row(r).to_vec()).collect::<Vec<_>>())
            .expect("rows")
    };
    let (x_fit, y_fit) = (pick(inputs, fit), pick(targets, fit));
    let (x_hold, y_hold) = (pick(inputs, hold), pick(targets, hold));

    let normal = rand_distr::Normal::new(0.0, cfg.init_std)
        .map_err(|e| TrainError::Config(e.to_string()))?;
    let mut gauss = |shape: &[usize]| {
        Tensor::from_fn(shape, |_| {
            rand_distr::Distribution::sample(&normal, &mut rng)
        })
    };
    let mut w = [
        gauss(&[f_in, cfg.d_latent]),
        Tensor::zeros(&[cfg.d_latent]),
        gauss(&[cfg.d_latent, f_out]),
        Tensor::zeros(&[f_out]),
    ];
    let mut m: Vec<Tensor<f64>> = w.iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut v = m.clone();
    for step in 1..=cfg.steps {
        let tape = Tape::new();
        let vars: Vec<Var<'_, f64>> = w.iter().map(|t| tape.param(t.clone())).collect();
        let y = tape
            .constant(x_fit.clone())
            .matmul(vars[0])?
            .add_bias(vars[1])?
            .gelu()?
            .matmul(vars[2])?
            .add_bias(vars[3])?;
        let r = y.sub(tape.constant(y_fit.clone()))?;
        let l = r.mul(r)?.mean()?;
        let g = tape.backward(l)?;
        let c1 = 1.0 - 0.9f64.powi(step as i32);
        let c2 = 1.0 - 0.999f64.powi(step as i32);
        for (k, var) in vars.iter().enumerate() {
            let gk = g.wrt(*var);
            for (((p, &gi), mi), vi) in w[k]
                .data_mut()
                .iter_mut()
                .zip(gk.data())
                .zip(m[k].data_mut())
                .zip(v[k].data_mut())
            {
                *mi = 0.9 * *mi + 0.1 * gi;
                *vi = 0.999 * *vi + 0.001 * gi * gi;
                *p -= cfg.lr * (*mi / c1) / ((*vi / c2).sqrt() + 1e-8);
            }
        }
    }
    let tape = Tape::new();
    let vars: Vec<Var<'_, f64>> = w.iter().map(|t| tape.constant(t.clone())).collect();
    let pred = tape
        .constant(x_hold)
        .matmul(vars[0])?
        .add_bias(vars[1])?
        .gelu()?
        .matmul(vars[2])?
        .add_bias(vars[3])?
        .value();
    let mse = pred
        .data()
        .iter()
        .zip(y_hold.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / pred.len() as f64;
    Ok((mse.sqrt(), fit.len(), hold.len()))
}

/// Autoencodes per-point features twice: as given, and with the sinusoidal
/// encoding of each point's index within its sequence added (features padded
/// to an even width first).
pub fn pretext_autoencoder_check(
    sequences: &[Tensor<f64>],
    cfg: &PretextConfig,
) -> Result<PretextReport> {
    let mut raw = Vec::new();
    let mut with_pe = Vec::new();
    for seq in sequences {
        let (s, f) = crate::tensor::matrix_dims("pretext", seq.shape())?;
        let width = f + f % 2;
        for pos in 0..s {
            let row = seq.row(pos);
            raw.push(row.to_vec());
            let pe = positional_encoding(pos, width);
            with_pe.push(
                (0..width)
                    .map(|j| row.get(j).copied().unwrap_or(0.0) + pe[j])
                    .collect::<Vec<_>>(),
            );
        }
    }
    if raw.is_empty() {
        return Err(TrainError::Config(
            "no features for the pretext check".into(),
        ));
    }
    let raw = Tensor::from_rows(&raw)?;
    let with_pe = Tensor::from_rows(&with_pe)?;
    let (rmse_raw, n_train, n_holdout) = autoencoder_rmse(&raw, &raw, cfg)?;
    let (rmse_with_pe, _, _) = autoencoder_rmse(&with_pe, &with_pe, cfg)?;
    Ok(PretextReport {
        rmse_raw,
        rmse_with_pe,
        n_train,
        n_holdout,
    })
}
