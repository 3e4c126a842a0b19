//! Training-time corruption and the matching loss weights.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::OUT_DIM;
use crate::geo::{FEATURE_DIM, SPATIAL_COLS, TEMPORAL_COLS};
use crate::params::MaskEmbedding;
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor, Var};

pub const DEFAULT_MASK_RATIO: f64 = 0.15;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MaskError {
    #[error("mask ratio {0} outside (0, 1)")]
    Ratio(f64),
    #[error("segment masking needs at least 4 positions, got {0}")]
    TooShort(usize),
    #[error("mask position {position} outside sequence of length {len}")]
    OutOfRange { position: usize, len: usize },
    #[error("feature matrix shape {0:?} is not [S, 7]")]
    Features(Vec<usize>),
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
}

pub type Result<T, E = MaskError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Dimension,
    Segment,
}

/// Hidden slot groups at one position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedDims {
    pub spatial: bool,
    pub temporal: bool,
}

impl MaskedDims {
    pub const SPATIAL: Self = Self {
        spatial: true,
        temporal: false,
    };
    pub const TEMPORAL: Self = Self {
        spatial: false,
        temporal: true,
    };
    pub const BOTH: Self = Self {
        spatial: true,
        temporal: true,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub kind: MaskKind,
    /// Sorted by position, no duplicates.
    pub entries: Vec<(usize, MaskedDims)>,
    pub ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    NextStep,
    Infill,
}

fn check_ratio(ratio: f64) -> Result<()> {
    if ratio > 0.0 && ratio < 1.0 {
        Ok(())
    } else {
        Err(MaskError::Ratio(ratio))
    }
}

impl MaskSpec {
    pub fn empty(kind: MaskKind, ratio: f64) -> Self {
        Self {
            kind,
            entries: Vec::new(),
            ratio,
        }
    }

    pub fn positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|&(p, _)| p)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dims_at(&self, position: usize) -> Option<MaskedDims> {
        self.entries
            .binary_search_by_key(&position, |&(p, _)| p)
            .ok()
            .map(|i| self.entries[i].1)
    }

    pub fn validate(&self, len: usize) -> Result<()> {
        match self.entries.iter().find(|&&(p, _)| p >= len) {
            Some(&(position, _)) => Err(MaskError::OutOfRange { position, len }),
            None => Ok(()),
        }
    }

    /// Per-cell flags over a `[S, FEATURE_DIM]` matrix; `true` means hidden.
    pub fn feature_cells(&self, len: usize) -> Result<Vec<bool>> {
        self.validate(len)?;
        let mut cells = vec![false; len * FEATURE_DIM];
        for &(p, dims) in &self.entries {
            let row = &mut cells[p * FEATURE_DIM..(p + 1) * FEATURE_DIM];
            if dims.spatial {
                row[SPATIAL_COLS].iter_mut().for_each(|c| *c = true);
            }
            if dims.temporal {
                row[TEMPORAL_COLS].iter_mut().for_each(|c| *c = true);
            }
        }
        Ok(cells)
    }
}

/// Each position picked with probability `ratio`, then assigned spatial or temporal.
pub fn sample_dimension_mask(len: usize, ratio: f64, rng: &mut impl Rng) -> Result<MaskSpec> {
    check_ratio(ratio)?;
    let mut entries = Vec::new();
    for p in 0..len {
        if rng.random_bool(ratio) {
            let dims = if rng.random_bool(0.5) {
                MaskedDims::SPATIAL
            } else {
                MaskedDims::TEMPORAL
            };
            entries.push((p, dims));
        }
    }
    Ok(MaskSpec {
        kind: MaskKind::Dimension,
        entries,
        ratio,
    })
}

/// One contiguous run of `round(ratio·len)` positions (at least 1), all dims.
pub fn sample_segment_mask(len: usize, ratio: f64, rng: &mut impl Rng) -> Result<MaskSpec> {
    check_ratio(ratio)?;
    if len < 4 {
        return Err(MaskError::TooShort(len));
    }
    let run = ((ratio * len as f64).round() as usize).clamp(1, len);
    let start = rng.random_range(0..=len - run);
    Ok(MaskSpec {
        kind: MaskKind::Segment,
        entries: (start..start + run)
            .map(|p| (p, MaskedDims::BOTH))
            .collect(),
        ratio,
    })
}

fn feature_rows<T: Scalar>(features: &Tensor<T>) -> Result<usize> {
    match *features.shape() {
        [s, FEATURE_DIM] => Ok(s),
        _ => Err(MaskError::Features(features.shape().to_vec())),
    }
}

/// Replaces hidden slots by the mask embedding; all other slots are copied.
pub fn apply_mask<T: Scalar>(
    features: &Tensor<T>,
    spec: &MaskSpec,
    emb: &MaskEmbedding<Tensor<T>>,
) -> Result<Tensor<T>> {
    let s = feature_rows(features)?;
    let cells = spec.feature_cells(s)?;
    let fill: Vec<T> = emb
        .spatial
        .data()
        .iter()
        .chain(emb.temporal.data())
        .copied()
        .collect();
    let mut out = features.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if cells[i] {
            *v = fill[i % FEATURE_DIM];
        }
    }
    Ok(out)
}

/// Tape version of [`apply_mask`]; gradients reach the embedding through hidden slots.
pub fn apply_mask_var<'t, T: Scalar>(
    features: Var<'t, T>,
    spec: &MaskSpec,
    emb: &MaskEmbedding<Var<'t, T>>,
) -> Result<Var<'t, T>> {
    let shape = features.shape();
    let s = match *shape {
        [s, FEATURE_DIM] => s,
        _ => return Err(MaskError::Features(shape)),
    };
    if spec.is_empty() {
        return Ok(features);
    }
    let cells = spec.feature_cells(s)?;
    let tape = features.tape();
    let row = tape.concat(
        &[
            emb.spatial.reshape(&[1, SPATIAL_COLS.len()])?,
            emb.temporal.reshape(&[1, TEMPORAL_COLS.len()])?,
        ],
        1,
    )?;
    let fill = row.gather_rows(&vec![0; s])?;
    let keep: Rc<[bool]> = cells.iter().map(|&hidden| !hidden).collect();
    Ok(features.select(keep, fill)?)
}

/// `[len, 3]` weights over the `(Δlat, Δlon, Δt)` outputs.
///
/// Next-step weights every position with a successor among the first
/// `valid_len`. Infill weights exactly the masked outputs; spatial masks cover
/// Δlat and Δlon, temporal masks cover Δt.
pub fn build_loss_mask<T: Scalar>(
    spec: Option<&MaskSpec>,
    mode: LossMode,
    valid_len: usize,
    len: usize,
) -> Result<Tensor<T>> {
    let mut w = vec![T::zero(); len * OUT_DIM];
    match mode {
        LossMode::NextStep => {
            let supervised = valid_len.min(len).saturating_sub(1);
            w[..supervised * OUT_DIM]
                .iter_mut()
                .for_each(|v| *v = T::one());
        }
        LossMode::Infill => {
            if let Some(spec) = spec {
                spec.validate(len)?;
                for &(p, dims) in &spec.entries {
                    let row = &mut w[p * OUT_DIM..(p + 1) * OUT_DIM];
                    if dims.spatial {
                        row[0] = T::one();
                        row[1] = T::one();
                    }
                    if dims.temporal {
                        row[2] = T::one();
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![len, OUT_DIM], w)?)
}
