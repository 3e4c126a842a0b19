//! Per-point features into model space.
//!
//! The pipeline in [`embed_sequence`] is: select input columns, optionally
//! append a Time2Vec encoding of Δt, optionally group points into patches,
//! project, then add the sinusoidal position table.

use crate::config::ModelConfig;
use crate::geo::DT_COL;
use crate::params::{Linear, ModelParams, Time2VecLayer};
use crate::scalar::Scalar;
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

/// `x·W + b` over the rows of `x`.
pub fn project<'t, T: Scalar>(x: Var<'t, T>, layer: &Linear<Var<'t, T>>) -> Result<Var<'t, T>> {
    x.matmul(layer.weight)?.add_bias(layer.bias)
}

/// Interleaved sin/cos encoding of one position.
pub fn positional_encoding(pos: usize, d_model: usize) -> Vec<f64> {
    (0..d_model)
        .map(|j| {
            let angle = pos as f64 / 10_000f64.powf((j - j % 2) as f64 / d_model as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Precomputed `[max_seq, d_model]` sinusoidal table.
#[derive(Debug, Clone, PartialEq)]
pub struct SinusoidalTable<T> {
    table: Tensor<T>,
}

impl<T: Scalar> SinusoidalTable<T> {
    pub fn new(max_seq: usize, d_model: usize) -> Result<Self> {
        if !d_model.is_multiple_of(2) || d_model == 0 || max_seq == 0 {
            return Err(TensorError::Invalid {
                op: "positional_encoding",
                msg: format!("need even d_model and max_seq > 0, got {d_model} / {max_seq}"),
            });
        }
        let mut data = Vec::with_capacity(max_seq * d_model);
        for pos in 0..max_seq {
            data.extend(positional_encoding(pos, d_model).into_iter().map(T::lit));
        }
        Ok(Self {
            table: Tensor::new(vec![max_seq, d_model], data)?,
        })
    }

    pub fn max_seq(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn row(&self, pos: usize) -> Result<&[T]> {
        if pos >= self.max_seq() {
            return Err(TensorError::Invalid {
                op: "positional_encoding",
                msg: format!("position {pos} outside table of {} rows", self.max_seq()),
            });
        }
        Ok(self.table.row(pos))
    }

    /// First `len` rows.
    pub fn rows(&self, len: usize) -> Result<Tensor<T>> {
        if len == 0 || len > self.max_seq() {
            return Err(TensorError::Invalid {
                op: "positional_encoding",
                msg: format!("{len} positions requested, table holds {}", self.max_seq()),
            });
        }
        let d = self.table.shape()[1];
        Tensor::new(vec![len, d], self.table.data()[..len * d].to_vec())
    }
}

/// Time2Vec on a column of times `tau: [S, 1]` giving `[S, k]`.
pub fn time2vec<'t, T: Scalar>(
    tau: Var<'t, T>,
    layer: &Time2VecLayer<Var<'t, T>>,
) -> Result<Var<'t, T>> {
    let k = layer.omega.shape()[0];
    let lin = tau
        .matmul(layer.omega.reshape(&[1, k])?)?
        .add_bias(layer.phi)?;
    if k == 1 {
        return Ok(lin);
    }
    let periodic = lin.slice(1, 1, k - 1)?.sin()?;
    lin.tape().concat(&[lin.slice(1, 0, 1)?, periodic], 1)
}

/// Scalar form of [`time2vec`], for inspection and tests.
pub fn time2vec_scalar<T: Scalar>(tau: T, layer: &Time2VecLayer<Tensor<T>>) -> Vec<T> {
    layer
        .omega
        .data()
        .iter()
        .zip(layer.phi.data())
        .enumerate()
        .map(|(i, (&w, &p))| {
            if i == 0 {
                w * tau + p
            } else {
                (w * tau + p).sin()
            }
        })
        .collect()
}

/// Non-overlapping groups of `patch_len` consecutive rows, flattened.
#[derive(Debug, Clone, PartialEq)]
pub struct Patched<T> {
    /// `[ceil(S / P), P·F]`, last patch zero-padded.
    pub data: Tensor<T>,
    /// Number of real rows before padding.
    pub valid_len: usize,
}

pub fn patchify<T: Scalar>(x: &Tensor<T>, patch_len: usize) -> Result<Patched<T>> {
    let (s, f) = crate::tensor::matrix_dims("patchify", x.shape())?;
    if patch_len == 0 {
        return Err(TensorError::Invalid {
            op: "patchify",
            msg: "patch length must be positive".into(),
        });
    }
    let n = s.div_ceil(patch_len);
    let mut data = x.data().to_vec();
    data.resize(n * patch_len * f, T::zero());
    Ok(Patched {
        data: Tensor::new(vec![n, patch_len * f], data)?,
        valid_len: s,
    })
}

pub fn unpatchify<T: Scalar>(p: &Patched<T>, width: usize) -> Result<Tensor<T>> {
    if width == 0 || p.data.len() < p.valid_len * width {
        return Err(TensorError::Invalid {
            op: "unpatchify",
            msg: format!(
                "{} rows of width {width} do not fit {:?}",
                p.valid_len,
                p.data.shape()
            ),
        });
    }
    Tensor::new(
        vec![p.valid_len, width],
        p.data.data()[..p.valid_len * width].to_vec(),
    )
}

/// Tape version of [`patchify`].
pub fn patchify_var<'t, T: Scalar>(x: Var<'t, T>, patch_len: usize) -> Result<Var<'t, T>> {
    let shape = x.shape();
    let (s, f) = (shape[0], shape[1]);
    if patch_len == 1 {
        return Ok(x);
    }
    let n = s.div_ceil(patch_len);
    let pad = n * patch_len - s;
    let padded = if pad > 0 {
        let zeros = x.tape().constant(Tensor::zeros(&[pad, f]));
        x.tape().concat(&[x, zeros], 0)?
    } else {
        x
    };
    padded.reshape(&[n, patch_len * f])
}

/// Features `[S, FEATURE_DIM]` to embeddings `[ceil(S / P), d_model]`.
pub fn embed_sequence<'t, T: Scalar>(
    features: Var<'t, T>,
    cfg: &ModelConfig,
    params: &ModelParams<Var<'t, T>>,
    table: &SinusoidalTable<T>,
) -> Result<Var<'t, T>> {
    let tape: &'t Tape<T> = features.tape();
    let cols = cfg.input_columns();
    let mut parts: Vec<Var<'t, T>> = Vec::new();
    // contiguous runs of selected columns become single slices
    let mut start = cols[0];
    let mut len = 1;
    for &c in &cols[1..] {
        if c == start + len {
            len += 1;
        } else {
            parts.push(features.slice(1, start, len)?);
            start = c;
            len = 1;
        }
    }
    parts.push(features.slice(1, start, len)?);
    if let Some(t2v) = &params.time2vec {
        parts.push(time2vec(features.slice(1, DT_COL, 1)?, t2v)?);
    }
    let x = if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat(&parts, 1)?
    };
    let x = patchify_var(x, cfg.patch_len)?;
    let h = project(x, &params.projection)?;
    if !cfg.positional_encoding {
        return Ok(h);
    }
    let positions = h.shape()[0];
    h.add(tape.constant(table.rows(positions)?))
}
