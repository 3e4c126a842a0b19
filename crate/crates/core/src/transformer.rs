//! Decoder blocks and the full trajectory model.

use std::rc::Rc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{AttentionMode, ModelConfig, OUT_DIM};
use crate::embedding::{embed_sequence, SinusoidalTable};
use crate::params::{AttentionParams, BlockParams, ModelParams};
use crate::scalar::Scalar;
use crate::tensor::{self, Result, Tape, Tensor, TensorError, Var};

/// Which key positions each query may attend to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    size: usize,
    allowed: Rc<[bool]>,
}

impl AttentionMask {
    pub fn from_fn(size: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let allowed = (0..size * size).map(|c| f(c / size, c % size)).collect();
        Self { size, allowed }
    }

    pub fn causal(size: usize) -> Self {
        Self::from_fn(size, |i, j| j <= i)
    }

    pub fn bidirectional(size: usize) -> Self {
        Self::from_fn(size, |_, _| true)
    }

    /// `mode` pattern with keys at or beyond `valid` hidden.
    pub fn for_mode(mode: AttentionMode, size: usize, valid: usize) -> Self {
        let valid = valid.clamp(1, size);
        match mode {
            AttentionMode::Causal => Self::from_fn(size, |i, j| j <= i && j < valid),
            AttentionMode::Bidirectional => Self::from_fn(size, |_, j| j < valid),
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn is_allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.size + j]
    }

    pub fn allowed(&self) -> Rc<[bool]> {
        Rc::clone(&self.allowed)
    }

    /// `0` where allowed, `-inf` elsewhere.
    pub fn additive<T: Scalar>(&self) -> Tensor<T> {
        let data = self
            .allowed
            .iter()
            .map(|&a| if a { T::zero() } else { T::neg_infinity() })
            .collect();
        Tensor::new(vec![self.size, self.size], data).expect("square mask")
    }
}

pub fn causal_mask(size: usize) -> AttentionMask {
    AttentionMask::causal(size)
}

/// Rotates pairs `(2i, 2i+1)` of each row by `pos·base^(-2i/dim)`.
pub fn apply_rope<T: Scalar>(x: &Tensor<T>, positions: &[usize], base: f64) -> Result<Tensor<T>> {
    let (s, dim) = tensor::matrix_dims("rope", x.shape())?;
    if dim % 2 != 0 || positions.len() != s {
        return Err(TensorError::Invalid {
            op: "rope",
            msg: format!(
                "shape {:?} with {} positions (need even width)",
                x.shape(),
                positions.len()
            ),
        });
    }
    Tensor::new(
        x.shape().to_vec(),
        tensor::rope_rotate(x.data(), dim, positions, base, 1.0),
    )
}

fn check_square(mask: &AttentionMask, s: usize) -> Result<()> {
    if mask.size() != s {
        return Err(TensorError::ShapeMismatch {
            op: "attention",
            left: vec![s, s],
            right: vec![mask.size(), mask.size()],
        });
    }
    Ok(())
}

/// `softmax(q·kᵀ/√d)` restricted to the mask.
pub fn attention_weights<'t, T: Scalar>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    mask: &AttentionMask,
) -> Result<Var<'t, T>> {
    let (s, d) = tensor::matrix_dims("attention", &q.shape())?;
    if k.shape() != q.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "attention",
            left: q.shape(),
            right: k.shape(),
        });
    }
    check_square(mask, s)?;
    let scale = T::one() / T::lit(d as f64).sqrt();
    q.matmul(k.t()?)?
        .scale(scale)?
        .softmax_rows_masked(mask.allowed())
}

pub fn attention<'t, T: Scalar>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    mask: &AttentionMask,
) -> Result<Var<'t, T>> {
    if v.shape()[0] != q.shape()[0] {
        return Err(TensorError::ShapeMismatch {
            op: "attention",
            left: q.shape(),
            right: v.shape(),
        });
    }
    attention_weights(q, k, mask)?.matmul(v)
}

pub fn multi_head_attention<'t, T: Scalar>(
    x: Var<'t, T>,
    p: &AttentionParams<Var<'t, T>>,
    cfg: &ModelConfig,
    mask: &AttentionMask,
) -> Result<Var<'t, T>> {
    let s = x.shape()[0];
    let hd = cfg.head_dim();
    let q = x.matmul(p.query.weight)?.add_bias(p.query.bias)?;
    let k = x.matmul(p.key.weight)?.add_bias(p.key.bias)?;
    let v = x.matmul(p.value.weight)?.add_bias(p.value.bias)?;
    let positions: Vec<usize> = (0..s).collect();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let (mut qh, mut kh) = (q.slice(1, h * hd, hd)?, k.slice(1, h * hd, hd)?);
        if cfg.rope {
            qh = qh.rope(&positions, cfg.rope_base)?;
            kh = kh.rope(&positions, cfg.rope_base)?;
        }
        heads.push(attention(qh, kh, v.slice(1, h * hd, hd)?, mask)?);
    }
    let joined = if heads.len() == 1 {
        heads[0]
    } else {
        x.tape().concat(&heads, 1)?
    };
    joined.matmul(p.output.weight)?.add_bias(p.output.bias)
}

/// Pre-norm block: `h = x + MHA(LN x)`, then `h + FF(LN h)`.
pub fn transformer_block<'t, T: Scalar>(
    x: Var<'t, T>,
    p: &BlockParams<Var<'t, T>>,
    cfg: &ModelConfig,
    mask: &AttentionMask,
) -> Result<Var<'t, T>> {
    let eps = T::lit(cfg.ln_eps);
    let a = multi_head_attention(
        x.layer_norm(p.ln1.gain, p.ln1.bias, eps)?,
        &p.attn,
        cfg,
        mask,
    )?;
    let h = x.add(a)?;
    let f = h
        .layer_norm(p.ln2.gain, p.ln2.bias, eps)?
        .matmul(p.ff1.weight)?
        .add_bias(p.ff1.bias)?
        .gelu()?
        .matmul(p.ff2.weight)?
        .add_bias(p.ff2.bias)?;
    h.add(f)
}

/// Configuration, weights and the precomputed position table.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryModel<T> {
    config: ModelConfig,
    params: ModelParams<Tensor<T>>,
    table: SinusoidalTable<T>,
}

fn config_error(msg: String) -> TensorError {
    TensorError::Invalid { op: "config", msg }
}

impl<T: Scalar> TrajectoryModel<T> {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate().map_err(config_error)?;
        let params = ModelParams::init(&config, rng);
        let table = SinusoidalTable::new(config.max_seq, config.d_model)?;
        Ok(Self {
            config,
            params,
            table,
        })
    }

    pub fn seeded(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::new(config, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Wraps existing weights, checking names and shapes against `config`.
    pub fn from_params(config: ModelConfig, params: ModelParams<Tensor<T>>) -> Result<Self> {
        config.validate().map_err(config_error)?;
        let expected =
            ModelParams::<Tensor<T>>::init(&config, &mut ChaCha8Rng::seed_from_u64(0)).layout();
        if params.layout() != expected {
            return Err(config_error(
                "parameter layout does not match the model config".into(),
            ));
        }
        let table = SinusoidalTable::new(config.max_seq, config.d_model)?;
        Ok(Self {
            config,
            params,
            table,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams<Tensor<T>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams<Tensor<T>> {
        &mut self.params
    }

    pub fn into_params(self) -> ModelParams<Tensor<T>> {
        self.params
    }

    pub fn table(&self) -> &SinusoidalTable<T> {
        &self.table
    }

    /// Point index each output row of a `len`-point sequence predicts from.
    pub fn predicted_rows(&self, len: usize) -> Vec<usize> {
        let p = self.config.patch_len;
        (0..self.config.positions_for(len))
            .map(|i| ((i + 1) * p).min(len) - 1)
            .collect()
    }

    /// One `[S, FEATURE_DIM]` sequence with `valid_len` real points to `[S', 3]`.
    pub fn forward_sequence<'t>(
        &self,
        params: &ModelParams<Var<'t, T>>,
        features: Var<'t, T>,
        valid_len: usize,
    ) -> Result<Var<'t, T>> {
        let s = tensor::matrix_dims("model_forward", &features.shape())?.0;
        let positions = self.config.positions_for(s);
        if positions > self.config.max_seq {
            return Err(TensorError::Invalid {
                op: "model_forward",
                msg: format!(
                    "{s} points need {positions} positions, max_seq is {}",
                    self.config.max_seq
                ),
            });
        }
        let mask = AttentionMask::for_mode(
            self.config.attention,
            positions,
            self.config.positions_for(valid_len),
        );
        let mut h = embed_sequence(features, &self.config, params, &self.table)?;
        for block in &params.blocks {
            h = transformer_block(h, block, &self.config, &mask)?;
        }
        let eps = T::lit(self.config.ln_eps);
        h.layer_norm(params.final_norm.gain, params.final_norm.bias, eps)?
            .matmul(params.head.weight)?
            .add_bias(params.head.bias)
    }

    /// Batch forward: `B` sequences of equal padded length to `[B, S', 3]`.
    pub fn forward<'t>(
        &self,
        params: &ModelParams<Var<'t, T>>,
        sequences: &[Var<'t, T>],
        lengths: &[usize],
    ) -> Result<Var<'t, T>> {
        if sequences.is_empty() || sequences.len() != lengths.len() {
            return Err(TensorError::Invalid {
                op: "model_forward",
                msg: format!(
                    "{} sequences with {} lengths",
                    sequences.len(),
                    lengths.len()
                ),
            });
        }
        let mut outs = Vec::with_capacity(sequences.len());
        for (&x, &len) in sequences.iter().zip(lengths) {
            let y = self.forward_sequence(params, x, len)?;
            let rows = y.shape()[0];
            outs.push(y.reshape(&[1, rows, OUT_DIM])?);
        }
        if outs.len() == 1 {
            return Ok(outs[0]);
        }
        params.projection.weight.tape().concat(&outs, 0)
    }

    /// Gradient-free forward over `[B, S, FEATURE_DIM]` features.
    pub fn predict(&self, features: &Tensor<T>, lengths: &[usize]) -> Result<Tensor<T>> {
        let (b, s, f) = match *features.shape() {
            [b, s, f] => (b, s, f),
            _ => {
                return Err(TensorError::Invalid {
                    op: "model_forward",
                    msg: format!("expected [B, S, F] features, got {:?}", features.shape()),
                })
            }
        };
        let tape = Tape::new();
        let params = self.params.map(|_, t| tape.constant(t.clone()));
        let seqs: Vec<_> = (0..b)
            .map(|i| {
                let rows = features.data()[i * s * f..(i + 1) * s * f].to_vec();
                Tensor::new(vec![s, f], rows).map(|t| tape.constant(t))
            })
            .collect::<Result<_>>()?;
        Ok(self.forward(&params, &seqs, lengths)?.value())
    }
}
