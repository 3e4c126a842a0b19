//! Model hyperparameters.

use serde::{Deserialize, Serialize};

use crate::geo::{DT_COL, FEATURE_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    #[default]
    Causal,
    Bidirectional,
}

/// Shape and feature wiring of the decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub d_ff: usize,
    /// Maximum number of model positions (patches when patching is on).
    pub max_seq: usize,
    pub attention: AttentionMode,
    pub rope: bool,
    pub rope_base: f64,
    /// Add the sinusoidal table after projection.
    pub positional_encoding: bool,
    /// Feed the four scaled calendar fields.
    pub use_calendar: bool,
    /// Feed the normalized Δt-to-previous feature.
    pub use_dt_feature: bool,
    /// Width of the Time2Vec block applied to Δt; 0 disables it.
    pub time2vec_dim: usize,
    /// Points grouped into one model position; 1 disables patching.
    pub patch_len: usize,
    pub ln_eps: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_blocks: 2,
            d_ff: 256,
            max_seq: 256,
            attention: AttentionMode::Causal,
            rope: false,
            rope_base: 10_000.0,
            positional_encoding: true,
            use_calendar: true,
            use_dt_feature: true,
            time2vec_dim: 0,
            patch_len: 1,
            ln_eps: 1e-5,
            init_std: 0.02,
        }
    }
}

/// Number of regression outputs per position: (Δlat, Δlon, Δt).
pub const OUT_DIM: usize = 3;

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), String> {
        let fail = |m: &str| Err(m.to_string());
        if self.d_model == 0 || !self.d_model.is_multiple_of(2) {
            return fail("d_model must be a positive even number");
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail("n_heads must divide d_model");
        }
        if self.rope && !self.head_dim().is_multiple_of(2) {
            return fail("rope needs an even head dimension");
        }
        if self.n_blocks == 0 || self.d_ff == 0 || self.max_seq == 0 {
            return fail("n_blocks, d_ff and max_seq must be positive");
        }
        if self.time2vec_dim == 1 {
            return fail("time2vec_dim must be 0 (off) or at least 2");
        }
        if self.patch_len == 0 {
            return fail("patch_len must be at least 1");
        }
        if !(self.ln_eps > 0.0) || !(self.rope_base > 1.0) || !(self.init_std >= 0.0) {
            return fail("ln_eps and init_std must be positive, rope_base > 1");
        }
        Ok(())
    }

    /// Feature columns fed to the projection, in order.
    pub fn input_columns(&self) -> Vec<usize> {
        let mut cols = vec![0, 1];
        if self.use_calendar {
            cols.extend(2..DT_COL);
        }
        if self.use_dt_feature {
            cols.push(DT_COL);
        }
        debug_assert!(cols.iter().all(|&c| c < FEATURE_DIM));
        cols
    }

    /// Width of one point's input after column selection and Time2Vec.
    pub fn point_width(&self) -> usize {
        self.input_columns().len() + self.time2vec_dim
    }

    /// Input width of the projection layer.
    pub fn projection_in(&self) -> usize {
        self.point_width() * self.patch_len
    }

    /// Model positions needed for `points` input points.
    pub fn positions_for(&self, points: usize) -> usize {
        points.div_ceil(self.patch_len)
    }
}
