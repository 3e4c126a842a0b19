//! Learnable weights of the model.
//!
//! Every parameter struct is generic over its slot type `P`: the same tree
//! holds `Tensor<T>` values, tape handles during a forward pass, gradients, or
//! optimizer moments. Traversal order (and so checkpoint order) is the field
//! order below.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{ModelConfig, OUT_DIM};
use crate::geo::{SPATIAL_COLS, TEMPORAL_COLS};
use crate::scalar::Scalar;
use crate::tensor::{Gradients, Tape, Tensor, Var};

fn join(path: &str, leaf: &str) -> String {
    if path.is_empty() {
        leaf.to_string()
    } else {
        format!("{path}.{leaf}")
    }
}

/// Generates `try_map`, `for_each` and `for_each_mut` over the listed fields.
macro_rules! param_tree {
    ($name:ident { $($leaf:ident),* $(,)? } $(; $($sub:ident),* )?) => {
        impl<P> $name<P> {
            pub fn try_map<Q, E>(
                &self,
                path: &str,
                f: &mut impl FnMut(&str, &P) -> Result<Q, E>,
            ) -> Result<$name<Q>, E> {
                Ok($name {
                    $($leaf: f(&join(path, stringify!($leaf)), &self.$leaf)?,)*
                    $($($sub: self.$sub.try_map(&join(path, stringify!($sub)), f)?,)*)?
                })
            }

            pub fn for_each<'a>(&'a self, path: &str, f: &mut impl FnMut(&str, &'a P)) {
                $(f(&join(path, stringify!($leaf)), &self.$leaf);)*
                $($(self.$sub.for_each(&join(path, stringify!($sub)), f);)*)?
            }

            pub fn for_each_mut<'a>(&'a mut self, path: &str, f: &mut impl FnMut(&str, &'a mut P)) {
                $(f(&join(path, stringify!($leaf)), &mut self.$leaf);)*
                $($(self.$sub.for_each_mut(&join(path, stringify!($sub)), f);)*)?
            }
        }
    };
}

/// Affine map `x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<P> {
    pub weight: P,
    pub bias: P,
}
param_tree!(Linear { weight, bias });

/// Feature-to-model-space projection.
pub type ProjectionLayer<P> = Linear<P>;
/// `[d_model, 3]` regression head.
pub type OutputHead<P> = Linear<P>;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<P> {
    pub gain: P,
    pub bias: P,
}
param_tree!(LayerNormParams { gain, bias });

/// Learnable frequencies and phases; component 0 is linear, the rest sinusoidal.
#[derive(Debug, Clone, PartialEq)]
pub struct Time2VecLayer<P> {
    pub omega: P,
    pub phi: P,
}
param_tree!(Time2VecLayer { omega, phi });

/// Replacement values for masked feature slots.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskEmbedding<P> {
    /// One value per spatial feature column.
    pub spatial: P,
    /// One value per temporal feature column.
    pub temporal: P,
}
param_tree!(MaskEmbedding { spatial, temporal });

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<P> {
    pub query: Linear<P>,
    pub key: Linear<P>,
    pub value: Linear<P>,
    pub output: Linear<P>,
}
param_tree!(AttentionParams {}; query, key, value, output);

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<P> {
    pub ln1: LayerNormParams<P>,
    pub attn: AttentionParams<P>,
    pub ln2: LayerNormParams<P>,
    pub ff1: Linear<P>,
    pub ff2: Linear<P>,
}
param_tree!(BlockParams {}; ln1, attn, ln2, ff1, ff2);

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<P> {
    pub projection: ProjectionLayer<P>,
    pub time2vec: Option<Time2VecLayer<P>>,
    pub blocks: Vec<BlockParams<P>>,
    pub final_norm: LayerNormParams<P>,
    pub head: OutputHead<P>,
    pub mask: MaskEmbedding<P>,
}

impl<P> ModelParams<P> {
    pub fn try_map<Q, E>(
        &self,
        f: &mut impl FnMut(&str, &P) -> Result<Q, E>,
    ) -> Result<ModelParams<Q>, E> {
        Ok(ModelParams {
            projection: self.projection.try_map("projection", f)?,
            time2vec: self
                .time2vec
                .as_ref()
                .map(|t| t.try_map("time2vec", f))
                .transpose()?,
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.try_map(&format!("blocks.{i}"), f))
                .collect::<Result<_, _>>()?,
            final_norm: self.final_norm.try_map("final_norm", f)?,
            head: self.head.try_map("head", f)?,
            mask: self.mask.try_map("mask", f)?,
        })
    }

    pub fn map<Q>(&self, mut f: impl FnMut(&str, &P) -> Q) -> ModelParams<Q> {
        self.try_map(&mut |n, p| Ok::<_, std::convert::Infallible>(f(n, p)))
            .unwrap_or_else(|e| match e {})
    }

    pub fn for_each<'a>(&'a self, mut f: impl FnMut(&str, &'a P)) {
        self.projection.for_each("projection", &mut f);
        if let Some(t) = &self.time2vec {
            t.for_each("time2vec", &mut f);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.for_each(&format!("blocks.{i}"), &mut f);
        }
        self.final_norm.for_each("final_norm", &mut f);
        self.head.for_each("head", &mut f);
        self.mask.for_each("mask", &mut f);
    }

    pub fn for_each_mut<'a>(&'a mut self, mut f: impl FnMut(&str, &'a mut P)) {
        self.projection.for_each_mut("projection", &mut f);
        if let Some(t) = &mut self.time2vec {
            t.for_each_mut("time2vec", &mut f);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.for_each_mut(&format!("blocks.{i}"), &mut f);
        }
        self.final_norm.for_each_mut("final_norm", &mut f);
        self.head.for_each_mut("head", &mut f);
        self.mask.for_each_mut("mask", &mut f);
    }

    /// Leaves in traversal order.
    pub fn leaves(&self) -> Vec<&P> {
        let mut out = Vec::new();
        self.for_each(|_, p| out.push(p));
        out
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut P> {
        let mut out = Vec::new();
        self.for_each_mut(|_, p| out.push(p));
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.for_each(|n, _| out.push(n.to_string()));
        out
    }
}

impl<T: Scalar> ModelParams<Tensor<T>> {
    /// Normal(0, init_std) for projection and block matrices,
    /// zero biases and head, unit layer-norm gains.
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, cfg.init_std).expect("validated init_std");
        let mut gauss = |shape: &[usize]| Tensor::from_fn(shape, |_| T::lit(normal.sample(rng)));
        let d = cfg.d_model;
        let mut linear = |fan_in: usize, fan_out: usize| Linear {
            weight: gauss(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
        };
        let ln = || LayerNormParams {
            gain: Tensor::ones(&[d]),
            bias: Tensor::zeros(&[d]),
        };

        let projection = linear(cfg.projection_in(), d);
        let blocks = (0..cfg.n_blocks)
            .map(|_| BlockParams {
                ln1: ln(),
                attn: AttentionParams {
                    query: linear(d, d),
                    key: linear(d, d),
                    value: linear(d, d),
                    output: linear(d, d),
                },
                ln2: ln(),
                ff1: linear(d, cfg.d_ff),
                ff2: linear(cfg.d_ff, d),
            })
            .collect();
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let time2vec = (cfg.time2vec_dim > 0).then(|| Time2VecLayer {
            omega: Tensor::from_fn(&[cfg.time2vec_dim], |_| T::lit(unit.sample(rng))),
            phi: Tensor::zeros(&[cfg.time2vec_dim]),
        });
        let mask = MaskEmbedding {
            spatial: Tensor::from_fn(&[SPATIAL_COLS.len()], |_| T::lit(normal.sample(rng))),
            temporal: Tensor::from_fn(&[TEMPORAL_COLS.len()], |_| T::lit(normal.sample(rng))),
        };
        Self {
            projection,
            time2vec,
            blocks,
            final_norm: ln(),
            head: Linear {
                weight: Tensor::zeros(&[d, OUT_DIM]),
                bias: Tensor::zeros(&[OUT_DIM]),
            },
            mask,
        }
    }

    /// Records every tensor as a trainable leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> ModelParams<Var<'t, T>> {
        self.map(|_, t| tape.param(t.clone()))
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|_, t| Tensor::zeros(t.shape()))
    }

    pub fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, t| n += t.len());
        n
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(|_, t| ok &= t.is_finite());
        ok
    }

    /// Names and shapes, for config compatibility checks.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.for_each(|n, t| out.push((n.to_string(), t.shape().to_vec())));
        out
    }
}

impl<'t, T: Scalar> ModelParams<Var<'t, T>> {
    /// Gradient tree matching the bound parameters (zeros where unused).
    pub fn gradients(&self, grads: &Gradients<T>) -> ModelParams<Tensor<T>> {
        self.map(|_, v| grads.wrt(*v))
    }
}
