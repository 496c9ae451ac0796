//! Crossmodal space-time attention.
//!
//! Each modality's `[CLS]` is projected by an MLP, then used as the single
//! query over `[cls' ‖ other modality's features]`. The attended vector is
//! added back to the projected `[CLS]` and mapped through a second MLP.
//! Feature tokens are never modified.

use rand::Rng;

use crate::error::{HstaError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::usta::{TokenState, TokenVars};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Gelu,
    /// No nonlinearity; makes the MLP an affine map.
    Identity,
}

/// `linear → activation → linear`, with biases.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub activation: Activation,
}

impl Mlp {
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Mlp {
            w1: store.add_uniform(format!("{prefix}.w1"), &[d, hidden], 1.0 / (d as f64).sqrt(), rng)?,
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[hidden]))?,
            w2: store.add_uniform(format!("{prefix}.w2"), &[hidden, d], 1.0 / (hidden as f64).sqrt(), rng)?,
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[d]))?,
            activation: Activation::Gelu,
        })
    }

    pub fn scalar_count(d: usize, hidden: usize) -> usize {
        2 * d * hidden + hidden + d
    }

    /// Turns this MLP into the exact identity map: `[I | 0]`, `[I ; 0]`, zero biases.
    pub fn set_identity(&mut self, store: &mut ParamStore) -> Result<()> {
        let (d, hidden) = {
            let w1 = store.value(self.w1);
            (w1.rows(), w1.cols())
        };
        if hidden < d {
            return Err(HstaError::Config(format!(
                "identity MLP needs hidden width >= {d}, got {hidden}"
            )));
        }
        let mut w1 = Tensor::zeros(&[d, hidden]);
        let mut w2 = Tensor::zeros(&[hidden, d]);
        for i in 0..d {
            w1.data_mut()[i * hidden + i] = 1.0;
            w2.data_mut()[i * d + i] = 1.0;
        }
        store.set_value(self.w1, w1)?;
        store.set_value(self.w2, w2)?;
        store.set_value(self.b1, Tensor::zeros(&[hidden]))?;
        store.set_value(self.b2, Tensor::zeros(&[d]))?;
        self.activation = Activation::Identity;
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w1 = tape.param(self.w1);
        let b1 = tape.param(self.b1);
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = match self.activation {
            Activation::Gelu => tape.gelu(h),
            Activation::Identity => h,
        };
        let w2 = tape.param(self.w2);
        let b2 = tape.param(self.b2);
        let y = tape.matmul(h, w2)?;
        tape.add_row(y, b2)
    }
}

#[derive(Clone, Debug)]
pub struct CstaDirectionParams {
    pub mlp_in: Mlp,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub mlp_out: Mlp,
}

impl CstaDirectionParams {
    /// Hidden width of both MLPs.
    pub fn hidden_width(d: usize) -> usize {
        2 * d
    }

    pub fn init(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut impl Rng) -> Result<Self> {
        let hidden = Self::hidden_width(d);
        let bound = 1.0 / (d as f64).sqrt();
        Ok(CstaDirectionParams {
            mlp_in: Mlp::init(store, &format!("{prefix}.mlp_in"), d, hidden, rng)?,
            w_q: store.add_uniform(format!("{prefix}.w_q"), &[d, d], bound, rng)?,
            w_k: store.add_uniform(format!("{prefix}.w_k"), &[d, d], bound, rng)?,
            w_v: store.add_uniform(format!("{prefix}.w_v"), &[d, d], bound, rng)?,
            mlp_out: Mlp::init(store, &format!("{prefix}.mlp_out"), d, hidden, rng)?,
        })
    }

    pub fn scalar_count(d: usize) -> usize {
        2 * Mlp::scalar_count(d, Self::hidden_width(d)) + 3 * d * d
    }
}

/// Independent parameters for the two directions.
#[derive(Clone, Debug)]
pub struct CstaParams {
    pub video_to_special: CstaDirectionParams,
    pub special_to_video: CstaDirectionParams,
}

impl CstaParams {
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(CstaParams {
            video_to_special: CstaDirectionParams::init(store, &format!("{prefix}.v2s"), d, rng)?,
            special_to_video: CstaDirectionParams::init(store, &format!("{prefix}.s2v"), d, rng)?,
        })
    }

    pub fn scalar_count(d: usize) -> usize {
        2 * CstaDirectionParams::scalar_count(d)
    }
}

/// Attention weights and output of one direction, kept for inspection.
pub struct DirectionOutput {
    pub cls: Var,
    pub attention: Var,
}

/// Refines `cls_src[1×d]` against `feat_other[N×d]`.
pub fn csta_direction(
    tape: &mut Tape<'_>,
    cls_src: Var,
    feat_other: Var,
    params: &CstaDirectionParams,
) -> Result<DirectionOutput> {
    let d = tape.value(cls_src).cols();
    let fd = tape.value(feat_other).cols();
    if d != fd {
        return Err(HstaError::dim(
            "csta_direction",
            tape.shape(cls_src),
            tape.shape(feat_other),
        ));
    }
    let c = params.mlp_in.forward(tape, cls_src)?;
    let cat = tape.concat_rows(c, feat_other)?;
    let w_q = tape.param(params.w_q);
    let w_k = tape.param(params.w_k);
    let w_v = tape.param(params.w_v);
    let q = tape.matmul(c, w_q)?;
    let k = tape.matmul(cat, w_k)?;
    let v = tape.matmul(cat, w_v)?;
    let scores = tape.matmul_t(q, k)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let attention = tape.softmax_rows(scores)?;
    let attended = tape.matmul(attention, v)?;
    let h = tape.add(c, attended)?;
    let cls = params.mlp_out.forward(tape, h)?;
    Ok(DirectionOutput { cls, attention })
}

/// Both directions; feature tokens pass through as the very same tape nodes.
pub fn csta(
    tape: &mut Tape<'_>,
    video: TokenVars,
    special: TokenVars,
    params: &CstaParams,
) -> Result<(TokenVars, TokenVars)> {
    let v_cls = csta_direction(tape, video.cls, special.features, &params.video_to_special)?.cls;
    let s_cls = csta_direction(tape, special.cls, video.features, &params.special_to_video)?.cls;
    Ok((
        TokenVars {
            features: video.features,
            cls: v_cls,
            modality: video.modality,
        },
        TokenVars {
            features: special.features,
            cls: s_cls,
            modality: special.modality,
        },
    ))
}

/// Value-level wrapper around [`csta_direction`].
pub fn csta_direction_forward(
    store: &ParamStore,
    cls_src: &Tensor,
    feat_other: &Tensor,
    params: &CstaDirectionParams,
) -> Result<Tensor> {
    let mut tape = Tape::new(store);
    let c = tape.constant(cls_src.clone());
    let f = tape.constant(feat_other.clone());
    let out = csta_direction(&mut tape, c, f, params)?;
    Ok(tape.value(out.cls).clone())
}

/// Value-level wrapper around [`csta`].
pub fn csta_forward(
    store: &ParamStore,
    video: &TokenState,
    special: &TokenState,
    params: &CstaParams,
) -> Result<(TokenState, TokenState)> {
    let mut tape = Tape::new(store);
    let v = video.record(&mut tape);
    let s = special.record(&mut tape);
    let (v, s) = csta(&mut tape, v, s, params)?;
    Ok((v.read(&tape), s.read(&tape)))
}
