//! Unimodal space-time attention.
//!
//! One layer concatenates a modality's feature tokens with its `[CLS]` row,
//! runs single-head self-attention with a residual connection and post-norm,
//! then splits the result back apart. Layers cascade; the two modalities run
//! through independent stacks.

use rand::Rng;

use crate::error::{HstaError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Video,
    Special,
}

/// Feature tokens `[N×d]` plus the `[CLS]` row `[1×d]` of one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenState {
    pub features: Tensor,
    pub cls: Tensor,
    pub modality: Modality,
}

impl TokenState {
    pub fn new(features: Tensor, cls: Tensor, modality: Modality) -> Result<Self> {
        if features.rank() != 2 || cls.shape() != [1, features.cols()] {
            return Err(HstaError::dim("TokenState", features.shape(), cls.shape()));
        }
        Ok(TokenState {
            features,
            cls,
            modality,
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.features.rows()
    }

    pub fn width(&self) -> usize {
        self.cls.cols()
    }

    pub fn record(&self, tape: &mut Tape<'_>) -> TokenVars {
        TokenVars {
            features: tape.constant(self.features.clone()),
            cls: tape.constant(self.cls.clone()),
            modality: self.modality,
        }
    }
}

/// A [`TokenState`] living on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenVars {
    pub features: Var,
    pub cls: Var,
    pub modality: Modality,
}

impl TokenVars {
    pub fn read(&self, tape: &Tape<'_>) -> TokenState {
        TokenState {
            features: tape.value(self.features).clone(),
            cls: tape.value(self.cls).clone(),
            modality: self.modality,
        }
    }
}

#[derive(Clone, Debug)]
pub struct UstaLayerParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
}

impl UstaLayerParams {
    /// Projections uniform in `±1/√d`, LayerNorm at identity.
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut impl Rng) -> Result<Self> {
        let bound = 1.0 / (d as f64).sqrt();
        Ok(UstaLayerParams {
            w_q: store.add_uniform(format!("{prefix}.w_q"), &[d, d], bound, rng)?,
            w_k: store.add_uniform(format!("{prefix}.w_k"), &[d, d], bound, rng)?,
            w_v: store.add_uniform(format!("{prefix}.w_v"), &[d, d], bound, rng)?,
            ln_gamma: store.add(format!("{prefix}.ln_gamma"), Tensor::full(&[d], 1.0))?,
            ln_beta: store.add(format!("{prefix}.ln_beta"), Tensor::zeros(&[d]))?,
        })
    }

    pub fn width(&self, store: &ParamStore) -> usize {
        store.value(self.w_q).rows()
    }

    /// Scalar count of one layer: three `d×d` projections and the LayerNorm affine.
    pub fn scalar_count(d: usize) -> usize {
        3 * d * d + 2 * d
    }
}

/// `LayerNorm(z + softmax(q kᵀ/√d) v)` on `z = [features ‖ cls]`.
pub fn usta_layer(tape: &mut Tape<'_>, state: TokenVars, params: &UstaLayerParams) -> Result<TokenVars> {
    let d = tape.value(state.cls).cols();
    let pd = params.width(tape.store());
    if d != pd {
        return Err(HstaError::dim("usta_layer", tape.shape(state.cls), &[pd, pd]));
    }
    let n = tape.value(state.features).rows();
    let z = tape.concat_rows(state.features, state.cls)?;
    let w_q = tape.param(params.w_q);
    let w_k = tape.param(params.w_k);
    let w_v = tape.param(params.w_v);
    let q = tape.matmul(z, w_q)?;
    let k = tape.matmul(z, w_k)?;
    let v = tape.matmul(z, w_v)?;
    let scores = tape.matmul_t(q, k)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let attn = tape.softmax_rows(scores)?;
    let mixed = tape.matmul(attn, v)?;
    let residual = tape.add(z, mixed)?;
    let gamma = tape.param(params.ln_gamma);
    let beta = tape.param(params.ln_beta);
    let out = tape.layer_norm(residual, gamma, beta, LAYER_NORM_EPS)?;
    let (features, cls) = tape.split_rows(out, n)?;
    Ok(TokenVars {
        features,
        cls,
        modality: state.modality,
    })
}

/// Folds `depth` layers left to right; `depth == 0` returns the input untouched.
pub fn usta_stack(
    tape: &mut Tape<'_>,
    state: TokenVars,
    layers: &[UstaLayerParams],
    depth: usize,
) -> Result<TokenVars> {
    if layers.len() != depth {
        return Err(HstaError::Config(format!(
            "USTA stack configured for {depth} layers but {} were supplied",
            layers.len()
        )));
    }
    layers.iter().try_fold(state, |s, layer| usta_layer(tape, s, layer))
}

/// Runs the video and special stacks independently.
pub fn usta_parallel(
    tape: &mut Tape<'_>,
    video: TokenVars,
    special: TokenVars,
    video_layers: &[UstaLayerParams],
    special_layers: &[UstaLayerParams],
) -> Result<(TokenVars, TokenVars)> {
    let v = usta_stack(tape, video, video_layers, video_layers.len())?;
    let s = usta_stack(tape, special, special_layers, special_layers.len())?;
    Ok((v, s))
}

/// Value-level wrapper around [`usta_layer`].
pub fn usta_layer_forward(store: &ParamStore, state: &TokenState, params: &UstaLayerParams) -> Result<TokenState> {
    let mut tape = Tape::new(store);
    let s = state.record(&mut tape);
    let out = usta_layer(&mut tape, s, params)?;
    Ok(out.read(&tape))
}

/// Value-level wrapper around [`usta_stack`].
pub fn usta_stack_forward(
    store: &ParamStore,
    state: &TokenState,
    layers: &[UstaLayerParams],
    depth: usize,
) -> Result<TokenState> {
    let mut tape = Tape::new(store);
    let s = state.record(&mut tape);
    let out = usta_stack(&mut tape, s, layers, depth)?;
    Ok(out.read(&tape))
}

/// Value-level wrapper around [`usta_parallel`].
pub fn usta_parallel_forward(
    store: &ParamStore,
    video: &TokenState,
    special: &TokenState,
    video_layers: &[UstaLayerParams],
    special_layers: &[UstaLayerParams],
) -> Result<(TokenState, TokenState)> {
    let mut tape = Tape::new(store);
    let v = video.record(&mut tape);
    let s = special.record(&mut tape);
    let (v, s) = usta_parallel(&mut tape, v, s, video_layers, special_layers)?;
    Ok((v.read(&tape), s.read(&tape)))
}
