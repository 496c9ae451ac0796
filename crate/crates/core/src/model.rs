//! The hierarchical model: `M` blocks of (parallel USTA stacks → CSTA), a
//! linear head on `[cls_v ‖ cls_s]`, and the one-hot MSE objective.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::csta::{csta, CstaParams};
use crate::embedder::{self, EmbedderParams, Geometry};
use crate::error::{HstaError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::usta::{usta_parallel, TokenState, TokenVars, UstaLayerParams};

/// How the two modalities are joined at the end of each block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Crossmodal attention between each `[CLS]` and the other modality's features.
    #[default]
    CrossAttention,
    /// No crossmodal exchange; the head just sees both `[CLS]` rows side by side.
    ConcatOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HstaConfig {
    /// Embedding width `d`.
    pub d: usize,
    /// USTA depth on the video branch (`L_v`).
    pub video_depth: usize,
    /// USTA depth on the special-frame branch (`L_s`).
    pub special_depth: usize,
    /// Number of stacked blocks (`M`).
    pub blocks: usize,
    pub num_classes: usize,
    pub fusion: Fusion,
    pub geometry: Geometry,
}

impl Default for HstaConfig {
    fn default() -> Self {
        HstaConfig {
            d: 64,
            video_depth: 2,
            special_depth: 1,
            blocks: 4,
            num_classes: 3,
            fusion: Fusion::CrossAttention,
            geometry: Geometry::default(),
        }
    }
}

impl HstaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(HstaError::Config("embedding width d must be positive".into()));
        }
        if self.blocks == 0 {
            return Err(HstaError::Config("at least one block is required (M >= 1)".into()));
        }
        if self.num_classes < 2 {
            return Err(HstaError::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        self.geometry.validate()
    }

    /// Closed-form scalar parameter count.
    pub fn scalar_count(&self) -> usize {
        let d = self.d;
        let usta = self.blocks * (self.video_depth + self.special_depth) * UstaLayerParams::scalar_count(d);
        let fusion = match self.fusion {
            Fusion::CrossAttention => self.blocks * CstaParams::scalar_count(d),
            Fusion::ConcatOnly => 0,
        };
        EmbedderParams::scalar_count(&self.geometry, d) + usta + fusion + 2 * d * self.num_classes + self.num_classes
    }
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub video_layers: Vec<UstaLayerParams>,
    pub special_layers: Vec<UstaLayerParams>,
    pub csta: Option<CstaParams>,
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    /// `[2d × C]`
    pub weight: ParamId,
    /// `[C]`
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct ModelParams {
    pub embedder: EmbedderParams,
    pub blocks: Vec<BlockParams>,
    pub head: HeadParams,
}

/// A model instance: configuration, parameter values and their layout.
#[derive(Clone, Debug)]
pub struct HstaModel {
    pub config: HstaConfig,
    pub seed: u64,
    pub store: ParamStore,
    pub params: ModelParams,
}

/// Model inputs for one clip, already cut into tubelets.
#[derive(Clone, Debug)]
pub struct Sample {
    pub video_patches: Tensor,
    pub special_patches: Tensor,
    pub label: usize,
}

impl Sample {
    pub fn from_frames(
        geometry: &Geometry,
        video_frames: &Tensor,
        onset: &Tensor,
        apex: &Tensor,
        label: usize,
    ) -> Result<Self> {
        Ok(Sample {
            video_patches: embedder::video_tubelets(video_frames, geometry)?,
            special_patches: embedder::special_tubelets(onset, apex, geometry)?,
            label,
        })
    }
}

impl HstaModel {
    pub fn new(config: HstaConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embedder = EmbedderParams::init(&mut store, config.geometry, d, &mut rng)?;
        let mut blocks = Vec::with_capacity(config.blocks);
        for m in 0..config.blocks {
            let video_layers = (0..config.video_depth)
                .map(|l| UstaLayerParams::init(&mut store, &format!("block{m}.usta_v{l}"), d, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let special_layers = (0..config.special_depth)
                .map(|l| UstaLayerParams::init(&mut store, &format!("block{m}.usta_s{l}"), d, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let csta = match config.fusion {
                Fusion::CrossAttention => Some(CstaParams::init(&mut store, &format!("block{m}.csta"), d, &mut rng)?),
                Fusion::ConcatOnly => None,
            };
            blocks.push(BlockParams {
                video_layers,
                special_layers,
                csta,
            });
        }
        let c = config.num_classes;
        let head = HeadParams {
            weight: store.add_uniform("head.weight", &[2 * d, c], 1.0 / ((2 * d) as f64).sqrt(), &mut rng)?,
            bias: store.add("head.bias", Tensor::zeros(&[c]))?,
        };
        Ok(HstaModel {
            config,
            seed,
            store,
            params: ModelParams { embedder, blocks, head },
        })
    }

    /// Embeds a sample and records the full forward pass, returning logits `[1×C]`.
    pub fn record_logits(&self, tape: &mut Tape<'_>, sample: &Sample) -> Result<Var> {
        let p = &self.params;
        let video = embedder::embed_video_patches(tape, sample.video_patches.clone(), &p.embedder)?;
        let special = embedder::embed_special_patches(tape, sample.special_patches.clone(), &p.embedder)?;
        let (cls_v, cls_s) = hsta(tape, video, special, &p.blocks)?;
        predict_logits(tape, cls_v, cls_s, &p.head)
    }

    /// Records logits and the one-hot MSE loss.
    pub fn record_loss(&self, tape: &mut Tape<'_>, sample: &Sample) -> Result<Var> {
        let logits = self.record_logits(tape, sample)?;
        tape.mse_one_hot(logits, sample.label)
    }

    pub fn logits(&self, sample: &Sample) -> Result<Tensor> {
        let mut tape = Tape::new(&self.store);
        let l = self.record_logits(&mut tape, sample)?;
        Ok(tape.value(l).clone())
    }

    pub fn predict(&self, sample: &Sample) -> Result<usize> {
        Ok(argmax(self.logits(sample)?.data()))
    }

    pub fn loss(&self, sample: &Sample) -> Result<f64> {
        let mut tape = Tape::new(&self.store);
        let l = self.record_loss(&mut tape, sample)?;
        Ok(tape.value(l).data()[0])
    }

    /// Forward + backward for one sample, accumulating `weight · ∇loss` into
    /// the parameter gradients. Returns the unweighted loss.
    pub fn accumulate_gradients(&mut self, sample: &Sample, weight: f64) -> Result<f64> {
        let (loss, grads) = {
            let mut tape = Tape::new(&self.store);
            let l = self.record_loss(&mut tape, sample)?;
            let scaled = tape.scale(l, weight);
            let grads = tape.backward(scaled)?;
            (tape.value(l).data()[0], grads)
        };
        self.store.accumulate(grads.params());
        Ok(loss)
    }
}

/// One block: parallel USTA stacks, then crossmodal fusion when present.
pub fn hsta_block(
    tape: &mut Tape<'_>,
    video: TokenVars,
    special: TokenVars,
    block: &BlockParams,
) -> Result<(TokenVars, TokenVars)> {
    let (v, s) = usta_parallel(tape, video, special, &block.video_layers, &block.special_layers)?;
    match &block.csta {
        Some(c) => csta(tape, v, s, c),
        None => Ok((v, s)),
    }
}

/// Folds all blocks and returns the final `(cls_v, cls_s)`.
pub fn hsta(tape: &mut Tape<'_>, video: TokenVars, special: TokenVars, blocks: &[BlockParams]) -> Result<(Var, Var)> {
    if blocks.is_empty() {
        return Err(HstaError::Config("at least one block is required (M >= 1)".into()));
    }
    let (v, s) = blocks
        .iter()
        .try_fold((video, special), |(v, s), b| hsta_block(tape, v, s, b))?;
    Ok((v.cls, s.cls))
}

/// `[cls_v ‖ cls_s] · W + b`.
pub fn predict_logits(tape: &mut Tape<'_>, cls_v: Var, cls_s: Var, head: &HeadParams) -> Result<Var> {
    let joint = tape.concat_cols(cls_v, cls_s)?;
    let w = tape.param(head.weight);
    let b = tape.param(head.bias);
    let scores = tape.matmul(joint, w)?;
    tape.add_row(scores, b)
}

/// Value-level wrapper around [`hsta_block`].
pub fn hsta_block_forward(
    store: &ParamStore,
    video: &TokenState,
    special: &TokenState,
    block: &BlockParams,
) -> Result<(TokenState, TokenState)> {
    let mut tape = Tape::new(store);
    let v = video.record(&mut tape);
    let s = special.record(&mut tape);
    let (v, s) = hsta_block(&mut tape, v, s, block)?;
    Ok((v.read(&tape), s.read(&tape)))
}

/// Value-level wrapper around [`hsta`].
pub fn hsta_forward(
    store: &ParamStore,
    video: &TokenState,
    special: &TokenState,
    blocks: &[BlockParams],
) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new(store);
    let v = video.record(&mut tape);
    let s = special.record(&mut tape);
    let (cv, cs) = hsta(&mut tape, v, s, blocks)?;
    Ok((tape.value(cv).clone(), tape.value(cs).clone()))
}

/// Value-level wrapper around [`predict_logits`].
pub fn predict_logits_forward(store: &ParamStore, cls_v: &Tensor, cls_s: &Tensor, head: &HeadParams) -> Result<Tensor> {
    let mut tape = Tape::new(store);
    let v = tape.constant(cls_v.clone());
    let s = tape.constant(cls_s.clone());
    let l = predict_logits(&mut tape, v, s, head)?;
    Ok(tape.value(l).clone())
}

/// Mean over classes of `(logit − onehot(label))²`.
pub fn mse_loss(logits: &Tensor, label: usize) -> Result<f64> {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let l = tape.constant(logits.clone());
    let loss = tape.mse_one_hot(l, label)?;
    Ok(tape.value(loss).data()[0])
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}
