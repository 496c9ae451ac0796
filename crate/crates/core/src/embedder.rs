//! Tubelet embedding of the sampled video frames and the onset/apex pair.
//!
//! Frames are cut into non-overlapping `t×p×p` tubelets, each flattened in
//! `(time, row, column, channel)` order and projected linearly to width `d`.
//! Tokens are ordered time-major, then by patch row, then by patch column.
//! A learnable absolute positional embedding is added per token and a
//! learnable `[CLS]` seed is attached.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HstaError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::usta::{Modality, TokenState, TokenVars};

/// Spatial and temporal extents of the embedder input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Geometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Spatial patch side `p`.
    pub patch: usize,
    /// Temporal tubelet depth `t` for the video branch.
    pub tubelet: usize,
    /// Frames sampled per clip.
    pub frames: usize,
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry {
            height: 32,
            width: 32,
            channels: 1,
            patch: 8,
            tubelet: 2,
            frames: 6,
        }
    }
}

impl Geometry {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.patch == 0 || self.tubelet == 0 || self.channels == 0 || self.frames == 0 {
            return Err(HstaError::Config(format!(
                "patch, tubelet, channels and frames must be positive: {self:?}"
            )));
        }
        if self.height == 0 || !self.height.is_multiple_of(self.patch) {
            bad.push(format!("height {} by patch {}", self.height, self.patch));
        }
        if self.width == 0 || !self.width.is_multiple_of(self.patch) {
            bad.push(format!("width {} by patch {}", self.width, self.patch));
        }
        if !self.frames.is_multiple_of(self.tubelet) {
            bad.push(format!("frames {} by tubelet {}", self.frames, self.tubelet));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(HstaError::Config(format!("indivisible extents: {}", bad.join(", "))))
        }
    }

    pub fn patches_per_frame(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    /// `N_v = (T/t)·(H/p)·(W/p)`.
    pub fn video_tokens(&self) -> usize {
        (self.frames / self.tubelet) * self.patches_per_frame()
    }

    /// `N_s = (H/p)·(W/p)`.
    pub fn special_tokens(&self) -> usize {
        self.patches_per_frame()
    }

    pub fn video_patch_len(&self) -> usize {
        self.tubelet * self.patch * self.patch * self.channels
    }

    pub fn special_patch_len(&self) -> usize {
        2 * self.patch * self.patch * self.channels
    }
}

#[derive(Clone, Debug)]
pub struct EmbedderParams {
    pub video_proj: ParamId,
    pub special_proj: ParamId,
    pub video_pos: ParamId,
    pub special_pos: ParamId,
    pub video_cls: ParamId,
    pub special_cls: ParamId,
    pub geometry: Geometry,
}

impl EmbedderParams {
    pub fn init(store: &mut ParamStore, geometry: Geometry, d: usize, rng: &mut impl Rng) -> Result<Self> {
        geometry.validate()?;
        let vlen = geometry.video_patch_len();
        let slen = geometry.special_patch_len();
        let bound = 1.0 / (d as f64).sqrt();
        Ok(EmbedderParams {
            video_proj: store.add_uniform("embed.video_proj", &[vlen, d], 1.0 / (vlen as f64).sqrt(), rng)?,
            special_proj: store.add_uniform("embed.special_proj", &[slen, d], 1.0 / (slen as f64).sqrt(), rng)?,
            video_pos: store.add_uniform("embed.video_pos", &[geometry.video_tokens(), d], bound, rng)?,
            special_pos: store.add_uniform("embed.special_pos", &[geometry.special_tokens(), d], bound, rng)?,
            video_cls: store.add_uniform("embed.video_cls", &[1, d], bound, rng)?,
            special_cls: store.add_uniform("embed.special_cls", &[1, d], bound, rng)?,
            geometry,
        })
    }

    pub fn scalar_count(geometry: &Geometry, d: usize) -> usize {
        geometry.video_patch_len() * d
            + geometry.special_patch_len() * d
            + geometry.video_tokens() * d
            + geometry.special_tokens() * d
            + 2 * d
    }
}

/// Cuts a `[T×H×W×ch]` stack into `depth`-deep tubelets, one row per token.
fn tubelets(frames: &Tensor, geometry: &Geometry, depth: usize) -> Result<Tensor> {
    let (h, w, ch, p) = (geometry.height, geometry.width, geometry.channels, geometry.patch);
    let shape = frames.shape();
    if shape.len() != 4 || shape[1] != h || shape[2] != w || shape[3] != ch {
        return Err(HstaError::dim("tubelets", shape, &[depth, h, w, ch]));
    }
    let t = shape[0];
    if depth == 0 || !t.is_multiple_of(depth) {
        return Err(HstaError::Config(format!(
            "indivisible extents: frames {t} by tubelet {depth}"
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let patch_len = depth * p * p * ch;
    let tokens = (t / depth) * gh * gw;
    let src = frames.data();
    let mut out = Vec::with_capacity(tokens * patch_len);
    for tb in 0..t / depth {
        for py in 0..gh {
            for px in 0..gw {
                for dt in 0..depth {
                    let f = tb * depth + dt;
                    for dy in 0..p {
                        let y = py * p + dy;
                        let start = ((f * h + y) * w + px * p) * ch;
                        out.extend_from_slice(&src[start..start + p * ch]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![tokens, patch_len], out)
}

/// Flattened video tubelets `[N_v × t·p·p·ch]`.
pub fn video_tubelets(frames: &Tensor, geometry: &Geometry) -> Result<Tensor> {
    geometry.validate()?;
    if frames.shape().first() != Some(&geometry.frames) {
        return Err(HstaError::dim("embed_video", frames.shape(), &[geometry.frames]));
    }
    tubelets(frames, geometry, geometry.tubelet)
}

/// Onset and apex stacked on a depth-2 time axis, flattened `[N_s × 2·p·p·ch]`.
pub fn special_tubelets(onset: &Tensor, apex: &Tensor, geometry: &Geometry) -> Result<Tensor> {
    geometry.validate()?;
    let frame_shape = [geometry.height, geometry.width, geometry.channels];
    for f in [onset, apex] {
        if f.shape() != frame_shape {
            return Err(HstaError::dim("embed_special", f.shape(), &frame_shape));
        }
    }
    let mut data = Vec::with_capacity(2 * onset.numel());
    data.extend_from_slice(onset.data());
    data.extend_from_slice(apex.data());
    let stacked = Tensor::new(vec![2, geometry.height, geometry.width, geometry.channels], data)?;
    tubelets(&stacked, geometry, 2)
}

fn embed(
    tape: &mut Tape<'_>,
    patches: Tensor,
    proj: ParamId,
    pos: ParamId,
    cls: ParamId,
    modality: Modality,
) -> Result<TokenVars> {
    let x = tape.constant(patches);
    let w = tape.param(proj);
    let tokens = tape.matmul(x, w)?;
    let pos = tape.param(pos);
    let features = tape.add(tokens, pos)?;
    let cls = tape.param(cls);
    Ok(TokenVars {
        features,
        cls,
        modality,
    })
}

/// Records the video embedding for pre-cut tubelets.
pub fn embed_video_patches(tape: &mut Tape<'_>, patches: Tensor, params: &EmbedderParams) -> Result<TokenVars> {
    embed(
        tape,
        patches,
        params.video_proj,
        params.video_pos,
        params.video_cls,
        Modality::Video,
    )
}

/// Records the special-frame embedding for pre-cut tubelets.
pub fn embed_special_patches(tape: &mut Tape<'_>, patches: Tensor, params: &EmbedderParams) -> Result<TokenVars> {
    embed(
        tape,
        patches,
        params.special_proj,
        params.special_pos,
        params.special_cls,
        Modality::Special,
    )
}

pub fn embed_video(store: &ParamStore, frames: &Tensor, params: &EmbedderParams) -> Result<TokenState> {
    let patches = video_tubelets(frames, &params.geometry)?;
    let mut tape = Tape::new(store);
    let v = embed_video_patches(&mut tape, patches, params)?;
    Ok(v.read(&tape))
}

pub fn embed_special(store: &ParamStore, onset: &Tensor, apex: &Tensor, params: &EmbedderParams) -> Result<TokenState> {
    let patches = special_tubelets(onset, apex, &params.geometry)?;
    let mut tape = Tape::new(store);
    let s = embed_special_patches(&mut tape, patches, params)?;
    Ok(s.read(&tape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_all, FD_STEP, REL_TOLERANCE};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(geometry: Geometry, d: usize) -> (ParamStore, EmbedderParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = EmbedderParams::init(&mut store, geometry, d, &mut rng).unwrap();
        (store, p)
    }

    fn random_frames(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn default_token_counts() {
        let g = Geometry::default();
        assert_eq!(g.video_tokens(), 48);
        assert_eq!(g.special_tokens(), 16);
    }

    #[test]
    fn token_counts_match_closed_form() {
        for (h, w, p, t, frames) in [(16, 8, 4, 1, 3), (32, 32, 8, 2, 6), (12, 24, 6, 3, 9), (8, 8, 8, 4, 8)] {
            let g = Geometry {
                height: h,
                width: w,
                channels: 2,
                patch: p,
                tubelet: t,
                frames,
            };
            let (store, params) = setup(g, 4);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let v = embed_video(&store, &random_frames(&mut rng, &[frames, h, w, 2]), &params).unwrap();
            assert_eq!(v.num_tokens(), (frames / t) * (h / p) * (w / p));
            let s = embed_special(
                &store,
                &random_frames(&mut rng, &[h, w, 2]),
                &random_frames(&mut rng, &[h, w, 2]),
                &params,
            )
            .unwrap();
            assert_eq!(s.num_tokens(), (h / p) * (w / p));
        }
    }

    #[test]
    fn indivisible_geometry_names_dims() {
        let g = Geometry {
            height: 30,
            frames: 5,
            ..Geometry::default()
        };
        let msg = g.validate().unwrap_err().to_string();
        assert!(msg.contains("height 30") && msg.contains("frames 5"), "{msg}");
    }

    #[test]
    fn zero_input_gives_zero_tokens_and_seed() {
        let g = Geometry::default();
        let (mut store, p) = setup(g, 8);
        store.set_value(p.video_pos, Tensor::zeros(&[48, 8])).unwrap();
        store.set_value(p.special_pos, Tensor::zeros(&[16, 8])).unwrap();
        let v = embed_video(&store, &Tensor::zeros(&[6, 32, 32, 1]), &p).unwrap();
        assert!(v.features.data().iter().all(|&x| x == 0.0));
        assert_eq!(&v.cls, store.value(p.video_cls));
        let zero = Tensor::zeros(&[32, 32, 1]);
        let s = embed_special(&store, &zero, &zero, &p).unwrap();
        assert!(s.features.data().iter().all(|&x| x == 0.0));
        assert_eq!(&s.cls, store.value(p.special_cls));
    }

    #[test]
    fn single_pixel_activates_exactly_one_token() {
        let g = Geometry {
            height: 16,
            width: 16,
            channels: 1,
            patch: 4,
            tubelet: 2,
            frames: 4,
        };
        let (mut store, p) = setup(g, 4);
        store
            .set_value(p.video_pos, Tensor::zeros(&[g.video_tokens(), 4]))
            .unwrap();
        for f in 0..4 {
            for y in 0..16 {
                for x in 0..16 {
                    let mut frames = Tensor::zeros(&[4, 16, 16, 1]);
                    frames.data_mut()[(f * 16 + y) * 16 + x] = 1.0;
                    let v = embed_video(&store, &frames, &p).unwrap();
                    let active: Vec<usize> = (0..v.num_tokens())
                        .filter(|&i| v.features.row_slice(i).iter().any(|&z| z != 0.0))
                        .collect();
                    let expect = (f / 2) * 16 + (y / 4) * 4 + x / 4;
                    assert_eq!(active, vec![expect], "pixel ({f},{y},{x})");
                }
            }
        }
    }

    #[test]
    fn swapping_onset_and_apex_changes_tokens() {
        let g = Geometry::default();
        let (store, p) = setup(g, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_frames(&mut rng, &[32, 32, 1]);
        let b = random_frames(&mut rng, &[32, 32, 1]);
        let ab = embed_special(&store, &a, &b, &p).unwrap();
        let ba = embed_special(&store, &b, &a, &p).unwrap();
        assert_ne!(ab.features, ba.features);
        let aa = embed_special(&store, &a, &a, &p).unwrap();
        assert_eq!(aa.features, embed_special(&store, &a, &a, &p).unwrap().features);
    }

    #[test]
    fn linear_in_pixels_without_positions() {
        let g = Geometry::default();
        let (mut store, p) = setup(g, 8);
        store.set_value(p.video_pos, Tensor::zeros(&[48, 8])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_frames(&mut rng, &[6, 32, 32, 1]);
        let base = embed_video(&store, &x, &p).unwrap();
        let scaled = embed_video(&store, &x.scale(2.5), &p).unwrap();
        assert!(scaled.features.max_abs_diff(&base.features.scale(2.5)) < 1e-12);
    }

    #[test]
    fn projection_gradients_match_finite_differences() {
        let g = Geometry {
            height: 8,
            width: 8,
            channels: 1,
            patch: 4,
            tubelet: 2,
            frames: 2,
        };
        let (mut store, p) = setup(g, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let frames = random_frames(&mut rng, &[2, 8, 8, 1]);
        let onset = random_frames(&mut rng, &[8, 8, 1]);
        let apex = random_frames(&mut rng, &[8, 8, 1]);
        let weights = random_frames(&mut rng, &[10, 4]).reshape(&[10, 4]).unwrap();
        let checks = check_all(&mut store, FD_STEP, |t| {
            let v = embed_video_patches(t, video_tubelets(&frames, &g)?, &p)?;
            let s = embed_special_patches(t, special_tubelets(&onset, &apex, &g)?, &p)?;
            let a = t.gelu(v.features);
            let b = t.gelu(s.features);
            let all = t.concat_rows(a, b)?;
            let all = t.concat_rows(all, v.cls)?;
            let all = t.concat_rows(all, s.cls)?;
            t.weighted_sum(all, weights.clone())
        })
        .unwrap();
        for c in checks {
            assert!(c.passed(REL_TOLERANCE), "{c:?}");
        }
    }
}
