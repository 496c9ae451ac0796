//! Central finite differences, the oracle for every backward rule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::csta::{csta, CstaParams};
use crate::embedder::{embed_special_patches, embed_video_patches, EmbedderParams, Geometry};
use crate::error::{HstaError, Result};
use crate::model::{Fusion, HstaConfig, HstaModel, Sample};
use crate::params::{ParamId, ParamStore};
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::Tensor;
use crate::usta::{usta_stack, Modality, TokenState, UstaLayerParams};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Acceptance threshold on the max relative error.
pub const REL_TOLERANCE: f64 = 1e-6;

/// Magnitudes below this are compared absolutely: the relative error of a
/// gradient entry is `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub const REL_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Max entrywise [`relative_error`] between two same-shaped tensors.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// `(f(θ+h) − f(θ−h)) / 2h` for every coordinate of parameter `p`.
///
/// The parameter is restored bitwise after every probe.
pub fn finite_diff_grad<F>(store: &mut ParamStore, p: ParamId, step: f64, mut f: F) -> Result<Tensor>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if step <= 0.0 {
        return Err(HstaError::Contract(format!(
            "finite difference step must be > 0, got {step}"
        )));
    }
    let shape = store.value(p).shape().to_vec();
    let n = store.value(p).numel();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let orig = store.value(p).data()[i];
        store.get_mut(p).value.data_mut()[i] = orig + step;
        let plus = f(store)?;
        store.get_mut(p).value.data_mut()[i] = orig - step;
        let minus = f(store)?;
        store.get_mut(p).value.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    Tensor::new(shape, out)
}

/// Per-parameter outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GroupCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

impl GroupCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compares reverse-mode gradients with finite differences for every parameter
/// in `store`. `build` records the forward pass on a tape and returns the loss.
pub fn check_all<F>(store: &mut ParamStore, step: f64, build: F) -> Result<Vec<GroupCheck>>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    check_all_with(store, step, None, build)
}

/// Like [`check_all`], optionally corrupting one backward rule on the analytic side.
pub fn check_all_with<F>(store: &mut ParamStore, step: f64, fault: Option<OpKind>, build: F) -> Result<Vec<GroupCheck>>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new(store);
        if let Some(kind) = fault {
            tape.inject_fault(kind);
        }
        let loss = build(&mut tape)?;
        let grads = tape.backward(loss)?;
        grads.params().to_vec()
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(s);
        let loss = build(&mut tape)?;
        Ok(tape.value(loss).data()[0])
    };
    let ids: Vec<ParamId> = store.ids().collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let numeric = finite_diff_grad(store, id, step, eval)?;
        let a = analytic[id.index()]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(numeric.shape()));
        out.push(GroupCheck {
            name: store.get(id).name.clone(),
            max_rel_err: max_relative_error(&a, &numeric),
            max_abs_err: a.max_abs_diff(&numeric),
        });
    }
    Ok(out)
}

/// Checks for one component of the model.
#[derive(Clone, Debug)]
pub struct SuiteGroup {
    pub component: &'static str,
    pub checks: Vec<GroupCheck>,
}

impl SuiteGroup {
    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }
}

/// Model shape used by the end-to-end part of the suite.
#[derive(Clone, Copy, Debug)]
pub struct SuiteModel {
    pub d: usize,
    pub video_tokens: usize,
    pub special_tokens: usize,
    pub video_depth: usize,
    pub special_depth: usize,
    pub blocks: usize,
}

/// The two end-to-end shapes checked by default.
pub const SUITE_MODELS: [SuiteModel; 2] = [
    SuiteModel {
        d: 4,
        video_tokens: 2,
        special_tokens: 1,
        video_depth: 1,
        special_depth: 1,
        blocks: 1,
    },
    SuiteModel {
        d: 8,
        video_tokens: 4,
        special_tokens: 2,
        video_depth: 2,
        special_depth: 1,
        blocks: 2,
    },
];

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches")
}

fn tokens(rng: &mut ChaCha8Rng, n: usize, d: usize, modality: Modality) -> TokenState {
    TokenState::new(uniform(rng, &[n, d]), uniform(rng, &[1, d]), modality).expect("valid token state")
}

/// One graph that routes through every differentiable tape operation.
fn tensor_ops(fault: Option<OpKind>, rng: &mut ChaCha8Rng) -> Result<Vec<GroupCheck>> {
    let mut store = ParamStore::new();
    let a = store.add("ops.a", uniform(rng, &[3, 4]))?;
    let w = store.add("ops.w", uniform(rng, &[4, 4]))?;
    let b = store.add("ops.b", uniform(rng, &[3, 4]))?;
    let v = store.add("ops.v", uniform(rng, &[3, 4]))?;
    let bias = store.add("ops.bias", uniform(rng, &[4]))?;
    let gamma = store.add("ops.gamma", uniform(rng, &[4]))?;
    let beta = store.add("ops.beta", uniform(rng, &[4]))?;
    let mix = uniform(rng, &[3, 8]);
    check_all_with(&mut store, FD_STEP, fault, |t| {
        let (a, w, b, v) = (t.param(a), t.param(w), t.param(b), t.param(v));
        let (bias, gamma, beta) = (t.param(bias), t.param(gamma), t.param(beta));
        let x = t.matmul(a, w)?;
        let x = t.add_row(x, bias)?;
        let y = t.layer_norm(x, gamma, beta, 1e-5)?;
        let s = t.matmul_t(y, b)?;
        let s = t.scale(s, 0.5);
        let p = t.softmax_rows(s)?;
        let z = t.matmul(p, v)?;
        let z = t.add(z, y)?;
        let g = t.gelu(z);
        let top = t.slice_rows(g, 0, 2)?;
        let bottom = t.slice_rows(g, 2, 1)?;
        let c = t.concat_rows(bottom, top)?;
        let wide = t.concat_cols(c, y)?;
        let ws = t.weighted_sum(wide, mix.clone())?;
        let logits = t.slice_rows(c, 0, 1)?;
        let mse = t.mse_one_hot(logits, 2)?;
        let total = t.add(ws, mse)?;
        Ok(t.sum(total))
    })
}

fn usta_part(fault: Option<OpKind>, rng: &mut ChaCha8Rng) -> Result<Vec<GroupCheck>> {
    let (n, d) = (3, 4);
    let mut store = ParamStore::new();
    let layers = (0..2)
        .map(|l| UstaLayerParams::init(&mut store, &format!("usta{l}"), d, rng))
        .collect::<Result<Vec<_>>>()?;
    let state = tokens(rng, n, d, Modality::Video);
    let mix = uniform(rng, &[n + 1, d]);
    check_all_with(&mut store, FD_STEP, fault, |t| {
        let s = state.record(t);
        let out = usta_stack(t, s, &layers, layers.len())?;
        let all = t.concat_rows(out.features, out.cls)?;
        let all = t.gelu(all);
        t.weighted_sum(all, mix.clone())
    })
}

fn csta_part(fault: Option<OpKind>, rng: &mut ChaCha8Rng) -> Result<Vec<GroupCheck>> {
    let d = 4;
    let mut store = ParamStore::new();
    let params = CstaParams::init(&mut store, "csta", d, rng)?;
    let video = tokens(rng, 3, d, Modality::Video);
    let special = tokens(rng, 2, d, Modality::Special);
    let mix = uniform(rng, &[2, d]);
    check_all_with(&mut store, FD_STEP, fault, |t| {
        let (v, s) = (video.record(t), special.record(t));
        let (v, s) = csta(t, v, s, &params)?;
        let both = t.concat_rows(v.cls, s.cls)?;
        t.weighted_sum(both, mix.clone())
    })
}

fn embedder_part(fault: Option<OpKind>, rng: &mut ChaCha8Rng) -> Result<Vec<GroupCheck>> {
    let geometry = Geometry {
        height: 8,
        width: 4,
        channels: 1,
        patch: 4,
        tubelet: 2,
        frames: 4,
    };
    let d = 4;
    let mut store = ParamStore::new();
    let params = EmbedderParams::init(&mut store, geometry, d, rng)?;
    let video_patches = uniform(rng, &[geometry.video_tokens(), geometry.video_patch_len()]);
    let special_patches = uniform(rng, &[geometry.special_tokens(), geometry.special_patch_len()]);
    let rows = geometry.video_tokens() + geometry.special_tokens() + 2;
    let mix = uniform(rng, &[rows, d]);
    check_all_with(&mut store, FD_STEP, fault, |t| {
        let v = embed_video_patches(t, video_patches.clone(), &params)?;
        let s = embed_special_patches(t, special_patches.clone(), &params)?;
        let x = t.concat_rows(v.features, s.features)?;
        let x = t.concat_rows(x, v.cls)?;
        let x = t.concat_rows(x, s.cls)?;
        let x = t.gelu(x);
        t.weighted_sum(x, mix.clone())
    })
}

/// Geometry giving exactly the requested token counts with one-pixel-high
/// frames split into `special_tokens` patches of width 4.
fn suite_geometry(m: &SuiteModel) -> Result<Geometry> {
    if m.special_tokens == 0 || !m.video_tokens.is_multiple_of(m.special_tokens) {
        return Err(HstaError::Config(format!(
            "video tokens {} must be a positive multiple of special tokens {}",
            m.video_tokens, m.special_tokens
        )));
    }
    let time_slots = m.video_tokens / m.special_tokens;
    Ok(Geometry {
        height: 4,
        width: 4 * m.special_tokens,
        channels: 1,
        patch: 4,
        tubelet: 2,
        frames: 2 * time_slots,
    })
}

fn model_part(m: &SuiteModel, fault: Option<OpKind>, rng: &mut ChaCha8Rng) -> Result<Vec<GroupCheck>> {
    let geometry = suite_geometry(m)?;
    let config = HstaConfig {
        d: m.d,
        video_depth: m.video_depth,
        special_depth: m.special_depth,
        blocks: m.blocks,
        num_classes: 3,
        fusion: Fusion::CrossAttention,
        geometry,
    };
    let mut model = HstaModel::new(config, rng.random())?;
    let frames = uniform(rng, &[geometry.frames, geometry.height, geometry.width, 1]).map(f64::abs);
    let onset = uniform(rng, &[geometry.height, geometry.width, 1]).map(f64::abs);
    let apex = uniform(rng, &[geometry.height, geometry.width, 1]).map(f64::abs);
    let sample = Sample::from_frames(&geometry, &frames, &onset, &apex, 1)?;
    let frozen = model.clone();
    check_all_with(&mut model.store, FD_STEP, fault, |t| frozen.record_loss(t, &sample))
}

/// Finite-difference checks for the tensor operations, both attention
/// modules, the embedder and the end-to-end model shapes in `models`.
/// `fault` corrupts one backward rule on the analytic side.
pub fn run_suite(models: &[SuiteModel], fault: Option<OpKind>, seed: u64) -> Result<Vec<SuiteGroup>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups = vec![
        SuiteGroup {
            component: "tensor-core",
            checks: tensor_ops(fault, &mut rng)?,
        },
        SuiteGroup {
            component: "usta",
            checks: usta_part(fault, &mut rng)?,
        },
        SuiteGroup {
            component: "csta",
            checks: csta_part(fault, &mut rng)?,
        },
        SuiteGroup {
            component: "embedder",
            checks: embedder_part(fault, &mut rng)?,
        },
    ];
    for m in models {
        groups.push(SuiteGroup {
            component: "hsta-model",
            checks: model_part(m, fault, &mut rng)?,
        });
    }
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(3.0)).unwrap();
        let g = finite_diff_grad(&mut store, w, 1e-5, |s| {
            let v = s.value(w).data()[0];
            Ok(v * v)
        })
        .unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
        assert_eq!(store.value(w).data()[0], 3.0);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::row(&[1.0, 2.0, 3.0])).unwrap();
        let g = finite_diff_grad(&mut store, w, 1e-5, |_| Ok(4.2)).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn rejects_nonpositive_step() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(1.0)).unwrap();
        assert!(finite_diff_grad(&mut store, w, 0.0, |_| Ok(0.0)).is_err());
    }

    #[test]
    fn two_layer_composition_agrees_with_backward() {
        let mut store = ParamStore::new();
        let w1 = store
            .add(
                "w1",
                Tensor::from_rows(&[vec![0.3, -0.1, 0.7], vec![0.2, 0.5, -0.4]]).unwrap(),
            )
            .unwrap();
        let w2 = store
            .add("w2", Tensor::from_rows(&[vec![0.6], vec![-0.3], vec![0.8]]).unwrap())
            .unwrap();
        let x = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 0.25]]).unwrap();
        let checks = check_all(&mut store, FD_STEP, |t| {
            let xv = t.constant(x.clone());
            let a = t.param(w1);
            let h = t.matmul(xv, a)?;
            let h = t.gelu(h);
            let b = t.param(w2);
            let y = t.matmul(h, b)?;
            Ok(t.sum(y))
        })
        .unwrap();
        for c in checks {
            assert!(c.passed(REL_TOLERANCE), "{c:?}");
        }
    }

    #[test]
    fn suite_passes_without_faults() {
        let groups = run_suite(&SUITE_MODELS, None, 0).unwrap();
        assert_eq!(groups.len(), 6);
        for g in &groups {
            for c in &g.checks {
                assert!(c.passed(REL_TOLERANCE), "{}: {c:?}", g.component);
            }
        }
    }

    #[test]
    fn every_injected_fault_is_detected() {
        for kind in OpKind::DIFFERENTIABLE {
            let groups = run_suite(&[], Some(kind), 0).unwrap();
            let worst = groups.iter().map(SuiteGroup::max_rel_err).fold(0.0, f64::max);
            assert!(worst >= REL_TOLERANCE, "{} not caught", kind.name());
        }
    }

    #[test]
    fn suite_geometry_hits_token_counts() {
        for m in SUITE_MODELS {
            let g = suite_geometry(&m).unwrap();
            assert_eq!(
                (g.video_tokens(), g.special_tokens()),
                (m.video_tokens, m.special_tokens)
            );
        }
    }
}
