//! Acceptance checks, one line per criterion. Runs without the libtest
//! harness so the lines appear in order and uncaptured; exits non-zero if
//! any criterion fails.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use hsta::csta::{csta_forward, CstaParams};
use hsta::data::{generate_dataset, BalancedSampler};
use hsta::eval::{compute_metrics, confusion_counts, kfold_folds, loso_folds, ConfusionCounts, FoldPlan};
use hsta::experiment::{run_crossval, ExperimentConfig};
use hsta::gradcheck::{run_suite, FD_STEP, REL_TOLERANCE, SUITE_MODELS};
use hsta::model::Fusion;
use hsta::train::{lr_at, TrainConfig};
use hsta::usta::{usta_layer_forward, Modality, TokenState, UstaLayerParams};
use hsta::{ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect(),
    )
    .unwrap()
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn gradient_suite() -> Check {
    let started = Instant::now();
    let groups = run_suite(&SUITE_MODELS, None, 0).map_err(|e| e.to_string())?;
    let secs = started.elapsed().as_secs_f64();
    let count: usize = groups.iter().map(|g| g.checks.len()).sum();
    let worst = groups.iter().map(|g| g.max_rel_err()).fold(0.0, f64::max);
    let msg = format!("worst relative error {worst:.2e} over {count} parameter groups (step {FD_STEP:e}), {secs:.1} s");
    if worst < REL_TOLERANCE && secs < 60.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn csta_passthrough() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..100 {
        let d = rng.random_range(1..=12);
        let (nv, ns) = (rng.random_range(1..=8), rng.random_range(1..=4));
        let mut store = ParamStore::new();
        let params = CstaParams::init(&mut store, "csta", d, &mut rng).unwrap();
        let video = TokenState::new(
            random_tensor(&mut rng, nv, d),
            random_tensor(&mut rng, 1, d),
            Modality::Video,
        )
        .unwrap();
        let special = TokenState::new(
            random_tensor(&mut rng, ns, d),
            random_tensor(&mut rng, 1, d),
            Modality::Special,
        )
        .unwrap();
        let (v, s) = csta_forward(&store, &video, &special, &params).map_err(|e| e.to_string())?;
        if bits(&v.features) != bits(&video.features) || bits(&s.features) != bits(&special.features) {
            return Err(format!("features changed in trial {trial}"));
        }
    }
    Ok("features bitwise unchanged in 100 trials".into())
}

fn usta_equivariance() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let d = rng.random_range(2..=12);
        let n = rng.random_range(2..=10);
        let mut store = ParamStore::new();
        let params = UstaLayerParams::init(&mut store, "usta", d, &mut rng).unwrap();
        let feats = random_tensor(&mut rng, n, d);
        let cls = random_tensor(&mut rng, 1, d);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let permute =
            |t: &Tensor| Tensor::from_rows(&perm.iter().map(|&i| t.row_slice(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let state = TokenState::new(feats.clone(), cls.clone(), Modality::Video).unwrap();
        let permuted = TokenState::new(permute(&feats), cls, Modality::Video).unwrap();
        let a = usta_layer_forward(&store, &state, &params).map_err(|e| e.to_string())?;
        let b = usta_layer_forward(&store, &permuted, &params).map_err(|e| e.to_string())?;
        worst = worst
            .max(b.features.max_abs_diff(&permute(&a.features)))
            .max(b.cls.max_abs_diff(&a.cls));
    }
    let msg = format!("max deviation {worst:.2e} over 100 trials (limit 1e-9)");
    if worst <= 1e-9 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Counts straight from the definitions, one class at a time.
fn brute_force(preds: &[usize], labels: &[usize], c: usize) -> (f64, f64, f64) {
    let mut f1 = 0.0;
    let mut recall = 0.0;
    for k in 0..c {
        let tp = preds.iter().zip(labels).filter(|&(&p, &l)| p == k && l == k).count() as f64;
        let fp = preds.iter().zip(labels).filter(|&(&p, &l)| p == k && l != k).count() as f64;
        let fn_ = preds.iter().zip(labels).filter(|&(&p, &l)| p != k && l == k).count() as f64;
        if 2.0 * tp + fp + fn_ > 0.0 {
            f1 += 2.0 * tp / (2.0 * tp + fp + fn_);
        }
        if tp + fn_ > 0.0 {
            recall += tp / (tp + fn_);
        }
    }
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64;
    (f1 / c as f64, recall / c as f64, correct / labels.len() as f64)
}

fn metric_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for c in [2, 3, 7] {
        for _ in 0..1000 {
            let n = rng.random_range(1..=50);
            let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            let m = compute_metrics(&confusion_counts(&preds, &labels, c).unwrap()).unwrap();
            let (uf1, uar, acc) = brute_force(&preds, &labels, c);
            worst = worst
                .max((m.uf1 - uf1).abs())
                .max((m.uar - uar).abs())
                .max((m.acc - acc).abs());
        }
    }
    let hand = compute_metrics(&ConfusionCounts {
        tp: vec![3, 3],
        fp: vec![1, 1],
        fn_: vec![1, 1],
        n: vec![4, 4],
    })
    .unwrap();
    let hand_ok = [hand.uf1, hand.uar, hand.acc].iter().all(|&v| (v - 0.75).abs() < 1e-12);
    let msg = format!(
        "max deviation {worst:.1e} over 3000 cases; hand case UF1={} UAR={} ACC={}",
        hand.uf1, hand.uar, hand.acc
    );
    if worst <= 1e-12 && hand_ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn tested_exactly_once(plan: &FoldPlan, ids: &[usize]) -> bool {
    let mut tested: Vec<usize> = plan.folds.iter().flat_map(|f| f.test.clone()).collect();
    tested.sort_unstable();
    let mut expected = ids.to_vec();
    expected.sort_unstable();
    tested == expected
        && plan
            .folds
            .iter()
            .all(|f| f.train.len() + f.test.len() == ids.len() && f.train.iter().all(|t| !f.test.contains(t)))
}

fn partitions() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..100 {
        let subjects = rng.random_range(2..=12);
        let mut clips = Vec::new();
        let mut next_id = 1000 * trial;
        for s in 0..subjects {
            for _ in 0..rng.random_range(1..=8) {
                clips.push((next_id, 100 + 7 * s));
                next_id += 1;
            }
        }
        clips.shuffle(&mut rng);
        let ids: Vec<usize> = clips.iter().map(|c| c.0).collect();
        let loso = loso_folds(&clips).map_err(|e| e.to_string())?;
        let k = rng.random_range(2..=ids.len().min(10));
        let kfold = kfold_folds(&ids, k, rng.random()).map_err(|e| e.to_string())?;
        if loso.len() != subjects || !tested_exactly_once(&loso, &ids) || !tested_exactly_once(&kfold, &ids) {
            return Err(format!("trial {trial}: a clip was not tested exactly once"));
        }
    }
    Ok("LOSO and K-fold plans partition the clips in 100 trials".into())
}

fn schedule() -> Check {
    let cfg = TrainConfig::default();
    let steps_per_epoch = 9;
    let warmup = cfg.warmup_epochs * steps_per_epoch;
    let first = lr_at(0, steps_per_epoch, &cfg);
    let after = lr_at(warmup, steps_per_epoch, &cfg);
    let mut worst = (first - 1e-6).abs().max((after - 5e-5).abs());
    for s in 0..warmup {
        let expected = 1e-6 + (5e-5 - 1e-6) * s as f64 / (warmup - 1) as f64;
        worst = worst.max((lr_at(s, steps_per_epoch, &cfg) - expected).abs());
    }
    let msg = format!("lr(0)={first:e}, lr({warmup})={after:e}, max deviation from the line {worst:.1e}");
    if worst <= 1e-12 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn sampler_bound() -> Check {
    let mut spreads = Vec::new();
    for sizes in [vec![10, 10, 10], vec![9, 3, 3], vec![50, 5, 5, 5, 5, 5, 5]] {
        let c = sizes.len();
        let items: Vec<(usize, usize)> = sizes
            .iter()
            .enumerate()
            .flat_map(|(label, &n)| std::iter::repeat_n(label, n))
            .enumerate()
            .collect();
        let mut spread = 0;
        for seed in 0..5 {
            let sampler = BalancedSampler::new(&items, c, c.max(6), seed).map_err(|e| e.to_string())?;
            for epoch in 0..20 {
                let mut exposure = vec![0usize; c];
                for id in sampler.epoch(epoch).into_iter().flatten() {
                    exposure[items[id].1] += 1;
                }
                spread = spread.max(exposure.iter().max().unwrap() - exposure.iter().min().unwrap());
            }
        }
        spreads.push(format!("{sizes:?}: {spread}"));
        if spread > 1 {
            return Err(format!("exposure spread {}", spreads.join(", ")));
        }
    }
    Ok(format!("max per-epoch exposure spread {}", spreads.join(", ")))
}

fn jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn end_to_end() -> Check {
    let mut cfg = ExperimentConfig::default();
    cfg.train.epochs = 30;
    cfg.train.base_lr = 1e-3;
    let started = Instant::now();
    let dataset = generate_dataset(&cfg.data).map_err(|e| e.to_string())?;
    let result = run_crossval(&dataset, &cfg, jobs()).map_err(|e| e.to_string())?;
    let secs = started.elapsed().as_secs_f64();
    let msg = format!(
        "pooled UF1 {:.3} (need >= 0.90), 5 folds x 30 epochs in {:.0} s on {} core(s) (limit 900 s)",
        result.pooled.uf1,
        secs,
        jobs()
    );
    if result.pooled.uf1 >= 0.90 && secs < 900.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn ablation_trend() -> Check {
    let mut base = ExperimentConfig::default();
    base.data.subject_shift = 2.0;
    base.model.d = 32;
    base.model.blocks = 1;
    base.train.epochs = 30;
    base.train.base_lr = 1e-3;
    let dataset = generate_dataset(&base.data).map_err(|e| e.to_string())?;
    let variant = |seed: u64, depth: usize, fusion: Fusion| {
        let mut cfg = base.clone();
        cfg.seed = seed;
        cfg.model.video_depth = depth;
        cfg.model.special_depth = depth;
        cfg.model.fusion = fusion;
        run_crossval(&dataset, &cfg, jobs())
            .map(|r| r.pooled.uf1)
            .map_err(|e| e.to_string())
    };
    let mut rows = Vec::new();
    let mut wins = 0;
    for seed in 0..3 {
        let full = variant(seed, 1, Fusion::CrossAttention)?;
        let shallow = variant(seed, 0, Fusion::CrossAttention)?;
        let concat = variant(seed, 1, Fusion::ConcatOnly)?;
        wins += usize::from(full > shallow && full > concat);
        rows.push(format!(
            "seed {seed}: {full:.3} vs L=0 {shallow:.3}, concat {concat:.3}"
        ));
    }
    let msg = format!("full model wins {wins}/3 ({})", rows.join("; "));
    if wins == 3 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

const DETERMINISM_CONFIG: &str = r#"
k = 4
[data]
num_subjects = 8
clips_per_subject = 6
height = 16
width = 16
[model]
d = 16
blocks = 2
[model.geometry]
height = 16
width = 16
[train]
epochs = 4
warmup_epochs = 2
batch_size = 8
base_lr = 1e-3
"#;

fn crossval_determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    fs::write(dir.path().join("exp.toml"), DETERMINISM_CONFIG).map_err(|e| e.to_string())?;
    let hsta = |args: &[&str]| -> Result<(), String> {
        let out = Command::new(env!("CARGO_BIN_EXE_hsta"))
            .current_dir(dir.path())
            .args(args)
            .output()
            .map_err(|e| e.to_string())?;
        if out.status.success() {
            Ok(())
        } else {
            Err(String::from_utf8_lossy(&out.stderr).into_owned())
        }
    };
    hsta(&["gen", "--config", "exp.toml"])?;
    hsta(&["crossval", "--config", "exp.toml", "--seed", "7", "--out", "a"])?;
    hsta(&["crossval", "--config", "exp.toml", "--seed", "7", "--out", "b"])?;
    hsta(&[
        "crossval", "--config", "exp.toml", "--seed", "7", "--out", "c", "--jobs", "4",
    ])?;
    let read = |run: &str| fs::read(dir.path().join(run).join("report.txt")).map_err(|e| e.to_string());
    let a = read("a")?;
    let identical = a == read("b")? && a == read("c")?;
    let msg = format!("report.txt ({} bytes) identical across 3 runs incl. --jobs 4", a.len());
    if identical && Path::new(&dir.path().join("a/predictions.csv")).is_file() {
        Ok(msg)
    } else {
        Err("reports differ between reruns".into())
    }
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("gradient suite", gradient_suite),
        ("CSTA passthrough", csta_passthrough),
        ("USTA permutation equivariance", usta_equivariance),
        ("metric oracle", metric_oracle),
        ("protocol partitions", partitions),
        ("schedule exactness", schedule),
        ("balanced sampler bound", sampler_bound),
        ("synthetic end-to-end", end_to_end),
        ("ablation trend", ablation_trend),
        ("crossval determinism", crossval_determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let number = (i + 1).to_string();
        if !filter.is_empty() && !filter.contains(&number) {
            continue;
        }
        match check() {
            Ok(detail) => println!("criterion {number:>2} PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {number:>2} FAIL  {name}: {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
