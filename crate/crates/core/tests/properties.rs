use std::path::Path;

use hsta::csta::{csta_forward, CstaParams};
use hsta::data::{uniform_sample_indices, BalancedSampler};
use hsta::eval::{
    aggregate_over_folds, compute_metrics, confusion_counts, kfold_folds, loso_folds, FoldOutcome, FoldPlan,
};
use hsta::experiment::ExperimentConfig;
use hsta::io;
use hsta::tensor::{concat_rows, softmax_rows, split_rows};
use hsta::train::{lr_at, TrainConfig};
use hsta::usta::{usta_layer_forward, Modality, TokenState, UstaLayerParams};
use hsta::{ParamStore, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-5.0f64..5.0, r * c).prop_map(move |data| Tensor::new(vec![r, c], data).unwrap())
    })
}

fn tested_once(plan: &FoldPlan, ids: &[usize]) -> bool {
    let mut tested: Vec<usize> = plan.folds.iter().flat_map(|f| f.test.iter().copied()).collect();
    tested.sort_unstable();
    let mut all = ids.to_vec();
    all.sort_unstable();
    let disjoint = plan
        .folds
        .iter()
        .all(|f| f.train.len() + f.test.len() == ids.len() && f.test.iter().all(|t| !f.train.contains(t)));
    tested == all && disjoint
}

fn predictions_and_labels(c: usize) -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (1..60usize).prop_flat_map(move |n| (prop::collection::vec(0..c, n), prop::collection::vec(0..c, n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(x in matrix(6, 8), shift in -50.0f64..50.0) {
        let p = softmax_rows(&x).unwrap();
        for i in 0..p.rows() {
            prop_assert!((p.row_slice(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.row_slice(i).iter().all(|&v| v > 0.0));
        }
        let shifted = softmax_rows(&x.map(|v| v + shift)).unwrap();
        prop_assert!(p.max_abs_diff(&shifted) < 1e-12);
    }

    #[test]
    fn concat_then_split_restores_parts(a in matrix(5, 4), extra in 1usize..5, seed in any::<u64>()) {
        let b = Tensor::full(&[extra, a.cols()], (seed % 7) as f64);
        let joined = concat_rows(&a, &b).unwrap();
        let (top, bottom) = split_rows(&joined, a.rows()).unwrap();
        prop_assert_eq!(top, a);
        prop_assert_eq!(bottom, b);
    }

    #[test]
    fn tensor_codec_round_trips(x in matrix(7, 7)) {
        let back = io::decode(&io::encode(&x), Path::new("mem")).unwrap();
        prop_assert_eq!(back, x);
    }

    #[test]
    fn kfold_partitions_ids(n in 2usize..80, k in 2usize..10, seed in any::<u64>()) {
        prop_assume!(k <= n);
        let ids: Vec<usize> = (0..n).map(|i| 3 * i + 1).collect();
        let plan = kfold_folds(&ids, k, seed).unwrap();
        prop_assert_eq!(plan.len(), k);
        prop_assert!(tested_once(&plan, &ids));
        let sizes: Vec<usize> = plan.folds.iter().map(|f| f.test.len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn loso_partitions_ids(subjects in prop::collection::vec(0usize..6, 2..60)) {
        let clips: Vec<(usize, usize)> = subjects.iter().copied().enumerate().collect();
        let distinct = { let mut s = subjects.clone(); s.sort_unstable(); s.dedup(); s.len() };
        prop_assume!(distinct >= 2);
        let plan = loso_folds(&clips).unwrap();
        prop_assert_eq!(plan.len(), distinct);
        let ids: Vec<usize> = (0..clips.len()).collect();
        prop_assert!(tested_once(&plan, &ids));
        for f in &plan.folds {
            let s = subjects[f.test[0]];
            prop_assert!(f.test.iter().all(|&i| subjects[i] == s));
            prop_assert!(f.train.iter().all(|&i| subjects[i] != s));
        }
    }

    #[test]
    fn sampler_exposure_differs_by_at_most_one(
        sizes in prop::collection::vec(1usize..30, 2..8),
        extra_batch in 0usize..10,
        seed in any::<u64>(),
        epoch in 0usize..20,
    ) {
        let c = sizes.len();
        let items: Vec<(usize, usize)> = sizes
            .iter()
            .enumerate()
            .flat_map(|(label, &n)| (0..n).map(move |_| label))
            .enumerate()
            .collect();
        let sampler = BalancedSampler::new(&items, c, c + extra_batch, seed).unwrap();
        let batches = sampler.epoch(epoch);
        prop_assert_eq!(batches.len(), sampler.batches_per_epoch());
        let mut exposure = vec![0usize; c];
        for id in batches.iter().flatten() {
            exposure[items[*id].1] += 1;
        }
        prop_assert_eq!(exposure.iter().sum::<usize>(), items.len());
        prop_assert!(exposure.iter().max().unwrap() - exposure.iter().min().unwrap() <= 1);
    }

    #[test]
    fn metrics_are_bounded((preds, labels) in predictions_and_labels(5)) {
        let m = compute_metrics(&confusion_counts(&preds, &labels, 5).unwrap()).unwrap();
        for v in [m.uf1, m.uar, m.acc] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn metrics_ignore_class_renaming((preds, labels) in predictions_and_labels(4), perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle()) {
        let m = compute_metrics(&confusion_counts(&preds, &labels, 4).unwrap()).unwrap();
        let rename = |v: &[usize]| v.iter().map(|&x| perm[x]).collect::<Vec<_>>();
        let r = compute_metrics(&confusion_counts(&rename(&preds), &rename(&labels), 4).unwrap()).unwrap();
        prop_assert_eq!(m.acc, r.acc);
        prop_assert!((m.uf1 - r.uf1).abs() < 1e-12);
        prop_assert!((m.uar - r.uar).abs() < 1e-12);
    }

    #[test]
    fn pooling_is_independent_of_fold_boundaries((preds, labels) in predictions_and_labels(3), cut in 0usize..60) {
        let cut = cut.min(preds.len());
        let whole = FoldOutcome { predictions: preds.clone(), labels: labels.clone() };
        let parts = [
            FoldOutcome { predictions: preds[..cut].to_vec(), labels: labels[..cut].to_vec() },
            FoldOutcome { predictions: preds[cut..].to_vec(), labels: labels[cut..].to_vec() },
        ];
        prop_assert_eq!(aggregate_over_folds(&[whole], 3).unwrap(), aggregate_over_folds(&parts, 3).unwrap());
    }

    #[test]
    fn sample_indices_are_increasing_and_in_range(total in 1usize..200, n in 1usize..200) {
        prop_assume!(n <= total);
        let idx = uniform_sample_indices(total, n).unwrap();
        prop_assert_eq!(idx.len(), n);
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(*idx.last().unwrap() < total);
    }

    #[test]
    fn warmup_rate_is_monotone_and_bounded(warmup in 1usize..6, steps_per_epoch in 1usize..12, step in 0usize..100) {
        let cfg = TrainConfig { warmup_epochs: warmup, epochs: warmup + 5, ..TrainConfig::default() };
        let (a, b) = (lr_at(step, steps_per_epoch, &cfg), lr_at(step + 1, steps_per_epoch, &cfg));
        prop_assert!(a <= b);
        prop_assert!(a >= cfg.warmup_init_lr && b <= cfg.base_lr);
    }

    #[test]
    fn usta_layer_commutes_with_row_permutation(seed in any::<u64>(), n in 1usize..6, perm_seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let d = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let params = UstaLayerParams::init(&mut store, "l", d, &mut rng).unwrap();
        let feats = Tensor::new(vec![n, d], (0..n * d).map(|i| ((i as f64 + seed as f64 % 13.0) * 0.37).sin()).collect()).unwrap();
        let cls = Tensor::new(vec![1, d], vec![0.3, -0.2, 0.9, 0.1]).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        let permute = |t: &Tensor| Tensor::from_rows(&perm.iter().map(|&i| t.row_slice(i).to_vec()).collect::<Vec<_>>()).unwrap();

        let out = usta_layer_forward(&store, &TokenState::new(feats.clone(), cls.clone(), Modality::Video).unwrap(), &params).unwrap();
        let out_p = usta_layer_forward(&store, &TokenState::new(permute(&feats), cls, Modality::Video).unwrap(), &params).unwrap();
        prop_assert!(out_p.features.max_abs_diff(&permute(&out.features)) < 1e-9);
        prop_assert!(out_p.cls.max_abs_diff(&out.cls) < 1e-9);
    }

    #[test]
    fn csta_leaves_features_untouched(seed in any::<u64>(), nv in 1usize..5, ns in 1usize..4) {
        let d = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let params = CstaParams::init(&mut store, "c", d, &mut rng).unwrap();
        let fill = |rows: usize, k: f64| Tensor::new(vec![rows, d], (0..rows * d).map(|i| (i as f64 * k).cos()).collect()).unwrap();
        let video = TokenState::new(fill(nv, 0.7), fill(1, 1.3), Modality::Video).unwrap();
        let special = TokenState::new(fill(ns, 0.4), fill(1, 2.1), Modality::Special).unwrap();
        let (v, s) = csta_forward(&store, &video, &special, &params).unwrap();
        prop_assert_eq!(v.features, video.features);
        prop_assert_eq!(s.features, special.features);
    }

    #[test]
    fn config_override_round_trips(d in 1usize..128, depth in 0usize..4) {
        let cfg = ExperimentConfig::default()
            .with_override("model.d", &d.to_string()).unwrap()
            .with_override("model.video_depth", &depth.to_string()).unwrap();
        prop_assert_eq!(cfg.model.d, d);
        prop_assert_eq!(cfg.model.video_depth, depth);
        prop_assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }
}
