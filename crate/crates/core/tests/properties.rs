use ndarray::Array2;
use proptest::prelude::*;

use restcal::adapt::{silhouette, spearman, subsample};
use restcal::config::{parse_config, RunConfig};
use restcal::eegpack::{Trial, TrialKind};
use restcal::losses::{ce_loss, subject_loss, task_loss, total_loss, update_prototypes, LossWeights, PrototypeBank, PrototypeInit, Triplet};
use restcal::nn::ForwardOut;
use restcal::preprocess::standardize;

fn rows(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), n)
}

fn rest(id: usize, data: Vec<f32>, channels: usize) -> Trial {
    let samples = data.len() / channels;
    Trial {
        id: format!("r{id}"),
        subject: "S1".into(),
        session: "s".into(),
        kind: TrialKind::RS,
        label: None,
        fs: 250.0,
        data: Array2::from_shape_vec((channels, samples), data).unwrap(),
    }
}

proptest! {
    #[test]
    fn doubling_the_margin_never_lowers_the_hinges(
        f in rows(5, 3),
        protos in rows(3, 3),
        g in rows(5, 3),
        m in 0.1f64..3.0,
    ) {
        let labels = [0usize, 1, 2, 0, 1];
        let trips: Vec<Triplet> = (0..5).map(|i| Triplet { anchor: i, positive: (i + 1) % 5, negative: (i + 2) % 5 }).collect();
        let t1 = task_loss(&f, &labels, &protos, m).unwrap().value;
        let t2 = task_loss(&f, &labels, &protos, 2.0 * m).unwrap().value;
        prop_assert!(t2 >= t1);
        let s1 = subject_loss(&g, &trips, m).unwrap().value;
        let s2 = subject_loss(&g, &trips, 2.0 * m).unwrap().value;
        prop_assert!(s2 >= s1);
    }

    #[test]
    fn total_is_at_least_cross_entropy(
        logits in rows(4, 2),
        f in rows(4, 3),
        g in rows(4, 3),
        protos in rows(2, 3),
        l1 in 0.0f64..2.0,
        l2 in 0.0f64..2.0,
    ) {
        let outs: Vec<ForwardOut<f64>> = (0..4)
            .map(|i| ForwardOut { f: f[i].clone(), g: g[i].clone(), logits: logits[i].clone() })
            .collect();
        let labels = [Some(0), Some(1), Some(1), None];
        let trips: Vec<Triplet> = (0..4).map(|i| Triplet { anchor: i, positive: i, negative: (i + 1) % 4 }).collect();
        let w = LossWeights { lambda1: l1, lambda2: l2, ..LossWeights::default() };
        let t = total_loss(&outs, &labels, &trips, Some(&protos), &w).unwrap();
        let ce = ce_loss(&logits[..3], &[0, 1, 1]).unwrap().value;
        prop_assert!((t.ce - ce).abs() < 1e-12);
        prop_assert!(t.total >= t.ce - 1e-12);
        prop_assert!((t.total - (t.ce + l1 * t.task + l2 * t.subject)).abs() < 1e-9);
    }

    #[test]
    fn prototype_update_moves_only_present_classes(
        protos in prop::collection::vec(prop::collection::vec(-2.0f32..2.0, 4), 3),
        f in prop::collection::vec(prop::collection::vec(-2.0f32..2.0, 4), 1..6),
        class in 0usize..3,
    ) {
        let mut bank = PrototypeBank { prototypes: protos.clone(), epsilon: 0.1, init: PrototypeInit::FirstEpochMean };
        let labels = vec![Some(class); f.len()];
        update_prototypes(&mut bank, &f, &labels);
        for (k, (new, old)) in bank.prototypes.iter().zip(&protos).enumerate() {
            if k != class {
                prop_assert_eq!(new, old);
            }
        }
        // a step towards the batch mean never increases the distance to it
        let mean: Vec<f32> = (0..4).map(|j| f.iter().map(|x| x[j]).sum::<f32>() / f.len() as f32).collect();
        let d = |p: &[f32]| p.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f32>();
        prop_assert!(d(&bank.prototypes[class]) <= d(&protos[class]) + 1e-5);
    }

    #[test]
    fn rank_and_cluster_scores_are_bounded(
        x in prop::collection::vec(-5.0f64..5.0, 3..12),
        pts in prop::collection::vec(prop::collection::vec(-5.0f32..5.0, 2), 4..12),
    ) {
        let y: Vec<f64> = x.iter().map(|v| v * v).collect();
        let r = spearman(&x, &y);
        prop_assert!((-1.0..=1.0).contains(&r));
        prop_assert!((spearman(&y, &x) - r).abs() < 1e-12);
        let labels: Vec<usize> = (0..pts.len()).map(|i| i % 3).collect();
        let s = silhouette(&pts, &labels);
        prop_assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn standardized_channels_are_zero_mean_unit_variance(
        data in prop::collection::vec(-50.0f32..50.0, 2 * 64),
        offset in -100.0f32..100.0,
    ) {
        let shifted: Vec<f32> = data.iter().map(|v| v + offset).collect();
        let (z, constant) = standardize(&rest(0, shifted, 2));
        prop_assert!(constant.is_empty());
        for row in z.data.rows() {
            let n = row.len() as f64;
            let m = row.iter().map(|&v| v as f64).sum::<f64>() / n;
            let v = row.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / n;
            prop_assert!(m.abs() < 1e-4);
            prop_assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn subsample_keeps_order_and_count(n in 1usize..30, fraction in 0.01f64..1.0, seed in 0u64..500) {
        let rs: Vec<Trial> = (0..n).map(|i| rest(i, vec![i as f32; 4], 2)).collect();
        let sub = subsample(&rs, fraction, seed);
        prop_assert_eq!(sub.len(), ((fraction * n as f64).round() as usize).min(n));
        let idx: Vec<usize> = sub.iter().map(|t| t.id[1..].parse().unwrap()).collect();
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(subsample(&rs, fraction, seed), sub);
    }

    #[test]
    fn snapshots_reparse_to_the_same_config(
        seed in 0u64..10_000,
        gamma1 in 0.0f64..5.0,
        gamma2 in 0.0f64..50.0,
        steps in 0usize..500,
        epochs in 1usize..200,
    ) {
        let mut cfg = RunConfig { seed, output: "/tmp/out".into(), ..RunConfig::default() };
        cfg.calib.gamma1 = gamma1;
        cfg.calib.gamma2 = gamma2;
        cfg.calib.steps = steps;
        cfg.train.epochs = epochs;
        cfg.derive_seeds();
        let text = serde_json::to_string(&cfg.snapshot()).unwrap();
        let back = parse_config(&text, std::path::Path::new("/")).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
