use dgfusion::harness::{
    degraded_scene, evaluate, grad_check, load_checkpoint, loss_base, mean_std, poly_lr,
    save_checkpoint, train, train_seed, with_toggles, AblationKind, ConfusionMatrix, Dataset,
    GradCheckOptions,
};
use dgfusion::scenegen::{PanopticMap, Split, Weather};
use dgfusion::RunConfig;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_run(pairs: &[(&str, &str)]) -> RunConfig {
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("height", "32"),
        ("width", "32"),
        ("steps", "3"),
        ("batch_size", "2"),
        ("n_train", "4"),
        ("n_val", "2"),
        ("n_test", "2"),
        ("eval_every", "0"),
        ("probe_size", "2"),
    ]
    .iter()
    .chain(pairs)
    {
        cfg = cfg.with(k, v).unwrap();
    }
    cfg
}

fn tiny_data(cfg: &RunConfig) -> Dataset {
    let t = &cfg.train;
    Dataset::generate(&cfg.scene, t.n_train, t.n_val, t.n_test).unwrap()
}

#[test]
fn random_predictor_miou_is_one_over_two_c_minus_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (c, n) = (4usize, 200_000);
    let gt = PanopticMap {
        height: 1,
        width: n,
        class_id: (0..n).map(|_| rng.random_range(0..c) as u16).collect(),
        instance_id: vec![1; n],
    };
    let pred: Vec<u16> = (0..n).map(|_| rng.random_range(0..c) as u16).collect();
    let mut cm = ConfusionMatrix::new(c);
    cm.add(&pred, &gt).unwrap();
    let expect = 1.0 / (2 * c - 1) as f64;
    assert!((cm.miou() - expect).abs() < 0.01, "{}", cm.miou());
}

#[test]
fn partial_overlap_toy() {
    // gt 0 0 0 1 1 1, pred 0 0 1 1 1 0: IoU 2/4 and 2/4
    let gt = PanopticMap {
        height: 2,
        width: 3,
        class_id: vec![0, 0, 0, 1, 1, 1],
        instance_id: vec![1; 6],
    };
    let mut cm = ConfusionMatrix::new(3);
    cm.add(&[0, 0, 1, 1, 1, 0], &gt).unwrap();
    assert_eq!(cm.iou(), vec![Some(0.5), Some(0.5), None]);
    assert_eq!(cm.miou(), 0.5);
}

#[test]
fn same_config_same_bits() {
    let cfg = tiny_run(&[]);
    let data = tiny_data(&cfg);
    let a = train(&cfg, &data, |_, _| {}).unwrap();
    let b = train(&cfg, &data, |_, _| {}).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.report.loss_curve, b.report.loss_curve);
    let c = train(&cfg.clone().with("seed", "1").unwrap(), &data, |_, _| {}).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn training_reduces_loss_on_a_small_set() {
    let cfg = tiny_run(&[("steps", "40"), ("n_train", "2"), ("probe_size", "2")]);
    let data = tiny_data(&cfg);
    let r = train(&cfg, &data, |_, _| {}).unwrap().report;
    assert!(
        r.final_loss < r.initial_loss,
        "{} -> {}",
        r.initial_loss,
        r.final_loss
    );
    assert_eq!(r.loss_curve.len(), 40);
}

#[test]
fn aux_toggle_drops_depth_head_parameters() {
    let cfg = tiny_run(&[("use_aux_depth_head", "false")]);
    let data = tiny_data(&cfg);
    let t = train(&cfg, &data, |_, _| {}).unwrap();
    assert!(t.params.names().all(|n| !n.starts_with("depth_head")));
    assert!(t.params.names().any(|n| n.starts_with("depth_fuse")));
    assert!(t.report.train_metrics.depth_mae.is_none());
}

#[test]
fn checkpoint_round_trip_and_refusals() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run(&[("steps", "1")]);
    let data = tiny_data(&cfg);
    let t = train(&cfg, &data, |_, _| {}).unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &cfg, 1, &t.params).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.params, t.params);
    assert_eq!(ck.config.hash(), cfg.hash());
    assert_eq!(ck.step, 1);
    let a = evaluate(&cfg, &t.params, data.split(Split::Val)).unwrap();
    let b = evaluate(&ck.config, &ck.params, data.split(Split::Val)).unwrap();
    assert_eq!(a, b);

    let mut bytes = std::fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n - 9] ^= 0x40;
    std::fs::write(&path, bytes).unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn gradients_match_finite_differences() {
    let r = grad_check(&GradCheckOptions::default()).unwrap();
    assert!(r.passed, "worst {} at {:.3e}", r.worst_group, r.max_rel_err);
    assert!(r.max_rel_err < 1e-4);
    assert!(r.groups.iter().any(|g| g.name.starts_with("dgf.")));
}

#[test]
fn corrupted_gradient_is_caught_and_named() {
    let r = grad_check(&GradCheckOptions {
        probes_per_tensor: 1,
        corrupt: Some(Box::new(|name, t| {
            if name == "seg.out.w" {
                for v in t.data_mut() {
                    *v *= 1.5;
                }
            }
        })),
        ..GradCheckOptions::default()
    })
    .unwrap();
    assert!(!r.passed);
    assert_eq!(r.worst_group, "seg.out.w");
}

#[test]
fn ablation_rows_and_weather() {
    let arch = AblationKind::Architecture.rows();
    assert!(!arch[0].use_aux_depth_head && !arch[0].use_dt);
    assert!(arch[1].use_aux_depth_head && !arch[1].use_dt);
    assert!(!arch[2].use_ct && arch[2].use_dt);
    assert!(arch.iter().all(|t| t.use_smoothness && t.use_tau_filter));
    let loss = AblationKind::Loss.rows();
    assert!(loss
        .iter()
        .all(|t| t.use_ct && t.use_aux_depth_head && t.use_dt));
    assert!(!loss[0].use_smoothness && !loss[0].use_tau_filter);
    assert!(loss[3].use_smoothness && loss[3].use_tau_filter);
    let d = degraded_scene(&RunConfig::default().scene);
    assert_eq!(d.weathers, vec![Weather::Fog, Weather::Snow]);
}

#[test]
fn loss_rows_never_share_a_hash_with_architecture_rows() {
    let base = RunConfig::default();
    for a in AblationKind::Architecture.rows() {
        for l in AblationKind::Loss.rows() {
            assert_ne!(
                with_toggles(&base, a, 0).hash(),
                with_toggles(&loss_base(&base), l, 0).hash()
            );
        }
    }
}

#[test]
fn mean_and_sample_std() {
    let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
    assert_eq!(m, 2.0);
    assert!((s - 1.0).abs() < 1e-15);
    assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
}

#[test]
fn seed_results_are_cached() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run(&[("steps", "1")]);
    let data = tiny_data(&cfg);
    let (a, cached_a) = train_seed(&cfg, &data, Some(dir.path())).unwrap();
    let (b, cached_b) = train_seed(&cfg, &data, Some(dir.path())).unwrap();
    assert!(!cached_a && cached_b);
    assert_eq!(a, b);
    assert_eq!(a.config_hash, cfg.hash());
}

#[test]
fn condition_classifier_learns_64_scenes() {
    let cfg = tiny_run(&[
        ("steps", "500"),
        ("batch_size", "4"),
        ("n_train", "64"),
        ("probe_size", "4"),
    ]);
    let data = tiny_data(&cfg);
    let r = train(&cfg, &data, |_, _| {}).unwrap().report;
    let acc = r.train_metrics.cond_accuracy.unwrap();
    assert!(acc >= 0.95, "train condition accuracy {acc}");
}

proptest! {
    #[test]
    fn poly_lr_is_monotone(steps in 1usize..5000, t in 0usize..5000, power in 0.1f64..2.0) {
        let a = poly_lr(1e-3, t, steps, power);
        let b = poly_lr(1e-3, t + 1, steps, power);
        prop_assert!(b <= a && a <= 1e-3 && b >= 0.0);
    }
}
