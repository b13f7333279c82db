use dgfusion::fusenet::{
    depth_token, depth_tokens_fast, forward, forward_inference, window_partition,
    window_reassemble, Graph, Modality, ModelConfig, ParamStore,
};
use dgfusion::scenegen::{generate_scene, MultimodalSample, SceneConfig};
use diffmath::Tensor;
use proptest::prelude::*;

fn scene() -> MultimodalSample {
    let cfg = SceneConfig {
        height: 32,
        width: 32,
        ..SceneConfig::default()
    };
    generate_scene(&cfg, 4).unwrap()
}

fn model(ct: bool, aux: bool, dt: bool) -> ModelConfig {
    ModelConfig {
        height: 32,
        width: 32,
        use_ct: ct,
        use_aux_depth_head: aux,
        use_dt: dt,
        ..ModelConfig::default()
    }
}

fn values(g: &Graph, vars: &[diffmath::Var]) -> Vec<Tensor> {
    vars.iter().map(|&v| g.tape.value(v).clone()).collect()
}

#[test]
fn windows_round_trip_exactly() {
    let params = ParamStore::default();
    for k in [4, 8, 16] {
        for (h, w) in [(16, 16), (13, 21), (32, 8), (5, 7)] {
            let x = Tensor::from_fn(&[3, h, w], |i| i as f64 * 0.5 - 7.0);
            let mut g = Graph::new(&params, false);
            let v = g.tape.constant(x.clone());
            let (win, grid) = window_partition(&mut g, v, k).unwrap();
            assert_eq!(g.tape.shape(win), &[h.div_ceil(k) * w.div_ceil(k), 3, k, k]);
            let back = window_reassemble(&mut g, win, &grid).unwrap();
            assert_eq!(g.tape.value(back), &x, "k={k} {h}x{w}");
        }
    }
}

#[test]
fn token_counts_follow_the_toggles() {
    let s = scene();
    for (ct, dt) in [(false, false), (true, false), (false, true), (true, true)] {
        let cfg = model(ct, true, dt);
        let params = cfg.init_params(0).unwrap();
        let mut g = Graph::new(&params, false).with_trace();
        forward(&mut g, &cfg, &s).unwrap();
        let traces = g.traces();
        assert_eq!(traces.len(), 4 * cfg.secondary().len());
        for t in traces {
            let extra = t.windows * (ct as usize + dt as usize);
            assert_eq!(t.query_tokens, t.rgb_tokens + extra, "{t:?}");
            assert_eq!(t.output_tokens, t.rgb_tokens);
            let k = cfg.window_at(t.level);
            let (h, w) = cfg.level_sizes()[t.level];
            assert_eq!(t.windows, h.div_ceil(k) * w.div_ceil(k));
            assert!(t.max_row_sum_dev < 1e-12);
        }
    }
}

#[test]
fn depth_head_is_detachable() {
    let s = scene();
    let cfg = model(true, true, true);
    let params = cfg.init_params(1).unwrap();
    let mut train = Graph::new(&params, false);
    let a = forward(&mut train, &cfg, &s).unwrap();
    let mut infer = Graph::new(&params, false);
    let b = forward_inference(&mut infer, &cfg, &s).unwrap();
    assert!(a.depth_pred.is_some() && b.depth_pred.is_none());
    assert_eq!(
        train.tape.value(a.seg_logits),
        infer.tape.value(b.seg_logits)
    );
    assert!(infer.bound().all(|(n, _)| !n.starts_with("depth_head")));
    assert!(train.bound().any(|(n, _)| n.starts_with("depth_head")));
}

#[test]
fn depth_tokens_reach_fusion_only_with_dt() {
    let s = scene();
    for dt in [false, true] {
        let cfg = model(true, true, dt);
        let params = cfg.init_params(2).unwrap();
        let mut bumped = params.clone();
        for (name, t) in bumped.iter_mut() {
            if name.starts_with("depth_fuse") {
                for v in t.data_mut() {
                    *v += 0.05;
                }
            }
        }
        let run = |p: &ParamStore| {
            let mut g = Graph::new(p, false);
            let out = forward(&mut g, &cfg, &s).unwrap();
            (
                values(&g, &out.fused),
                g.tape.value(out.depth_pred.unwrap()).clone(),
            )
        };
        let (fa, da) = run(&params);
        let (fb, db) = run(&bumped);
        assert_ne!(da, db, "perturbation must change the depth branch");
        assert_eq!(fa != fb, dt, "use_dt = {dt}");
    }
}

#[test]
fn fast_depth_tokens_match_conv_and_pool() {
    let cfg = model(true, true, true);
    let params = cfg.init_params(3).unwrap();
    let s = scene();
    let mut g = Graph::new(&params, false);
    let out = forward(&mut g, &cfg, &s).unwrap();
    let depth = out.depth_pyramid.unwrap();
    for l in 0..4 {
        let k = cfg.window_at(l);
        let prefix = format!("dgf.lidar.l{}", l + 1);
        let (win, grid) = window_partition(&mut g, depth.levels[l], k).unwrap();
        let fast = depth_tokens_fast(&mut g, &prefix, depth.levels[l], &grid).unwrap();
        let fast = g.tape.value(fast).clone();
        let ct = fast.shape()[1];
        for n in 0..grid.count() {
            let one = g.tape.narrow(win, 0, n, 1).unwrap();
            let one = g.tape.reshape(one, &[grid.channels, k, k]).unwrap();
            let slow = depth_token(&mut g, &prefix, one).unwrap();
            for (c, v) in g.tape.value(slow).data().iter().enumerate() {
                assert!(
                    (v - fast.data()[n * ct + c]).abs() < 1e-12,
                    "level {l} window {n}"
                );
            }
        }
    }
}

#[test]
fn toggles_add_and_remove_parameters() {
    let names = |cfg: &ModelConfig| -> Vec<String> {
        cfg.param_specs().into_iter().map(|p| p.name).collect()
    };
    let full = names(&model(true, true, true));
    let no_aux = names(&model(true, false, true));
    let no_ct = names(&model(false, true, true));
    let no_depth = names(&model(true, false, false));
    assert!(full.iter().any(|n| n.starts_with("depth_head")));
    assert!(!no_aux.iter().any(|n| n.starts_with("depth_head")));
    assert!(no_aux.iter().any(|n| n.starts_with("depth_fuse")));
    assert!(!no_ct
        .iter()
        .any(|n| n.starts_with("cond.") || n.contains("ct_proj")));
    assert!(!no_depth
        .iter()
        .any(|n| n.starts_with("depth_fuse") || n.contains(".dt_")));
}

#[test]
fn backbone_is_shared_across_modalities() {
    let count = |mods: Vec<Modality>| {
        let cfg = ModelConfig {
            modalities: mods,
            ..model(true, true, true)
        };
        let p = cfg.init_params(0).unwrap();
        (
            p.numel_with_prefix("backbone"),
            p.numel_with_prefix("adapter"),
        )
    };
    let (b2, a2) = count(vec![Modality::Rgb, Modality::Lidar]);
    let (b4, a4) = count(Modality::ALL.to_vec());
    assert_eq!(b2, b4);
    assert_eq!(a4, 2 * a2);
}

#[test]
fn init_is_seeded() {
    let cfg = model(true, true, true);
    assert_eq!(cfg.init_params(5).unwrap(), cfg.init_params(5).unwrap());
    assert_ne!(cfg.init_params(5).unwrap(), cfg.init_params(6).unwrap());
}

#[test]
fn wrong_input_size_is_refused() {
    let cfg = ModelConfig::default();
    let params = cfg.init_params(0).unwrap();
    let mut g = Graph::new(&params, false);
    assert!(forward(&mut g, &cfg, &scene()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn window_round_trip_any_size(c in 1usize..4, h in 1usize..20, w in 1usize..20, k in 1usize..9) {
        let params = ParamStore::default();
        let x = Tensor::from_fn(&[c, h, w], |i| (i as f64).sin());
        let mut g = Graph::new(&params, false);
        let v = g.tape.constant(x.clone());
        let (win, grid) = window_partition(&mut g, v, k).unwrap();
        let back = window_reassemble(&mut g, win, &grid).unwrap();
        prop_assert_eq!(g.tape.value(back), &x);
    }
}
