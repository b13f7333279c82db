//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.
//!
//! The training criteria (6-8) take hours on one core. Their results are
//! cached under `target/tmp/acceptance`, keyed by config hash; delete that
//! directory to rerun them from scratch. `ACCEPT_ONLY=1,3` limits the run to
//! the listed criteria.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use dgfusion::cli::{ablation_data, AblationChecks, ARCH_TOLERANCE};
use dgfusion::fusenet::{
    forward, forward_inference, window_partition, window_reassemble, Graph, ModelConfig, ParamStore,
};
use dgfusion::harness::{
    grad_check, load_checkpoint, run_ablation_suite, save_checkpoint, train, AblationKind, Dataset,
    GradCheckOptions, TrainReport,
};
use dgfusion::losskit::check::{
    compare_with_oracles, outlier_invariance_violations, seam_suite, tau_count_mismatch,
    tau_monotonicity_violations,
};
use dgfusion::scenegen::{generate_scene, SceneConfig};
use dgfusion::RunConfig;
use diffmath::gradcheck::op_suite;
use diffmath::Tensor;

type Outcome = Result<String, String>;

fn cache_dir() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit: Duration, t: Instant) -> (bool, String) {
    let e = t.elapsed();
    (
        e < limit,
        format!("{:.1}s (limit {}s)", e.as_secs_f64(), limit.as_secs()),
    )
}

fn oracle_match() -> Outcome {
    let t = Instant::now();
    let r = compare_with_oracles(200, 1).map_err(|e| e.to_string())?;
    let (fast, time) = within(Duration::from_secs(60), t);
    let dev = r.max_deviation();
    check(
        dev <= 1e-12 && r.boundary_mismatches == 0 && fast,
        format!(
            "{} instances, max |dev| {dev:.2e} (log-L1 {:.1e}, es {:.1e}, pes {:.1e}, seg {:.1e}, cond {:.1e}), {} mask mismatches, {time}",
            r.instances, r.log_l1, r.edge_smooth, r.panoptic_smooth, r.seg, r.cond, r.boundary_mismatches
        ),
    )
}

fn tau_exactness() -> Outcome {
    let e = |x: dgfusion::Error| x.to_string();
    let count = tau_count_mismatch(1000, 2).map_err(e)?;
    let mono = tau_monotonicity_violations(50, 3).map_err(e)?;
    let outl = outlier_invariance_violations(50, 4).map_err(e)?;
    check(
        count.is_none() && mono == 0 && outl == 0,
        format!(
            "count mismatch {count:?}, monotonicity violations {mono}/50, outlier-invariance violations {outl}/50"
        ),
    )
}

fn seam_contrast() -> Outcome {
    let (failed, total) = seam_suite(200, 5).map_err(|e| e.to_string())?;
    check(
        failed == 0,
        format!(
            "{failed}/200 maps fail; {} seam edges ({} interior), panoptic nonzero {}, semantic zero {}, unexplained diffs {}",
            total.seam_edges,
            total.interior_seam_edges,
            total.panoptic_nonzero_on_seam,
            total.semantic_zero_on_seam,
            total.unexplained_differences
        ),
    )
}

fn grad_checks() -> Outcome {
    let t = Instant::now();
    let ops = op_suite(1e-5).map_err(|e| e.to_string())?;
    let worst_op = ops
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .expect("non-empty suite");
    let full = grad_check(&GradCheckOptions::default()).map_err(|e| e.to_string())?;
    let (fast, time) = within(Duration::from_secs(300), t);
    check(
        worst_op.max_rel_err < 1e-6 && full.max_rel_err < 1e-4 && fast,
        format!(
            "{} ops, worst {} {:.2e}; full loss on 16x16 worst {} {:.2e} over {} groups; {time}",
            ops.len(),
            worst_op.name,
            worst_op.max_rel_err,
            full.worst_group,
            full.max_rel_err,
            full.groups.len()
        ),
    )
}

fn structural() -> Outcome {
    let e = |x: dgfusion::Error| x.to_string();
    let mut failures = Vec::new();

    let empty = ParamStore::default();
    for k in [4, 8, 16] {
        for (h, w) in [(16, 16), (19, 23), (40, 8)] {
            let x = Tensor::from_fn(&[5, h, w], |i| (i as f64 * 0.37).sin());
            let mut g = Graph::new(&empty, false);
            let v = g.tape.constant(x.clone());
            let (win, grid) = window_partition(&mut g, v, k).map_err(e)?;
            let back = window_reassemble(&mut g, win, &grid).map_err(e)?;
            if g.tape.value(back) != &x {
                failures.push(format!("window round trip k={k} {h}x{w}"));
            }
        }
    }

    let scene = SceneConfig::default();
    let sample = generate_scene(&scene, 0).map_err(e)?;
    let model = |ct, dt| ModelConfig {
        use_ct: ct,
        use_dt: dt,
        ..ModelConfig::default()
    };
    for (ct, dt) in [(true, true), (false, true), (true, false), (false, false)] {
        let cfg = model(ct, dt);
        let params = cfg.init_params(0).map_err(e)?;
        let mut g = Graph::new(&params, false).with_trace();
        forward(&mut g, &cfg, &sample).map_err(e)?;
        for t in g.traces() {
            let expect = t.rgb_tokens + t.windows * (ct as usize + dt as usize);
            if t.query_tokens != expect || t.output_tokens != t.rgb_tokens {
                failures.push(format!("token counts ct={ct} dt={dt}: {t:?}"));
            }
        }
    }

    let cfg = model(true, true);
    let params = cfg.init_params(1).map_err(e)?;
    let mut a = Graph::new(&params, false);
    let full = forward(&mut a, &cfg, &sample).map_err(e)?;
    let mut b = Graph::new(&params, false);
    let inf = forward_inference(&mut b, &cfg, &sample).map_err(e)?;
    let same_bits = a
        .tape
        .value(full.seg_logits)
        .data()
        .iter()
        .zip(b.tape.value(inf.seg_logits).data())
        .all(|(x, y)| x.to_bits() == y.to_bits());
    if !same_bits || inf.depth_pred.is_some() || b.bound().any(|(n, _)| n.starts_with("depth_head"))
    {
        failures.push("depth head not detachable".into());
    }

    for dt in [true, false] {
        let cfg = model(true, dt);
        let params = cfg.init_params(2).map_err(e)?;
        let mut bumped = params.clone();
        for (name, t) in bumped.iter_mut() {
            if name.starts_with("depth_fuse") {
                t.data_mut().iter_mut().for_each(|v| *v += 0.05);
            }
        }
        let fused = |p: &ParamStore| -> Result<Vec<Tensor>, String> {
            let mut g = Graph::new(p, false);
            let out = forward(&mut g, &cfg, &sample).map_err(e)?;
            Ok(out.fused.iter().map(|&v| g.tape.value(v).clone()).collect())
        };
        if (fused(&params)? != fused(&bumped)?) != dt {
            failures.push(format!("DT sensitivity wrong with use_dt={dt}"));
        }
    }
    check(
        failures.is_empty(),
        if failures.is_empty() {
            "window round trips, token counts, head detachment, DT sensitivity".into()
        } else {
            failures.join("; ")
        },
    )
}

/// Train `cfg` once, or reuse the checkpoint and report cached under `tag`.
fn cached_training(
    cfg: &RunConfig,
    data: &Dataset,
    tag: &str,
) -> Result<(TrainReport, ParamStore, f64, bool), String> {
    let dir = cache_dir().join(format!("{}-{tag}", cfg.hash()));
    let (ck, rep) = (dir.join("model.ckpt"), dir.join("report.json"));
    let secs = dir.join("seconds");
    if ck.exists() && rep.exists() && secs.exists() {
        let report =
            serde_json::from_str(&std::fs::read_to_string(&rep).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
        let params = load_checkpoint(&ck).map_err(|e| e.to_string())?.params;
        let s: f64 = std::fs::read_to_string(&secs)
            .map_err(|e| e.to_string())?
            .trim()
            .parse()
            .map_err(|_| "bad cached runtime".to_string())?;
        return Ok((report, params, s, true));
    }
    let t = Instant::now();
    let trained = train(cfg, data, |step, loss| {
        if (step + 1) % 250 == 0 {
            eprintln!("  [{tag}] step {} loss {loss:.4}", step + 1);
        }
    })
    .map_err(|e| e.to_string())?;
    let s = t.elapsed().as_secs_f64();
    save_checkpoint(&ck, cfg, cfg.train.steps, &trained.params).map_err(|e| e.to_string())?;
    std::fs::write(
        &rep,
        serde_json::to_string(&trained.report).expect("serializes"),
    )
    .map_err(|e| e.to_string())?;
    std::fs::write(&secs, format!("{s}")).map_err(|e| e.to_string())?;
    Ok((trained.report, trained.params, s, false))
}

fn default_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.train.data_root = Some(cache_dir().join("data"));
    cfg
}

fn training_smoke() -> Outcome {
    let cfg = default_config();
    let t = &cfg.train;
    let data = Dataset::load_or_make(&t.data_root(), &cfg.scene, (t.n_train, t.n_val, t.n_test))
        .map_err(|e| e.to_string())?;
    let (a, pa, sa, ca) = cached_training(&cfg, &data, "run-a")?;
    let (b, pb, sb, cb) = cached_training(&cfg, &data, "run-b")?;
    let ratio = a.final_loss / a.initial_loss;
    let miou = a.train_metrics.miou;
    let same = pa == pb && a == b;
    let fast = sa.max(sb) < 1800.0;
    check(
        ratio < 0.5 && miou >= 0.6 && same && fast,
        format!(
            "L_total {:.4} -> {:.4} ({:.1}%), train mIoU {miou:.4}, rerun bit-identical {same}, runtime {sa:.0}s / {sb:.0}s (limit 1800s){}",
            a.initial_loss,
            a.final_loss,
            100.0 * ratio,
            if ca && cb { " (cached)" } else { "" }
        ),
    )
}

fn ablations(only: &dyn Fn(usize) -> bool) -> [(usize, Outcome); 2] {
    let run = || -> Result<_, String> {
        let cfg = default_config();
        let (arch, loss) = ablation_data(&cfg).map_err(|e| e.to_string())?;
        run_ablation_suite(
            &cfg,
            &[0, 1, 2],
            &arch,
            &loss,
            Some(&cache_dir().join("ablation")),
            |m| eprintln!("  {m}"),
        )
        .map_err(|e| e.to_string())
    };
    if !only(7) && !only(8) {
        return [(7, Err("skipped".into())), (8, Err("skipped".into()))];
    }
    let table = match run() {
        Ok(t) => t,
        Err(e) => return [(7, Err(e.clone())), (8, Err(e))],
    };
    eprint!("{}", table.summary());
    let checks = AblationChecks::of(&table);
    let rows = |kind| -> String {
        (1..=4)
            .filter_map(|id| table.row(kind, id))
            .map(|r| match kind {
                AblationKind::Architecture => {
                    format!("row {} {:.4}±{:.4}", r.id, r.miou_mean, r.miou_std)
                }
                AblationKind::Loss => format!(
                    "row {} {:.4}±{:.4}",
                    r.id,
                    r.depth_log_rmse_mean.unwrap_or(f64::NAN),
                    r.depth_log_rmse_std.unwrap_or(f64::NAN)
                ),
            })
            .collect::<Vec<_>>()
            .join(", ")
    };
    [
        (
            7,
            check(
                checks.full_vs_baseline && checks.aux_vs_baseline,
                format!(
                    "val mIoU over 3 seeds: {}; tolerance {ARCH_TOLERANCE}",
                    rows(AblationKind::Architecture)
                ),
            ),
        ),
        (
            8,
            check(
                checks.full_loss_vs_plain,
                format!(
                    "fog/snow val depth log-RMSE over 3 seeds: {}",
                    rows(AblationKind::Loss)
                ),
            ),
        ),
    ]
}

fn main() -> ExitCode {
    // `cargo test` passes libtest flags; this suite takes none of them.
    let only: Vec<usize> = std::env::var("ACCEPT_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect())
        .unwrap_or_default();
    let wanted = |i: usize| only.is_empty() || only.contains(&i);
    std::fs::create_dir_all(cache_dir()).expect("target tmp dir is writable");

    let criteria: [(usize, &str, fn() -> Outcome); 6] = [
        (1, "oracle match", oracle_match),
        (2, "tau-filter exactness", tau_exactness),
        (3, "panoptic vs semantic boundaries", seam_contrast),
        (4, "gradient checks", grad_checks),
        (5, "structural invariants", structural),
        (6, "training smoke", training_smoke),
    ];
    let mut failed = 0;
    let mut report = |i: usize, name: &str, r: Outcome| match &r {
        Ok(d) => println!("PASS [{i}] {name}: {d}"),
        Err(d) => {
            failed += 1;
            println!("FAIL [{i}] {name}: {d}");
        }
    };
    for (i, name, f) in criteria {
        if wanted(i) {
            report(i, name, f());
        }
    }
    for (i, r) in ablations(&wanted) {
        if wanted(i) {
            let name = if i == 7 {
                "architecture ablation"
            } else {
                "loss ablation"
            };
            report(i, name, r);
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        println!("all criteria passed");
        ExitCode::SUCCESS
    }
}
