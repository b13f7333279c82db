use std::path::Path;
use std::process::{Command, Output};

use dgfusion::scenegen::format::{ArrayData, BlockFile};
use dgfusion::scenegen::MANIFEST_FILE;

fn run(bin: &str, out: &Path, args: &[&str]) -> Output {
    Command::new(bin)
        .args(args)
        .env("DGF_OUT", out)
        .output()
        .unwrap()
}

fn dgf(out: &Path, args: &[&str]) -> Output {
    run(env!("CARGO_BIN_EXE_dgf"), out, args)
}

fn small_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("small.cfg");
    std::fs::write(
        &path,
        format!(
            "height = 32\nwidth = 32\nn_train = 3\nn_val = 2\nn_test = 1\n\
             steps = 2\nbatch_size = 1\neval_every = 0\nprobe_size = 1\n{extra}"
        ),
    )
    .unwrap();
    path.display().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn scenegen_make_writes_and_refuses_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let data = dir.path().join("d");
    let d = data.to_str().unwrap();
    let bin = env!("CARGO_BIN_EXE_scenegen");
    let o = run(bin, dir.path(), &["make", "--config", &cfg, "--out", d]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(manifest["entries"].as_array().unwrap().len(), 6);
    assert!(data.join(MANIFEST_FILE).exists());
    assert!(
        !run(bin, dir.path(), &["make", "--config", &cfg, "--out", d])
            .status
            .success()
    );
    let o = run(
        bin,
        dir.path(),
        &["make", "--config", &cfg, "--out", d, "--force"],
    );
    assert!(o.status.success());
}

#[test]
fn train_then_eval_and_class_count_refusal() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let o = dgf(
        dir.path(),
        &["train", "--config", &cfg, "--toggle", "use_ct=false"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let hash = report["config_hash"].as_str().unwrap();
    let run_dir = dir.path().join("runs").join(hash);
    assert!(run_dir.join("report.json").exists());
    let ckpt = run_dir.join("model.ckpt");
    let ck = ckpt.to_str().unwrap();

    let o = dgf(dir.path(), &["eval", "--ckpt", ck, "--split", "val"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(m["samples"], 2);
    assert!(m["cond_accuracy"].is_null());

    let manifest = dir.path().join("data").join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&manifest).unwrap();
    std::fs::write(
        &manifest,
        text.replace("num_classes = 8", "num_classes = 5"),
    )
    .unwrap();
    let o = dgf(dir.path(), &["eval", "--ckpt", ck, "--split", "val"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("classes"), "{}", stderr(&o));
}

#[test]
fn unknown_toggle_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let o = dgf(
        dir.path(),
        &["train", "--config", &cfg, "--toggle", "steps=1"],
    );
    assert!(!o.status.success());
    assert!(stderr(&o).contains("not a toggle"));
}

#[test]
fn losskit_oracle_through_both_binaries() {
    let dir = tempfile::tempdir().unwrap();
    for o in [
        run(
            env!("CARGO_BIN_EXE_losskit"),
            dir.path(),
            &["oracle", "--instances", "10"],
        ),
        dgf(dir.path(), &["losskit", "oracle", "--instances", "10"]),
    ] {
        assert!(o.status.success(), "{}", stderr(&o));
        let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        assert_eq!(r["passed"], true);
        assert_eq!(r["instances"], 10);
    }
}

#[test]
fn losskit_eval_on_scene_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let data = dir.path().join("d");
    let o = run(
        env!("CARGO_BIN_EXE_scenegen"),
        dir.path(),
        &["make", "--config", &cfg, "--out", data.to_str().unwrap()],
    );
    assert!(o.status.success());
    let m: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let scene = data.join(m["entries"][0]["path"].as_str().unwrap());
    let s = scene.to_str().unwrap();

    let pred = dir.path().join("pred.dgfs");
    let mut f = BlockFile::new(32, 32);
    f.push("depth", &[32, 32], ArrayData::F64(vec![10.0; 1024]))
        .unwrap();
    f.write(&pred).unwrap();
    let weights = dir.path().join("w.cfg");
    std::fs::write(&weights, "tau = 0.5\nuse_smoothness = false\n").unwrap();

    let o = run(
        env!("CARGO_BIN_EXE_losskit"),
        dir.path(),
        &[
            "eval",
            "--pred",
            pred.to_str().unwrap(),
            "--gt",
            s,
            "--rgb",
            s,
            "--pan",
            s,
            "--weights",
            weights.to_str().unwrap(),
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let (nv, nk) = (
        r["n_valid"].as_u64().unwrap(),
        r["n_kept"].as_u64().unwrap(),
    );
    assert_eq!(nk, nv.div_ceil(2));
    assert_eq!(r["l_es"], 0.0);
    assert!(r["l_log_l1"].as_f64().unwrap() > 0.0);
}

#[test]
fn gradcheck_command_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = dgf(dir.path(), &["gradcheck", "--probes", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
}
