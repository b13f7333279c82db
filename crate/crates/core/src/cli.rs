//! Command-line front ends for `dgf`, `scenegen` and `losskit`.
//!
//! Reports go to stdout as JSON; progress goes to stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{parse_pairs, RunConfig};
use crate::error::{Error, Result};
use crate::harness::{
    self, degraded_scene, evaluate, grad_check, load_checkpoint, run_ablation_suite,
    save_checkpoint, train, AblationKind, AblationTable, Dataset, GradCheckOptions,
};
use crate::losskit::{self, check, LossWeights};
use crate::scenegen::format::BlockFile;
use crate::scenegen::{make_dataset, Manifest, PanopticMap, SparseDepthMap, Split};

/// Allowed drop, in mIoU, of the full and aux-only architecture rows below
/// the no-depth baseline.
pub const ARCH_TOLERANCE: f64 = 0.0025;

fn print_json<T: Serialize>(v: &T) {
    println!(
        "{}",
        serde_json::to_string_pretty(v).expect("report types serialize")
    );
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn apply_overrides(mut cfg: RunConfig, pairs: &[String]) -> Result<RunConfig> {
    for kv in pairs {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
        cfg = cfg.with(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn finish(r: Result<bool>) -> ExitCode {
    match r {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

// ----- scenegen ------------------------------------------------------

#[derive(Parser, Debug)]
#[command(name = "scenegen", about = "Generate synthetic multimodal scenes")]
pub struct ScenegenCli {
    #[command(subcommand)]
    cmd: ScenegenCmd,
}

#[derive(Subcommand, Debug)]
enum ScenegenCmd {
    /// Write train/val/test scenes and a manifest.
    Make(MakeArgs),
}

#[derive(Args, Debug)]
struct MakeArgs {
    /// `key = value` config; scene keys and n_train/n_val/n_test are used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; defaults to `$DGF_OUT/data`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

fn data_make(a: &MakeArgs) -> Result<bool> {
    let cfg = load_config(a.config.as_deref())?;
    let out = a.out.clone().unwrap_or_else(|| cfg.train.data_root());
    let t = &cfg.train;
    let m = make_dataset(&cfg.scene, t.n_train, t.n_val, t.n_test, &out, a.force)?;
    eprintln!("wrote {} scenes to {}", m.entries.len(), out.display());
    print_json(&m);
    Ok(true)
}

pub fn scenegen_main() -> ExitCode {
    let cli = ScenegenCli::parse();
    finish(match &cli.cmd {
        ScenegenCmd::Make(a) => data_make(a),
    })
}

// ----- losskit -------------------------------------------------------

#[derive(Parser, Debug)]
#[command(name = "losskit", about = "Evaluate and verify the loss stack")]
pub struct LosskitCli {
    #[command(subcommand)]
    cmd: LosskitCmd,
}

#[derive(Subcommand, Debug)]
enum LosskitCmd {
    /// Depth loss terms of a fixed prediction, as a JSON LossReport.
    Eval(EvalLossArgs),
    /// Compare every loss with its brute-force oracle on random instances.
    Oracle(OracleArgs),
}

#[derive(Args, Debug)]
struct EvalLossArgs {
    /// Block file with an f64 `depth` array `[H, W]`.
    #[arg(long)]
    pred: PathBuf,
    /// Block file with `lidar_depth` and `lidar_valid` (a scene file works).
    #[arg(long)]
    gt: PathBuf,
    /// Block file with `rgb` `[3, H, W]`.
    #[arg(long)]
    rgb: PathBuf,
    /// Block file with `class_id` and `instance_id`.
    #[arg(long)]
    pan: PathBuf,
    /// `key = value` file with loss keys; toggles use_smoothness and
    /// use_tau_filter are honoured.
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct OracleArgs {
    #[arg(long, default_value_t = 100)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-12)]
    tolerance: f64,
}

fn f64_plane(f: &BlockFile, name: &str) -> Result<diffmath::Tensor> {
    let (dims, data) = f.f64s(name)?;
    Ok(diffmath::Tensor::new(dims.to_vec(), data.to_vec())?)
}

fn loss_weights(path: Option<&Path>) -> Result<LossWeights> {
    let mut cfg = RunConfig::default();
    if let Some(p) = path {
        let text = std::fs::read_to_string(p).map_err(crate::error::io_err(p))?;
        for (k, v) in parse_pairs(&text)? {
            cfg.set(&k, &v)?;
        }
        cfg.sync();
        cfg.validate()?;
    }
    Ok(cfg.loss)
}

fn loss_eval(a: &EvalLossArgs) -> Result<bool> {
    let weights = loss_weights(a.weights.as_deref())?;
    let pred = f64_plane(&BlockFile::read(&a.pred)?, "depth")?;
    let gt_file = BlockFile::read(&a.gt)?;
    let (_, valid) = gt_file.u8s("lidar_valid")?;
    let gt = SparseDepthMap {
        depth: f64_plane(&gt_file, "lidar_depth")?,
        valid: valid.iter().map(|&v| v != 0).collect(),
    };
    let rgb = f64_plane(&BlockFile::read(&a.rgb)?, "rgb")?;
    let pan_file = BlockFile::read(&a.pan)?;
    let (dims, class_id) = pan_file.u16s("class_id")?;
    let (_, instance_id) = pan_file.u16s("instance_id")?;
    let &[h, w] = dims else {
        return Err(Error::Format(format!(
            "class_id must be [H, W], got {dims:?}"
        )));
    };
    let pan = PanopticMap {
        height: h,
        width: w,
        class_id: class_id.to_vec(),
        instance_id: instance_id.to_vec(),
    };
    print_json(&losskit::evaluate_depth(&pred, &gt, &rgb, &pan, &weights)?);
    Ok(true)
}

#[derive(Serialize)]
struct OracleOutput {
    #[serde(flatten)]
    report: check::OracleReport,
    max_deviation: f64,
    tolerance: f64,
    passed: bool,
}

fn loss_oracle(a: &OracleArgs) -> Result<bool> {
    let report = check::compare_with_oracles(a.instances, a.seed)?;
    let max_deviation = report.max_deviation();
    let passed = max_deviation <= a.tolerance && report.boundary_mismatches == 0;
    print_json(&OracleOutput {
        report,
        max_deviation,
        tolerance: a.tolerance,
        passed,
    });
    Ok(passed)
}

fn run_losskit(cmd: &LosskitCmd) -> Result<bool> {
    match cmd {
        LosskitCmd::Eval(a) => loss_eval(a),
        LosskitCmd::Oracle(a) => loss_oracle(a),
    }
}

pub fn losskit_main() -> ExitCode {
    finish(run_losskit(&LosskitCli::parse().cmd))
}

// ----- dgf -----------------------------------------------------------

#[derive(Parser, Debug)]
#[command(
    name = "dgf",
    about = "Depth-guided multimodal fusion: data, training, evaluation, ablations",
    after_help = "Outputs go under $DGF_OUT (default ./runs)."
)]
pub struct DgfCli {
    #[command(subcommand)]
    cmd: DgfCmd,
}

#[derive(Subcommand, Debug)]
enum DgfCmd {
    /// Dataset commands.
    Data {
        #[command(subcommand)]
        cmd: DataCmd,
    },
    /// Train one model and write a checkpoint plus a JSON report.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Run both ablations over several seeds.
    Ablate(AblateArgs),
    /// Finite-difference check of the full loss on the tiny model.
    Gradcheck(GradcheckArgs),
    /// Loss evaluation and oracle checks (same as the `losskit` binary).
    Losskit {
        #[command(subcommand)]
        cmd: LosskitCmd,
    },
}

#[derive(Subcommand, Debug)]
enum DataCmd {
    /// Write train/val/test scenes and a manifest.
    Make(MakeArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Ablation switch, e.g. `--toggle use_dt=false`; repeatable.
    #[arg(long = "toggle", value_name = "KEY=BOOL")]
    toggles: Vec<String>,
    /// Any other config key, e.g. `--set steps=100`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// train, val or test.
    #[arg(long)]
    split: String,
    /// Dataset directory; defaults to `$DGF_OUT/data`.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    seeds: usize,
    /// First seed; seeds run consecutively from here.
    #[arg(long, default_value_t = 0)]
    seed_base: u64,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    probes: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn run_dir(cfg: &RunConfig) -> PathBuf {
    cfg.train
        .out_dir
        .clone()
        .unwrap_or_else(|| harness::out_root().join("runs").join(cfg.hash()))
}

fn cmd_train(a: &TrainArgs) -> Result<bool> {
    for t in &a.toggles {
        let key = t.split_once('=').map_or(t.as_str(), |(k, _)| k.trim());
        if !harness::Toggles::KEYS.contains(&key) {
            return Err(Error::Config(format!(
                "`{key}` is not a toggle; use one of {:?}",
                harness::Toggles::KEYS
            )));
        }
    }
    let cfg = load_config(a.config.as_deref())?;
    let cfg = apply_overrides(cfg, &a.toggles)?;
    let cfg = apply_overrides(cfg, &a.sets)?;
    let t = &cfg.train;
    let data = Dataset::load_or_make(&t.data_root(), &cfg.scene, (t.n_train, t.n_val, t.n_test))?;
    let dir = run_dir(&cfg);
    eprintln!("config {} -> {}", cfg.hash(), dir.display());
    let started = std::time::Instant::now();
    let mut window = 0.0;
    let trained = train(&cfg, &data, |step, loss| {
        window += loss;
        if (step + 1) % 50 == 0 {
            eprintln!(
                "step {:>5}  loss {:.4}  {:.0}s",
                step + 1,
                window / 50.0,
                started.elapsed().as_secs_f64()
            );
            window = 0.0;
        }
    })?;
    save_checkpoint(
        &dir.join("model.ckpt"),
        &cfg,
        cfg.train.steps,
        &trained.params,
    )?;
    std::fs::write(dir.join("config.txt"), cfg.canonical_text())
        .map_err(crate::error::io_err(&dir))?;
    let json = serde_json::to_string_pretty(&trained.report).expect("report serializes");
    let path = dir.join("report.json");
    std::fs::write(&path, &json).map_err(crate::error::io_err(&path))?;
    println!("{json}");
    Ok(true)
}

fn manifest_classes(root: &Path) -> Result<Option<usize>> {
    let m = Manifest::load(root)?;
    Ok(parse_pairs(&m.scene_config)?
        .into_iter()
        .find(|(k, _)| k == "num_classes")
        .and_then(|(_, v)| v.parse().ok()))
}

fn cmd_eval(a: &EvalArgs) -> Result<bool> {
    let ck = load_checkpoint(&a.ckpt)?;
    let split = Split::parse(&a.split)?;
    let root = a
        .data
        .clone()
        .unwrap_or_else(|| ck.config.train.data_root());
    if let Some(c) = manifest_classes(&root)? {
        if c != ck.config.model.num_classes {
            return Err(Error::Dataset(format!(
                "checkpoint predicts {} classes, dataset at {} has {c}",
                ck.config.model.num_classes,
                root.display()
            )));
        }
    }
    let data = Dataset::load(&root, &ck.config.scene)?;
    print_json(&evaluate(&ck.config, &ck.params, data.split(split))?);
    Ok(true)
}

/// Outcome of the directional ablation checks.
#[derive(Debug, Clone, Serialize)]
pub struct AblationChecks {
    /// Full architecture mean mIoU >= no-depth baseline - tolerance.
    pub full_vs_baseline: bool,
    /// Aux-head-only mean mIoU >= no-depth baseline - tolerance.
    pub aux_vs_baseline: bool,
    /// Full loss mean log-RMSE <= plain log-L1 mean.
    pub full_loss_vs_plain: bool,
}

impl AblationChecks {
    pub fn of(t: &AblationTable) -> Self {
        let arch = |id| t.row(AblationKind::Architecture, id).map(|r| r.miou_mean);
        let loss = |id| {
            t.row(AblationKind::Loss, id)
                .and_then(|r| r.depth_log_rmse_mean)
        };
        let ge = |a: Option<f64>, b: Option<f64>| matches!((a, b), (Some(a), Some(b)) if a >= b - ARCH_TOLERANCE);
        Self {
            full_vs_baseline: ge(arch(4), arch(1)),
            aux_vs_baseline: ge(arch(2), arch(1)),
            full_loss_vs_plain: matches!((loss(4), loss(1)), (Some(a), Some(b)) if a <= b),
        }
    }

    pub fn all(&self) -> bool {
        self.full_vs_baseline && self.aux_vs_baseline && self.full_loss_vs_plain
    }
}

#[derive(Serialize)]
struct AblationOutput {
    table: AblationTable,
    checks: AblationChecks,
}

/// Datasets for both ablations, cached on disk under the data root.
pub fn ablation_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let t = &cfg.train;
    let n = (t.n_train, t.n_val, t.n_test);
    let root = t.data_root();
    let arch = Dataset::load_or_make(&root, &cfg.scene, n)?;
    let mut degraded_root = root.clone().into_os_string();
    degraded_root.push("-fog-snow");
    let loss = Dataset::load_or_make(Path::new(&degraded_root), &degraded_scene(&cfg.scene), n)?;
    Ok((arch, loss))
}

fn cmd_ablate(a: &AblateArgs) -> Result<bool> {
    let cfg = apply_overrides(load_config(a.config.as_deref())?, &a.sets)?;
    let (arch, loss) = ablation_data(&cfg)?;
    let seeds: Vec<u64> = (0..a.seeds as u64).map(|i| a.seed_base + i).collect();
    let dir = harness::out_root().join("ablation");
    let table = run_ablation_suite(&cfg, &seeds, &arch, &loss, Some(&dir.join("runs")), |m| {
        eprintln!("{m}")
    })?;
    eprint!("{}", table.summary());
    let checks = AblationChecks::of(&table);
    let passed = checks.all();
    let out = AblationOutput { table, checks };
    let json = serde_json::to_string_pretty(&out).expect("report serializes");
    let path = dir.join("table.json");
    std::fs::write(&path, &json).map_err(crate::error::io_err(&path))?;
    println!("{json}");
    Ok(passed)
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<bool> {
    let report = grad_check(&GradCheckOptions {
        probes_per_tensor: a.probes,
        seed: a.seed,
        tolerance: a.tolerance,
        ..GradCheckOptions::default()
    })?;
    eprintln!(
        "max rel err {:.3e} in {} ({})",
        report.max_rel_err,
        report.worst_group,
        if report.passed { "pass" } else { "FAIL" }
    );
    let passed = report.passed;
    print_json(&report);
    Ok(passed)
}

fn run_dgf(cli: &DgfCli) -> Result<bool> {
    match &cli.cmd {
        DgfCmd::Data {
            cmd: DataCmd::Make(a),
        } => data_make(a),
        DgfCmd::Train(a) => cmd_train(a),
        DgfCmd::Eval(a) => cmd_eval(a),
        DgfCmd::Ablate(a) => cmd_ablate(a),
        DgfCmd::Gradcheck(a) => cmd_gradcheck(a),
        DgfCmd::Losskit { cmd } => run_losskit(cmd),
    }
}

pub fn dgf_main() -> ExitCode {
    finish(run_dgf(&DgfCli::parse()))
}
