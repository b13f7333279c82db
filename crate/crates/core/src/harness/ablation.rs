use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{train, Dataset, Toggles};
use crate::config::RunConfig;
use crate::error::{io_err, Error, Result};
use crate::scenegen::{SceneConfig, Weather};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationKind {
    /// CT / auxiliary depth head / DT switches.
    Architecture,
    /// Smoothness terms and quantile filtering on the full architecture.
    Loss,
}

impl AblationKind {
    pub fn name(self) -> &'static str {
        match self {
            AblationKind::Architecture => "architecture",
            AblationKind::Loss => "loss",
        }
    }

    /// Rows 1-4 in order.
    pub fn rows(self) -> [Toggles; 4] {
        match self {
            // no depth, +aux head, DT without CT, full
            AblationKind::Architecture => [
                toggles(true, false, false, true, true),
                toggles(true, true, false, true, true),
                toggles(false, true, true, true, true),
                toggles(true, true, true, true, true),
            ],
            // plain log-L1, +smoothness, +quantile filter, both
            AblationKind::Loss => [
                toggles(true, true, true, false, false),
                toggles(true, true, true, true, false),
                toggles(true, true, true, false, true),
                toggles(true, true, true, true, true),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub config_hash: String,
    pub val_miou: f64,
    pub depth_mae: Option<f64>,
    pub depth_log_rmse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub kind: AblationKind,
    pub id: usize,
    pub use_ct: bool,
    pub use_aux_depth_head: bool,
    pub use_dt: bool,
    pub use_smoothness: bool,
    pub use_tau_filter: bool,
    pub runs: Vec<SeedResult>,
    pub miou_mean: f64,
    pub miou_std: f64,
    pub depth_mae_mean: Option<f64>,
    pub depth_log_rmse_mean: Option<f64>,
    pub depth_log_rmse_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, kind: AblationKind, id: usize) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.kind == kind && r.id == id)
    }

    /// Plain-text summary, one line per row.
    pub fn summary(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        let mut s = String::from(
            "kind          id ct aux dt smooth tau  mIoU (mean±std)   log-RMSE (mean±std)\n",
        );
        for r in &self.rows {
            let b = |v: bool| if v { "y" } else { "n" };
            s.push_str(&format!(
                "{:<13} {:>2} {:>2} {:>3} {:>2} {:>6} {:>3}  {:.4}±{:.4}     {}±{}\n",
                r.kind.name(),
                r.id,
                b(r.use_ct),
                b(r.use_aux_depth_head),
                b(r.use_dt),
                b(r.use_smoothness),
                b(r.use_tau_filter),
                r.miou_mean,
                r.miou_std,
                opt(r.depth_log_rmse_mean),
                opt(r.depth_log_rmse_std),
            ));
        }
        s
    }
}

fn toggles(ct: bool, aux: bool, dt: bool, smooth: bool, tau: bool) -> Toggles {
    Toggles {
        use_ct: ct,
        use_aux_depth_head: aux,
        use_dt: dt,
        use_smoothness: smooth,
        use_tau_filter: tau,
    }
}

/// Scene settings for the loss ablation: only the weathers with corrupted
/// lidar.
pub fn degraded_scene(scene: &SceneConfig) -> SceneConfig {
    SceneConfig {
        weathers: vec![Weather::Fog, Weather::Snow],
        ..scene.clone()
    }
}

/// Base config of the loss rows. It carries the degraded scene so loss-row
/// hashes, and cache entries, never collide with architecture rows.
pub fn loss_base(base: &RunConfig) -> RunConfig {
    RunConfig {
        scene: degraded_scene(&base.scene),
        ..base.clone()
    }
}

/// Sample mean and standard deviation (n - 1 denominator).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn with_toggles(base: &RunConfig, t: Toggles, seed: u64) -> RunConfig {
    let mut cfg = base.clone();
    cfg.train.toggles = t;
    cfg.train.seed = seed;
    cfg.sync();
    cfg
}

/// Train one configuration, or reuse its result from `cache` when a run
/// with the same config hash finished earlier.
pub fn train_seed(
    cfg: &RunConfig,
    data: &Dataset,
    cache: Option<&Path>,
) -> Result<(SeedResult, bool)> {
    let hash = cfg.hash();
    let file = cache.map(|d| d.join(format!("{hash}.json")));
    if let Some(f) = file.as_deref().filter(|f| f.exists()) {
        let text = std::fs::read_to_string(f).map_err(io_err(f))?;
        let r: SeedResult = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", f.display())))?;
        if r.config_hash == hash {
            return Ok((r, true));
        }
    }
    let trained = train(cfg, data, |_, _| {})?;
    let m = trained
        .report
        .val_metrics
        .ok_or_else(|| Error::Dataset("ablation needs a validation split".into()))?;
    let r = SeedResult {
        seed: cfg.train.seed,
        config_hash: hash,
        val_miou: m.miou,
        depth_mae: m.depth_mae,
        depth_log_rmse: m.depth_log_rmse,
    };
    if let (Some(dir), Some(f)) = (cache, file) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let text = serde_json::to_string_pretty(&r).expect("plain data");
        std::fs::write(&f, text).map_err(io_err(&f))?;
    }
    Ok((r, false))
}

fn run_row(
    base: &RunConfig,
    kind: AblationKind,
    id: usize,
    seeds: &[u64],
    data: &Dataset,
    cache: Option<&Path>,
    log: &mut dyn FnMut(&str),
) -> Result<AblationRow> {
    let t = kind.rows()[id - 1];
    let mut runs = Vec::new();
    for &seed in seeds {
        let cfg = with_toggles(base, t, seed);
        let (r, cached) = train_seed(&cfg, data, cache)?;
        log(&format!(
            "{} row {id} seed {seed}: val mIoU {:.4} log-RMSE {}{}",
            kind.name(),
            r.val_miou,
            r.depth_log_rmse.map_or("-".into(), |v| format!("{v:.4}")),
            if cached { " (cached)" } else { "" }
        ));
        runs.push(r);
    }
    let (miou_mean, miou_std) = mean_std(&runs.iter().map(|r| r.val_miou).collect::<Vec<_>>());
    let collect =
        |f: fn(&SeedResult) -> Option<f64>| runs.iter().map(f).collect::<Option<Vec<f64>>>();
    let rmse = collect(|r| r.depth_log_rmse).map(|v| mean_std(&v));
    Ok(AblationRow {
        kind,
        id,
        use_ct: t.use_ct,
        use_aux_depth_head: t.use_aux_depth_head,
        use_dt: t.use_dt,
        use_smoothness: t.use_smoothness,
        use_tau_filter: t.use_tau_filter,
        miou_mean,
        miou_std,
        depth_mae_mean: collect(|r| r.depth_mae).map(|v| mean_std(&v).0),
        depth_log_rmse_mean: rmse.map(|r| r.0),
        depth_log_rmse_std: rmse.map(|r| r.1),
        runs,
    })
}

/// Train every row of both ablations for each seed. Architecture rows use
/// `data_arch`; loss rows use `data_loss` (see [`degraded_scene`]).
pub fn run_ablation_suite(
    base: &RunConfig,
    seeds: &[u64],
    data_arch: &Dataset,
    data_loss: &Dataset,
    cache: Option<&Path>,
    mut log: impl FnMut(&str),
) -> Result<AblationTable> {
    if seeds.len() < 3 {
        return Err(Error::Config(format!(
            "ablations need at least 3 seeds, got {}",
            seeds.len()
        )));
    }
    let loss_base = loss_base(base);
    let mut rows = Vec::with_capacity(8);
    for (kind, cfg, data) in [
        (AblationKind::Architecture, base, data_arch),
        (AblationKind::Loss, &loss_base, data_loss),
    ] {
        for id in 1..=4 {
            rows.push(run_row(cfg, kind, id, seeds, data, cache, &mut log)?);
        }
    }
    Ok(AblationTable { rows })
}
