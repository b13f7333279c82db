//! Training, evaluation, ablations and gradient checking.

mod ablation;
mod checkpoint;
mod data;
mod gradcheck;
mod metrics;
mod optim;
mod train;

use std::path::PathBuf;

pub use ablation::{
    degraded_scene, loss_base, mean_std, run_ablation_suite, train_seed, with_toggles,
    AblationKind, AblationRow, AblationTable, SeedResult,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use data::Dataset;
pub use gradcheck::{
    grad_check, grad_check_sample, GradCheckOptions, GradCheckReport, GroupResult,
};
pub use metrics::{argmax_classes, ConfusionMatrix, MetricsReport};
pub use optim::{poly_lr, AdamW};
pub use train::{evaluate, sample_loss, train, TrainReport, Trained};

use crate::config::{parse_bool, parse_num, KeyValue};
use crate::error::{Error, Result};

/// Environment variable naming the root directory for datasets, runs and
/// reports.
pub const OUT_ENV: &str = "DGF_OUT";

pub fn out_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

/// Architecture and loss switches used by the ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Toggles {
    pub use_ct: bool,
    pub use_aux_depth_head: bool,
    pub use_dt: bool,
    pub use_smoothness: bool,
    pub use_tau_filter: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            use_ct: true,
            use_aux_depth_head: true,
            use_dt: true,
            use_smoothness: true,
            use_tau_filter: true,
        }
    }
}

impl Toggles {
    pub const KEYS: [&'static str; 5] = [
        "use_ct",
        "use_aux_depth_head",
        "use_dt",
        "use_smoothness",
        "use_tau_filter",
    ];

    fn slot(&mut self, key: &str) -> Option<&mut bool> {
        Some(match key {
            "use_ct" => &mut self.use_ct,
            "use_aux_depth_head" => &mut self.use_aux_depth_head,
            "use_dt" => &mut self.use_dt,
            "use_smoothness" => &mut self.use_smoothness,
            "use_tau_filter" => &mut self.use_tau_filter,
            _ => return None,
        })
    }

    fn values(&self) -> [bool; 5] {
        [
            self.use_ct,
            self.use_aux_depth_head,
            self.use_dt,
            self.use_smoothness,
            self.use_tau_filter,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub poly_power: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub toggles: Toggles,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Validate every this many steps; 0 disables periodic validation.
    pub eval_every: usize,
    /// Leading train samples on which the loss is tracked.
    pub probe_size: usize,
    /// Dataset directory; defaults to `$DGF_OUT/data`.
    pub data_root: Option<PathBuf>,
    /// Run directory; defaults to `$DGF_OUT/runs/<config hash>`.
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            lr: 1e-3,
            poly_power: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            toggles: Toggles::default(),
            n_train: 200,
            n_val: 40,
            n_test: 40,
            eval_every: 500,
            probe_size: 16,
            data_root: None,
            out_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be > 0".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite())
            || self.poly_power < 0.0
            || self.weight_decay < 0.0
        {
            return Err(Error::Config(
                "lr must be positive; poly_power and weight_decay non-negative".into(),
            ));
        }
        if self.n_train == 0 {
            return Err(Error::Config("n_train must be > 0".into()));
        }
        Ok(())
    }

    pub fn data_root(&self) -> PathBuf {
        self.data_root
            .clone()
            .unwrap_or_else(|| out_root().join("data"))
    }
}

// Path keys are accepted but left out of `pairs`, so moving a dataset or a
// run directory does not change the config hash.
impl KeyValue for TrainConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        if let Some(slot) = self.toggles.slot(key) {
            *slot = parse_bool(key, v)?;
            return Ok(true);
        }
        match key {
            "steps" => self.steps = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "poly_power" => self.poly_power = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "n_train" => self.n_train = parse_num(key, v)?,
            "n_val" => self.n_val = parse_num(key, v)?,
            "n_test" => self.n_test = parse_num(key, v)?,
            "eval_every" => self.eval_every = parse_num(key, v)?,
            "probe_size" => self.probe_size = parse_num(key, v)?,
            "data_root" => self.data_root = Some(PathBuf::from(v)),
            "out_dir" => self.out_dir = Some(PathBuf::from(v)),
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn pairs(&self) -> Vec<(String, String)> {
        let kv = |k: &str, v: String| (k.to_string(), v);
        let mut out = vec![
            kv("steps", self.steps.to_string()),
            kv("batch_size", self.batch_size.to_string()),
            kv("lr", self.lr.to_string()),
            kv("poly_power", self.poly_power.to_string()),
            kv("weight_decay", self.weight_decay.to_string()),
            kv("seed", self.seed.to_string()),
            kv("n_train", self.n_train.to_string()),
            kv("n_val", self.n_val.to_string()),
            kv("n_test", self.n_test.to_string()),
            kv("eval_every", self.eval_every.to_string()),
            kv("probe_size", self.probe_size.to_string()),
        ];
        for (k, v) in Toggles::KEYS.iter().zip(self.toggles.values()) {
            out.push(kv(k, v.to_string()));
        }
        out
    }
}
