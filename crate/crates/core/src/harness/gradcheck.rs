use diffmath::gradcheck::rel_error;
use diffmath::Tensor;
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::train::sample_loss;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fusenet::{forward, Graph, ModelConfig, ParamStore};
use crate::scenegen::{generate_scene, MultimodalSample, PanopticMap, SceneConfig, SparseDepthMap};

pub type GradHook = Box<dyn Fn(&str, &mut Tensor)>;

pub struct GradCheckOptions {
    /// Random entries probed per parameter tensor, in addition to the entry
    /// with the largest analytic gradient.
    pub probes_per_tensor: usize,
    pub step: f64,
    pub seed: u64,
    pub tolerance: f64,
    /// Applied to each analytic gradient before comparison; lets tests
    /// inject a faulty gradient rule.
    pub corrupt: Option<GradHook>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            probes_per_tensor: 2,
            step: 1e-5,
            seed: 0,
            tolerance: 1e-4,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub name: String,
    pub probes: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub loss: f64,
    pub groups: Vec<GroupResult>,
    pub max_rel_err: f64,
    pub worst_group: String,
    pub tolerance: f64,
    pub passed: bool,
}

fn subsample(t: &Tensor, h: usize, w: usize) -> Tensor {
    let (oh, ow) = (h / 2, w / 2);
    let mut shape = t.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Tensor::from_fn(&shape, |i| {
        let (ch, p) = (i / (oh * ow), i % (oh * ow));
        t.data()[ch * h * w + 2 * (p / ow) * w + 2 * (p % ow)]
    })
}

/// A 16x16 scene: a 32x32 render keeping every other row and column.
pub fn grad_check_sample(seed: u64) -> Result<MultimodalSample> {
    let scene = SceneConfig {
        height: 32,
        width: 32,
        ..SceneConfig::default()
    };
    for s in seed..seed + 64 {
        let big = generate_scene(&scene, s)?;
        let (h, w) = (32, 32);
        let keep = |y: usize, x: usize| 2 * y * w + 2 * x;
        let pick = |v: &[bool]| {
            (0..16 * 16)
                .map(|i| v[keep(i / 16, i % 16)])
                .collect::<Vec<_>>()
        };
        let pick16 = |v: &[u16]| {
            (0..16 * 16)
                .map(|i| v[keep(i / 16, i % 16)])
                .collect::<Vec<_>>()
        };
        let small = MultimodalSample {
            rgb: subsample(&big.rgb, h, w),
            lidar_raw: SparseDepthMap {
                depth: subsample(&big.lidar_raw.depth, h, w),
                valid: pick(&big.lidar_raw.valid),
            },
            lidar_input: subsample(&big.lidar_input, h, w),
            radar_input: subsample(&big.radar_input, h, w),
            event_input: subsample(&big.event_input, h, w),
            panoptic: PanopticMap {
                height: 16,
                width: 16,
                class_id: pick16(&big.panoptic.class_id),
                instance_id: pick16(&big.panoptic.instance_id),
            },
            condition: big.condition,
            true_depth: subsample(&big.true_depth, h, w),
        };
        if small.lidar_raw.valid_count() >= 4 {
            return Ok(small);
        }
    }
    Err(Error::Dataset(
        "no small scene with lidar returns found".into(),
    ))
}

fn loss_at(cfg: &RunConfig, params: &ParamStore, sample: &MultimodalSample) -> Result<f64> {
    let mut g = Graph::new(params, false);
    let out = forward(&mut g, &cfg.model, sample)?;
    Ok(sample_loss(&mut g, cfg, sample, &out)?.1.l_total)
}

/// Compare backward gradients of `L_total` with central differences on the
/// tiny model (widths 4/8/16/32, 16x16 input) with random weights.
pub fn grad_check(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut cfg = RunConfig::default();
    cfg.scene.height = 32;
    cfg.scene.width = 32;
    cfg.model = ModelConfig::tiny();
    cfg.sync();
    cfg.model.height = 16;
    cfg.model.width = 16;
    cfg.model.validate()?;
    let sample = grad_check_sample(opts.seed)?;

    // Random values everywhere, biases included, so no activation sits
    // exactly on a ReLU kink.
    let mut params = cfg.model.init_params(opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x6772_6164);
    let noise = Normal::new(0.0, 0.1).expect("valid sigma");
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v += noise.sample(&mut rng);
        }
    }

    let mut g = Graph::new(&params, true);
    let out = forward(&mut g, &cfg.model, &sample)?;
    let (loss, report) = sample_loss(&mut g, &cfg, &sample, &out)?;
    g.tape.backward(loss)?;
    let mut grads = g.grads();
    drop(g);
    if let Some(hook) = &opts.corrupt {
        for (name, t) in grads.iter_mut() {
            hook(name, t);
        }
    }

    let names: Vec<String> = params.names().map(String::from).collect();
    let mut groups = Vec::with_capacity(names.len());
    for name in names {
        let n = params.get(&name)?.numel();
        let analytic = grads
            .get(&name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&[n]));
        let mut idx: Vec<usize> =
            sample_indices(&mut rng, n, opts.probes_per_tensor.min(n)).into_vec();
        let top = (0..n)
            .max_by(|&a, &b| {
                analytic.data()[a]
                    .abs()
                    .total_cmp(&analytic.data()[b].abs())
            })
            .unwrap_or(0);
        if !idx.contains(&top) {
            idx.push(top);
        }
        let mut worst = 0.0f64;
        for &i in &idx {
            let orig = params.get(&name)?.data()[i];
            params.get_mut(&name)?.data_mut()[i] = orig + opts.step;
            let fp = loss_at(&cfg, &params, &sample)?;
            params.get_mut(&name)?.data_mut()[i] = orig - opts.step;
            let fm = loss_at(&cfg, &params, &sample)?;
            params.get_mut(&name)?.data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * opts.step);
            worst = worst.max(rel_error(analytic.data()[i], numeric));
        }
        groups.push(GroupResult {
            name,
            probes: idx.len(),
            max_rel_err: worst,
        });
    }
    let worst = groups
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .expect("model has parameters");
    Ok(GradCheckReport {
        loss: report.l_total,
        max_rel_err: worst.max_rel_err,
        worst_group: worst.name.clone(),
        tolerance: opts.tolerance,
        passed: worst.max_rel_err < opts.tolerance,
        groups,
    })
}
