use std::collections::BTreeMap;

use diffmath::{Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{argmax_classes, ConfusionMatrix, DepthErrors, MetricsReport};
use super::optim::{poly_lr, AdamW};
use super::Dataset;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fusenet::{forward, Graph, ModelOutput, ParamStore};
use crate::losskit::{self, LossReport};
use crate::scenegen::MultimodalSample;

/// `L_total` of one sample on an existing graph.
pub fn sample_loss(
    g: &mut Graph,
    cfg: &RunConfig,
    sample: &MultimodalSample,
    out: &ModelOutput,
) -> Result<(Var, LossReport)> {
    let w = &cfg.loss;
    let seg = losskit::loss_seg(&mut g.tape, out.seg_logits, &sample.panoptic)?;
    let cond = match out.cond_logits {
        Some(l) => Some(losskit::loss_cond(&mut g.tape, l, sample.condition)?),
        None => None,
    };
    let depth = match out.depth_pred {
        Some(d) => Some(losskit::loss_depth_total(
            &mut g.tape,
            d,
            &sample.lidar_raw,
            &sample.rgb,
            &sample.panoptic,
            w,
        )?),
        None => None,
    };
    let total = losskit::loss_total(&mut g.tape, Some(seg), cond, depth.map(|d| d.total), w)?;
    let val = |v: Option<Var>| v.map_or(0.0, |v| g.tape.value(v).item());
    let report = LossReport {
        l_log_l1: val(depth.map(|d| d.log_l1)),
        l_es: val(depth.and_then(|d| d.es)),
        l_pes: val(depth.and_then(|d| d.pes)),
        l_depth: val(depth.map(|d| d.total)),
        l_seg: val(Some(seg)),
        l_cond: val(cond),
        l_total: val(Some(total)),
        n_valid: depth.map_or(0, |d| d.n_valid),
        n_kept: depth.map_or(0, |d| d.n_kept),
    };
    Ok((total, report))
}

/// Mean `L_total` over `samples` without building gradients.
pub(crate) fn mean_loss(
    cfg: &RunConfig,
    params: &ParamStore,
    samples: &[MultimodalSample],
) -> Result<f64> {
    let mut s = 0.0;
    for sample in samples {
        let mut g = Graph::new(params, false);
        let out = forward(&mut g, &cfg.model, sample)?;
        s += sample_loss(&mut g, cfg, sample, &out)?.1.l_total;
    }
    Ok(s / samples.len() as f64)
}

/// Segmentation, depth and condition metrics over `samples`.
pub fn evaluate(
    cfg: &RunConfig,
    params: &ParamStore,
    samples: &[MultimodalSample],
) -> Result<MetricsReport> {
    let c = cfg.model.num_classes;
    let mut confusion = ConfusionMatrix::new(c);
    let mut depth = DepthErrors::default();
    let mut correct = 0usize;
    for sample in samples {
        let mut g = Graph::new(params, false);
        let out = forward(&mut g, &cfg.model, sample)?;
        let pred = argmax_classes(g.tape.value(out.seg_logits).data(), c);
        confusion.add(&pred, &sample.panoptic)?;
        if let Some(d) = out.depth_pred {
            depth.add(
                g.tape.value(d).data(),
                sample.true_depth.data(),
                &sample.lidar_raw.valid,
                cfg.scene.d_min,
                cfg.scene.d_max,
            );
        }
        if let Some(l) = out.cond_logits {
            let guess = argmax_classes(
                g.tape.value(l).data(),
                crate::scenegen::ConditionLabel::COUNT,
            )[0];
            correct += (guess as usize == sample.condition.index()) as usize;
        }
    }
    let (depth_mae, depth_log_rmse) = depth.finish();
    Ok(MetricsReport {
        samples: samples.len(),
        miou: confusion.miou(),
        per_class_iou: confusion.iou(),
        depth_mae,
        depth_log_rmse,
        cond_accuracy: cfg
            .model
            .use_ct
            .then(|| correct as f64 / samples.len().max(1) as f64),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config_hash: String,
    pub steps: usize,
    pub parameters: usize,
    /// Mean `L_total` on the probe set before the first update.
    pub initial_loss: f64,
    /// Same probe set after the last update.
    pub final_loss: f64,
    /// Mean batch `L_total` per step.
    pub loss_curve: Vec<f64>,
    /// `(step, val mIoU)` at each periodic validation.
    pub val_curve: Vec<(usize, f64)>,
    pub train_metrics: MetricsReport,
    pub val_metrics: Option<MetricsReport>,
}

pub struct Trained {
    pub params: ParamStore,
    pub report: TrainReport,
}

fn accumulate(acc: &mut BTreeMap<String, Tensor>, grads: BTreeMap<String, Tensor>, scale: f64) {
    for (k, g) in grads {
        match acc.get_mut(&k) {
            Some(a) => {
                for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                    *x += scale * y;
                }
            }
            None => {
                let mut g = g;
                g.data_mut().iter_mut().for_each(|x| *x *= scale);
                acc.insert(k, g);
            }
        }
    }
}

/// Seeded training run on `data.train`. `progress` is called after each
/// step with `(step, batch loss)`.
pub fn train(
    cfg: &RunConfig,
    data: &Dataset,
    mut progress: impl FnMut(usize, f64),
) -> Result<Trained> {
    cfg.validate()?;
    let tc = &cfg.train;
    if data.train.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    if let Some(s) = data.train.first() {
        if (s.height(), s.width()) != (cfg.model.height, cfg.model.width) {
            return Err(Error::Dataset(format!(
                "dataset scenes are {}x{}, config expects {}x{}",
                s.height(),
                s.width(),
                cfg.model.height,
                cfg.model.width
            )));
        }
    }
    let mut params = cfg.model.init_params(tc.seed)?;
    let mut opt = AdamW::new(tc.weight_decay);
    let probe = &data.train[..tc.probe_size.clamp(1, data.train.len())];
    let initial_loss = mean_loss(cfg, &params, probe)?;

    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x7261_696e);
    let mut order: Vec<usize> = Vec::new();
    let mut loss_curve = Vec::with_capacity(tc.steps);
    let mut val_curve = Vec::new();
    for step in 0..tc.steps {
        let mut grads = BTreeMap::new();
        let mut batch_loss = 0.0;
        for _ in 0..tc.batch_size {
            if order.is_empty() {
                order = (0..data.train.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            let sample = &data.train[order.pop().expect("refilled above")];
            let mut g = Graph::new(&params, true);
            let out = forward(&mut g, &cfg.model, sample)?;
            let (loss, report) = sample_loss(&mut g, cfg, sample, &out)?;
            g.tape.backward(loss)?;
            accumulate(&mut grads, g.grads(), 1.0 / tc.batch_size as f64);
            batch_loss += report.l_total / tc.batch_size as f64;
        }
        if !batch_loss.is_finite() {
            return Err(Error::Diverged(format!(
                "loss became {batch_loss} at step {step}"
            )));
        }
        let lr = poly_lr(tc.lr, step, tc.steps, tc.poly_power);
        opt.step(&mut params, &grads, lr)?;
        loss_curve.push(batch_loss);
        progress(step, batch_loss);
        if tc.eval_every > 0
            && (step + 1) % tc.eval_every == 0
            && step + 1 < tc.steps
            && !data.val.is_empty()
        {
            val_curve.push((step + 1, evaluate(cfg, &params, &data.val)?.miou));
        }
    }
    let final_loss = mean_loss(cfg, &params, probe)?;
    let train_metrics = evaluate(cfg, &params, &data.train)?;
    let val_metrics = if data.val.is_empty() {
        None
    } else {
        let m = evaluate(cfg, &params, &data.val)?;
        val_curve.push((tc.steps, m.miou));
        Some(m)
    };
    let report = TrainReport {
        config_hash: cfg.hash(),
        steps: tc.steps,
        parameters: params.numel(),
        initial_loss,
        final_loss,
        loss_curve,
        val_curve,
        train_metrics,
        val_metrics,
    };
    Ok(Trained { params, report })
}
