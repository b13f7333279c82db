//! Multi-task loss stack: outlier-robust log-L1 depth loss with quantile
//! filtering, RGB-edge-aware smoothness, panoptic-edge-aware smoothness,
//! and the weighted depth / total objectives.
//!
//! Every loss is recorded on a [`Tape`] so it can be differentiated; the
//! selection mask of the quantile filter and all label-derived weights are
//! constants on the tape.

pub mod check;
pub mod oracle;

use diffmath::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::config::{parse_bool, parse_num, KeyValue};
use crate::error::{Error, Result};
use crate::scenegen::{ConditionLabel, PanopticMap, SparseDepthMap};

#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub tau: f64,
    pub lambda_l1: f64,
    pub lambda_es: f64,
    pub lambda_pes: f64,
    pub lambda_depth: f64,
    pub lambda_seg: f64,
    pub lambda_cond: f64,
    /// Side of the square element that widens panoptic boundaries.
    pub boundary_k: usize,
    pub d_min: f64,
    pub d_max: f64,
    /// Apply both smoothness terms to `log(depth)` instead of depth.
    pub smooth_log_domain: bool,
    /// When false the smoothness terms are not built at all.
    pub smoothness: bool,
    /// When false every valid lidar pixel is supervised (`tau = 1`).
    pub tau_filter: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            tau: 0.8,
            lambda_l1: 0.9,
            lambda_es: 0.05,
            lambda_pes: 0.05,
            lambda_depth: 1.0,
            lambda_seg: 1.0,
            lambda_cond: 0.1,
            boundary_k: 3,
            d_min: 1.0,
            d_max: 80.0,
            smooth_log_domain: false,
            smoothness: true,
            tau_filter: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!(
                "tau must lie in (0, 1], got {}",
                self.tau
            )));
        }
        let lambdas = [
            self.lambda_l1,
            self.lambda_es,
            self.lambda_pes,
            self.lambda_depth,
            self.lambda_seg,
            self.lambda_cond,
        ];
        if lambdas.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
            return Err(Error::Config(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        if self.boundary_k % 2 == 0 {
            return Err(Error::Config(format!(
                "boundary_k {} must be odd",
                self.boundary_k
            )));
        }
        Ok(())
    }

    pub fn effective_tau(&self) -> f64 {
        if self.tau_filter {
            self.tau
        } else {
            1.0
        }
    }
}

impl KeyValue for LossWeights {
    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "tau" => self.tau = parse_num(key, v)?,
            "lambda_l1" => self.lambda_l1 = parse_num(key, v)?,
            "lambda_es" => self.lambda_es = parse_num(key, v)?,
            "lambda_pes" => self.lambda_pes = parse_num(key, v)?,
            "lambda_depth" => self.lambda_depth = parse_num(key, v)?,
            "lambda_seg" => self.lambda_seg = parse_num(key, v)?,
            "lambda_cond" => self.lambda_cond = parse_num(key, v)?,
            "boundary_k" => self.boundary_k = parse_num(key, v)?,
            "smooth_log_domain" => self.smooth_log_domain = parse_bool(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn pairs(&self) -> Vec<(String, String)> {
        let kv = |k: &str, v: String| (k.to_string(), v);
        vec![
            kv("tau", self.tau.to_string()),
            kv("lambda_l1", self.lambda_l1.to_string()),
            kv("lambda_es", self.lambda_es.to_string()),
            kv("lambda_pes", self.lambda_pes.to_string()),
            kv("lambda_depth", self.lambda_depth.to_string()),
            kv("lambda_seg", self.lambda_seg.to_string()),
            kv("lambda_cond", self.lambda_cond.to_string()),
            kv("boundary_k", self.boundary_k.to_string()),
            kv("smooth_log_domain", self.smooth_log_domain.to_string()),
        ]
    }
}

/// Absolute log-depth errors; meaningful only on `valid` pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualMap {
    pub r: Tensor,
    pub valid: Vec<bool>,
}

/// Binary smoothness weights for horizontal (`[H, W-1]`) and vertical
/// (`[H-1, W]`) neighbour pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoundaryWeights {
    pub height: usize,
    pub width: usize,
    pub w_x: Vec<u8>,
    pub w_y: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub l_log_l1: f64,
    pub l_es: f64,
    pub l_pes: f64,
    pub l_depth: f64,
    pub l_seg: f64,
    pub l_cond: f64,
    pub l_total: f64,
    pub n_valid: usize,
    pub n_kept: usize,
}

/// Number of residuals kept by the quantile filter: `ceil(tau * n)`.
///
/// `tau * n` is snapped to the nearest integer when it is within floating
/// rounding of one, so e.g. `0.7 * 10` keeps 7, not 8.
pub fn kept_count(tau: f64, n: usize) -> usize {
    let x = tau * n as f64;
    let r = x.round();
    let k = if (x - r).abs() <= 1e-9 * (1.0 + x.abs()) {
        r
    } else {
        x.ceil()
    };
    (k as usize).clamp(1, n)
}

fn gt_log_plane(gt: &SparseDepthMap, d_min: f64, d_max: f64) -> Tensor {
    let data = gt
        .depth
        .data()
        .iter()
        .zip(&gt.valid)
        .map(|(&d, &v)| if v { d.clamp(d_min, d_max).ln() } else { 0.0 })
        .collect();
    Tensor::new(gt.depth.shape().to_vec(), data).expect("same shape as gt")
}

/// `r_p = |log pred_p - log clamp(gt_p)|` for every pixel.
pub fn log_residuals(
    tape: &mut Tape,
    pred: Var,
    gt: &SparseDepthMap,
    d_min: f64,
    d_max: f64,
) -> Result<(Var, ResidualMap)> {
    if tape.shape(pred) != gt.depth.shape() {
        return Err(Error::Contract(format!(
            "prediction {:?} vs lidar {:?}",
            tape.shape(pred),
            gt.depth.shape()
        )));
    }
    let log_pred = tape.log(pred)?;
    let log_gt = tape.constant(gt_log_plane(gt, d_min, d_max));
    let diff = tape.sub(log_pred, log_gt)?;
    let r = tape.abs(diff)?;
    let map = ResidualMap {
        r: tape.value(r).clone(),
        valid: gt.valid.clone(),
    };
    Ok((r, map))
}

/// Keep the `ceil(tau * |P_l|)` valid pixels with the smallest residuals;
/// ties at the cut-off go to the smaller row-major index.
pub fn tau_filter(r: &ResidualMap, tau: f64) -> Result<Vec<bool>> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Contract(format!("tau {tau} outside (0, 1]")));
    }
    let vals = r.r.data();
    let mut valid: Vec<f64> = vals
        .iter()
        .zip(&r.valid)
        .filter(|(_, &v)| v)
        .map(|(&x, _)| x)
        .collect();
    let n = valid.len();
    if n == 0 {
        return Err(Error::Contract("no valid lidar pixels to supervise".into()));
    }
    let keep = kept_count(tau, n);
    let mut mask = vec![false; vals.len()];
    if keep == n {
        mask.copy_from_slice(&r.valid);
        return Ok(mask);
    }
    let (_, &mut cut, _) = valid.select_nth_unstable_by(keep - 1, |a, b| a.total_cmp(b));
    let mut taken = 0;
    for (i, (&x, &v)) in vals.iter().zip(&r.valid).enumerate() {
        if v && x < cut {
            mask[i] = true;
            taken += 1;
        }
    }
    for (i, (&x, &v)) in vals.iter().zip(&r.valid).enumerate() {
        if taken == keep {
            break;
        }
        if v && x == cut {
            mask[i] = true;
            taken += 1;
        }
    }
    Ok(mask)
}

#[derive(Debug, Clone, Copy)]
pub struct LogL1 {
    pub loss: Var,
    pub n_valid: usize,
    pub n_kept: usize,
}

/// Mean residual over the quantile-filtered pixel set.
pub fn loss_log_l1(
    tape: &mut Tape,
    pred: Var,
    gt: &SparseDepthMap,
    tau: f64,
    d_min: f64,
    d_max: f64,
) -> Result<LogL1> {
    let (r, map) = log_residuals(tape, pred, gt, d_min, d_max)?;
    let kept = tau_filter(&map, tau)?;
    let n_kept = kept.iter().filter(|&&k| k).count();
    let mask = Tensor::new(
        map.r.shape().to_vec(),
        kept.iter().map(|&k| k as u8 as f64).collect(),
    )?;
    let mask = tape.constant(mask);
    let masked = tape.mul(r, mask)?;
    let sum = tape.sum_all(masked)?;
    let loss = tape.div(sum, n_kept as f64)?;
    Ok(LogL1 {
        loss,
        n_valid: gt.valid_count(),
        n_kept,
    })
}

fn hw(tape: &Tape, v: Var) -> Result<(usize, usize)> {
    match tape.shape(v) {
        &[h, w] => Ok((h, w)),
        s => Err(Error::Contract(format!(
            "expected an [H, W] depth map, got {s:?}"
        ))),
    }
}

/// Forward differences along x (`[H, W-1]`) and y (`[H-1, W]`).
fn forward_diffs(tape: &mut Tape, d: Var) -> Result<(Option<Var>, Option<Var>)> {
    let (h, w) = hw(tape, d)?;
    let dx = if w > 1 {
        let a = tape.narrow(d, 1, 1, w - 1)?;
        let b = tape.narrow(d, 1, 0, w - 1)?;
        Some(tape.sub(a, b)?)
    } else {
        None
    };
    let dy = if h > 1 {
        let a = tape.narrow(d, 0, 1, h - 1)?;
        let b = tape.narrow(d, 0, 0, h - 1)?;
        Some(tape.sub(a, b)?)
    } else {
        None
    };
    Ok((dx, dy))
}

/// `sum(weight * |diff|) / (H W)` over both axes.
fn weighted_abs_sum(
    tape: &mut Tape,
    pred: Var,
    wx: Tensor,
    wy: Tensor,
    log_domain: bool,
) -> Result<Var> {
    let (h, w) = hw(tape, pred)?;
    let d = if log_domain { tape.log(pred)? } else { pred };
    let (dx, dy) = forward_diffs(tape, d)?;
    let mut terms = Vec::new();
    for (diff, weight) in [(dx, wx), (dy, wy)] {
        if let Some(diff) = diff {
            let a = tape.abs(diff)?;
            let wv = tape.constant(weight);
            let p = tape.mul(a, wv)?;
            terms.push(tape.sum_all(p)?);
        }
    }
    let total = match terms.as_slice() {
        [] => {
            let z = tape.constant(Tensor::scalar(0.0));
            return Ok(z);
        }
        [a] => *a,
        [a, b] => tape.add(*a, *b)?,
        _ => unreachable!(),
    };
    Ok(tape.div(total, (h * w) as f64)?)
}

/// Channel-mean intensity of a `[3, H, W]` image.
pub fn intensity(rgb: &Tensor) -> Result<Vec<f64>> {
    let &[c, h, w] = rgb.shape() else {
        return Err(Error::Contract(format!(
            "expected [C, H, W] image, got {:?}",
            rgb.shape()
        )));
    };
    let n = h * w;
    Ok((0..n)
        .map(|i| (0..c).map(|ch| rgb.data()[ch * n + i]).sum::<f64>() / c as f64)
        .collect())
}

/// Edge-aware smoothness: depth gradients weighted by `exp(-|dI|)`.
pub fn loss_edge_smooth(tape: &mut Tape, pred: Var, rgb: &Tensor, log_domain: bool) -> Result<Var> {
    let (h, w) = hw(tape, pred)?;
    if rgb.shape()[1..] != [h, w] {
        return Err(Error::Contract(format!(
            "image {:?} vs depth {h}x{w}",
            rgb.shape()
        )));
    }
    let i = intensity(rgb)?;
    let wx = Tensor::from_fn(&[h, w.saturating_sub(1).max(1)], |k| {
        let (y, x) = (k / (w - 1).max(1), k % (w - 1).max(1));
        if w > 1 {
            (-(i[y * w + x + 1] - i[y * w + x]).abs()).exp()
        } else {
            0.0
        }
    });
    let wy = Tensor::from_fn(&[h.saturating_sub(1).max(1), w], |k| {
        if h > 1 {
            (-(i[k + w] - i[k]).abs()).exp()
        } else {
            0.0
        }
    });
    weighted_abs_sum(tape, pred, wx, wy, log_domain)
}

/// Boundary weights from panoptic labels: zero across segment changes
/// (class or instance), widened by a `k x k` square, and zero wherever
/// either endpoint is void.
pub fn panoptic_boundary_weights(s: &PanopticMap, k: usize) -> Result<BoundaryWeights> {
    boundary_weights_by(s, k, |m, i| m.segment(i))
}

/// Same construction keyed on class ids only; used to contrast the panoptic
/// mask with a purely semantic one.
pub fn semantic_boundary_weights(s: &PanopticMap, k: usize) -> Result<BoundaryWeights> {
    boundary_weights_by(s, k, |m, i| (!m.is_void(i)).then(|| (m.class_id[i], 0)))
}

fn boundary_weights_by(
    s: &PanopticMap,
    k: usize,
    key: impl Fn(&PanopticMap, usize) -> Option<(u16, u16)>,
) -> Result<BoundaryWeights> {
    if k % 2 == 0 {
        return Err(Error::Contract(format!(
            "boundary dilation kernel {k} must be odd"
        )));
    }
    let (h, w) = (s.height, s.width);
    let pair = |a: usize, b: usize| -> (u8, u8) {
        let (ka, kb) = (key(s, a), key(s, b));
        let same = (ka == kb) as u8;
        let both_labelled = (ka.is_some() && kb.is_some()) as u8;
        (same, both_labelled)
    };
    let build = |gh: usize, gw: usize, step: usize| -> Vec<u8> {
        if gh == 0 || gw == 0 {
            return Vec::new();
        }
        let mut b = vec![0u8; gh * gw];
        let mut v = vec![0u8; gh * gw];
        for y in 0..gh {
            for x in 0..gw {
                let p = y * w + x;
                let (same, lab) = pair(p, p + step);
                b[y * gw + x] = same;
                v[y * gw + x] = lab;
            }
        }
        let b = min_filter(&b, gh, gw, k / 2);
        b.iter().zip(&v).map(|(a, c)| a * c).collect()
    };
    Ok(BoundaryWeights {
        height: h,
        width: w,
        w_x: build(h, w.saturating_sub(1), 1),
        w_y: build(h.saturating_sub(1), w, w),
    })
}

// Square min-filter as a row pass followed by a column pass.
fn min_filter(b: &[u8], h: usize, w: usize, r: usize) -> Vec<u8> {
    let mut rows = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            rows[y * w + x] = b[y * w + lo..=y * w + hi]
                .iter()
                .copied()
                .min()
                .unwrap_or(1);
        }
    }
    let mut out = vec![0u8; h * w];
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            out[y * w + x] = (lo..=hi).map(|yy| rows[yy * w + x]).min().unwrap_or(1);
        }
    }
    out
}

/// Panoptic-edge-aware smoothness with precomputed weights.
pub fn loss_panoptic_smooth_weighted(
    tape: &mut Tape,
    pred: Var,
    bw: &BoundaryWeights,
    log_domain: bool,
) -> Result<Var> {
    let (h, w) = hw(tape, pred)?;
    if (bw.height, bw.width) != (h, w) {
        return Err(Error::Contract(
            "boundary weights do not match depth size".into(),
        ));
    }
    let to_f = |v: &[u8], gh: usize, gw: usize| {
        if v.is_empty() {
            Tensor::zeros(&[1])
        } else {
            Tensor::new(vec![gh, gw], v.iter().map(|&x| x as f64).collect())
                .expect("sized by construction")
        }
    };
    let wx = to_f(&bw.w_x, h, w.saturating_sub(1));
    let wy = to_f(&bw.w_y, h.saturating_sub(1), w);
    weighted_abs_sum(tape, pred, wx, wy, log_domain)
}

pub fn loss_panoptic_smooth(
    tape: &mut Tape,
    pred: Var,
    s: &PanopticMap,
    k: usize,
    log_domain: bool,
) -> Result<Var> {
    let bw = panoptic_boundary_weights(s, k)?;
    loss_panoptic_smooth_weighted(tape, pred, &bw, log_domain)
}

#[derive(Debug, Clone, Copy)]
pub struct DepthTerms {
    pub total: Var,
    pub log_l1: Var,
    pub es: Option<Var>,
    pub pes: Option<Var>,
    pub n_valid: usize,
    pub n_kept: usize,
}

/// `lambda_l1 L_logL1 + lambda_es L_es + lambda_pes L_pes`. The smoothness
/// terms are omitted from the graph when `weights.smoothness` is off.
pub fn loss_depth_total(
    tape: &mut Tape,
    pred: Var,
    gt: &SparseDepthMap,
    rgb: &Tensor,
    s: &PanopticMap,
    weights: &LossWeights,
) -> Result<DepthTerms> {
    let l1 = loss_log_l1(
        tape,
        pred,
        gt,
        weights.effective_tau(),
        weights.d_min,
        weights.d_max,
    )?;
    let mut total = tape.mul(l1.loss, weights.lambda_l1)?;
    let (mut es, mut pes) = (None, None);
    if weights.smoothness {
        let e = loss_edge_smooth(tape, pred, rgb, weights.smooth_log_domain)?;
        let p = loss_panoptic_smooth(tape, pred, s, weights.boundary_k, weights.smooth_log_domain)?;
        let we = tape.mul(e, weights.lambda_es)?;
        let wp = tape.mul(p, weights.lambda_pes)?;
        total = tape.add(total, we)?;
        total = tape.add(total, wp)?;
        es = Some(e);
        pes = Some(p);
    }
    Ok(DepthTerms {
        total,
        log_l1: l1.loss,
        es,
        pes,
        n_valid: l1.n_valid,
        n_kept: l1.n_kept,
    })
}

/// Mean per-pixel cross-entropy over non-void pixels of `[C, H, W]` logits.
pub fn loss_seg(tape: &mut Tape, logits: Var, s: &PanopticMap) -> Result<Var> {
    let &[c, h, w] = tape.shape(logits) else {
        return Err(Error::Contract(format!(
            "seg logits must be [C, H, W], got {:?}",
            tape.shape(logits)
        )));
    };
    if (h, w) != (s.height, s.width) {
        return Err(Error::Contract(
            "seg logits and labels differ in size".into(),
        ));
    }
    let n = h * w;
    let mut idx = Vec::new();
    for (p, &cls) in s.class_id.iter().enumerate() {
        if s.is_void(p) {
            continue;
        }
        if cls as usize >= c {
            return Err(Error::Contract(format!("label {cls} outside {c} classes")));
        }
        idx.push(cls as usize * n + p);
    }
    if idx.is_empty() {
        return Err(Error::Contract("every pixel is void".into()));
    }
    let count = idx.len();
    let lsm = tape.log_softmax(logits, 0)?;
    let map = diffmath::IndexMap::gather(c * n, &[count], idx)?;
    let picked = tape.remap(lsm, std::rc::Rc::new(map))?;
    let mean = tape.mean_all(picked)?;
    Ok(tape.mul(mean, -1.0)?)
}

/// Cross-entropy of the 8 condition logits against the scene condition.
pub fn loss_cond(tape: &mut Tape, logits: Var, condition: ConditionLabel) -> Result<Var> {
    if tape.value(logits).numel() != ConditionLabel::COUNT {
        return Err(Error::Contract(format!(
            "condition logits {:?}",
            tape.shape(logits)
        )));
    }
    let flat = tape.reshape(logits, &[ConditionLabel::COUNT])?;
    let lsm = tape.log_softmax(flat, 0)?;
    let picked = tape.narrow(lsm, 0, condition.index(), 1)?;
    Ok(tape.mul(picked, -1.0)?)
}

/// `lambda_seg L_seg + lambda_cond L_cond + lambda_depth L_depth`, skipping
/// absent parts.
pub fn loss_total(
    tape: &mut Tape,
    seg: Option<Var>,
    cond: Option<Var>,
    depth: Option<Var>,
    weights: &LossWeights,
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (part, lambda) in [
        (seg, weights.lambda_seg),
        (cond, weights.lambda_cond),
        (depth, weights.lambda_depth),
    ] {
        if let Some(p) = part {
            let term = tape.mul(p, lambda)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, term)?,
                None => term,
            });
        }
    }
    match acc {
        Some(a) => Ok(a),
        None => Ok(tape.constant(Tensor::scalar(0.0))),
    }
}

/// Evaluate the depth terms of a fixed prediction (no model involved).
pub fn evaluate_depth(
    pred: &Tensor,
    gt: &SparseDepthMap,
    rgb: &Tensor,
    s: &PanopticMap,
    weights: &LossWeights,
) -> Result<LossReport> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let t = loss_depth_total(&mut tape, p, gt, rgb, s, weights)?;
    let val = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
    let l_depth = tape.value(t.total).item();
    Ok(LossReport {
        l_log_l1: tape.value(t.log_l1).item(),
        l_es: val(t.es),
        l_pes: val(t.pes),
        l_depth,
        l_seg: 0.0,
        l_cond: 0.0,
        l_total: weights.lambda_depth * l_depth,
        n_valid: t.n_valid,
        n_kept: t.n_kept,
    })
}
