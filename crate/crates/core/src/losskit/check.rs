//! Random loss instances and the tape-vs-oracle comparison suite.

use diffmath::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    kept_count, loss_cond, loss_depth_total, loss_edge_smooth, loss_log_l1, loss_panoptic_smooth,
    loss_seg, oracle, panoptic_boundary_weights, LossWeights,
};
use crate::error::Result;
use crate::scenegen::{ConditionLabel, PanopticMap, SparseDepthMap, VOID_CLASS};

/// Everything a depth/seg/cond loss needs, at one image size.
#[derive(Debug, Clone, PartialEq)]
pub struct LossInstance {
    pub height: usize,
    pub width: usize,
    /// `[H, W]` in `[d_min, d_max]`.
    pub pred: Tensor,
    pub gt: SparseDepthMap,
    pub rgb: Tensor,
    pub panoptic: PanopticMap,
    /// `[C, H, W]`
    pub seg_logits: Tensor,
    pub classes: usize,
    pub cond_logits: Tensor,
    pub condition: ConditionLabel,
}

/// Label map of random rectangles over a stuff background. Thing classes
/// (odd ids here) get a fresh instance id per rectangle, so same-class
/// rectangles that touch form instance seams; about 3% of pixels are void.
pub fn random_panoptic(rng: &mut impl Rng, h: usize, w: usize, classes: usize) -> PanopticMap {
    let n = h * w;
    let bg = rng.random_range(0..classes) as u16;
    let mut class_id = vec![bg; n];
    let mut instance_id = vec![1u16; n];
    let mut next = 2u16;
    for _ in 0..rng.random_range(2..8) {
        let (y0, x0) = (rng.random_range(0..h), rng.random_range(0..w));
        let (y1, x1) = (
            (y0 + rng.random_range(1..=h / 2 + 1)).min(h),
            (x0 + rng.random_range(1..=w / 2 + 1)).min(w),
        );
        let c = rng.random_range(0..classes) as u16;
        let inst = if c % 2 == 1 {
            next += 1;
            next - 1
        } else {
            1
        };
        for y in y0..y1 {
            for x in x0..x1 {
                class_id[y * w + x] = c;
                instance_id[y * w + x] = inst;
            }
        }
    }
    for i in 0..n {
        if rng.random_bool(0.03) {
            class_id[i] = VOID_CLASS;
            instance_id[i] = 0;
        }
    }
    PanopticMap {
        height: h,
        width: w,
        class_id,
        instance_id,
    }
}

/// Random instance with 8..=32 sides, ~30% lidar coverage (a few far-out
/// returns included) and 1..=8 classes.
pub fn random_instance(rng: &mut impl Rng, d_min: f64, d_max: f64) -> LossInstance {
    let (h, w) = (rng.random_range(8..=32), rng.random_range(8..=32));
    let n = h * w;
    let pred = Tensor::from_fn(&[h, w], |_| rng.random_range(d_min..d_max));
    let mut valid: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
    valid[rng.random_range(0..n)] = true;
    let depth = Tensor::from_fn(&[h, w], |_| {
        if rng.random_bool(0.05) {
            rng.random_range(0.1 * d_min..3.0 * d_max)
        } else {
            rng.random_range(d_min..d_max)
        }
    });
    let classes = rng.random_range(1..=8);
    let panoptic = random_panoptic(rng, h, w, classes);
    LossInstance {
        height: h,
        width: w,
        pred,
        gt: SparseDepthMap { depth, valid },
        rgb: Tensor::from_fn(&[3, h, w], |_| rng.random_range(0.0..1.0)),
        seg_logits: Tensor::from_fn(&[classes, h, w], |_| rng.random_range(-4.0..4.0)),
        classes,
        cond_logits: Tensor::from_fn(&[ConditionLabel::COUNT], |_| rng.random_range(-4.0..4.0)),
        condition: ConditionLabel::from_index(rng.random_range(0..ConditionLabel::COUNT)),
        panoptic,
    }
}

/// Largest absolute tape-vs-oracle deviation per loss over the suite.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub instances: usize,
    pub log_l1: f64,
    pub edge_smooth: f64,
    pub panoptic_smooth: f64,
    /// Number of boundary-weight entries that differ (must be 0).
    pub boundary_mismatches: usize,
    pub seg: f64,
    pub cond: f64,
    pub depth_total: f64,
}

impl OracleReport {
    pub fn max_deviation(&self) -> f64 {
        [
            self.log_l1,
            self.edge_smooth,
            self.panoptic_smooth,
            self.seg,
            self.cond,
            self.depth_total,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

/// Compare every tape loss with its brute-force oracle on `instances`
/// seeded random instances. `tau` is drawn per instance from `[0.1, 1]`.
pub fn compare_with_oracles(instances: usize, seed: u64) -> Result<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = LossWeights::default();
    let mut rep = OracleReport {
        instances,
        ..OracleReport::default()
    };
    for _ in 0..instances {
        let inst = random_instance(&mut rng, base.d_min, base.d_max);
        let weights = LossWeights {
            tau: rng.random_range(0.1..=1.0),
            boundary_k: [1, 3, 5][rng.random_range(0..3)],
            ..base.clone()
        };
        let (h, w) = (inst.height, inst.width);
        let dev = |a: f64, b: f64| (a - b).abs();

        let res = oracle::residuals(
            inst.pred.data(),
            inst.gt.depth.data(),
            &inst.gt.valid,
            weights.d_min,
            weights.d_max,
        );
        let n_valid = inst.gt.valid_count();
        let kept = oracle::tau_keep(&res, kept_count(weights.tau, n_valid));
        let o_l1 = oracle::log_l1(&res, &kept);
        let o_es = oracle::edge_smooth(inst.pred.data(), inst.rgb.data(), h, w);
        let o_pes = oracle::panoptic_smooth(inst.pred.data(), &inst.panoptic, weights.boundary_k);
        let o_seg = oracle::seg_ce(inst.seg_logits.data(), inst.classes, &inst.panoptic);
        let o_cond = oracle::cond_ce(inst.cond_logits.data(), inst.condition.index());
        let o_depth =
            weights.lambda_l1 * o_l1 + weights.lambda_es * o_es + weights.lambda_pes * o_pes;

        let mut t = Tape::new();
        let pred = t.constant(inst.pred.clone());
        let l1 = loss_log_l1(
            &mut t,
            pred,
            &inst.gt,
            weights.tau,
            weights.d_min,
            weights.d_max,
        )?;
        let es = loss_edge_smooth(&mut t, pred, &inst.rgb, false)?;
        let pes = loss_panoptic_smooth(&mut t, pred, &inst.panoptic, weights.boundary_k, false)?;
        let logits = t.constant(inst.seg_logits.clone());
        let seg = loss_seg(&mut t, logits, &inst.panoptic)?;
        let cl = t.constant(inst.cond_logits.clone());
        let cond = loss_cond(&mut t, cl, inst.condition)?;
        let depth = loss_depth_total(&mut t, pred, &inst.gt, &inst.rgb, &inst.panoptic, &weights)?;

        rep.log_l1 = rep.log_l1.max(dev(t.value(l1.loss).item(), o_l1));
        rep.edge_smooth = rep.edge_smooth.max(dev(t.value(es).item(), o_es));
        rep.panoptic_smooth = rep.panoptic_smooth.max(dev(t.value(pes).item(), o_pes));
        rep.seg = rep.seg.max(dev(t.value(seg).item(), o_seg));
        rep.cond = rep.cond.max(dev(t.value(cond).item(), o_cond));
        rep.depth_total = rep
            .depth_total
            .max(dev(t.value(depth.total).item(), o_depth));

        let bw = panoptic_boundary_weights(&inst.panoptic, weights.boundary_k)?;
        let (ox, oy) = oracle::boundary_weights(&inst.panoptic, weights.boundary_k);
        rep.boundary_mismatches += bw.w_x.iter().zip(&ox).filter(|(a, b)| a != b).count()
            + bw.w_y.iter().zip(&oy).filter(|(a, b)| a != b).count()
            + bw.w_x.len().abs_diff(ox.len())
            + bw.w_y.len().abs_diff(oy.len());
    }
    Ok(rep)
}

/// First `(tau, n, kept)` where the filter keeps other than
/// `ceil(tau * n)` of `n` valid residuals, for `tau` in 0.1..=1.0 (step
/// 0.1) and `n` in `1..=max_n`.
pub fn tau_count_mismatch(max_n: usize, seed: u64) -> Result<Option<(f64, usize, usize)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for n in 1..=max_n {
        let r = Tensor::from_fn(&[n], |_| rng.random_range(0.0..3.0));
        let map = super::ResidualMap {
            r,
            valid: vec![true; n],
        };
        for t in 1..=10usize {
            let tau = t as f64 / 10.0;
            let kept = super::tau_filter(&map, tau)?.iter().filter(|&&k| k).count();
            // ceil(t * n / 10) in integers.
            if kept != (t * n).div_ceil(10) {
                return Ok(Some((tau, n, kept)));
            }
        }
    }
    Ok(None)
}

fn log_l1_value(pred: &Tensor, gt: &SparseDepthMap, tau: f64, w: &LossWeights) -> Result<f64> {
    let mut t = Tape::new();
    let p = t.constant(pred.clone());
    let l = loss_log_l1(&mut t, p, gt, tau, w.d_min, w.d_max)?;
    Ok(t.value(l.loss).item())
}

/// Number of random instances on which the filtered loss decreases as `tau`
/// grows over 0.05..=1.0.
pub fn tau_monotonicity_violations(instances: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = LossWeights::default();
    let mut bad = 0;
    for _ in 0..instances {
        let inst = random_instance(&mut rng, w.d_min, w.d_max);
        let mut prev = f64::NEG_INFINITY;
        for t in 1..=20 {
            let l = log_l1_value(&inst.pred, &inst.gt, t as f64 / 20.0, &w)?;
            if l < prev {
                bad += 1;
                break;
            }
            prev = l;
        }
    }
    Ok(bad)
}

/// Instances on which pushing some or all of the pixels the filter already
/// drops to extreme residuals changes the loss bits or the kept set.
pub fn outlier_invariance_violations(instances: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = LossWeights::default();
    let mut bad = 0;
    for _ in 0..instances {
        let inst = random_instance(&mut rng, w.d_min, w.d_max);
        let tau = rng.random_range(0.1..1.0);
        let mut t = Tape::new();
        let p = t.constant(inst.pred.clone());
        let (_, map) = super::log_residuals(&mut t, p, &inst.gt, w.d_min, w.d_max)?;
        let kept = super::tau_filter(&map, tau)?;
        let clean = log_l1_value(&inst.pred, &inst.gt, tau, &w)?;
        let all = rng.random_bool(0.5);
        let mut pred = inst.pred.clone();
        let gt_log = |i: usize| inst.gt.depth.data()[i].clamp(w.d_min, w.d_max).ln();
        for i in 0..pred.numel() {
            if inst.gt.valid[i] && !kept[i] && (all || rng.random_bool(0.5)) {
                let v = &mut pred.data_mut()[i];
                *v = if v.ln() >= gt_log(i) { 1e300 } else { 1e-300 };
            }
        }
        let mut t = Tape::new();
        let p = t.constant(pred.clone());
        let (_, map2) = super::log_residuals(&mut t, p, &inst.gt, w.d_min, w.d_max)?;
        let kept2 = super::tau_filter(&map2, tau)?;
        let dirty = log_l1_value(&pred, &inst.gt, tau, &w)?;
        if kept2 != kept || dirty.to_bits() != clean.to_bits() {
            bad += 1;
        }
    }
    Ok(bad)
}

/// Stuff background with two side-by-side instances of one thing class
/// sharing a vertical or horizontal seam.
pub fn seam_map(rng: &mut impl Rng, h: usize, w: usize) -> PanopticMap {
    let mut class_id = vec![0u16; h * w];
    let mut instance_id = vec![1u16; h * w];
    let thing = [5u16, 6, 7][rng.random_range(0..3)];
    let vertical = rng.random_bool(0.5);
    let (along, across) = if vertical { (h, w) } else { (w, h) };
    let a0 = rng.random_range(1..along / 2 - 2);
    let a1 = rng.random_range(along / 2 + 3..along);
    let seam = rng.random_range(3..across - 3);
    let c0 = seam - rng.random_range(2..=seam.min(8));
    let c1 = seam + rng.random_range(2..=(across - seam).min(8));
    for a in a0..a1 {
        for c in c0..c1 {
            let (y, x) = if vertical { (a, c) } else { (c, a) };
            class_id[y * w + x] = thing;
            instance_id[y * w + x] = if c < seam { 2 } else { 3 };
        }
    }
    PanopticMap {
        height: h,
        width: w,
        class_id,
        instance_id,
    }
}

/// Panoptic vs semantic boundary masks on one map.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeamCheck {
    /// Edge positions within the dilated instance seam.
    pub seam_edges: usize,
    /// Seam edges with no class boundary or void within the dilation.
    pub interior_seam_edges: usize,
    /// Seam edges the panoptic mask does not zero.
    pub panoptic_nonzero_on_seam: usize,
    /// Seam edges away from any class boundary where the semantic mask is 0.
    pub semantic_zero_on_seam: usize,
    /// Positions where the masks differ but the seam rule does not explain it.
    pub unexplained_differences: usize,
}

impl SeamCheck {
    pub fn passed(&self) -> bool {
        self.interior_seam_edges > 0
            && self.panoptic_nonzero_on_seam == 0
            && self.semantic_zero_on_seam == 0
            && self.unexplained_differences == 0
    }
}

/// Brute-force seam analysis with a `k x k` dilation.
pub fn check_seam_contrast(s: &PanopticMap, k: usize) -> Result<SeamCheck> {
    let pan = panoptic_boundary_weights(s, k)?;
    let sem = super::semantic_boundary_weights(s, k)?;
    let (h, w) = (s.height, s.width);
    let r = (k / 2) as isize;
    let mut out = SeamCheck::default();
    // (grid height, grid width, neighbour offset, panoptic, semantic)
    for (gh, gw, step, pm, sm) in [
        (h, w - 1, 1, &pan.w_x, &sem.w_x),
        (h - 1, w, w, &pan.w_y, &sem.w_y),
    ] {
        let edge = |y: usize, x: usize, f: &dyn Fn(usize, usize) -> bool| {
            let p = y * w + x;
            f(p, p + step)
        };
        let is_seam = |a: usize, b: usize| {
            !s.is_void(a)
                && !s.is_void(b)
                && s.class_id[a] == s.class_id[b]
                && s.instance_id[a] != s.instance_id[b]
        };
        let is_class_edge =
            |a: usize, b: usize| s.is_void(a) || s.is_void(b) || s.class_id[a] != s.class_id[b];
        let near = |y: usize, x: usize, f: &dyn Fn(usize, usize) -> bool| {
            (-r..=r).any(|dy| {
                (-r..=r).any(|dx| {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    (0..gh as isize).contains(&yy)
                        && (0..gw as isize).contains(&xx)
                        && edge(yy as usize, xx as usize, f)
                })
            })
        };
        for y in 0..gh {
            for x in 0..gw {
                let i = y * gw + x;
                let on_seam = near(y, x, &is_seam);
                let near_class = near(y, x, &is_class_edge);
                if on_seam {
                    out.seam_edges += 1;
                    out.panoptic_nonzero_on_seam += (pm[i] != 0) as usize;
                    if !near_class {
                        out.interior_seam_edges += 1;
                        out.semantic_zero_on_seam += (sm[i] != 1) as usize;
                    }
                }
                let explained = on_seam && !near_class && sm[i] == 1 && pm[i] == 0;
                if pm[i] != sm[i] && !explained {
                    out.unexplained_differences += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Sum of [`check_seam_contrast`] over `maps` random seam maps (16..=32
/// sides, k = 3).
pub fn seam_suite(maps: usize, seed: u64) -> Result<(usize, SeamCheck)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = SeamCheck::default();
    let mut failed = 0;
    for _ in 0..maps {
        let (h, w) = (rng.random_range(16..=32), rng.random_range(16..=32));
        let c = check_seam_contrast(&seam_map(&mut rng, h, w), 3)?;
        failed += !c.passed() as usize;
        total.seam_edges += c.seam_edges;
        total.interior_seam_edges += c.interior_seam_edges;
        total.panoptic_nonzero_on_seam += c.panoptic_nonzero_on_seam;
        total.semantic_zero_on_seam += c.semantic_zero_on_seam;
        total.unexplained_differences += c.unexplained_differences;
    }
    Ok((failed, total))
}
