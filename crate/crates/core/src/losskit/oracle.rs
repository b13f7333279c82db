//! Brute-force scalar reference implementations of every loss.
//!
//! Nothing here touches the tape or the helpers in the parent module, so the
//! two can be compared against each other.

use crate::scenegen::PanopticMap;

/// `|ln p - ln clamp(g)|` per pixel, `None` where lidar is missing.
pub fn residuals(
    pred: &[f64],
    gt: &[f64],
    valid: &[bool],
    d_min: f64,
    d_max: f64,
) -> Vec<Option<f64>> {
    let mut out = Vec::with_capacity(pred.len());
    for i in 0..pred.len() {
        if valid[i] {
            let g = if gt[i] < d_min {
                d_min
            } else if gt[i] > d_max {
                d_max
            } else {
                gt[i]
            };
            out.push(Some((pred[i].ln() - g.ln()).abs()));
        } else {
            out.push(None);
        }
    }
    out
}

/// Sort `(residual, index)` pairs and keep the first `keep`.
pub fn tau_keep(res: &[Option<f64>], keep: usize) -> Vec<bool> {
    let mut pairs: Vec<(f64, usize)> = res
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.map(|r| (r, i)))
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut mask = vec![false; res.len()];
    for &(_, i) in pairs.iter().take(keep) {
        mask[i] = true;
    }
    mask
}

pub fn log_l1(res: &[Option<f64>], kept: &[bool]) -> f64 {
    let mut s = 0.0;
    let mut n = 0usize;
    for i in 0..res.len() {
        if kept[i] {
            s += res[i].unwrap();
            n += 1;
        }
    }
    s / n as f64
}

/// Edge-aware smoothness on an `[H, W]` depth and `[3, H, W]` image.
pub fn edge_smooth(depth: &[f64], rgb: &[f64], h: usize, w: usize) -> f64 {
    let lum = |y: usize, x: usize| {
        (rgb[y * w + x] + rgb[h * w + y * w + x] + rgb[2 * h * w + y * w + x]) / 3.0
    };
    let mut s = 0.0;
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w {
                s += (depth[y * w + x + 1] - depth[y * w + x]).abs()
                    * (-(lum(y, x + 1) - lum(y, x)).abs()).exp();
            }
            if y + 1 < h {
                s += (depth[(y + 1) * w + x] - depth[y * w + x]).abs()
                    * (-(lum(y + 1, x) - lum(y, x)).abs()).exp();
            }
        }
    }
    s / (h * w) as f64
}

fn label(s: &PanopticMap, y: usize, x: usize) -> Option<(u16, u16)> {
    let i = y * s.width + x;
    if s.class_id[i] == crate::scenegen::VOID_CLASS {
        None
    } else {
        Some((s.class_id[i], s.instance_id[i]))
    }
}

/// Boundary weights `(w_x, w_y)` with a direct `k x k` neighbourhood scan.
pub fn boundary_weights(s: &PanopticMap, k: usize) -> (Vec<u8>, Vec<u8>) {
    let (h, w) = (s.height, s.width);
    let r = (k / 2) as i64;
    let one = |gh: usize, gw: usize, dy: usize, dx: usize| -> Vec<u8> {
        let mut out = Vec::new();
        for y in 0..gh {
            for x in 0..gw {
                let a = label(s, y, x);
                let b = label(s, y + dy, x + dx);
                let v = a.is_some() && b.is_some();
                let mut near_edge = false;
                for yy in (y as i64 - r)..=(y as i64 + r) {
                    for xx in (x as i64 - r)..=(x as i64 + r) {
                        if yy < 0 || xx < 0 || yy >= gh as i64 || xx >= gw as i64 {
                            continue;
                        }
                        let (yy, xx) = (yy as usize, xx as usize);
                        if label(s, yy, xx) != label(s, yy + dy, xx + dx) {
                            near_edge = true;
                        }
                    }
                }
                out.push((v && !near_edge) as u8);
            }
        }
        out
    };
    let wx = if w > 1 {
        one(h, w - 1, 0, 1)
    } else {
        Vec::new()
    };
    let wy = if h > 1 {
        one(h - 1, w, 1, 0)
    } else {
        Vec::new()
    };
    (wx, wy)
}

pub fn panoptic_smooth(depth: &[f64], s: &PanopticMap, k: usize) -> f64 {
    let (h, w) = (s.height, s.width);
    let (wx, wy) = boundary_weights(s, k);
    let mut t = 0.0;
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w {
                t += wx[y * (w - 1) + x] as f64 * (depth[y * w + x + 1] - depth[y * w + x]).abs();
            }
            if y + 1 < h {
                t += wy[y * w + x] as f64 * (depth[(y + 1) * w + x] - depth[y * w + x]).abs();
            }
        }
    }
    t / (h * w) as f64
}

/// Mean cross-entropy over non-void pixels of `[C, H, W]` logits.
pub fn seg_ce(logits: &[f64], c: usize, s: &PanopticMap) -> f64 {
    let n = s.height * s.width;
    let mut total = 0.0;
    let mut count = 0;
    for p in 0..n {
        if s.class_id[p] == crate::scenegen::VOID_CLASS {
            continue;
        }
        let mut m = f64::NEG_INFINITY;
        for ch in 0..c {
            m = m.max(logits[ch * n + p]);
        }
        let mut z = 0.0;
        for ch in 0..c {
            z += (logits[ch * n + p] - m).exp();
        }
        total += m + z.ln() - logits[s.class_id[p] as usize * n + p];
        count += 1;
    }
    total / count as f64
}

pub fn cond_ce(logits: &[f64], target: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    m + z.ln() - logits[target]
}
