//! Fixed sparse linear maps between flat buffers.
//!
//! Every data-movement op (permute, pad, crop, slice, window partition,
//! bilinear resampling) is expressed as `out[o] = sum_t w_t * x[idx_t]`
//! with host-computed taps, so one forward kernel and one scatter-add
//! backward kernel serve all of them.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{contract, Result};

const MEMO_CAP: usize = 4096;

thread_local! {
    static MEMO: RefCell<HashMap<String, Rc<IndexMap>>> = RefCell::new(HashMap::new());
}

/// Build a map once per thread and key; later calls share it.
///
/// The key must determine the map completely (shapes and every argument).
pub fn memo(key: String, build: impl FnOnce() -> Result<IndexMap>) -> Result<Rc<IndexMap>> {
    if let Some(m) = MEMO.with(|c| c.borrow().get(&key).cloned()) {
        return Ok(m);
    }
    let m = Rc::new(build()?);
    MEMO.with(|c| {
        let mut c = c.borrow_mut();
        if c.len() >= MEMO_CAP {
            c.clear();
        }
        c.insert(key, Rc::clone(&m));
    });
    Ok(m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexMap {
    in_numel: usize,
    out_shape: Vec<usize>,
    offsets: Vec<usize>,
    idx: Vec<usize>,
    // None means every tap has weight 1.
    weights: Option<Vec<f64>>,
}

/// Mirror index into `0..n` without repeating the edge sample, extended
/// periodically so pads wider than `n - 1` still resolve.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl IndexMap {
    /// One-tap map: `out[o] = x[indices[o]]`.
    pub fn gather(in_numel: usize, out_shape: &[usize], indices: Vec<usize>) -> Result<Self> {
        let n: usize = out_shape.iter().product();
        if n != indices.len() {
            return Err(contract(
                "gather",
                "index count does not match output shape",
            ));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= in_numel) {
            return Err(contract(
                "gather",
                format!("index {bad} out of range {in_numel}"),
            ));
        }
        Ok(Self {
            in_numel,
            out_shape: out_shape.to_vec(),
            offsets: (0..=n).collect(),
            idx: indices,
            weights: None,
        })
    }

    /// Multi-tap map from per-output `(index, weight)` lists.
    pub fn weighted(
        in_numel: usize,
        out_shape: &[usize],
        taps: Vec<Vec<(usize, f64)>>,
    ) -> Result<Self> {
        let n: usize = out_shape.iter().product();
        if n != taps.len() {
            return Err(contract(
                "remap",
                "tap list count does not match output shape",
            ));
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut idx = Vec::new();
        let mut weights = Vec::new();
        offsets.push(0);
        for list in taps {
            for (i, w) in list {
                if i >= in_numel {
                    return Err(contract(
                        "remap",
                        format!("index {i} out of range {in_numel}"),
                    ));
                }
                idx.push(i);
                weights.push(w);
            }
            offsets.push(idx.len());
        }
        Ok(Self {
            in_numel,
            out_shape: out_shape.to_vec(),
            offsets,
            idx,
            weights: Some(weights),
        })
    }

    pub fn permute(shape: &[usize], perm: &[usize]) -> Result<Self> {
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank
            || perm
                .iter()
                .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
        {
            return Err(contract(
                "permute",
                format!("{perm:?} is not a permutation of rank {rank}"),
            ));
        }
        let in_strides = strides(shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let n: usize = shape.iter().product();
        let mut indices = Vec::with_capacity(n);
        let mut coord = vec![0usize; rank];
        for _ in 0..n {
            let src: usize = (0..rank).map(|a| coord[a] * in_strides[perm[a]]).sum();
            indices.push(src);
            for a in (0..rank).rev() {
                coord[a] += 1;
                if coord[a] < out_shape[a] {
                    break;
                }
                coord[a] = 0;
            }
        }
        Self::gather(n, &out_shape, indices)
    }

    /// Contiguous sub-range `start..start+len` along `axis`.
    pub fn narrow(shape: &[usize], axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(contract(
                "narrow",
                format!("{start}+{len} on axis {axis} of {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let mut indices = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for a in start..start + len {
                let base = (o * shape[axis] + a) * inner;
                indices.extend(base..base + inner);
            }
        }
        Self::gather(shape.iter().product(), &out_shape, indices)
    }

    /// Reflect-pad the last two axes of a `[C, H, W]` tensor.
    pub fn reflect_pad2d(
        shape: &[usize],
        top: usize,
        bottom: usize,
        left: usize,
        right: usize,
    ) -> Result<Self> {
        let [c, h, w] = three(shape, "reflect_pad2d")?;
        let (oh, ow) = (h + top + bottom, w + left + right);
        let mut indices = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for y in 0..oh {
                let sy = reflect_index(y as isize - top as isize, h);
                for x in 0..ow {
                    let sx = reflect_index(x as isize - left as isize, w);
                    indices.push((ch * h + sy) * w + sx);
                }
            }
        }
        Self::gather(c * h * w, &[c, oh, ow], indices)
    }

    /// Keep rows `y0..y0+oh` and columns `x0..x0+ow` of a `[C, H, W]` tensor.
    pub fn crop2d(shape: &[usize], y0: usize, x0: usize, oh: usize, ow: usize) -> Result<Self> {
        let [c, h, w] = three(shape, "crop2d")?;
        if y0 + oh > h || x0 + ow > w || oh == 0 || ow == 0 {
            return Err(contract(
                "crop2d",
                format!("crop {oh}x{ow}@({y0},{x0}) of {h}x{w}"),
            ));
        }
        let mut indices = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for y in 0..oh {
                let row = (ch * h + y0 + y) * w + x0;
                indices.extend(row..row + ow);
            }
        }
        Self::gather(c * h * w, &[c, oh, ow], indices)
    }

    /// Bilinear resampling of a `[C, H, W]` tensor with half-pixel centres
    /// (`align_corners = false`), edges clamped.
    pub fn bilinear(shape: &[usize], out_h: usize, out_w: usize) -> Result<Self> {
        let [c, h, w] = three(shape, "bilinear")?;
        if out_h == 0 || out_w == 0 {
            return Err(contract("bilinear", "empty output"));
        }
        let axis_taps = |n_in: usize, n_out: usize| -> Vec<[(usize, f64); 2]> {
            let scale = n_in as f64 / n_out as f64;
            (0..n_out)
                .map(|o| {
                    let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                    let i0 = (src.floor() as usize).min(n_in - 1);
                    let i1 = (i0 + 1).min(n_in - 1);
                    let f = src - i0 as f64;
                    let f = if i1 == i0 { 0.0 } else { f };
                    [(i0, 1.0 - f), (i1, f)]
                })
                .collect()
        };
        let ty = axis_taps(h, out_h);
        let tx = axis_taps(w, out_w);
        let mut taps = Vec::with_capacity(c * out_h * out_w);
        for ch in 0..c {
            for yt in &ty {
                for xt in &tx {
                    let mut list = Vec::with_capacity(4);
                    for &(yi, yw) in yt {
                        for &(xi, xw) in xt {
                            let wgt = yw * xw;
                            if wgt != 0.0 {
                                list.push(((ch * h + yi) * w + xi, wgt));
                            }
                        }
                    }
                    taps.push(list);
                }
            }
        }
        Self::weighted(c * h * w, &[c, out_h, out_w], taps)
    }

    pub fn in_numel(&self) -> usize {
        self.in_numel
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = self.offsets.len() - 1;
        let mut out = vec![0.0; n];
        match &self.weights {
            None => {
                for (o, v) in out.iter_mut().enumerate() {
                    *v = x[self.idx[o]];
                }
            }
            Some(w) => {
                for (o, v) in out.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for t in self.offsets[o]..self.offsets[o + 1] {
                        acc += w[t] * x[self.idx[t]];
                    }
                    *v = acc;
                }
            }
        }
        out
    }

    /// Adjoint of [`apply`](Self::apply), accumulated into `gx`.
    pub fn apply_transpose(&self, g: &[f64], gx: &mut [f64]) {
        let n = self.offsets.len() - 1;
        for o in 0..n {
            for t in self.offsets[o]..self.offsets[o + 1] {
                let w = self.weights.as_ref().map_or(1.0, |w| w[t]);
                gx[self.idx[t]] += w * g[o];
            }
        }
    }
}

fn three(shape: &[usize], op: &'static str) -> Result<[usize; 3]> {
    match shape {
        &[c, h, w] => Ok([c, h, w]),
        _ => Err(contract(op, format!("expected [C, H, W], got {shape:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_matches_mirror_without_edge_repeat() {
        let got: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect_index(-5, 1), 0);
    }

    #[test]
    fn permute_transposes_matrix() {
        let m = IndexMap::permute(&[2, 3], &[1, 0]).unwrap();
        let x = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(m.apply(&x), vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        assert_eq!(m.out_shape(), &[3, 2]);
    }

    #[test]
    fn bilinear_of_constant_is_constant() {
        let m = IndexMap::bilinear(&[2, 3, 5], 12, 20).unwrap();
        let out = m.apply(&[0.75; 30]);
        assert!(out.iter().all(|v| (v - 0.75).abs() < 1e-15));
    }

    #[test]
    fn transpose_is_adjoint() {
        let m = IndexMap::bilinear(&[1, 3, 4], 6, 8).unwrap();
        let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let g: Vec<f64> = (0..48).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs: f64 = m.apply(&x).iter().zip(&g).map(|(a, b)| a * b).sum();
        let mut gx = vec![0.0; 12];
        m.apply_transpose(&g, &mut gx);
        let rhs: f64 = gx.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn crop_rejects_out_of_bounds() {
        assert!(IndexMap::crop2d(&[1, 4, 4], 2, 0, 3, 4).is_err());
    }
}
