use diffmath::remap::{memo, reflect_index};
use diffmath::{Conv2dSpec, IndexMap, PadMode, Var};

use super::params::Graph;
use crate::error::{Error, Result};

/// `conv2d` with `{prefix}.w` / `{prefix}.b`.
pub(crate) fn conv(g: &mut Graph, x: Var, prefix: &str, stride: usize, pad: usize) -> Result<Var> {
    let w = g.param(&format!("{prefix}.w"))?;
    let b = g.param(&format!("{prefix}.b"))?;
    let spec = Conv2dSpec {
        stride,
        pad,
        mode: PadMode::Zero,
    };
    Ok(g.tape.conv2d(x, w, Some(b), spec)?)
}

pub(crate) fn conv_relu(
    g: &mut Graph,
    x: Var,
    prefix: &str,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let y = conv(g, x, prefix, stride, pad)?;
    Ok(g.tape.relu(y)?)
}

/// Row-wise affine map of `x: [N, in]` with `{prefix}.w: [in, out]`.
pub(crate) fn linear(g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
    let w = g.param(&format!("{prefix}.w"))?;
    let b = g.param(&format!("{prefix}.b"))?;
    let y = g.tape.matmul(x, w)?;
    Ok(g.tape.add_broadcast(y, b, 1)?)
}

/// Bilinear upsampling by repeated doubling until `(h, w)` is reached.
pub(crate) fn upsample_to(g: &mut Graph, x: Var, h: usize, w: usize) -> Result<Var> {
    let mut x = x;
    loop {
        let s = g.tape.shape(x).to_vec();
        let (ch, cw) = (s[s.len() - 2], s[s.len() - 1]);
        if (ch, cw) == (h, w) {
            return Ok(x);
        }
        x = g
            .tape
            .resize_bilinear(x, (ch * 2).min(h), (cw * 2).min(w))?;
    }
}

/// `[N, L, C] -> [N * heads, L, C / heads]`.
fn split_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Var> {
    let &[n, l, c] = g.tape.shape(x) else {
        unreachable!()
    };
    let x = g.tape.reshape(x, &[n, l, heads, c / heads])?;
    let x = g.tape.permute(x, &[0, 2, 1, 3])?;
    Ok(g.tape.reshape(x, &[n * heads, l, c / heads])?)
}

fn merge_heads(g: &mut Graph, x: Var, n: usize, heads: usize) -> Result<Var> {
    let &[_, l, dh] = g.tape.shape(x) else {
        unreachable!()
    };
    let x = g.tape.reshape(x, &[n, heads, l, dh])?;
    let x = g.tape.permute(x, &[0, 2, 1, 3])?;
    Ok(g.tape.reshape(x, &[n, l, heads * dh])?)
}

fn project(g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
    let &[n, l, c] = g.tape.shape(x) else {
        unreachable!()
    };
    let flat = g.tape.reshape(x, &[n * l, c])?;
    let y = linear(g, flat, prefix)?;
    let out = g.tape.shape(y)[1];
    Ok(g.tape.reshape(y, &[n, l, out])?)
}

/// Multi-head attention over a batch of independent sequences.
///
/// `q_in: [N, Lq, C]`, `kv_in: [N, Lk, C]`; returns `([N, Lq, C], probs)`
/// where `probs: [N * heads, Lq, Lk]`.
pub(crate) fn attention(
    g: &mut Graph,
    q_in: Var,
    kv_in: Var,
    prefix: &str,
    heads: usize,
) -> Result<(Var, Var)> {
    let (qs, ks) = (g.tape.shape(q_in).to_vec(), g.tape.shape(kv_in).to_vec());
    if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] {
        return Err(Error::Contract(format!(
            "attention inputs {qs:?} vs {ks:?}"
        )));
    }
    let (n, c) = (qs[0], qs[2]);
    if c % heads != 0 {
        return Err(Error::Contract(format!(
            "width {c} not divisible by {heads} heads"
        )));
    }
    let q = project(g, q_in, &format!("{prefix}.q"))?;
    let k = project(g, kv_in, &format!("{prefix}.k"))?;
    let v = project(g, kv_in, &format!("{prefix}.v"))?;
    let q = split_heads(g, q, heads)?;
    let k = split_heads(g, k, heads)?;
    let v = split_heads(g, v, heads)?;
    let kt = g.tape.permute(k, &[0, 2, 1])?;
    let scores = g.tape.bmm(q, kt)?;
    let scores = g.tape.mul(scores, 1.0 / ((c / heads) as f64).sqrt())?;
    let probs = g.tape.softmax(scores, 2)?;
    let ctx = g.tape.bmm(probs, v)?;
    let ctx = merge_heads(g, ctx, n, heads)?;
    let out = project(g, ctx, &format!("{prefix}.o"))?;
    Ok((out, probs))
}

/// Largest deviation of an attention row sum from one.
pub(crate) fn row_sum_dev(probs: &diffmath::Tensor) -> f64 {
    let lk = *probs.shape().last().unwrap();
    probs
        .data()
        .chunks(lk)
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Window layout of one feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowGrid {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub rows: usize,
    pub cols: usize,
}

impl WindowGrid {
    pub fn new(channels: usize, height: usize, width: usize, k: usize) -> Result<Self> {
        if k == 0 || height == 0 || width == 0 {
            return Err(Error::Contract(format!("window {k} on {height}x{width}")));
        }
        Ok(Self {
            channels,
            height,
            width,
            k,
            rows: height.div_ceil(k),
            cols: width.div_ceil(k),
        })
    }

    pub fn count(&self) -> usize {
        self.rows * self.cols
    }

    // Source pixel of padded position (y, x); padding goes at the bottom and
    // right and mirrors the map.
    pub(crate) fn source(&self, y: usize, x: usize) -> usize {
        reflect_index(y as isize, self.height) * self.width + reflect_index(x as isize, self.width)
    }
}

/// Split `x: [C, H, W]` into `[N, C, k, k]` windows, reflect-padding the
/// bottom/right edge up to a multiple of `k`.
pub fn window_partition(g: &mut Graph, x: Var, k: usize) -> Result<(Var, WindowGrid)> {
    let &[c, h, w] = g.tape.shape(x) else {
        return Err(Error::Contract(format!(
            "window_partition expects [C, H, W], got {:?}",
            g.tape.shape(x)
        )));
    };
    let grid = WindowGrid::new(c, h, w, k)?;
    let map = memo(format!("window_partition {c} {h} {w} {k}"), || {
        let mut idx = Vec::with_capacity(grid.count() * c * k * k);
        for wy in 0..grid.rows {
            for wx in 0..grid.cols {
                for ch in 0..c {
                    for i in 0..k {
                        for j in 0..k {
                            idx.push(ch * h * w + grid.source(wy * k + i, wx * k + j));
                        }
                    }
                }
            }
        }
        IndexMap::gather(c * h * w, &[grid.count(), c, k, k], idx)
    })?;
    Ok((g.tape.remap(x, map)?, grid))
}

/// Inverse of [`window_partition`]: stitch windows and crop the padding.
pub fn window_reassemble(g: &mut Graph, windows: Var, grid: &WindowGrid) -> Result<Var> {
    let WindowGrid {
        channels: c,
        height: h,
        width: w,
        k,
        cols,
        ..
    } = *grid;
    if g.tape.shape(windows) != [grid.count(), c, k, k] {
        return Err(Error::Contract(format!(
            "windows {:?} do not match grid {grid:?}",
            g.tape.shape(windows)
        )));
    }
    let map = memo(format!("window_reassemble {c} {h} {w} {k}"), || {
        let mut idx = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let n = (y / k) * cols + x / k;
                    idx.push(((n * c + ch) * k + y % k) * k + x % k);
                }
            }
        }
        IndexMap::gather(grid.count() * c * k * k, &[c, h, w], idx)
    })?;
    Ok(g.tape.remap(windows, map)?)
}

/// `[N, C, k, k] -> [N, k*k, C]` token layout.
pub(crate) fn windows_to_tokens(g: &mut Graph, windows: Var) -> Result<Var> {
    let &[n, c, k, _] = g.tape.shape(windows) else {
        unreachable!()
    };
    let t = g.tape.permute(windows, &[0, 2, 3, 1])?;
    Ok(g.tape.reshape(t, &[n, k * k, c])?)
}

pub(crate) fn tokens_to_windows(g: &mut Graph, tokens: Var, k: usize) -> Result<Var> {
    let &[n, _, c] = g.tape.shape(tokens) else {
        unreachable!()
    };
    let t = g.tape.reshape(tokens, &[n, k, k, c])?;
    Ok(g.tape.permute(t, &[0, 3, 1, 2])?)
}

/// Stack `row: [1, C]` into `[n, 1, C]`.
pub(crate) fn repeat_rows(g: &mut Graph, row: Var, n: usize) -> Result<Var> {
    let c = g.tape.value(row).numel();
    let r = g.tape.reshape(row, &[1, 1, c])?;
    if n == 1 {
        return Ok(r);
    }
    let parts = vec![r; n];
    Ok(g.tape.concat(&parts, 0)?)
}
