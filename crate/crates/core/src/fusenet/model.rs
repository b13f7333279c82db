use diffmath::remap::memo;
use diffmath::{IndexMap, ReduceOp, Var};

use super::layers::{
    attention, conv, conv_relu, linear, repeat_rows, row_sum_dev, tokens_to_windows, upsample_to,
    window_partition, window_reassemble, windows_to_tokens, WindowGrid,
};
use super::params::{FusionTrace, Graph};
use super::{Modality, ModelConfig, LEVELS};
use crate::error::{Error, Result};
use crate::scenegen::MultimodalSample;

/// Feature maps at strides 4, 8, 16 and 32, each `[C_l, H_l, W_l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
    /// Output of each stage's strided conv before its activation.
    pub pre_activation: Vec<Var>,
}

/// Handles into the graph that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    /// `[C, H, W]`
    pub seg_logits: Var,
    /// `[H, W]` meters; only when the auxiliary head ran.
    pub depth_pred: Option<Var>,
    /// `[8]`
    pub cond_logits: Option<Var>,
    /// `[C_t]`
    pub ct: Option<Var>,
    pub depth_pyramid: Option<FeaturePyramid>,
    pub rgb_pyramid: FeaturePyramid,
    pub fused: Vec<Var>,
}

pub fn encode_modality(
    g: &mut Graph,
    cfg: &ModelConfig,
    image: Var,
    m: Modality,
) -> Result<FeaturePyramid> {
    if !cfg.modalities.contains(&m) {
        return Err(Error::Contract(format!(
            "modality `{m}` is not part of this model"
        )));
    }
    if g.tape.shape(image) != [3, cfg.height, cfg.width] {
        return Err(Error::Contract(format!(
            "{m} input {:?}, model expects [3, {}, {}]",
            g.tape.shape(image),
            cfg.height,
            cfg.width
        )));
    }
    let mut x = conv(g, image, &format!("adapter.{m}"), 1, 0)?;
    let mut levels = Vec::with_capacity(LEVELS);
    let mut pre_activation = Vec::with_capacity(LEVELS);
    for l in 1..=LEVELS {
        let (k, s) = if l == 1 { (5, 4) } else { (3, 2) };
        let pre = conv(g, x, &format!("backbone.s{l}.down"), s, k / 2)?;
        pre_activation.push(pre);
        let a = g.tape.relu(pre)?;
        x = conv_relu(g, a, &format!("backbone.s{l}.conv"), 1, 1)?;
        levels.push(x);
    }
    Ok(FeaturePyramid {
        levels,
        pre_activation,
    })
}

/// Per level: concat all modalities, bottleneck MLP, plus the RGB level.
pub fn depth_fuse(g: &mut Graph, pyramids: &[FeaturePyramid]) -> Result<FeaturePyramid> {
    let rgb = pyramids
        .first()
        .ok_or_else(|| Error::Contract("depth_fuse needs at least the rgb pyramid".into()))?;
    let mut levels = Vec::with_capacity(LEVELS);
    for l in 0..LEVELS {
        let parts: Vec<Var> = pyramids.iter().map(|p| p.levels[l]).collect();
        let shape = g.tape.shape(parts[0]).to_vec();
        if parts.iter().any(|&p| g.tape.shape(p) != shape.as_slice()) {
            return Err(Error::Contract(format!(
                "level {} shapes differ across modalities",
                l + 1
            )));
        }
        let cat = g.tape.concat(&parts, 0)?;
        let h = conv_relu(g, cat, &format!("depth_fuse.l{}.fc1", l + 1), 1, 0)?;
        let y = conv(g, h, &format!("depth_fuse.l{}.fc2", l + 1), 1, 0)?;
        levels.push(g.tape.add(y, rgb.levels[l])?);
    }
    Ok(FeaturePyramid {
        levels,
        pre_activation: Vec::new(),
    })
}

/// Dense depth `[H, W]` in `[d_min, d_max]` from the fused depth pyramid.
pub fn depth_head(g: &mut Graph, cfg: &ModelConfig, d: &FeaturePyramid) -> Result<Var> {
    let (h1, w1) = cfg.level_sizes()[0];
    let mut acc: Option<Var> = None;
    for (l, &x) in d.levels.iter().enumerate() {
        let y = conv_relu(g, x, &format!("depth_head.l{}", l + 1), 1, 1)?;
        let y = upsample_to(g, y, h1, w1)?;
        acc = Some(match acc {
            Some(a) => g.tape.add(a, y)?,
            None => y,
        });
    }
    let z = conv(g, acc.expect("four levels"), "depth_head.out", 1, 0)?;
    // log-depth = ln d_min + (ln d_max - ln d_min) * sigmoid(z)
    let s = g.tape.sigmoid(z)?;
    let (lo, hi) = (cfg.d_min.ln(), cfg.d_max.ln());
    let s = g.tape.mul(s, hi - lo)?;
    let s = g.tape.add(s, lo)?;
    let depth = g.tape.exp(s)?;
    let depth = g.tape.resize_bilinear(depth, cfg.height, cfg.width)?;
    Ok(g.tape.reshape(depth, &[cfg.height, cfg.width])?)
}

fn ffn(g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
    let h = linear(g, x, &format!("{prefix}.ffn1"))?;
    let h = g.tape.relu(h)?;
    let y = linear(g, h, &format!("{prefix}.ffn2"))?;
    Ok(g.tape.add(x, y)?)
}

fn as_batch(g: &mut Graph, x: Var) -> Result<Var> {
    let &[l, c] = g.tape.shape(x) else {
        unreachable!()
    };
    Ok(g.tape.reshape(x, &[1, l, c])?)
}

fn residual_attn(g: &mut Graph, q: Var, kv: Var, prefix: &str, heads: usize) -> Result<Var> {
    let (qb, kvb) = (as_batch(g, q)?, as_batch(g, kv)?);
    let (o, _) = attention(g, qb, kvb, prefix, heads)?;
    let o = g.tape.reshape(o, g.tape.shape(q).to_vec().as_slice())?;
    Ok(g.tape.add(q, o)?)
}

/// Condition token `[C_t]` and 8 condition logits from the coarsest RGB
/// level. No positional encoding is used.
pub fn condition_branch(g: &mut Graph, cfg: &ModelConfig, rgb_top: Var) -> Result<(Var, Var)> {
    let &[c, h, w] = g.tape.shape(rgb_top) else {
        return Err(Error::Contract("condition branch expects [C, H, W]".into()));
    };
    let seq = g.tape.reshape(rgb_top, &[c, h * w])?;
    let seq = g.tape.transpose(seq)?;
    let mut mem = linear(g, seq, "cond.in")?;
    for i in 0..2 {
        mem = residual_attn(g, mem, mem, &format!("cond.enc{i}.attn"), cfg.heads)?;
        mem = ffn(g, mem, &format!("cond.enc{i}"))?;
    }
    let mut q = g.param("cond.query")?;
    for i in 0..2 {
        q = residual_attn(g, q, q, &format!("cond.dec{i}.self"), cfg.heads)?;
        q = residual_attn(g, q, mem, &format!("cond.dec{i}.cross"), cfg.heads)?;
        q = ffn(g, q, &format!("cond.dec{i}"))?;
    }
    let logits = linear(g, q, "cond.cls")?;
    let ct = g.tape.reshape(q, &[cfg.token_dim])?;
    let logits = g
        .tape
        .reshape(logits, &[crate::scenegen::ConditionLabel::COUNT])?;
    Ok((ct, logits))
}

/// 3x3 conv of one `[C, k, k]` window followed by spatial mean pooling.
///
/// Reference form; fusion uses [`depth_tokens_fast`], which gives the same
/// tokens for all windows at once.
pub fn depth_token(g: &mut Graph, prefix: &str, window: Var) -> Result<Var> {
    let y = conv(g, window, &format!("{prefix}.dt_conv"), 1, 1)?;
    let &[ct, k, _] = g.tape.shape(y) else {
        unreachable!()
    };
    let flat = g.tape.reshape(y, &[ct, k * k])?;
    Ok(g.tape.reduce(ReduceOp::Mean, flat, Some(1))?)
}

/// Depth tokens `[N, C_t]` of every window of `d_l`.
///
/// Conv followed by mean pooling is linear, so each token equals the conv
/// kernel applied to the window means of the nine shifted (zero-filled)
/// copies of the window.
pub fn depth_tokens_fast(g: &mut Graph, prefix: &str, d_l: Var, grid: &WindowGrid) -> Result<Var> {
    let WindowGrid {
        channels: c,
        height: h,
        width: w,
        k,
        rows,
        cols,
    } = *grid;
    let map = memo(format!("depth_tokens {c} {h} {w} {k}"), || {
        let inv = 1.0 / (k * k) as f64;
        let mut taps = Vec::with_capacity(rows * cols * c * 9);
        for wy in 0..rows {
            for wx in 0..cols {
                for ch in 0..c {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let mut t = Vec::new();
                            for i in 0..k {
                                for j in 0..k {
                                    let (yy, xx) = (i + ky, j + kx);
                                    if (1..=k).contains(&yy) && (1..=k).contains(&xx) {
                                        let src = grid.source(wy * k + yy - 1, wx * k + xx - 1);
                                        t.push((ch * h * w + src, inv));
                                    }
                                }
                            }
                            taps.push(t);
                        }
                    }
                }
            }
        }
        IndexMap::weighted(c * h * w, &[rows * cols, c * 9], taps)
    })?;
    let means = g.tape.remap(d_l, map)?;
    let wt = g.param(&format!("{prefix}.dt_conv.w"))?;
    let ct = g.tape.shape(wt)[0];
    let wt = g.tape.reshape(wt, &[ct, c * 9])?;
    let wt = g.tape.transpose(wt)?;
    let y = g.tape.matmul(means, wt)?;
    let b = g.param(&format!("{prefix}.dt_conv.b"))?;
    Ok(g.tape.add_broadcast(y, b, 1)?)
}

fn add_pos(g: &mut Graph, tokens: Var, name: &str) -> Result<Var> {
    let &[n, l, c] = g.tape.shape(tokens) else {
        unreachable!()
    };
    let p = g.param(name)?;
    let p = g.tape.reshape(p, &[1, l, c])?;
    let p = if n > 1 {
        g.tape.concat(&vec![p; n], 0)?
    } else {
        p
    };
    Ok(g.tape.add(tokens, p)?)
}

/// Windowed fusion of one secondary modality into one RGB level.
///
/// Per window the queries are the RGB tokens, the depth token (when `d_l`
/// is given) and the condition token (when `ct` is given). The query set
/// first attends to itself, then cross-attends to the secondary tokens;
/// only the RGB rows are kept. Returns `[C_l, H_l, W_l]`.
#[allow(clippy::too_many_arguments)]
pub fn depth_guided_fusion(
    g: &mut Graph,
    cfg: &ModelConfig,
    m: Modality,
    level: usize,
    rgb_l: Var,
    sec_l: Var,
    d_l: Option<Var>,
    ct: Option<Var>,
) -> Result<Var> {
    let p = format!("dgf.{m}.l{}", level + 1);
    let k = cfg.window_at(level);
    let (rw, grid) = window_partition(g, rgb_l, k)?;
    let (sw, sgrid) = window_partition(g, sec_l, k)?;
    if sgrid != grid {
        return Err(Error::Contract(format!(
            "{m} level {} windows differ from rgb",
            level + 1
        )));
    }
    let n = grid.count();
    let mut q = windows_to_tokens(g, rw)?;
    let mut kv = windows_to_tokens(g, sw)?;
    if cfg.use_pos_bias {
        q = add_pos(g, q, &format!("{p}.pos_q"))?;
        kv = add_pos(g, kv, &format!("{p}.pos_k"))?;
    }
    let rgb_tokens = k * k;
    let mut rows = vec![q];
    if let Some(d_l) = d_l {
        let dgrid = WindowGrid::new(
            g.tape.shape(d_l)[0],
            g.tape.shape(d_l)[1],
            g.tape.shape(d_l)[2],
            k,
        )?;
        if dgrid != grid {
            return Err(Error::Contract(format!(
                "depth level {} windows differ from rgb",
                level + 1
            )));
        }
        let dt = depth_tokens_fast(g, &p, d_l, &dgrid)?;
        let dt = linear(g, dt, &format!("{p}.dt_proj"))?;
        rows.push(g.tape.reshape(dt, &[n, 1, grid.channels])?);
    }
    if let Some(ct) = ct {
        let row = g.tape.reshape(ct, &[1, cfg.token_dim])?;
        let row = linear(g, row, &format!("{p}.ct_proj"))?;
        rows.push(repeat_rows(g, row, n)?);
    }
    let queries = if rows.len() == 1 {
        rows[0]
    } else {
        g.tape.concat(&rows, 1)?
    };
    let query_tokens = g.tape.shape(queries)[1];

    let (sa, sa_probs) = attention(g, queries, queries, &format!("{p}.self"), cfg.heads)?;
    let queries = g.tape.add(queries, sa)?;
    let (out, ca_probs) = attention(g, queries, kv, &format!("{p}.cross"), cfg.heads)?;
    let out = g.tape.narrow(out, 1, 0, rgb_tokens)?;
    let output_tokens = g.tape.shape(out)[1];
    let windows = tokens_to_windows(g, out, k)?;
    let fused = window_reassemble(g, windows, &grid)?;

    if g.trace.is_some() {
        let dev = row_sum_dev(g.tape.value(sa_probs)).max(row_sum_dev(g.tape.value(ca_probs)));
        g.trace.as_mut().unwrap().push(FusionTrace {
            modality: m.name().to_string(),
            level,
            windows: n,
            rgb_tokens: n * rgb_tokens,
            query_tokens: n * query_tokens,
            output_tokens: n * output_tokens,
            max_row_sum_dev: dev,
        });
    }
    Ok(fused)
}

/// Per-level 3x3 conv, upsample to stride 4, sum, 1x1 to classes, resize.
fn seg_head(g: &mut Graph, cfg: &ModelConfig, fused: &[Var]) -> Result<Var> {
    let (h1, w1) = cfg.level_sizes()[0];
    let mut acc: Option<Var> = None;
    for (l, &x) in fused.iter().enumerate() {
        let y = conv_relu(g, x, &format!("seg.l{}", l + 1), 1, 1)?;
        let y = upsample_to(g, y, h1, w1)?;
        acc = Some(match acc {
            Some(a) => g.tape.add(a, y)?,
            None => y,
        });
    }
    let z = conv(g, acc.expect("four levels"), "seg.out", 1, 0)?;
    Ok(g.tape.resize_bilinear(z, cfg.height, cfg.width)?)
}

fn run(
    g: &mut Graph,
    cfg: &ModelConfig,
    sample: &MultimodalSample,
    with_head: bool,
) -> Result<ModelOutput> {
    if (sample.height(), sample.width()) != (cfg.height, cfg.width) {
        return Err(Error::Contract(format!(
            "sample is {}x{}, model expects {}x{}",
            sample.height(),
            sample.width(),
            cfg.height,
            cfg.width
        )));
    }
    let mut pyramids = Vec::with_capacity(cfg.modalities.len());
    for &m in &cfg.modalities {
        let x = g.tape.constant(m.input(sample).clone());
        pyramids.push(encode_modality(g, cfg, x, m)?);
    }
    let depth_pyramid = if cfg.has_depth_branch() {
        Some(depth_fuse(g, &pyramids)?)
    } else {
        None
    };
    let depth_pred = match (&depth_pyramid, with_head && cfg.use_aux_depth_head) {
        (Some(d), true) => Some(depth_head(g, cfg, d)?),
        _ => None,
    };
    let (ct, cond_logits) = if cfg.use_ct {
        let (ct, logits) = condition_branch(g, cfg, pyramids[0].levels[LEVELS - 1])?;
        (Some(ct), Some(logits))
    } else {
        (None, None)
    };
    let mut fused = Vec::with_capacity(LEVELS);
    for l in 0..LEVELS {
        let rgb_l = pyramids[0].levels[l];
        let d_l = match (&depth_pyramid, cfg.use_dt) {
            (Some(d), true) => Some(d.levels[l]),
            _ => None,
        };
        let mut acc = rgb_l;
        for (i, &m) in cfg.modalities.iter().enumerate().skip(1) {
            let out = depth_guided_fusion(g, cfg, m, l, rgb_l, pyramids[i].levels[l], d_l, ct)?;
            acc = g.tape.add(acc, out)?;
        }
        fused.push(acc);
    }
    let seg_logits = seg_head(g, cfg, &fused)?;
    let rgb_pyramid = pyramids.swap_remove(0);
    Ok(ModelOutput {
        seg_logits,
        depth_pred,
        cond_logits,
        ct,
        depth_pyramid,
        rgb_pyramid,
        fused,
    })
}

/// Full training-time graph, including the auxiliary depth head.
pub fn forward(g: &mut Graph, cfg: &ModelConfig, sample: &MultimodalSample) -> Result<ModelOutput> {
    run(g, cfg, sample, true)
}

/// Same graph without the auxiliary depth head; the depth pyramid still
/// feeds the fusion modules.
pub fn forward_inference(
    g: &mut Graph,
    cfg: &ModelConfig,
    sample: &MultimodalSample,
) -> Result<ModelOutput> {
    run(g, cfg, sample, false)
}
