//! Depth-guided multimodal fusion network at toy scale.
//!
//! Every modality goes through its own 1x1 adapter and a shared four-stage
//! strided-conv backbone (strides 4, 8, 16, 32). The depth branch fuses all
//! pyramids with a bottleneck MLP into `d_l` and, at train time, decodes it
//! to dense depth. A small transformer on the coarsest RGB level yields the
//! condition token. Per level and secondary modality, windowed cross-attention
//! lets RGB tokens (plus a depth token and the condition token) query the
//! secondary modality; the outputs are summed onto the RGB features and
//! decoded to class logits.

mod layers;
mod model;
mod params;

pub use layers::{window_partition, window_reassemble, WindowGrid};
pub use model::{
    condition_branch, depth_fuse, depth_guided_fusion, depth_head, depth_token, depth_tokens_fast,
    encode_modality, forward, forward_inference, FeaturePyramid, ModelOutput,
};
pub use params::{FusionTrace, Graph, Init, ParamSpec, ParamStore};

use crate::config::{join, parse_bool, parse_list, parse_num, KeyValue};
use crate::error::{Error, Result};
use crate::scenegen::{ConditionLabel, MultimodalSample};

pub const LEVELS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    Rgb,
    Lidar,
    Radar,
    Event,
}

impl Modality {
    pub const ALL: [Modality; 4] = [
        Modality::Rgb,
        Modality::Lidar,
        Modality::Radar,
        Modality::Event,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Lidar => "lidar",
            Modality::Radar => "radar",
            Modality::Event => "event",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown modality `{s}`")))
    }

    pub fn input(self, sample: &MultimodalSample) -> &diffmath::Tensor {
        match self {
            Modality::Rgb => &sample.rgb,
            Modality::Lidar => &sample.lidar_input,
            Modality::Radar => &sample.radar_input,
            Modality::Event => &sample.event_input,
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Input plane, copied from the scene settings.
    pub height: usize,
    pub width: usize,
    /// Channels of the four pyramid levels.
    pub widths: Vec<usize>,
    pub adapter_width: usize,
    /// Fusion window side `K_w`.
    pub window: usize,
    pub heads: usize,
    /// Width `C_t` of depth and condition tokens.
    pub token_dim: usize,
    pub num_classes: usize,
    /// Primary (`rgb`) first.
    pub modalities: Vec<Modality>,
    /// Hidden width of the depth-fusion MLP is `C_l / bottleneck`.
    pub bottleneck: usize,
    /// Width of the segmentation and depth decoders.
    pub head_width: usize,
    pub use_pos_bias: bool,
    pub d_min: f64,
    pub d_max: f64,
    pub use_ct: bool,
    pub use_aux_depth_head: bool,
    pub use_dt: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            widths: vec![16, 32, 64, 128],
            adapter_width: 8,
            window: 8,
            heads: 2,
            token_dim: 64,
            num_classes: 8,
            modalities: Modality::ALL.to_vec(),
            bottleneck: 4,
            head_width: 32,
            use_pos_bias: true,
            d_min: 1.0,
            d_max: 80.0,
            use_ct: true,
            use_aux_depth_head: true,
            use_dt: true,
        }
    }
}

fn conv_out(n: usize, k: usize, s: usize, p: usize) -> usize {
    (n + 2 * p).saturating_sub(k) / s + 1
}

impl ModelConfig {
    /// Widths 4/8/16/32 on a 16x16 plane, for gradient checks.
    pub fn tiny() -> Self {
        Self {
            height: 16,
            width: 16,
            widths: vec![4, 8, 16, 32],
            adapter_width: 4,
            window: 8,
            heads: 2,
            token_dim: 8,
            head_width: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.widths.len() != LEVELS {
            return bad(format!(
                "widths needs {LEVELS} entries, got {}",
                self.widths.len()
            ));
        }
        if self.heads == 0 || self.token_dim % self.heads != 0 {
            return bad(format!(
                "token_dim {} not divisible by heads {}",
                self.token_dim, self.heads
            ));
        }
        for &c in &self.widths {
            if c % self.heads != 0 || c < self.bottleneck {
                return bad(format!(
                    "level width {c} incompatible with heads/bottleneck"
                ));
            }
        }
        if self.modalities.first() != Some(&Modality::Rgb) {
            return bad("the first modality must be rgb".into());
        }
        let mut seen = self.modalities.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.modalities.len() {
            return bad("duplicate modality".into());
        }
        if self.window == 0
            || self.num_classes < 2
            || self.adapter_width == 0
            || self.head_width == 0
        {
            return bad("window, adapter/head widths must be positive and num_classes >= 2".into());
        }
        if !(0.0 < self.d_min && self.d_min < self.d_max) {
            return bad("need 0 < d_min < d_max".into());
        }
        if self.height < 4 || self.width < 4 {
            return bad("input plane too small".into());
        }
        Ok(())
    }

    /// Spatial size of each pyramid level.
    pub fn level_sizes(&self) -> [(usize, usize); LEVELS] {
        let mut out = [(0, 0); LEVELS];
        let (mut h, mut w) = (
            conv_out(self.height, 5, 4, 2),
            conv_out(self.width, 5, 4, 2),
        );
        for (l, o) in out.iter_mut().enumerate() {
            if l > 0 {
                h = conv_out(h, 3, 2, 1);
                w = conv_out(w, 3, 2, 1);
            }
            *o = (h, w);
        }
        out
    }

    /// Effective window side at level `l` (never larger than the map).
    pub fn window_at(&self, l: usize) -> usize {
        let (h, w) = self.level_sizes()[l];
        self.window.min(h).min(w)
    }

    pub fn secondary(&self) -> &[Modality] {
        &self.modalities[1..]
    }

    /// Whether the fused depth pyramid has any consumer.
    pub fn has_depth_branch(&self) -> bool {
        self.use_aux_depth_head || self.use_dt
    }

    /// Every parameter the configuration instantiates, with its init rule.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut s = Vec::new();
        let relu_gain = 2f64.sqrt();
        let conv =
            |s: &mut Vec<ParamSpec>, name: String, co: usize, ci: usize, k: usize, gain: f64| {
                s.push(ParamSpec {
                    name: format!("{name}.w"),
                    shape: vec![co, ci, k, k],
                    init: Init::Scaled {
                        fan_in: ci * k * k,
                        gain,
                    },
                });
                s.push(ParamSpec {
                    name: format!("{name}.b"),
                    shape: vec![co],
                    init: Init::Zeros,
                });
            };
        let linear = |s: &mut Vec<ParamSpec>, name: String, i: usize, o: usize| {
            s.push(ParamSpec {
                name: format!("{name}.w"),
                shape: vec![i, o],
                init: Init::Scaled {
                    fan_in: i,
                    gain: 1.0,
                },
            });
            s.push(ParamSpec {
                name: format!("{name}.b"),
                shape: vec![o],
                init: Init::Zeros,
            });
        };
        let attn = |s: &mut Vec<ParamSpec>, name: &str, c: usize| {
            for p in ["q", "k", "v", "o"] {
                linear(s, format!("{name}.{p}"), c, c);
            }
        };
        let ch = &self.widths;
        let ct = self.token_dim;

        for m in &self.modalities {
            conv(
                &mut s,
                format!("adapter.{m}"),
                self.adapter_width,
                3,
                1,
                1.0,
            );
        }
        let mut prev = self.adapter_width;
        for l in 0..LEVELS {
            let k = if l == 0 { 5 } else { 3 };
            conv(
                &mut s,
                format!("backbone.s{}.down", l + 1),
                ch[l],
                prev,
                k,
                relu_gain,
            );
            conv(
                &mut s,
                format!("backbone.s{}.conv", l + 1),
                ch[l],
                ch[l],
                3,
                relu_gain,
            );
            prev = ch[l];
        }
        if self.has_depth_branch() {
            let m = self.modalities.len();
            for (l, &c) in ch.iter().enumerate() {
                conv(
                    &mut s,
                    format!("depth_fuse.l{}.fc1", l + 1),
                    c / self.bottleneck,
                    m * c,
                    1,
                    relu_gain,
                );
                conv(
                    &mut s,
                    format!("depth_fuse.l{}.fc2", l + 1),
                    c,
                    c / self.bottleneck,
                    1,
                    1.0,
                );
            }
        }
        if self.use_aux_depth_head {
            for (l, &c) in ch.iter().enumerate() {
                conv(
                    &mut s,
                    format!("depth_head.l{}", l + 1),
                    self.head_width,
                    c,
                    3,
                    relu_gain,
                );
            }
            conv(&mut s, "depth_head.out".into(), 1, self.head_width, 1, 1.0);
        }
        if self.use_ct {
            linear(&mut s, "cond.in".into(), ch[LEVELS - 1], ct);
            for i in 0..2 {
                attn(&mut s, &format!("cond.enc{i}.attn"), ct);
                linear(&mut s, format!("cond.enc{i}.ffn1"), ct, 2 * ct);
                linear(&mut s, format!("cond.enc{i}.ffn2"), 2 * ct, ct);
                attn(&mut s, &format!("cond.dec{i}.self"), ct);
                attn(&mut s, &format!("cond.dec{i}.cross"), ct);
                linear(&mut s, format!("cond.dec{i}.ffn1"), ct, 2 * ct);
                linear(&mut s, format!("cond.dec{i}.ffn2"), 2 * ct, ct);
            }
            s.push(ParamSpec {
                name: "cond.query".into(),
                shape: vec![1, ct],
                init: Init::Normal(0.5),
            });
            linear(&mut s, "cond.cls".into(), ct, ConditionLabel::COUNT);
        }
        for m in self.secondary() {
            for (l, &c) in ch.iter().enumerate() {
                let p = format!("dgf.{m}.l{}", l + 1);
                attn(&mut s, &format!("{p}.self"), c);
                attn(&mut s, &format!("{p}.cross"), c);
                if self.use_dt {
                    conv(&mut s, format!("{p}.dt_conv"), ct, c, 3, 1.0);
                    linear(&mut s, format!("{p}.dt_proj"), ct, c);
                }
                if self.use_ct {
                    linear(&mut s, format!("{p}.ct_proj"), ct, c);
                }
                if self.use_pos_bias {
                    let k = self.window_at(l);
                    for t in ["pos_q", "pos_k"] {
                        s.push(ParamSpec {
                            name: format!("{p}.{t}"),
                            shape: vec![k * k, c],
                            init: Init::Normal(0.02),
                        });
                    }
                }
            }
        }
        for (l, &c) in ch.iter().enumerate() {
            conv(
                &mut s,
                format!("seg.l{}", l + 1),
                self.head_width,
                c,
                3,
                relu_gain,
            );
        }
        conv(
            &mut s,
            "seg.out".into(),
            self.num_classes,
            self.head_width,
            1,
            1.0,
        );
        s
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        self.validate()?;
        ParamStore::init(&self.param_specs(), seed)
    }
}

impl KeyValue for ModelConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "widths" => self.widths = parse_list(key, v)?,
            "adapter_width" => self.adapter_width = parse_num(key, v)?,
            "window" => self.window = parse_num(key, v)?,
            "heads" => self.heads = parse_num(key, v)?,
            "token_dim" => self.token_dim = parse_num(key, v)?,
            "modalities" => self.modalities = parse_list(key, v)?,
            "bottleneck" => self.bottleneck = parse_num(key, v)?,
            "head_width" => self.head_width = parse_num(key, v)?,
            "use_pos_bias" => self.use_pos_bias = parse_bool(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn pairs(&self) -> Vec<(String, String)> {
        let kv = |k: &str, v: String| (k.to_string(), v);
        vec![
            kv("widths", join(&self.widths)),
            kv("adapter_width", self.adapter_width.to_string()),
            kv("window", self.window.to_string()),
            kv("heads", self.heads.to_string()),
            kv("token_dim", self.token_dim.to_string()),
            kv("modalities", join(&self.modalities)),
            kv("bottleneck", self.bottleneck.to_string()),
            kv("head_width", self.head_width.to_string()),
            kv("use_pos_bias", self.use_pos_bias.to_string()),
        ]
    }
}
