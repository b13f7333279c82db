//! Synthetic driving-like scenes with condition-dependent sensor degradation.

mod dataset;
mod dilate;
pub mod format;
mod generate;

use std::path::Path;

use diffmath::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::{join, parse_list, parse_num, KeyValue};
use crate::error::{Error, Result};
use format::{ArrayData, BlockFile};

pub use dataset::{make_dataset, Manifest, ManifestEntry, Split, MANIFEST_FILE};
pub use dilate::{project_and_dilate, PointImage};
pub use generate::{generate_scene, lidar_point_image, CLASS_NAMES, THING_CLASSES};

pub const VOID_CLASS: u16 = 255;
pub const VOID_INSTANCE: u16 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weather {
    Clear,
    Fog,
    Rain,
    Snow,
}

impl Weather {
    pub const ALL: [Weather; 4] = [Weather::Clear, Weather::Fog, Weather::Rain, Weather::Snow];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Weather::Clear => "clear",
            Weather::Fog => "fog",
            Weather::Rain => "rain",
            Weather::Snow => "snow",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|w| w.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown weather `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeOfDay {
    Day,
    Night,
}

impl TimeOfDay {
    pub const ALL: [TimeOfDay; 2] = [TimeOfDay::Day, TimeOfDay::Night];

    pub fn name(self) -> &'static str {
        match self {
            TimeOfDay::Day => "day",
            TimeOfDay::Night => "night",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown time of day `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConditionLabel {
    pub weather: Weather,
    pub time: TimeOfDay,
}

impl ConditionLabel {
    pub const COUNT: usize = 8;

    /// Class index in `0..8`: weather-major, time-minor.
    pub fn index(self) -> usize {
        self.weather.index() * 2 + self.time as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self {
            weather: Weather::ALL[(i / 2) % 4],
            time: TimeOfDay::ALL[i % 2],
        }
    }
}

/// Depth samples of one range sensor on the image plane.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDepthMap {
    /// `[H, W]`, meters; meaningful only where `valid`.
    pub depth: Tensor,
    pub valid: Vec<bool>,
}

impl SparseDepthMap {
    pub fn valid_fraction(&self) -> f64 {
        self.valid.iter().filter(|&&v| v).count() as f64 / self.valid.len() as f64
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PanopticMap {
    pub height: usize,
    pub width: usize,
    pub class_id: Vec<u16>,
    pub instance_id: Vec<u16>,
}

impl PanopticMap {
    pub fn is_void(&self, i: usize) -> bool {
        self.class_id[i] == VOID_CLASS
    }

    pub fn segment(&self, i: usize) -> Option<(u16, u16)> {
        (!self.is_void(i)).then(|| (self.class_id[i], self.instance_id[i]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalSample {
    /// `[3, H, W]` in `[0, 1]`.
    pub rgb: Tensor,
    pub lidar_raw: SparseDepthMap,
    pub lidar_input: Tensor,
    pub radar_input: Tensor,
    pub event_input: Tensor,
    pub panoptic: PanopticMap,
    pub condition: ConditionLabel,
    /// Noise-free rendered depth `[H, W]`; used only for evaluation.
    pub true_depth: Tensor,
}

impl MultimodalSample {
    pub fn height(&self) -> usize {
        self.panoptic.height
    }

    pub fn width(&self) -> usize {
        self.panoptic.width
    }

    pub fn to_block_file(&self) -> Result<BlockFile> {
        let (h, w) = (self.height(), self.width());
        let mut f = BlockFile::new(h as u32, w as u32);
        f.push("rgb", &[3, h, w], ArrayData::F64(self.rgb.data().to_vec()))?;
        f.push(
            "lidar_depth",
            &[h, w],
            ArrayData::F64(self.lidar_raw.depth.data().to_vec()),
        )?;
        f.push(
            "lidar_valid",
            &[h, w],
            ArrayData::U8(self.lidar_raw.valid.iter().map(|&v| v as u8).collect()),
        )?;
        f.push(
            "lidar_input",
            &[3, h, w],
            ArrayData::F64(self.lidar_input.data().to_vec()),
        )?;
        f.push(
            "radar_input",
            &[3, h, w],
            ArrayData::F64(self.radar_input.data().to_vec()),
        )?;
        f.push(
            "event_input",
            &[3, h, w],
            ArrayData::F64(self.event_input.data().to_vec()),
        )?;
        f.push(
            "class_id",
            &[h, w],
            ArrayData::U16(self.panoptic.class_id.clone()),
        )?;
        f.push(
            "instance_id",
            &[h, w],
            ArrayData::U16(self.panoptic.instance_id.clone()),
        )?;
        f.push(
            "condition",
            &[2],
            ArrayData::U8(vec![
                self.condition.weather as u8,
                self.condition.time as u8,
            ]),
        )?;
        f.push(
            "true_depth",
            &[h, w],
            ArrayData::F64(self.true_depth.data().to_vec()),
        )?;
        Ok(f)
    }

    pub fn from_block_file(f: &BlockFile) -> Result<Self> {
        let (h, w) = (f.height as usize, f.width as usize);
        let plane = |name: &str, c: usize| -> Result<Tensor> {
            let (dims, v) = f.f64s(name)?;
            let want: Vec<usize> = if c == 0 { vec![h, w] } else { vec![c, h, w] };
            if dims != want.as_slice() {
                return Err(Error::Format(format!(
                    "`{name}` has dims {dims:?}, expected {want:?}"
                )));
            }
            Ok(Tensor::new(want, v.to_vec())?)
        };
        let (vd, valid) = f.u8s("lidar_valid")?;
        let (cd, class_id) = f.u16s("class_id")?;
        let (id, instance_id) = f.u16s("instance_id")?;
        if vd != [h, w] || cd != [h, w] || id != [h, w] {
            return Err(Error::Format(
                "label/mask planes do not match header size".into(),
            ));
        }
        let (_, cond) = f.u8s("condition")?;
        if cond.len() != 2 || cond[0] > 3 || cond[1] > 1 {
            return Err(Error::Format("bad condition block".into()));
        }
        Ok(Self {
            rgb: plane("rgb", 3)?,
            lidar_raw: SparseDepthMap {
                depth: plane("lidar_depth", 0)?,
                valid: valid.iter().map(|&v| v != 0).collect(),
            },
            lidar_input: plane("lidar_input", 3)?,
            radar_input: plane("radar_input", 3)?,
            event_input: plane("event_input", 3)?,
            panoptic: PanopticMap {
                height: h,
                width: w,
                class_id: class_id.to_vec(),
                instance_id: instance_id.to_vec(),
            },
            condition: ConditionLabel {
                weather: Weather::ALL[cond[0] as usize],
                time: TimeOfDay::ALL[cond[1] as usize],
            },
            true_depth: plane("true_depth", 0)?,
        })
    }
}

pub fn save_sample(sample: &MultimodalSample, path: &Path) -> Result<()> {
    sample.to_block_file()?.write(path)
}

pub fn load_sample(path: &Path) -> Result<MultimodalSample> {
    MultimodalSample::from_block_file(&BlockFile::read(path)?)
}

/// Per-weather values, indexed by [`Weather::index`].
pub type PerWeather = [f64; 4];

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub d_min: f64,
    pub d_max: f64,
    /// Upper bound on depth variation inside one object instance (meters).
    pub object_depth_jitter: f64,
    /// Lidar scanlines are every `lidar_row_step` image rows.
    pub lidar_row_step: usize,
    /// Range-dependent dropout `p = min(1, beta * r / d_max)`.
    pub lidar_beta: PerWeather,
    /// Sigma of multiplicative log-normal depth noise.
    pub lidar_sigma: PerWeather,
    /// Probability that a return is a spurious near-range echo.
    pub lidar_outlier: PerWeather,
    pub night_gain: f64,
    pub fog_visibility: f64,
    pub k_lidar: usize,
    pub k_event: usize,
    pub k_radar: usize,
    pub weathers: Vec<Weather>,
    pub times: Vec<TimeOfDay>,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            num_classes: 8,
            objects_min: 3,
            objects_max: 7,
            d_min: 1.0,
            d_max: 80.0,
            object_depth_jitter: 0.5,
            lidar_row_step: 3,
            // clear, fog, rain, snow
            lidar_beta: [0.1, 0.6, 0.3, 0.5],
            lidar_sigma: [0.01, 0.05, 0.03, 0.08],
            lidar_outlier: [0.0, 0.15, 0.03, 0.15],
            night_gain: 0.3,
            fog_visibility: 25.0,
            k_lidar: 5,
            k_event: 3,
            k_radar: 9,
            weathers: Weather::ALL.to_vec(),
            times: TimeOfDay::ALL.to_vec(),
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 || self.height % 32 != 0 || self.width % 32 != 0 {
            return bad(format!(
                "image size {}x{} must be a positive multiple of 32",
                self.height, self.width
            ));
        }
        if self.num_classes != CLASS_NAMES.len() {
            return bad(format!(
                "the generator renders exactly {} classes",
                CLASS_NAMES.len()
            ));
        }
        if !(self.d_min > 0.0 && self.d_max > self.d_min) {
            return bad(format!(
                "need 0 < d_min < d_max, got {} / {}",
                self.d_min, self.d_max
            ));
        }
        if self.objects_min > self.objects_max {
            return bad("objects_min > objects_max".into());
        }
        if self.lidar_row_step < 2 {
            return bad("lidar_row_step must be >= 2 so lidar stays sparse".into());
        }
        for k in [self.k_lidar, self.k_event, self.k_radar] {
            if k % 2 == 0 {
                return bad(format!("sensor dilation kernel {k} must be odd"));
            }
        }
        if self.weathers.is_empty() || self.times.is_empty() {
            return bad("at least one weather and one time of day required".into());
        }
        Ok(())
    }

    /// Conditions cycled through by consecutive seeds.
    pub fn conditions(&self) -> Vec<ConditionLabel> {
        let mut out = Vec::new();
        for &weather in &self.weathers {
            for &time in &self.times {
                out.push(ConditionLabel { weather, time });
            }
        }
        out
    }

    pub fn condition_for_seed(&self, seed: u64) -> ConditionLabel {
        let all = self.conditions();
        all[(seed % all.len() as u64) as usize]
    }
}

fn parse_weather_table(key: &str, v: &str) -> Result<PerWeather> {
    let vals: Vec<f64> = parse_list(key, v)?;
    vals.try_into()
        .map_err(|_| Error::Config(format!("{key}: expected 4 values (clear,fog,rain,snow)")))
}

impl KeyValue for SceneConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "height" => self.height = parse_num(key, v)?,
            "width" => self.width = parse_num(key, v)?,
            "num_classes" => self.num_classes = parse_num(key, v)?,
            "objects_min" => self.objects_min = parse_num(key, v)?,
            "objects_max" => self.objects_max = parse_num(key, v)?,
            "d_min" => self.d_min = parse_num(key, v)?,
            "d_max" => self.d_max = parse_num(key, v)?,
            "object_depth_jitter" => self.object_depth_jitter = parse_num(key, v)?,
            "lidar_row_step" => self.lidar_row_step = parse_num(key, v)?,
            "lidar_beta" => self.lidar_beta = parse_weather_table(key, v)?,
            "lidar_sigma" => self.lidar_sigma = parse_weather_table(key, v)?,
            "lidar_outlier" => self.lidar_outlier = parse_weather_table(key, v)?,
            "night_gain" => self.night_gain = parse_num(key, v)?,
            "fog_visibility" => self.fog_visibility = parse_num(key, v)?,
            "k_lidar" => self.k_lidar = parse_num(key, v)?,
            "k_event" => self.k_event = parse_num(key, v)?,
            "k_radar" => self.k_radar = parse_num(key, v)?,
            "weathers" => {
                self.weathers = v
                    .split(',')
                    .map(|s| Weather::parse(s.trim()))
                    .collect::<Result<_>>()?
            }
            "times" => {
                self.times = v
                    .split(',')
                    .map(|s| TimeOfDay::parse(s.trim()))
                    .collect::<Result<_>>()?
            }
            "scene_seed" => self.seed = parse_num(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn pairs(&self) -> Vec<(String, String)> {
        let kv = |k: &str, v: String| (k.to_string(), v);
        vec![
            kv("height", self.height.to_string()),
            kv("width", self.width.to_string()),
            kv("num_classes", self.num_classes.to_string()),
            kv("objects_min", self.objects_min.to_string()),
            kv("objects_max", self.objects_max.to_string()),
            kv("d_min", self.d_min.to_string()),
            kv("d_max", self.d_max.to_string()),
            kv("object_depth_jitter", self.object_depth_jitter.to_string()),
            kv("lidar_row_step", self.lidar_row_step.to_string()),
            kv("lidar_beta", join(&self.lidar_beta)),
            kv("lidar_sigma", join(&self.lidar_sigma)),
            kv("lidar_outlier", join(&self.lidar_outlier)),
            kv("night_gain", self.night_gain.to_string()),
            kv("fog_visibility", self.fog_visibility.to_string()),
            kv("k_lidar", self.k_lidar.to_string()),
            kv("k_event", self.k_event.to_string()),
            kv("k_radar", self.k_radar.to_string()),
            kv(
                "weathers",
                self.weathers
                    .iter()
                    .map(|w| w.name())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            kv(
                "times",
                self.times
                    .iter()
                    .map(|t| t.name())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            kv("scene_seed", self.seed.to_string()),
        ]
    }
}
