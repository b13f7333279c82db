//! `key = value` configuration files.
//!
//! One file carries scene, model, loss and training keys; blank lines and
//! `#` comments are ignored and unknown keys are rejected. The canonical
//! form (every key, sorted) is what gets hashed into checkpoints.

use std::path::Path;

use crate::error::{io_err, Error, Result};
use crate::fusenet::ModelConfig;
use crate::harness::TrainConfig;
use crate::losskit::LossWeights;
use crate::scenegen::SceneConfig;

pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub(crate) fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

pub(crate) fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected a boolean, got `{v}`"
        ))),
    }
}

pub(crate) fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse_num(key, s.trim())).collect()
}

pub(crate) fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Something configurable from `key = value` pairs.
pub trait KeyValue {
    /// Apply one pair; `Ok(false)` means the key belongs elsewhere.
    fn set(&mut self, key: &str, value: &str) -> Result<bool>;
    fn pairs(&self) -> Vec<(String, String)>;
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_pairs(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_text(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let consumed = self.scene.set(key, value)?
            || self.model.set(key, value)?
            || self.loss.set(key, value)?
            || self.train.set(key, value)?;
        if consumed {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown key `{key}`")))
        }
    }

    /// Copy values shared between sections: image plane, class count, depth
    /// range and the ablation toggles.
    pub fn sync(&mut self) {
        let t = self.train.toggles;
        self.model.height = self.scene.height;
        self.model.width = self.scene.width;
        self.model.num_classes = self.scene.num_classes;
        self.model.d_min = self.scene.d_min;
        self.model.d_max = self.scene.d_max;
        self.model.use_ct = t.use_ct;
        self.model.use_aux_depth_head = t.use_aux_depth_head;
        self.model.use_dt = t.use_dt;
        self.loss.d_min = self.scene.d_min;
        self.loss.d_max = self.scene.d_max;
        self.loss.smoothness = t.use_smoothness;
        self.loss.tau_filter = t.use_tau_filter;
    }

    /// Apply one `key=value` override and re-sync.
    pub fn with(mut self, key: &str, value: &str) -> Result<Self> {
        self.set(key, value)?;
        self.sync();
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()
    }

    pub fn canonical_text(&self) -> String {
        let mut pairs = self.scene.pairs();
        pairs.extend(self.model.pairs());
        pairs.extend(self.loss.pairs());
        pairs.extend(self.train.pairs());
        pairs.sort();
        pairs.dedup();
        pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Hash of everything that shapes the model and its training run.
    pub fn hash(&self) -> String {
        format!("{:08x}", crc32fast::hash(self.canonical_text().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blanks() {
        let p = parse_pairs("# c\n\n a = 1 # trailing\nb=x,y\n").unwrap();
        assert_eq!(
            p,
            vec![("a".into(), "1".into()), ("b".into(), "x,y".into())]
        );
        assert!(parse_pairs("novalue\n").is_err());
    }

    #[test]
    fn canonical_text_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("steps", "17").unwrap();
        cfg.set("use_dt", "false").unwrap();
        cfg.set("tau", "0.7").unwrap();
        cfg.sync();
        let again = RunConfig::from_text(&cfg.canonical_text()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.hash(), again.hash());
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(RunConfig::from_text("bogus = 1").is_err());
    }
}
