use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{generate_scene, load_sample, MultimodalSample, SceneConfig, TimeOfDay, Weather};
use crate::config::KeyValue;
use crate::error::{io_err, Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Dataset(format!("unknown split `{s}`")))
    }

    /// First seed of the split; splits never share seeds.
    pub fn seed_base(self, scene_seed: u64) -> u64 {
        scene_seed * 3_000_000 + self as u64 * 1_000_000
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub split: Split,
    pub weather: Weather,
    pub time: TimeOfDay,
    pub seed: u64,
    pub crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub scene_config: String,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn load_split(&self, root: &Path, split: Split) -> Result<Vec<MultimodalSample>> {
        self.split(split)
            .map(|e| load_sample(&root.join(&e.path)))
            .collect()
    }
}

/// Generate and write `n_train + n_val + n_test` scenes plus a manifest.
///
/// Refuses to write into a non-empty `root` unless `force` is set.
pub fn make_dataset(
    cfg: &SceneConfig,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    root: &Path,
    force: bool,
) -> Result<Manifest> {
    cfg.validate()?;
    if root.exists() {
        let mut it = std::fs::read_dir(root).map_err(io_err(root))?;
        if it.next().is_some() && !force {
            return Err(Error::Dataset(format!(
                "{} exists and is not empty; pass --force to overwrite",
                root.display()
            )));
        }
    }
    let mut entries = Vec::new();
    for (split, count) in [
        (Split::Train, n_train),
        (Split::Val, n_val),
        (Split::Test, n_test),
    ] {
        let dir = root.join(split.name());
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for i in 0..count {
            let seed = split.seed_base(cfg.seed) + i as u64;
            let sample = generate_scene(cfg, seed)?;
            let rel = format!("{}/{:06}.dgfs", split.name(), i);
            let bytes = sample.to_block_file()?.to_bytes();
            let path = root.join(&rel);
            std::fs::write(&path, &bytes).map_err(io_err(&path))?;
            entries.push(ManifestEntry {
                path: rel,
                split,
                weather: sample.condition.weather,
                time: sample.condition.time,
                seed,
                crc32: crc32fast::hash(&bytes),
            });
        }
    }
    let scene_config = cfg
        .pairs()
        .iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect();
    let manifest = Manifest {
        version: 1,
        scene_config,
        entries,
    };
    let path = root.join(MANIFEST_FILE);
    let text =
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::Dataset(e.to_string()))?;
    std::fs::write(&path, text).map_err(io_err(&path))?;
    Ok(manifest)
}
