use std::path::Path;

use crate::config::KeyValue;
use crate::error::{Error, Result};
use crate::scenegen::{
    generate_scene, make_dataset, Manifest, MultimodalSample, SceneConfig, Split,
};

/// All three splits held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<MultimodalSample>,
    pub val: Vec<MultimodalSample>,
    pub test: Vec<MultimodalSample>,
}

fn scene_text(cfg: &SceneConfig) -> String {
    cfg.pairs()
        .iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

impl Dataset {
    /// Same scenes as [`make_dataset`] would write, without touching disk.
    pub fn generate(
        cfg: &SceneConfig,
        n_train: usize,
        n_val: usize,
        n_test: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let gen = |split: Split, n: usize| -> Result<Vec<MultimodalSample>> {
            (0..n as u64)
                .map(|i| generate_scene(cfg, split.seed_base(cfg.seed) + i))
                .collect()
        };
        Ok(Self {
            train: gen(Split::Train, n_train)?,
            val: gen(Split::Val, n_val)?,
            test: gen(Split::Test, n_test)?,
        })
    }

    /// Load a dataset written by [`make_dataset`], checking that it was
    /// generated with `cfg`.
    pub fn load(root: &Path, cfg: &SceneConfig) -> Result<Self> {
        let manifest = Manifest::load(root)?;
        if manifest.scene_config != scene_text(cfg) {
            return Err(Error::Dataset(format!(
                "{} was generated with different scene settings; regenerate it with `dgf data make --force`",
                root.display()
            )));
        }
        Ok(Self {
            train: manifest.load_split(root, Split::Train)?,
            val: manifest.load_split(root, Split::Val)?,
            test: manifest.load_split(root, Split::Test)?,
        })
    }

    /// Load `root` if it holds a matching dataset, otherwise generate and
    /// write it.
    pub fn load_or_make(root: &Path, cfg: &SceneConfig, n: (usize, usize, usize)) -> Result<Self> {
        if root.join(crate::scenegen::MANIFEST_FILE).exists() {
            let d = Self::load(root, cfg)?;
            if (d.train.len(), d.val.len(), d.test.len()) != n {
                return Err(Error::Dataset(format!(
                    "{} holds {}/{}/{} scenes, config asks for {n:?}",
                    root.display(),
                    d.train.len(),
                    d.val.len(),
                    d.test.len()
                )));
            }
            return Ok(d);
        }
        make_dataset(cfg, n.0, n.1, n.2, root, false)?;
        Self::load(root, cfg)
    }

    pub fn split(&self, split: Split) -> &[MultimodalSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}
