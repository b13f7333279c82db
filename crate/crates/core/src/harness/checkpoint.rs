use std::path::Path;

use crate::config::{parse_pairs, RunConfig};
use crate::error::{Error, Result};
use crate::fusenet::ParamStore;
use crate::scenegen::format::{ArrayData, BlockFile};

const META: &str = "__meta__";

/// Trained parameters together with the configuration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: usize,
    pub params: ParamStore,
}

/// Parameters as one array each, plus a `__meta__` text block holding the
/// config hash, the step count and the canonical config.
pub fn save_checkpoint(
    path: &Path,
    cfg: &RunConfig,
    step: usize,
    params: &ParamStore,
) -> Result<()> {
    let mut f = BlockFile::new(cfg.model.height as u32, cfg.model.width as u32);
    let meta = format!(
        "config_hash = {}\nstep = {step}\n--\n{}",
        cfg.hash(),
        cfg.canonical_text()
    );
    f.push(META, &[meta.len()], ArrayData::U8(meta.into_bytes()))?;
    params.write_into(&mut f)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(crate::error::io_err(dir))?;
    }
    f.write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let f = BlockFile::read(path)?;
    let (_, raw) = f.u8s(META)?;
    let text = std::str::from_utf8(raw)
        .map_err(|_| Error::Format("checkpoint metadata is not UTF-8".into()))?;
    let (head, body) = text
        .split_once("--\n")
        .ok_or_else(|| Error::Format("checkpoint metadata lacks a config section".into()))?;
    let mut hash = None;
    let mut step = None;
    for (k, v) in parse_pairs(head)? {
        match k.as_str() {
            "config_hash" => hash = Some(v),
            "step" => step = v.parse().ok(),
            _ => {}
        }
    }
    let config = RunConfig::from_text(body)?;
    let hash = hash.ok_or_else(|| Error::Format("checkpoint metadata lacks config_hash".into()))?;
    if hash != config.hash() {
        return Err(Error::Format(format!(
            "checkpoint config hash {hash} does not match its config ({})",
            config.hash()
        )));
    }
    let params = ParamStore::read_from(&f, &config.model.param_specs())?;
    let stored = f.arrays.iter().filter(|a| a.name != META).count();
    if stored != params.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {stored} parameter arrays, config defines {}",
            params.len()
        )));
    }
    Ok(Checkpoint {
        config,
        step: step.ok_or_else(|| Error::Format("checkpoint metadata lacks step".into()))?,
        params,
    })
}
