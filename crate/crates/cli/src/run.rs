//! Run directory bookkeeping: config resolution, prerequisite loading and
//! per-command manifests.

use std::fs;
use std::path::{Path, PathBuf};

use dynmoe::curriculum::{CurriculumConfig, Datasets, Preset};
use dynmoe::fusion::Checkpoint;
use dynmoe::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const CONFIG_FILE: &str = "config.toml";
pub const DATA_DIR: &str = "data";

pub struct RunContext {
    pub out: PathBuf,
    pub config: CurriculumConfig,
    pub config_text: String,
    pub config_hash: String,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    seed: u64,
    config_hash: &'a str,
    inputs: &'a [String],
    artifacts: &'a [String],
}

fn hash(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

impl RunContext {
    /// Config precedence: `--config`, then the run's saved config, then the
    /// preset. Flags that disagree with a run's saved config are rejected so
    /// one run directory never mixes configurations.
    pub fn resolve(out: PathBuf, config: Option<PathBuf>, preset: Option<&str>, seed: Option<u64>) -> Result<Self> {
        let saved = out.join(CONFIG_FILE);
        let mut cfg = if let Some(p) = &config {
            let text =
                fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            CurriculumConfig::from_toml(&text)?
        } else if saved.exists() && preset.is_none() {
            CurriculumConfig::from_toml(&fs::read_to_string(&saved)?)?
        } else {
            let p: Preset = preset.unwrap_or("smoke").parse()?;
            CurriculumConfig::preset(p, seed.unwrap_or(1234))
        };
        if let Some(s) = seed {
            cfg.seed = s;
            cfg.data.seed = s;
        }
        cfg.validate()?;
        let text = cfg.to_toml()?;
        if saved.exists() {
            let on_disk = CurriculumConfig::from_toml(&fs::read_to_string(&saved)?)?;
            if on_disk != cfg {
                return Err(Error::Config(format!(
                    "run directory {} was created with a different config; use a fresh --out",
                    out.display()
                )));
            }
        }
        Ok(Self { config_hash: hash(&text), config: cfg, config_text: text, out })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn ensure_out(&self) -> Result<()> {
        fs::create_dir_all(&self.out)?;
        Ok(())
    }

    pub fn load_data(&self) -> Result<Datasets> {
        Datasets::load(&self.path(DATA_DIR)).map_err(|e| match e {
            Error::Missing(_) => Error::Missing(format!("datasets in {} — run `gen-data` first", self.out.display())),
            other => other,
        })
    }

    /// Resolves a checkpoint name (`joint`) or path.
    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        let p = Path::new(name);
        if name.ends_with(".ckpt") || p.components().count() > 1 {
            p.to_path_buf()
        } else {
            self.path(&format!("{name}.ckpt"))
        }
    }

    /// Loads a stage's checkpoint; when absent the error names the command
    /// that produces it.
    pub fn load_stage(&self, name: &str, producer: &str) -> Result<Checkpoint> {
        let p = self.checkpoint_path(name);
        Checkpoint::load(&p).map_err(|e| match e {
            Error::Missing(_) => Error::Missing(format!("{} checkpoint {} — run `{producer}` first", name, p.display())),
            other => other,
        })
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<String> {
        let p = self.path(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        dynmoe::analytics::export::write_atomic(&p, text)?;
        Ok(name.to_string())
    }

    pub fn save_checkpoint(&self, name: &str, ckpt: &Checkpoint) -> Result<String> {
        let file = format!("{name}.ckpt");
        ckpt.save(&self.path(&file))?;
        Ok(file)
    }

    pub fn write_manifest(&self, command: &str, inputs: &[String], artifacts: &[String]) -> Result<()> {
        let m = RunManifest { command, seed: self.config.seed, config_hash: &self.config_hash, inputs, artifacts };
        self.write_text(&format!("manifests/{command}.json"), &serde_json::to_string_pretty(&m)?)?;
        Ok(())
    }
}
