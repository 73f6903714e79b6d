use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::Stage;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk wrapper of every stage artifact.
#[derive(Debug, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub kind: String,
    pub version: u32,
    pub config_hash: String,
    pub payload: T,
}

/// Checkpoint directory of one run.
#[derive(Clone, Debug)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Store { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.root.join(file)
    }

    pub fn exists(&self, stage: Stage) -> bool {
        self.path(stage.artifact()).is_file()
    }

    pub fn save<T: Serialize>(&self, stage: Stage, hash: &str, payload: &T) -> Result<()> {
        let env = Envelope { kind: stage.name().into(), version: CHECKPOINT_VERSION, config_hash: hash.into(), payload };
        write_atomic(&self.path(stage.artifact()), &serde_json::to_vec(&env)?)
    }

    /// Hash recorded in a stage's checkpoint, `None` if it is absent.
    pub fn recorded_hash(&self, stage: Stage) -> Result<Option<String>> {
        #[derive(Deserialize)]
        struct Head {
            kind: String,
            version: u32,
            config_hash: String,
        }
        let path = self.path(stage.artifact());
        if !path.is_file() {
            return Ok(None);
        }
        let head: Head = serde_json::from_slice(&fs::read(&path)?)?;
        check_head(&path, stage, &head.kind, head.version)?;
        Ok(Some(head.config_hash))
    }

    /// Loads the artifact of `stage` on behalf of `consumer`, checking that it
    /// was produced under the expected configuration.
    pub fn load<T: DeserializeOwned>(&self, stage: Stage, hash: &str, consumer: Stage) -> Result<T> {
        let path = self.path(stage.artifact());
        if !path.is_file() {
            return Err(Error::StageDependency { stage: consumer.name().into(), missing: stage.artifact().into() });
        }
        let env: Envelope<T> = serde_json::from_slice(&fs::read(&path)?)?;
        check_head(&path, stage, &env.kind, env.version)?;
        if env.config_hash != hash {
            return Err(Error::contract(format!(
                "{} was produced under a different configuration; rerun `{}`",
                path.display(),
                stage.name()
            )));
        }
        Ok(env.payload)
    }

    /// Adds a stage's wall-clock seconds to `timing.json`.
    pub fn record_time(&self, stage: Stage, seconds: f64) -> Result<()> {
        let mut t = self.timing()?;
        t.insert(stage.name().into(), seconds);
        write_atomic(&self.path(TIMING_FILE), &serde_json::to_vec_pretty(&t)?)
    }

    pub fn timing(&self) -> Result<BTreeMap<String, f64>> {
        let path = self.path(TIMING_FILE);
        if !path.is_file() {
            return Ok(BTreeMap::new());
        }
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

pub const TIMING_FILE: &str = "timing.json";

fn check_head(path: &Path, stage: Stage, kind: &str, version: u32) -> Result<()> {
    if kind != stage.name() || version != CHECKPOINT_VERSION {
        return Err(Error::Schema(format!(
            "{} holds `{kind}` v{version}, expected `{}` v{CHECKPOINT_VERSION}",
            path.display(),
            stage.name()
        )));
    }
    Ok(())
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
