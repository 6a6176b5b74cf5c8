use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{attentive, deepsym, relational, Architecture, ModelConfig, ModelError};
use crate::gradcore::{read_container, write_container, Container, ParameterSet};

/// Descriptor block stored in the container.
#[derive(Serialize, Deserialize)]
struct Descriptor {
    model: ModelConfig,
    seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub params: ParameterSet,
    /// Training seed; also seeds parameter initialisation.
    pub seed: u64,
}

impl ModelCheckpoint {
    /// Freshly initialised parameters for `config`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        if config.d_z == 0 || config.heads == 0 || config.hidden == 0 || config.key_dim == 0 {
            return Err(ModelError::Contract("model widths must be positive".into()));
        }
        if !(config.tau > 0.0 && config.tau.is_finite()) {
            return Err(ModelError::Contract(format!("temperature {} must be positive", config.tau)));
        }
        let mut params = ParameterSet::new(seed);
        Self::init(&mut params, &config)?;
        Ok(Self { config, params, seed })
    }

    fn init(params: &mut ParameterSet, config: &ModelConfig) -> Result<(), ModelError> {
        match config.arch {
            Architecture::Relational => relational::init_params(params, config)?,
            Architecture::Attentive => attentive::init_params(params, config)?,
            Architecture::DeepSym => deepsym::init_params(params, config)?,
        }
        Ok(())
    }

    /// Checks that the parameter paths and shapes are exactly those the
    /// architecture requires.
    pub fn validate_paths(&self) -> Result<(), ModelError> {
        let mut expected = ParameterSet::new(0);
        Self::init(&mut expected, &self.config)?;
        for (path, t) in expected.iter() {
            let have = self.params.get(path).map_err(|_| {
                ModelError::Checkpoint(format!("{} checkpoint lacks {path}", self.config.arch))
            })?;
            if have.shape() != t.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "{path}: shape {:?}, expected {:?}",
                    have.shape(),
                    t.shape()
                )));
            }
        }
        if let Some(extra) = self.params.paths().find(|p| !expected.contains(p)) {
            return Err(ModelError::Checkpoint(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ModelError> {
        let descriptor = serde_json::to_string(&Descriptor {
            model: self.config.clone(),
            seed: self.seed,
        })
        .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let mut out = Vec::new();
        write_container(
            &mut out,
            &Container {
                descriptor,
                params: self.params.clone(),
            },
        )?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let c = read_container(bytes)?;
        let d: Descriptor = serde_json::from_str(&c.descriptor)
            .map_err(|e| ModelError::Checkpoint(format!("descriptor: {e}")))?;
        let ckpt = Self {
            config: d.model,
            params: c.params,
            seed: d.seed,
        };
        ckpt.validate_paths()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let io = |source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        };
        let bytes = self.to_bytes()?;
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        w.write_all(&bytes).map_err(io)?;
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let f = File::open(path).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let c = read_container(BufReader::new(f))?;
        let d: Descriptor = serde_json::from_str(&c.descriptor)
            .map_err(|e| ModelError::Checkpoint(format!("{}: descriptor: {e}", path.display())))?;
        let ckpt = Self {
            config: d.model,
            params: c.params,
            seed: d.seed,
        };
        ckpt.validate_paths()?;
        Ok(ckpt)
    }

    /// Rounds every parameter to the precision stored on disk, so that an
    /// in-memory model behaves exactly like its saved copy.
    pub fn quantize(&mut self) {
        for (_, t) in self.params.iter_mut() {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}
