//! Versioned checkpoint container. JSON with exact float round-tripping, so
//! save → load reproduces forward outputs bitwise. Writes are atomic
//! (temp file + rename).

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::DocIdRegistry;
use crate::error::{Error, Result};
use crate::model::{AdapterSet, SeqModel};
use crate::optim::OptimizerState;
use crate::tokenizer::Vocab;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub model: SeqModel,
    pub adapters: AdapterSet,
    pub optimizer: OptimizerState,
    pub rng: ChaCha8Rng,
    pub vocab: Vocab,
    pub registry: DocIdRegistry,
}

impl Checkpoint {
    pub const VERSION: u32 = 1;

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(self)
            .map_err(|e| Error::Checkpoint(format!("serialize: {e}")))?;
        atomic_write(path, &json)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut ckpt: Checkpoint = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ckpt.version != Self::VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {})",
                ckpt.version,
                Self::VERSION
            )));
        }
        ckpt.model.rebuild_caches();
        Ok(ckpt)
    }
}

/// Writes to a sibling temp file and renames into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let tmp = match dir {
        Some(d) => d.join(format!(
            ".{}.tmp",
            path.file_name().and_then(|f| f.to_str()).unwrap_or("out")
        )),
        None => Path::new(&format!(
            ".{}.tmp",
            path.file_name().and_then(|f| f.to_str()).unwrap_or("out")
        ))
        .to_path_buf(),
    };
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;
    use crate::training::{train_docs, TrainConfig};

    #[test]
    fn save_load_roundtrip_is_exact() {
        let docs = synth::corpus(4, 51);
        let config = TrainConfig {
            max_epochs: 2,
            pseudo_queries_per_doc: 2,
            ..TrainConfig::default()
        };
        let run = train_docs(&config, docs).unwrap();
        let ckpt = run.checkpoint;

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt.json");
        ckpt.save(&path).unwrap();
        let restored = Checkpoint::load(&path).unwrap();

        // bitwise-identical forward outputs and rng state
        let src = vec![5, 6, 7];
        let prefix = vec![crate::tokenizer::BOS, 5];
        let before = ckpt.model.forward(&ckpt.adapters, &src, &prefix).unwrap();
        let after = restored
            .model
            .forward(&restored.adapters, &src, &prefix)
            .unwrap();
        assert_eq!(before, after);
        assert_eq!(ckpt.rng, restored.rng);
        assert_eq!(ckpt.optimizer.step, restored.optimizer.step);
    }

    #[test]
    fn version_mismatch_rejected() {
        let docs = synth::corpus(3, 53);
        let config = TrainConfig {
            max_epochs: 1,
            pseudo_queries_per_doc: 2,
            ..TrainConfig::default()
        };
        let run = train_docs(&config, docs).unwrap();
        let mut ckpt = run.checkpoint;
        ckpt.version = 99;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt.json");
        ckpt.save(&path).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }

    #[test]
    fn atomic_write_replaces_existing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.json");
        atomic_write(&path, b"first").unwrap();
        atomic_write(&path, b"second").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"second");
        // no stray temp files
        let leftovers: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().ends_with(".tmp"))
            .collect();
        assert!(leftovers.is_empty());
    }
}
