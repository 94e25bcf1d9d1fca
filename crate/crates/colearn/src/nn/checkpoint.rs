//! Versioned on-disk ensemble checkpoints: one JSON file holding the arch
//! specs, seeds, epoch, coupling matrix, and all parameter tensors in layer
//! order (row-major).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ensemble::{Ensemble, Network};
use crate::error::{Error, Result};
use crate::loss::CouplingMatrix;
use crate::tensor::Element;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct EnsembleCheckpoint<E> {
    pub format_version: u32,
    pub epoch: usize,
    pub seeds: Vec<u64>,
    pub coupling: CouplingMatrix,
    pub networks: Vec<Network<E>>,
}

/// Atomically writes `contents` (temp file + rename), so partially written
/// files never appear under the final name.
pub(crate) fn atomic_write(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_ensemble<E: Element>(
    path: impl AsRef<Path>,
    ensemble: &Ensemble<E>,
    epoch: usize,
) -> Result<()> {
    let checkpoint = EnsembleCheckpoint {
        format_version: CHECKPOINT_VERSION,
        epoch,
        seeds: ensemble.seeds.clone(),
        coupling: ensemble.coupling.clone(),
        networks: ensemble.networks.clone(),
    };
    let json = serde_json::to_vec(&checkpoint)?;
    atomic_write(path.as_ref(), &json)
}

pub fn load_ensemble<E: Element>(path: impl AsRef<Path>) -> Result<(Ensemble<E>, usize)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::Format {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let checkpoint: EnsembleCheckpoint<E> = serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    if checkpoint.format_version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            path: path.display().to_string(),
            detail: format!(
                "format version {} unsupported (expected {CHECKPOINT_VERSION})",
                checkpoint.format_version
            ),
        });
    }
    for (i, net) in checkpoint.networks.iter().enumerate() {
        net.arch.volumes().map_err(|e| Error::Format {
            path: path.display().to_string(),
            detail: format!("network {i}: {e}"),
        })?;
        if net.params.layers().len() != net.arch.layers.len() {
            return Err(Error::Format {
                path: path.display().to_string(),
                detail: format!("network {i}: parameter/layer count mismatch"),
            });
        }
        if !net.params.all_finite() {
            return Err(Error::Format {
                path: path.display().to_string(),
                detail: format!("network {i}: non-finite parameters"),
            });
        }
    }
    let epoch = checkpoint.epoch;
    let ensemble = Ensemble::from_parts(checkpoint.networks, checkpoint.coupling, checkpoint.seeds)?;
    Ok((ensemble, epoch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Arch;

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let arch = Arch::mlp(6, &[5], 3).unwrap();
        let ens: Ensemble<f32> =
            Ensemble::init(&arch, CouplingMatrix::uniform(-1.0, 2), &[1, 2]).unwrap();
        let dir = std::env::temp_dir().join("colearn-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ens.json");
        save_ensemble(&path, &ens, 17).unwrap();
        let (back, epoch) = load_ensemble::<f32>(&path).unwrap();
        assert_eq!(epoch, 17);
        assert_eq!(back.seeds, ens.seeds);
        assert_eq!(back.param_hash(), ens.param_hash());
        assert_eq!(back.networks, ens.networks);
    }

    #[test]
    fn wrong_version_is_rejected() {
        let dir = std::env::temp_dir().join("colearn-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.json");
        std::fs::write(
            &path,
            br#"{"format_version":99,"epoch":0,"seeds":[],"coupling":{"n":0,"beta":[]},"networks":[]}"#,
        )
        .unwrap();
        let err = load_ensemble::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("format version"));
    }
}
