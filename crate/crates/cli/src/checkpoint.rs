//! Checkpoints: a named-array binary (f64 little-endian) plus a JSON
//! manifest. Save/load round-trips are bitwise stable.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use reid_core::tensor::Tensor;

use crate::error::{CliError, Result};

pub const CKPT_VERSION: u32 = 1;
pub const PARAMS_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
/// Reserved array name for the per-identity text anchors.
pub const TEXT_CACHE_ARRAY: &str = "cache.text_features";

#[derive(Debug, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Byte offset into the params file.
    pub offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CkptManifest {
    pub format_version: u32,
    pub stage: String,
    pub seed: u64,
    pub n_ids: usize,
    pub steps: usize,
    /// Canonical key=value text of the resolved configuration.
    pub config: String,
    pub arrays: Vec<ArrayEntry>,
}

/// In-memory checkpoint contents.
pub struct Checkpoint {
    pub stage: String,
    pub seed: u64,
    pub n_ids: usize,
    pub steps: usize,
    pub config: String,
    pub arrays: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn array(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Write to a fresh directory: `<dir>/params.bin` + `<dir>/manifest.json`.
    /// The manifest is written last via an atomic rename.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut blob: Vec<u8> = Vec::new();
        let mut entries = Vec::with_capacity(self.arrays.len());
        for (name, t) in &self.arrays {
            let offset = blob.len() as u64;
            for v in &t.data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(ArrayEntry { name: name.clone(), rows: t.rows, cols: t.cols, offset });
        }
        fs::write(dir.join(PARAMS_FILE), blob)?;
        let manifest = CkptManifest {
            format_version: CKPT_VERSION,
            stage: self.stage.clone(),
            seed: self.seed,
            n_ids: self.n_ids,
            steps: self.steps,
            config: self.config.clone(),
            arrays: entries,
        };
        let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
        fs::write(&tmp, serde_json::to_string_pretty(&manifest)?)?;
        fs::rename(&tmp, dir.join(MANIFEST_FILE))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Checkpoint> {
        let manifest_path = dir.join(MANIFEST_FILE);
        if !manifest_path.exists() {
            return Err(CliError::missing(format!(
                "no checkpoint at {} (manifest.json missing)",
                dir.display()
            )));
        }
        let manifest: CkptManifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
        if manifest.format_version != CKPT_VERSION {
            return Err(CliError::config(format!(
                "checkpoint format {} unsupported (expected {})",
                manifest.format_version, CKPT_VERSION
            )));
        }
        let blob = fs::read(dir.join(PARAMS_FILE))?;
        let mut arrays = Vec::with_capacity(manifest.arrays.len());
        for e in &manifest.arrays {
            let start = e.offset as usize;
            let len = e.rows * e.cols * 8;
            let end = start + len;
            if end > blob.len() {
                return Err(CliError::config(format!(
                    "array '{}' extends past the end of {PARAMS_FILE}",
                    e.name
                )));
            }
            let data: Vec<f64> = blob[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            arrays.push((e.name.clone(), Tensor::from_vec(e.rows, e.cols, data)));
        }
        Ok(Checkpoint {
            stage: manifest.stage,
            seed: manifest.seed,
            n_ids: manifest.n_ids,
            steps: manifest.steps,
            config: manifest.config,
            arrays,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise_stable() {
        let dir = std::env::temp_dir().join(format!("reid-ckpt-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        let ck = Checkpoint {
            stage: "stage0".into(),
            seed: 7,
            n_ids: 3,
            steps: 12,
            config: "a=1\n".into(),
            arrays: vec![
                ("w".into(), Tensor::from_vec(2, 2, vec![1.5, -0.25, 1e-300, f64::MIN_POSITIVE])),
                ("b".into(), Tensor::from_vec(1, 3, vec![0.1 + 0.2, -0.0, 3.7])),
            ],
        };
        ck.save(&dir).unwrap();
        let loaded = Checkpoint::load(&dir).unwrap();
        assert_eq!(loaded.stage, "stage0");
        for ((n1, t1), (n2, t2)) in ck.arrays.iter().zip(&loaded.arrays) {
            assert_eq!(n1, n2);
            assert_eq!(
                t1.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                t2.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
        // save -> load -> save produces identical bytes
        let dir2 = dir.join("again");
        loaded.save(&dir2).unwrap();
        assert_eq!(
            std::fs::read(dir.join(PARAMS_FILE)).unwrap(),
            std::fs::read(dir2.join(PARAMS_FILE)).unwrap()
        );
        assert_eq!(
            std::fs::read(dir.join(MANIFEST_FILE)).unwrap(),
            std::fs::read(dir2.join(MANIFEST_FILE)).unwrap()
        );
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
