//! Run configuration: built-in defaults, overridden by a JSON or TOML file,
//! overridden by command-line flags.

use std::path::{Path, PathBuf};

use ffpe_core::eval::RandomProjectionExtractor;
use ffpe_core::inference::{InferenceParams, DEFAULT_BATCH_SIZE};
use ffpe_core::train::TrainConfig;
use ffpe_core::wsi::{SegmentationParams, TilingParams};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Environment variable naming the run configuration file.
pub const CONFIG_ENV: &str = "FFPE_CONFIG";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FidConfig {
    pub seed: u64,
    pub pool: usize,
    pub dim: usize,
}

impl Default for FidConfig {
    fn default() -> Self {
        Self { seed: 0, pool: 16, dim: 64 }
    }
}

impl FidConfig {
    pub fn extractor(&self) -> RandomProjectionExtractor {
        RandomProjectionExtractor::new(self.seed, self.pool, self.dim)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub batch_size: usize,
    pub background: [u8; 3],
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { batch_size: DEFAULT_BATCH_SIZE, background: [255, 255, 255] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub tiling: TilingParams,
    /// Unset means "scaled to the tiling patch size".
    pub segmentation: Option<SegmentationParams>,
    pub inference: InferenceConfig,
    pub fid: FidConfig,
}

impl RunConfig {
    pub fn segmentation(&self) -> SegmentationParams {
        self.segmentation.clone().unwrap_or_else(|| SegmentationParams::for_patch_size(self.tiling.patch_size))
    }

    pub fn inference_params(&self) -> InferenceParams {
        InferenceParams {
            segmentation: self.segmentation(),
            tiling: self.tiling.clone(),
            batch_size: self.inference.batch_size,
            background: self.inference.background,
        }
    }

    /// Parse a document; `.toml` files are TOML, everything else JSON.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        let is_toml = path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("toml"));
        if is_toml {
            toml::from_str(&text).map_err(|source| Error::Toml { path: path.into(), source })
        } else {
            serde_json::from_str(&text).map_err(|source| Error::Json { path: path.into(), source })
        }
    }

    /// Defaults, or the file named by `explicit`, else by the environment.
    pub fn load(explicit: Option<&Path>) -> Result<Self> {
        let path: Option<PathBuf> = explicit
            .map(Path::to_path_buf)
            .or_else(|| std::env::var_os(CONFIG_ENV).filter(|v| !v.is_empty()).map(PathBuf::from));
        match path {
            Some(p) => Self::from_file(&p),
            None => Ok(Self::default()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_and_json_documents_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("run.toml");
        std::fs::write(&t, "[train]\nepochs = 3\n[train.generator]\nn_res_blocks = 2\n[tiling]\npatch_size = 64\n")
            .unwrap();
        let c = RunConfig::from_file(&t).unwrap();
        assert_eq!((c.train.epochs, c.train.generator.n_res_blocks, c.tiling.patch_size), (3, 2, 64));
        assert_eq!(c.train.lr, 0.002);
        assert_eq!(c.segmentation(), SegmentationParams::for_patch_size(64));
        let j = dir.path().join("run.json");
        std::fs::write(&j, r#"{"fid": {"dim": 8}}"#).unwrap();
        assert_eq!(RunConfig::from_file(&j).unwrap().fid, FidConfig { dim: 8, ..Default::default() });
        std::fs::write(&j, r#"{"trian": {}}"#).unwrap();
        assert!(RunConfig::from_file(&j).unwrap_err().to_string().contains("run.json"));
    }
}
