//! Checkpoints, data and search index for one dataset, loaded together.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use crate::checkpoint::{sha256_hex, ClassifierCheckpoint, VaeCheckpoint};
use crate::classifier::{find_mispredictions, Misprediction};
use crate::data::{make_dataset, Dataset, DatasetName, Split};
use crate::error::{Error, Result};
use crate::neighborhood::{explore, Exploration, LatentIndex, NeighborhoodSpec, PointOfInterest};

pub const VAE_FILE: &str = "vae.ckpt";
pub const CLASSIFIER_FILE: &str = "classifier.ckpt";

/// `<checkpoint_dir>/<dataset>/vae.ckpt`
pub fn vae_path(checkpoint_dir: &Path, dataset: DatasetName) -> PathBuf {
    checkpoint_dir.join(dataset.as_str()).join(VAE_FILE)
}

/// `<checkpoint_dir>/<dataset>/classifier.ckpt`
pub fn classifier_path(checkpoint_dir: &Path, dataset: DatasetName) -> PathBuf {
    checkpoint_dir.join(dataset.as_str()).join(CLASSIFIER_FILE)
}

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CheckpointRef {
    pub path: PathBuf,
    pub sha256: String,
}

impl CheckpointRef {
    pub fn of(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(CheckpointRef {
            path: path.to_path_buf(),
            sha256: sha256_hex(&bytes),
        })
    }
}

#[derive(Clone, Debug)]
pub struct WorkbenchConfig {
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    /// Split searched for morph anchors.
    pub index_split: Split,
    /// Split points-of-interest are drawn from.
    pub poi_split: Split,
}

impl WorkbenchConfig {
    pub fn new(data_dir: impl Into<PathBuf>, checkpoint_dir: impl Into<PathBuf>) -> Self {
        WorkbenchConfig {
            data_dir: data_dir.into(),
            checkpoint_dir: checkpoint_dir.into(),
            index_split: Split::Train,
            poi_split: Split::Test,
        }
    }
}

pub struct Workbench {
    pub dataset: DatasetName,
    pub vae: VaeCheckpoint,
    pub classifier: ClassifierCheckpoint,
    pub vae_ref: CheckpointRef,
    pub classifier_ref: CheckpointRef,
    pub poi_data: Dataset,
    config: WorkbenchConfig,
    index: OnceLock<LatentIndex>,
}

impl Workbench {
    /// Loads both checkpoints, checks they belong to `dataset`, and encodes the index split.
    pub fn open(config: &WorkbenchConfig, dataset: DatasetName) -> Result<Self> {
        let vae_file = vae_path(&config.checkpoint_dir, dataset);
        let clf_file = classifier_path(&config.checkpoint_dir, dataset);
        let vae = VaeCheckpoint::load(&vae_file)?;
        let classifier = ClassifierCheckpoint::load(&clf_file)?;
        for (what, found) in [("VAE", vae.dataset), ("classifier", classifier.dataset)] {
            if found != dataset {
                return Err(Error::Consistency(format!(
                    "{what} checkpoint was trained on {found}, expected {dataset}"
                )));
            }
        }
        let poi_data = make_dataset(&config.data_dir, dataset, config.poi_split)?;
        Ok(Workbench {
            dataset,
            vae_ref: CheckpointRef::of(&vae_file)?,
            classifier_ref: CheckpointRef::of(&clf_file)?,
            vae,
            classifier,
            poi_data,
            config: config.clone(),
            index: OnceLock::new(),
        })
    }

    /// Encoded index split, built on first use.
    pub fn index(&self) -> Result<&LatentIndex> {
        if let Some(index) = self.index.get() {
            return Ok(index);
        }
        let split = self.config.index_split;
        let data = if split == self.poi_data.split() {
            self.poi_data.clone()
        } else {
            make_dataset(&self.config.data_dir, self.dataset, split)?
        };
        let started = std::time::Instant::now();
        let built = LatentIndex::build(&data, &self.vae.vae);
        log::info!("encoded {} {} {split} items in {:.1?}", built.len(), self.dataset, started.elapsed());
        Ok(self.index.get_or_init(|| built))
    }

    pub fn point_of_interest(&self, dataset_index: usize) -> Result<PointOfInterest> {
        PointOfInterest::from_dataset(&self.poi_data, dataset_index, &self.vae.vae, &self.classifier.classifier)
    }

    pub fn mispredictions(&self, limit: usize) -> Vec<Misprediction> {
        find_mispredictions(&self.poi_data, &self.classifier.classifier, limit)
    }

    pub fn explain(&self, poi: &PointOfInterest, spec: &NeighborhoodSpec) -> Result<Exploration> {
        let index = match spec {
            NeighborhoodSpec::Morph { .. } => Some(self.index()?),
            _ => None,
        };
        explore(poi, spec, index, &self.vae.vae, &self.classifier.classifier)
    }
}
