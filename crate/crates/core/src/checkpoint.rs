//! Versioned, self-describing checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes            | content                                         |
//! |------------------|-------------------------------------------------|
//! | 8                | magic `MSCKPT\0\0`                              |
//! | 4                | format version (`u32`, currently 1)             |
//! | 8                | header length `L` (`u64`)                       |
//! | L                | UTF-8 JSON header                               |
//! | rest             | tensor payload, `f32` LE, in header order       |
//!
//! The header records the model kind, dataset, architecture, free-form
//! metadata, each tensor's name and shape, and the SHA-256 of the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{Classifier, ClassifierArch, ClassifierTrainConfig, ClassifierTrainReport};
use crate::data::{Dataset, DatasetName};
use crate::error::{Error, Result};
use crate::nn::{Parameters, Tensor};
use crate::vae::{train_vae_model, Vae, VaeArch, VaeTrainConfig, VaeTrainReport};

pub const MAGIC: &[u8; 8] = b"MSCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Vae,
    Classifier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: CheckpointKind,
    pub dataset: DatasetName,
    pub arch: serde_json::Value,
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    pub payload_sha256: String,
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn encode(
    kind: CheckpointKind,
    dataset: DatasetName,
    arch: serde_json::Value,
    metadata: serde_json::Value,
    tensors: &[(String, &Tensor<f32>)],
) -> Vec<u8> {
    let mut payload = Vec::with_capacity(tensors.iter().map(|(_, t)| t.len() * 4).sum());
    for (_, t) in tensors {
        for v in &t.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        kind,
        dataset,
        arch,
        metadata,
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
        payload_sha256: sha256_hex(&payload),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out
}

/// Parses the container and returns its header plus the named tensors.
pub fn decode(bytes: &[u8]) -> Result<(Header, Vec<(String, Tensor<f32>)>)> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let header_end = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[20..header_end])
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let payload = &bytes[header_end..];
    if sha256_hex(payload) != header.payload_sha256 {
        return Err(Error::Checkpoint("payload checksum mismatch".into()));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut offset = 0;
    for entry in &header.tensors {
        let len: usize = entry.shape.iter().product();
        let end = offset + len * 4;
        let chunk = payload
            .get(offset..end)
            .ok_or_else(|| Error::Checkpoint(format!("payload too short for {}", entry.name)))?;
        let data = chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.push((entry.name.clone(), Tensor::from_vec(&entry.shape, data)));
        offset = end;
    }
    if offset != payload.len() {
        return Err(Error::Checkpoint("trailing bytes after payload".into()));
    }
    Ok((header, tensors))
}

/// Copies named tensors into `model`, requiring an exact name and shape match.
fn load_into(model: &mut impl Parameters<f32>, tensors: Vec<(String, Tensor<f32>)>) -> Result<()> {
    let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
    if names.len() != tensors.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            names.len(),
            tensors.len()
        )));
    }
    for ((name, slot), (found, tensor)) in names.iter().zip(model.tensors_mut()).zip(tensors) {
        if *name != found || slot.shape != tensor.shape {
            return Err(Error::Checkpoint(format!(
                "tensor {found} {:?} does not match {name} {:?}",
                tensor.shape, slot.shape
            )));
        }
        *slot = tensor;
    }
    Ok(())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_kind(path: &Path, kind: CheckpointKind) -> Result<(Header, Vec<(String, Tensor<f32>)>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, tensors) = decode(&bytes)?;
    if header.kind != kind {
        return Err(Error::Checkpoint(format!(
            "{} holds a {:?} checkpoint, expected {kind:?}",
            path.display(),
            header.kind
        )));
    }
    Ok((header, tensors))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeMetadata {
    pub config: VaeTrainConfig,
    pub train_items: usize,
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeCheckpoint {
    pub vae: Vae,
    pub dataset: DatasetName,
    pub metadata: VaeMetadata,
}

fn check_latent_dim(dataset: DatasetName, latent_dim: usize) -> Result<()> {
    if latent_dim != dataset.latent_dim() {
        return Err(Error::Argument(format!(
            "{dataset} uses latent dimension {}, got {latent_dim}",
            dataset.latent_dim()
        )));
    }
    Ok(())
}

/// Trains a VAE with the dataset's configured latent dimension.
pub fn train_vae(dataset: &Dataset, config: &VaeTrainConfig) -> Result<VaeCheckpoint> {
    check_latent_dim(dataset.name(), config.latent_dim)?;
    let (vae, VaeTrainReport { epoch_losses }) = train_vae_model(dataset, config)?;
    Ok(VaeCheckpoint {
        vae,
        dataset: dataset.name(),
        metadata: VaeMetadata {
            config: config.clone(),
            train_items: dataset.len(),
            final_loss: *epoch_losses.last().unwrap(),
            epoch_losses,
        },
    })
}

impl VaeCheckpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        encode(
            CheckpointKind::Vae,
            self.dataset,
            serde_json::to_value(self.vae.arch).unwrap(),
            serde_json::to_value(&self.metadata).unwrap(),
            &self.vae.named_tensors(),
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (header, tensors) = read_kind(path.as_ref(), CheckpointKind::Vae)?;
        let arch: VaeArch = serde_json::from_value(header.arch)
            .map_err(|e| Error::Checkpoint(format!("bad VAE arch: {e}")))?;
        check_latent_dim(header.dataset, arch.latent_dim)?;
        let metadata = serde_json::from_value(header.metadata)
            .map_err(|e| Error::Checkpoint(format!("bad VAE metadata: {e}")))?;
        let mut vae = Vae::new(arch, 0);
        load_into(&mut vae, tensors)?;
        Ok(VaeCheckpoint {
            vae,
            dataset: header.dataset,
            metadata,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMetadata {
    pub config: ClassifierTrainConfig,
    pub train_items: usize,
    pub epoch_losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierCheckpoint {
    pub classifier: Classifier,
    pub dataset: DatasetName,
    /// Accuracy on the held-out test split, measured when the checkpoint was made.
    pub test_accuracy: f64,
    pub metadata: ClassifierMetadata,
}

#[derive(Serialize, Deserialize)]
struct ClassifierMetaOnDisk {
    test_accuracy: f64,
    #[serde(flatten)]
    rest: ClassifierMetadata,
}

/// Trains on `train`, then records accuracy on `test`.
pub fn train_classifier(
    train: &Dataset,
    test: &Dataset,
    config: &ClassifierTrainConfig,
    vae: Option<&Vae>,
) -> Result<ClassifierCheckpoint> {
    if train.name() != test.name() {
        return Err(Error::Argument("train and test splits come from different datasets".into()));
    }
    let (classifier, ClassifierTrainReport { epoch_losses }) =
        crate::classifier::train_classifier_model(train, config, vae)?;
    let test_accuracy = crate::classifier::accuracy(test, &classifier);
    Ok(ClassifierCheckpoint {
        classifier,
        dataset: train.name(),
        test_accuracy,
        metadata: ClassifierMetadata {
            config: config.clone(),
            train_items: train.len(),
            epoch_losses,
        },
    })
}

impl ClassifierCheckpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = ClassifierMetaOnDisk {
            test_accuracy: self.test_accuracy,
            rest: self.metadata.clone(),
        };
        encode(
            CheckpointKind::Classifier,
            self.dataset,
            serde_json::to_value(self.classifier.arch()).unwrap(),
            serde_json::to_value(meta).unwrap(),
            &self.classifier.named_tensors(),
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (header, tensors) = read_kind(path.as_ref(), CheckpointKind::Classifier)?;
        let arch: ClassifierArch = serde_json::from_value(header.arch)
            .map_err(|e| Error::Checkpoint(format!("bad classifier arch: {e}")))?;
        let meta: ClassifierMetaOnDisk = serde_json::from_value(header.metadata)
            .map_err(|e| Error::Checkpoint(format!("bad classifier metadata: {e}")))?;
        let mut classifier = match arch {
            ClassifierArch::Cnn { .. } => Classifier::new(arch, 0, None)?,
            ClassifierArch::LatentLinear { latent_dim } => {
                let placeholder = Vae::new(VaeArch::new(latent_dim), 0);
                Classifier::new(arch, 0, Some(&placeholder))?
            }
        };
        load_into(&mut classifier, tensors)?;
        Ok(ClassifierCheckpoint {
            classifier,
            dataset: header.dataset,
            test_accuracy: meta.test_accuracy,
            metadata: meta.rest,
        })
    }
}
