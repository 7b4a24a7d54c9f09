use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::idx::{load_idx, IdxData, IdxKind};
use crate::error::{Error, Result};

pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const NUM_CLASSES: usize = 10;

/// A 28x28 grayscale image with intensities in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != IMAGE_PIXELS {
            return Err(Error::shape(
                format!("{IMAGE_PIXELS} pixels"),
                format!("{} pixels", pixels.len()),
            ));
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Argument(format!("pixel {bad} outside [0,1]")));
        }
        Ok(Image { pixels })
    }

    /// Builds an image from values already known to be in range, e.g. sigmoid outputs.
    pub(crate) fn from_unit_pixels(pixels: Vec<f32>) -> Self {
        debug_assert_eq!(pixels.len(), IMAGE_PIXELS);
        Image { pixels }
    }

    pub fn zeros() -> Self {
        Image {
            pixels: vec![0.0; IMAGE_PIXELS],
        }
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    /// Rescales to `[0, 255]` and rounds.
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|p| (p * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }
}

/// Maps a raw `[0, 255]` raster to an [`Image`] by dividing by 255.
pub fn normalize(raw: &[u8]) -> Result<Image> {
    if raw.len() != IMAGE_PIXELS {
        return Err(Error::shape(
            format!("{IMAGE_PIXELS} raw pixels"),
            raw.len(),
        ));
    }
    Ok(Image {
        pixels: raw.iter().map(|&v| v as f32 / 255.0).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    Mnist,
    FashionMnist,
}

const MNIST_CLASSES: [&str; NUM_CLASSES] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"];
const FASHION_CLASSES: [&str; NUM_CLASSES] = [
    "T-shirt/top",
    "Trouser",
    "Pullover",
    "Dress",
    "Coat",
    "Sandal",
    "Shirt",
    "Sneaker",
    "Bag",
    "Ankle boot",
];

impl DatasetName {
    pub const ALL: [DatasetName; 2] = [DatasetName::Mnist, DatasetName::FashionMnist];

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetName::Mnist => "mnist",
            DatasetName::FashionMnist => "fashion_mnist",
        }
    }

    /// Default VAE latent dimension for this dataset.
    pub fn latent_dim(self) -> usize {
        match self {
            DatasetName::Mnist => 10,
            DatasetName::FashionMnist => 20,
        }
    }

    pub fn class_names(self) -> &'static [&'static str; NUM_CLASSES] {
        match self {
            DatasetName::Mnist => &MNIST_CLASSES,
            DatasetName::FashionMnist => &FASHION_CLASSES,
        }
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetName::Mnist),
            "fashion_mnist" | "fashion-mnist" | "fashionmnist" => Ok(DatasetName::FashionMnist),
            other => Err(Error::NotFound(format!("unknown dataset {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    /// File-name prefix used by the standard distribution.
    pub fn file_prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" | "t10k" => Ok(Split::Test),
            other => Err(Error::Argument(format!("unknown split {other:?}"))),
        }
    }
}

/// Paths of the image and label files for one split under `data_dir/<name>/`.
pub fn split_files(data_dir: &Path, name: DatasetName, split: Split) -> (PathBuf, PathBuf) {
    let dir = data_dir.join(name.as_str());
    let prefix = split.file_prefix();
    (
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

/// Labelled images from one split of one dataset. Labels are 0-based.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    name: DatasetName,
    split: Split,
    images: Vec<Image>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(name: DatasetName, split: Split, images: Vec<Image>, labels: Vec<u8>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Consistency(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Consistency(format!("label {bad} out of range")));
        }
        Ok(Dataset {
            name,
            split,
            images,
            labels,
        })
    }

    pub fn name(&self) -> DatasetName {
        self.name
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn image(&self, index: usize) -> Option<&Image> {
        self.images.get(index)
    }

    pub fn label(&self, index: usize) -> Option<usize> {
        self.labels.get(index).map(|&l| l as usize)
    }

    /// The first `n` items (or all, if fewer).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            name: self.name,
            split: self.split,
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name,
            split: self.split,
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Splits off the trailing `fraction` of items as a validation set.
    pub fn split_validation(self, fraction: f64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Argument(format!(
                "validation fraction {fraction} not in [0,1)"
            )));
        }
        let keep = self.len() - (self.len() as f64 * fraction).floor() as usize;
        let mut train = self;
        let val_images = train.images.split_off(keep);
        let val_labels = train.labels.split_off(keep);
        let val = Dataset {
            name: train.name,
            split: train.split,
            images: val_images,
            labels: val_labels,
        };
        Ok((train, val))
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }
}

/// Loads one split of a dataset from `data_dir/<name>/` in IDX format.
pub fn make_dataset(data_dir: impl AsRef<Path>, name: DatasetName, split: Split) -> Result<Dataset> {
    let (image_path, label_path) = split_files(data_dir.as_ref(), name, split);
    let raw_images = load_idx(&image_path, IdxKind::Images)?;
    let raw_labels = load_idx(&label_path, IdxKind::Labels)?;
    let IdxData::Images { count, rows, cols, .. } = &raw_images else {
        unreachable!("load_idx(Images) returns images");
    };
    if (*rows, *cols) != (IMAGE_SIDE, IMAGE_SIDE) {
        return Err(Error::shape("28x28 rasters", format!("{rows}x{cols}")));
    }
    if raw_labels.len() != *count {
        return Err(Error::Consistency(format!(
            "{} declares {count} images but {} declares {} labels",
            image_path.display(),
            label_path.display(),
            raw_labels.len()
        )));
    }
    let images = (0..*count)
        .map(|i| normalize(raw_images.raster(i).unwrap()))
        .collect::<Result<Vec<_>>>()?;
    let IdxData::Labels(labels) = raw_labels else {
        unreachable!("load_idx(Labels) returns labels");
    };
    Dataset::new(name, split, images, labels)
}
