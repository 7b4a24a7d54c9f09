//! Dataset ingestion: IDX files, normalization and splits.

mod dataset;
pub mod idx;

pub use dataset::{
    make_dataset, normalize, split_files, Dataset, DatasetName, Image, Split, IMAGE_PIXELS,
    IMAGE_SIDE, NUM_CLASSES,
};
pub use idx::{encode_idx, load_idx, parse_idx, IdxData, IdxKind};
