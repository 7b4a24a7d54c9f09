//! Download and verify the IDX distribution files.

use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use md5::{Digest, Md5};
use morphscope_core::data::{parse_idx, DatasetName, IdxKind};

use crate::Failure;

pub const MNIST_MIRROR: &str = "https://ossci-datasets.s3.amazonaws.com/mnist/";
pub const FASHION_MIRROR: &str = "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/";

/// Largest compressed file we are willing to buffer.
const DOWNLOAD_LIMIT: u64 = 64 << 20;

#[derive(Clone, Debug)]
pub struct RemoteFile {
    pub name: &'static str,
    pub kind: IdxKind,
    pub gz_md5: &'static str,
    pub raw_size: u64,
}

const fn file(name: &'static str, kind: IdxKind, gz_md5: &'static str, raw_size: u64) -> RemoteFile {
    RemoteFile {
        name,
        kind,
        gz_md5,
        raw_size,
    }
}

pub fn manifest(dataset: DatasetName) -> Vec<RemoteFile> {
    use IdxKind::{Images, Labels};
    match dataset {
        DatasetName::Mnist => vec![
            file("train-images-idx3-ubyte", Images, "f68b3c2dcbeaaa9fbdd348bbdeb94873", 47_040_016),
            file("train-labels-idx1-ubyte", Labels, "d53e105ee54ea40749a09fcbcd1e9432", 60_008),
            file("t10k-images-idx3-ubyte", Images, "9fb629c4189551a2d022fa330f9573f3", 7_840_016),
            file("t10k-labels-idx1-ubyte", Labels, "ec29112dd5afa0611ce80d1b7f02629c", 10_008),
        ],
        DatasetName::FashionMnist => vec![
            file("train-images-idx3-ubyte", Images, "8d4fb7e6c68d591d4c3dfef9ec88bf0d", 47_040_016),
            file("train-labels-idx1-ubyte", Labels, "25c81989df183df01b3e8a0aad5dffbe", 60_008),
            file("t10k-images-idx3-ubyte", Images, "bef4ecab320f06d8554ea6380940ec79", 7_840_016),
            file("t10k-labels-idx1-ubyte", Labels, "bb300cfdad3c16e7a12a480ee83cd310", 10_008),
        ],
    }
}

pub fn default_mirror(dataset: DatasetName) -> &'static str {
    match dataset {
        DatasetName::Mnist => MNIST_MIRROR,
        DatasetName::FashionMnist => FASHION_MIRROR,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Outcome {
    AlreadyPresent,
    Downloaded,
}

/// A present file is valid when it has the expected size and a parseable IDX header.
fn is_valid(path: &Path, spec: &RemoteFile) -> bool {
    match std::fs::read(path) {
        Ok(bytes) => bytes.len() as u64 == spec.raw_size && parse_idx(&bytes, spec.kind).is_ok(),
        Err(_) => false,
    }
}

fn download(url: &str) -> Result<Vec<u8>, Failure> {
    let mut response = ureq::get(url)
        .call()
        .map_err(|e| Failure::Dependency(format!("GET {url}: {e}")))?;
    response
        .body_mut()
        .with_config()
        .limit(DOWNLOAD_LIMIT)
        .read_to_vec()
        .map_err(|e| Failure::Dependency(format!("reading {url}: {e}")))
}

/// Fetches every file in `files` that is not already present and valid.
pub fn fetch_files(dir: &Path, mirror: &str, files: &[RemoteFile]) -> anyhow::Result<Vec<(PathBuf, Outcome)>> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("creating {}: {e}", dir.display())))?;
    let base = mirror.trim_end_matches('/');
    let mut report = Vec::new();
    for spec in files {
        let dest = dir.join(spec.name);
        if is_valid(&dest, spec) {
            log::info!("{} present, skipping", dest.display());
            report.push((dest, Outcome::AlreadyPresent));
            continue;
        }
        let url = format!("{base}/{}.gz", spec.name);
        log::info!("downloading {url}");
        let gz = download(&url)?;
        let digest = format!("{:x}", Md5::digest(&gz));
        if digest != spec.gz_md5 {
            return Err(Failure::Integrity(format!(
                "{url}: md5 {digest} does not match expected {}",
                spec.gz_md5
            ))
            .into());
        }
        let mut raw = Vec::with_capacity(spec.raw_size as usize);
        GzDecoder::new(gz.as_slice())
            .read_to_end(&mut raw)
            .map_err(|e| Failure::Integrity(format!("{url}: bad gzip stream: {e}")))?;
        if raw.len() as u64 != spec.raw_size {
            return Err(Failure::Integrity(format!(
                "{}: {} bytes after decompression, expected {}",
                spec.name,
                raw.len(),
                spec.raw_size
            ))
            .into());
        }
        parse_idx(&raw, spec.kind).map_err(|e| Failure::Integrity(format!("{}: {e}", spec.name)))?;
        let tmp = dest.with_extension("tmp");
        std::fs::write(&tmp, &raw)
            .and_then(|_| std::fs::rename(&tmp, &dest))
            .map_err(|e| Failure::Runtime(format!("writing {}: {e}", dest.display())))?;
        report.push((dest, Outcome::Downloaded));
    }
    Ok(report)
}

pub fn fetch(data_dir: &Path, dataset: DatasetName, mirror: Option<&str>) -> anyhow::Result<Vec<(PathBuf, Outcome)>> {
    let mirror = mirror.unwrap_or(default_mirror(dataset));
    fetch_files(&data_dir.join(dataset.as_str()), mirror, &manifest(dataset))
}
