//! Loaders for standard archive files on disk: MNIST and Fashion-MNIST in
//! IDX format (optionally gzipped) and CIFAR-10 binary batches.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use tch::Tensor;

use crate::error::{Error, Result};
use crate::guidance::{LabeledImageSet, Normalization, SetMeta, SetSource};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetName {
    Mnist,
    FashionMnist,
    Cifar10,
}

impl DatasetName {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mnist" => Ok(DatasetName::Mnist),
            "fashion-mnist" | "fashionmnist" | "fashion_mnist" => Ok(DatasetName::FashionMnist),
            "cifar10" | "cifar-10" => Ok(DatasetName::Cifar10),
            other => Err(Error::Config(format!(
                "unknown dataset `{other}`; expected mnist, fashion-mnist or cifar10"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetName::Mnist => "mnist",
            DatasetName::FashionMnist => "fashion-mnist",
            DatasetName::Cifar10 => "cifar10",
        }
    }

    pub fn normalization(self) -> Normalization {
        match self {
            DatasetName::Mnist => Normalization {
                mean: vec![0.1307],
                std: vec![0.3081],
            },
            DatasetName::FashionMnist => Normalization {
                mean: vec![0.2860],
                std: vec![0.3530],
            },
            DatasetName::Cifar10 => Normalization {
                mean: vec![0.4914, 0.4822, 0.4465],
                std: vec![0.2470, 0.2435, 0.2616],
            },
        }
    }

    pub fn input_shape(self) -> [i64; 3] {
        match self {
            DatasetName::Mnist | DatasetName::FashionMnist => [1, 28, 28],
            DatasetName::Cifar10 => [3, 32, 32],
        }
    }

    pub fn num_classes(self) -> i64 {
        10
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: DatasetName,
    pub train: LabeledImageSet,
    pub test: LabeledImageSet,
}

/// Loads a dataset from `root`. With `subset_size`, the training split is
/// reduced to a seeded random subset of that size.
pub fn load_dataset(
    name: DatasetName,
    root: &Path,
    subset_size: Option<usize>,
    seed: u64,
) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::Missing(format!(
            "dataset root {} does not exist (run `cskd fetch {}`)",
            root.display(),
            name.as_str()
        )));
    }
    let (train, test) = match name {
        DatasetName::Mnist | DatasetName::FashionMnist => {
            let train = load_idx_pair(root, "train", name)?;
            let test = load_idx_pair(root, "t10k", name)?;
            (train, test)
        }
        DatasetName::Cifar10 => {
            let dir = if root.join("cifar-10-batches-bin").is_dir() {
                root.join("cifar-10-batches-bin")
            } else {
                root.to_path_buf()
            };
            let files: Vec<PathBuf> = (1..=5)
                .map(|i| dir.join(format!("data_batch_{i}.bin")))
                .collect();
            let train = load_cifar_batches(&files, name)?;
            let test = load_cifar_batches(&[dir.join("test_batch.bin")], name)?;
            (train, test)
        }
    };
    let train = match subset_size {
        Some(n) if n < train.len() => {
            let mut idx: Vec<usize> = (0..train.len()).collect();
            idx.shuffle(&mut rng::rng(rng::derive(seed, "subset", 0)));
            idx.truncate(n);
            idx.sort_unstable();
            train.select(&idx, train.meta.clone())?
        }
        _ => train,
    };
    Ok(Dataset { name, train, test })
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let gz = PathBuf::from(format!("{}.gz", path.display()));
    if path.is_file() {
        fs::read(path).map_err(|e| Error::io(path, e))
    } else if gz.is_file() {
        let raw = fs::read(&gz).map_err(|e| Error::io(&gz, e))?;
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(&gz, e))?;
        Ok(out)
    } else {
        Err(Error::Missing(format!("{} (or .gz)", path.display())))
    }
}

fn be_u32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Parses an IDX3 image file into `(n, rows, cols, pixels)`.
pub fn parse_idx_images(path: &Path, bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    if bytes.len() < 16 || be_u32(bytes, 0) != 2051 {
        return Err(Error::load(path, "not an IDX3 image file (magic 2051)"));
    }
    let n = be_u32(bytes, 4) as usize;
    let rows = be_u32(bytes, 8) as usize;
    let cols = be_u32(bytes, 12) as usize;
    let expected = 16 + n * rows * cols;
    if bytes.len() != expected {
        return Err(Error::load(
            path,
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    Ok((n, rows, cols, bytes[16..].to_vec()))
}

pub fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<i64>> {
    if bytes.len() < 8 || be_u32(bytes, 0) != 2049 {
        return Err(Error::load(path, "not an IDX1 label file (magic 2049)"));
    }
    let n = be_u32(bytes, 4) as usize;
    if bytes.len() != 8 + n {
        return Err(Error::load(
            path,
            format!("expected {} bytes, found {}", 8 + n, bytes.len()),
        ));
    }
    Ok(bytes[8..].iter().map(|&b| b as i64).collect())
}

fn load_idx_pair(root: &Path, prefix: &str, name: DatasetName) -> Result<LabeledImageSet> {
    let ip = root.join(format!("{prefix}-images-idx3-ubyte"));
    let lp = root.join(format!("{prefix}-labels-idx1-ubyte"));
    let (n, rows, cols, pixels) = parse_idx_images(&ip, &read_maybe_gz(&ip)?)?;
    let labels = parse_idx_labels(&lp, &read_maybe_gz(&lp)?)?;
    if labels.len() != n {
        return Err(Error::load(&lp, format!("{} labels for {n} images", labels.len())));
    }
    let images = Tensor::from_slice(&pixels)
        .reshape([n as i64, 1, rows as i64, cols as i64])
        .to_kind(tch::Kind::Float)
        / 255.0;
    LabeledImageSet::new(images, labels, real_meta(name))
}

fn load_cifar_batches(files: &[PathBuf], name: DatasetName) -> Result<LabeledImageSet> {
    const REC: usize = 1 + 3072;
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for f in files {
        let bytes = fs::read(f).map_err(|e| Error::io(f, e))?;
        if bytes.len() % REC != 0 {
            return Err(Error::load(f, format!("size {} is not a multiple of {REC}", bytes.len())));
        }
        for rec in bytes.chunks_exact(REC) {
            labels.push(rec[0] as i64);
            pixels.extend_from_slice(&rec[1..]);
        }
    }
    let n = labels.len() as i64;
    let images = Tensor::from_slice(&pixels)
        .reshape([n, 3, 32, 32])
        .to_kind(tch::Kind::Float)
        / 255.0;
    LabeledImageSet::new(images, labels, real_meta(name))
}

fn real_meta(name: DatasetName) -> SetMeta {
    SetMeta {
        dataset_name: name.as_str().to_string(),
        nc: name.num_classes(),
        spc: None,
        normalization: name.normalization(),
        source: SetSource::Real,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, rows: u32, cols: u32) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [2051u32, n, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend((0..n * rows * cols).map(|i| (i % 256) as u8));
        b
    }

    #[test]
    fn idx_roundtrip_and_truncation() {
        let p = Path::new("x");
        let bytes = idx_images(2, 3, 3);
        let (n, r, c, px) = parse_idx_images(p, &bytes).unwrap();
        assert_eq!((n, r, c, px.len()), (2, 3, 3, 18));
        let err = parse_idx_images(p, &bytes[..bytes.len() - 1]).unwrap_err();
        assert!(err.to_string().contains("expected 34 bytes"), "{err}");
    }

    #[test]
    fn labels_magic_checked() {
        let mut b = vec![];
        b.extend_from_slice(&2051u32.to_be_bytes());
        b.extend_from_slice(&0u32.to_be_bytes());
        assert!(parse_idx_labels(Path::new("l"), &b).is_err());
    }

    #[test]
    fn missing_root_is_reported() {
        let err = load_dataset(DatasetName::Mnist, Path::new("/nonexistent/mnist"), None, 0).unwrap_err();
        assert!(err.to_string().contains("fetch"));
    }

    #[test]
    fn parses_names() {
        assert_eq!(DatasetName::parse("MNIST").unwrap(), DatasetName::Mnist);
        assert!(DatasetName::parse("svhn").is_err());
    }
}
