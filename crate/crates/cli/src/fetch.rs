use std::fs;
use std::io::Read;
use std::path::Path;

use anyhow::{bail, Context, Result};
use cskd::data::DatasetName;
use flate2::read::GzDecoder;

const MNIST_TARBALL: &str = "https://registry.npmjs.org/mnist-data/-/mnist-data-1.2.6.tgz";
const FASHION_BASE: &str = "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com";
const CIFAR10_TARBALL: &str = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz";
const IDX_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

fn download(url: &str) -> Result<Vec<u8>> {
    log::info!("downloading {url}");
    let resp = reqwest::blocking::Client::builder()
        .timeout(std::time::Duration::from_secs(600))
        .build()?
        .get(url)
        .send()
        .with_context(|| format!("request to {url} failed"))?;
    if !resp.status().is_success() {
        bail!("{url}: HTTP {}", resp.status());
    }
    Ok(resp.bytes()?.to_vec())
}

/// Extracts entries whose file name satisfies `keep` into `root`, flat.
fn untar_gz(bytes: &[u8], root: &Path, keep: impl Fn(&str) -> bool) -> Result<usize> {
    let mut archive = tar::Archive::new(GzDecoder::new(bytes));
    let mut n = 0;
    for entry in archive.entries()? {
        let mut entry = entry?;
        let path = entry.path()?.into_owned();
        let Some(name) = path.file_name().and_then(|s| s.to_str()).map(str::to_owned) else {
            continue;
        };
        if entry.header().entry_type().is_file() && keep(&name) {
            let mut buf = Vec::new();
            entry.read_to_end(&mut buf)?;
            fs::write(root.join(&name), buf)?;
            n += 1;
        }
    }
    Ok(n)
}

pub fn fetch(dataset: DatasetName, root: &Path) -> Result<()> {
    fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
    match dataset {
        DatasetName::Mnist => {
            let bytes = download(MNIST_TARBALL)?;
            let n = untar_gz(&bytes, root, |name| IDX_FILES.contains(&name))?;
            if n != 4 {
                bail!("MNIST archive held {n} of 4 expected files");
            }
        }
        DatasetName::FashionMnist => {
            for f in IDX_FILES {
                let gz = download(&format!("{FASHION_BASE}/{f}.gz"))?;
                let mut out = Vec::new();
                GzDecoder::new(gz.as_slice()).read_to_end(&mut out)?;
                fs::write(root.join(f), out)?;
            }
        }
        DatasetName::Cifar10 => {
            let bytes = download(CIFAR10_TARBALL)?;
            let n = untar_gz(&bytes, root, |name| name.ends_with(".bin"))?;
            if n < 6 {
                bail!("CIFAR-10 archive held {n} batch files, expected 6");
            }
        }
    }
    println!("{} ready in {}", dataset.as_str(), root.display());
    Ok(())
}
