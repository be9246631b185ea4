//! On-disk format for condensed (and few-shot) sets: `meta.json`,
//! `images.bin` (f32 LE, record-major) and `labels.bin` (i64 LE).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tch::Tensor;

use super::set::{LabeledImageSet, Normalization, SetMeta, SetSource};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const META_FILE: &str = "meta.json";
pub const IMAGES_FILE: &str = "images.bin";
pub const LABELS_FILE: &str = "labels.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileHashes {
    pub images: String,
    pub labels: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondensedMeta {
    pub format_version: u32,
    pub dataset_name: String,
    pub nc: i64,
    pub spc: Option<usize>,
    pub shape: [i64; 3],
    pub dtype: String,
    pub label_dtype: String,
    pub normalization: Normalization,
    pub source: SetSource,
    pub sha256: FileHashes,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_synced(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))?;
    f.sync_all().map_err(|e| Error::io(path, e))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!(".{name}.{suffix}-{}", std::process::id()))
}

/// Writes the set to directory `path`, replacing any previous content.
/// Files are written and synced in a temporary sibling directory that is
/// then renamed into place.
pub fn save_condensed(set: &LabeledImageSet, path: &Path) -> Result<()> {
    if set.is_empty() {
        return Err(Error::EmptySet);
    }
    set.validate()?;
    let images = set.image_bytes();
    let labels = set.label_bytes();
    let meta = CondensedMeta {
        format_version: FORMAT_VERSION,
        dataset_name: set.meta.dataset_name.clone(),
        nc: set.meta.nc,
        spc: set.meta.spc,
        shape: set.shape(),
        dtype: "f32le".into(),
        label_dtype: "i64le".into(),
        normalization: set.meta.normalization.clone(),
        source: set.meta.source,
        sha256: FileHashes {
            images: sha256_hex(&images),
            labels: sha256_hex(&labels),
        },
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = sibling(path, "tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir(&tmp).map_err(|e| Error::io(&tmp, e))?;
    write_synced(&tmp.join(IMAGES_FILE), &images)?;
    write_synced(&tmp.join(LABELS_FILE), &labels)?;
    let mut json = serde_json::to_vec_pretty(&meta)?;
    json.push(b'\n');
    write_synced(&tmp.join(META_FILE), &json)?;

    let old = sibling(path, "old");
    let had_old = path.exists();
    if had_old {
        fs::rename(path, &old).map_err(|e| Error::io(path, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    if had_old {
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    }
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::load(path, e.to_string()))
}

pub fn read_condensed_meta(dir: &Path) -> Result<CondensedMeta> {
    let p = dir.join(META_FILE);
    let meta: CondensedMeta =
        serde_json::from_slice(&read(&p)?).map_err(|e| Error::load(&p, format!("bad meta.json: {e}")))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::load(&p, format!("unsupported format_version {}", meta.format_version)));
    }
    if meta.dtype != "f32le" || meta.label_dtype != "i64le" {
        return Err(Error::load(
            &p,
            format!("unsupported dtypes {}/{}", meta.dtype, meta.label_dtype),
        ));
    }
    if meta.shape.iter().any(|&d| d < 1) {
        return Err(Error::load(&p, format!("bad shape {:?}", meta.shape)));
    }
    Ok(meta)
}

/// Loads and validates a set written by [`save_condensed`] (or by any tool
/// following the same format).
pub fn load_condensed(dir: &Path) -> Result<LabeledImageSet> {
    let meta = read_condensed_meta(dir)?;
    let ip = dir.join(IMAGES_FILE);
    let lp = dir.join(LABELS_FILE);
    let images = read(&ip)?;
    let labels = read(&lp)?;

    let rec = (meta.shape.iter().product::<i64>() * 4) as usize;
    if images.len() % rec != 0 {
        return Err(Error::load(
            &ip,
            format!("expected a multiple of {rec} bytes, found {}", images.len()),
        ));
    }
    let n = images.len() / rec;
    if labels.len() != n * 8 {
        return Err(Error::load(
            &lp,
            format!("expected {} bytes for {n} records, found {}", n * 8, labels.len()),
        ));
    }
    if sha256_hex(&images) != meta.sha256.images {
        return Err(Error::load(&ip, "checksum mismatch"));
    }
    if sha256_hex(&labels) != meta.sha256.labels {
        return Err(Error::load(&lp, "checksum mismatch"));
    }

    let pixels: Vec<f32> = images
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let labels: Vec<i64> = labels
        .chunks_exact(8)
        .map(|b| i64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let [c, h, w] = meta.shape;
    let tensor = Tensor::from_slice(&pixels).view([n as i64, c, h, w]);
    LabeledImageSet::new(
        tensor,
        labels,
        SetMeta {
            dataset_name: meta.dataset_name,
            nc: meta.nc,
            spc: meta.spc,
            normalization: meta.normalization,
            source: meta.source,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use tch::Kind;

    fn toy(n_per: usize, nc: i64) -> LabeledImageSet {
        let n = n_per as i64 * nc;
        let images = rng::uniform(&mut rng::rng(3), &[n, 1, 4, 4], 0.0, 1.0, Kind::Float);
        let labels = (0..n).map(|i| i % nc).collect();
        LabeledImageSet::new(
            images,
            labels,
            SetMeta {
                dataset_name: "toy".into(),
                nc,
                spc: Some(n_per),
                normalization: Normalization::identity(1),
                source: SetSource::Condensed,
            },
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("set");
        let s = toy(3, 4);
        save_condensed(&s, &p).unwrap();
        let back = load_condensed(&p).unwrap();
        assert!(back.images().equal(s.images()));
        assert_eq!(back.labels(), s.labels());
        assert_eq!(back.meta, s.meta);
    }

    #[test]
    fn rewrite_gives_identical_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("set");
        let s = toy(2, 3);
        save_condensed(&s, &p).unwrap();
        let first: Vec<Vec<u8>> = [META_FILE, IMAGES_FILE, LABELS_FILE]
            .iter()
            .map(|f| fs::read(p.join(f)).unwrap())
            .collect();
        save_condensed(&s, &p).unwrap();
        for (f, bytes) in [META_FILE, IMAGES_FILE, LABELS_FILE].iter().zip(&first) {
            let again = fs::read(p.join(f)).unwrap();
            assert_eq!(sha256_hex(&again), sha256_hex(bytes), "{f}");
        }
        let entries = fs::read_dir(dir.path()).unwrap().count();
        assert_eq!(entries, 1, "temporary directories left behind");
    }

    #[test]
    fn file_sizes_follow_format() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one");
        let s = toy(1, 1);
        save_condensed(&s, &p).unwrap();
        assert_eq!(fs::metadata(p.join(IMAGES_FILE)).unwrap().len(), 16 * 4);
        assert_eq!(fs::metadata(p.join(LABELS_FILE)).unwrap().len(), 8);
        let raw = fs::read(p.join(IMAGES_FILE)).unwrap();
        let first = f32::from_le_bytes(raw[..4].try_into().unwrap());
        assert_eq!(first, s.images().view([-1]).double_value(&[0]) as f32);
    }

    #[test]
    fn empty_set_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let s = LabeledImageSet::new(
            Tensor::zeros([0, 1, 4, 4], (Kind::Float, tch::Device::Cpu)),
            vec![],
            SetMeta {
                dataset_name: "toy".into(),
                nc: 2,
                spc: None,
                normalization: Normalization::identity(1),
                source: SetSource::Condensed,
            },
        )
        .unwrap();
        let err = save_condensed(&s, &dir.path().join("e")).unwrap_err();
        assert_eq!(err.to_string(), "empty set not serializable");
    }

    #[test]
    fn truncated_labels_name_expected_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("set");
        save_condensed(&toy(2, 5), &p).unwrap();
        let lp = p.join(LABELS_FILE);
        let bytes = fs::read(&lp).unwrap();
        fs::write(&lp, &bytes[..bytes.len() - 8]).unwrap();
        let err = load_condensed(&p).unwrap_err().to_string();
        assert!(err.contains("expected 80 bytes"), "{err}");
    }

    #[test]
    fn checksum_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("set");
        save_condensed(&toy(2, 2), &p).unwrap();
        let ip = p.join(IMAGES_FILE);
        let mut bytes = fs::read(&ip).unwrap();
        bytes[5] ^= 0x40;
        fs::write(&ip, bytes).unwrap();
        assert!(load_condensed(&p).unwrap_err().to_string().contains("checksum"));
    }

    fn rewrite_meta(p: &Path, f: impl FnOnce(&mut serde_json::Value)) {
        let mp = p.join(META_FILE);
        let mut v: serde_json::Value = serde_json::from_slice(&fs::read(&mp).unwrap()).unwrap();
        f(&mut v);
        fs::write(&mp, serde_json::to_vec(&v).unwrap()).unwrap();
    }

    #[test]
    fn spc_violation_is_an_invariant_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("set");
        // class 3 gets 9 records, all others 10
        let mut labels: Vec<i64> = (0..10).flat_map(|c| std::iter::repeat(c).take(10)).collect();
        labels[30] = 4;
        let n = labels.len() as i64;
        let s = LabeledImageSet::new(
            Tensor::zeros([n, 1, 2, 2], (Kind::Float, tch::Device::Cpu)),
            labels,
            SetMeta {
                dataset_name: "toy".into(),
                nc: 10,
                spc: None,
                normalization: Normalization::identity(1),
                source: SetSource::Condensed,
            },
        )
        .unwrap();
        save_condensed(&s, &p).unwrap();
        rewrite_meta(&p, |v| v["spc"] = 10.into());
        let err = load_condensed(&p).unwrap_err();
        assert!(matches!(err, Error::Invariant(_)));
        assert!(err.to_string().contains("class 3 has 9 records"), "{err}");
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("set");
        save_condensed(&toy(1, 3), &p).unwrap();
        rewrite_meta(&p, |v| {
            v["nc"] = 2.into();
            v["spc"] = serde_json::Value::Null;
        });
        assert!(load_condensed(&p).unwrap_err().to_string().contains("out of range"));
    }

    #[test]
    fn missing_directory_is_a_load_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_condensed(&dir.path().join("nope")), Err(Error::Load { .. })));
    }
}
