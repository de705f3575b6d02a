//! Directory format: `manifest.json`, `images.bin` (row-major `f32` little
//! endian) and `labels.bin` (`u16` little endian, numbered from 1).

use std::fs;
use std::path::Path;

use super::{DomainDataset, Manifest};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_FORMAT_VERSION: u32 = 1;

const MANIFEST: &str = "manifest.json";
const IMAGES: &str = "images.bin";
const LABELS: &str = "labels.bin";

pub fn save(ds: &DomainDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut manifest = ds.manifest().clone();
    manifest.version = DATASET_FORMAT_VERSION;
    manifest.dtype = "f32le".into();
    let shape = ds.images().shape();
    manifest.shape = [shape[0], shape[1], shape[2], shape[3]];
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::format(dir.join(MANIFEST), e.to_string()))?;
    let path = dir.join(MANIFEST);
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;

    let mut blob = Vec::with_capacity(ds.images().numel() * 4);
    for &v in ds.images().data() {
        blob.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let path = dir.join(IMAGES);
    fs::write(&path, blob).map_err(|e| Error::io(&path, e))?;

    let mut blob = Vec::with_capacity(ds.len() * 2);
    for &l in ds.labels() {
        let l = u16::try_from(l + 1).map_err(|_| Error::Data(format!("label {l} exceeds u16")))?;
        blob.extend_from_slice(&l.to_le_bytes());
    }
    let path = dir.join(LABELS);
    fs::write(&path, blob).map_err(|e| Error::io(&path, e))
}

pub fn load(dir: &Path) -> Result<DomainDataset> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if manifest.version != DATASET_FORMAT_VERSION {
        return Err(Error::format(
            &path,
            format!("unsupported version {}", manifest.version),
        ));
    }
    if manifest.dtype != "f32le" {
        return Err(Error::format(&path, format!("unsupported dtype {:?}", manifest.dtype)));
    }
    let [n, c, h, w] = manifest.shape;
    if c != 3 || n == 0 || h == 0 || w == 0 {
        return Err(Error::format(&path, format!("bad shape {:?}", manifest.shape)));
    }

    let path = dir.join(IMAGES);
    let blob = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let expected = n * c * h * w * 4;
    if blob.len() != expected {
        return Err(Error::format(
            &path,
            format!("expected {expected} bytes for shape {:?}, found {}", manifest.shape, blob.len()),
        ));
    }
    let data = blob
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let images = Tensor::new(&[n, c, h, w], data)?;

    let path = dir.join(LABELS);
    let blob = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if blob.len() != n * 2 {
        return Err(Error::format(
            &path,
            format!("expected {} bytes for {n} labels, found {}", n * 2, blob.len()),
        ));
    }
    let stored: Vec<usize> = blob
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]) as usize)
        .collect();
    let k = manifest.label_count;
    if let Some((i, &l)) = stored.iter().enumerate().find(|(_, &l)| l == 0 || l > k) {
        return Err(Error::format(
            &path,
            format!("label {l} at byte offset {} is outside [1, {k}]", i * 2),
        ));
    }
    let labels = stored.into_iter().map(|l| l - 1).collect();
    DomainDataset::new(images, labels, manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, ShiftSpec};

    fn small() -> DomainDataset {
        generate(3, 8, &ShiftSpec::default_shift(), 5).unwrap().1
    }

    #[test]
    fn round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small();
        save(&ds, dir.path()).unwrap();
        assert_eq!(load(dir.path()).unwrap(), ds);
    }

    #[test]
    fn truncated_images_report_byte_counts() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small();
        save(&ds, dir.path()).unwrap();
        let p = dir.path().join(IMAGES);
        let mut blob = fs::read(&p).unwrap();
        let full = blob.len();
        blob.truncate(full - 10);
        fs::write(&p, blob).unwrap();
        let err = load(dir.path()).unwrap_err().to_string();
        assert!(err.contains(&format!("expected {full} bytes")), "{err}");
        assert!(err.contains(&format!("found {}", full - 10)), "{err}");
    }

    #[test]
    fn unknown_manifest_keys_survive() {
        let dir = tempfile::tempdir().unwrap();
        save(&small(), dir.path()).unwrap();
        let p = dir.path().join(MANIFEST);
        let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
        v["annotator"] = serde_json::json!({"name": "x", "rev": 3});
        fs::write(&p, serde_json::to_string(&v).unwrap()).unwrap();

        let ds = load(dir.path()).unwrap();
        assert_eq!(ds.manifest().extra["annotator"]["rev"], 3);
        let out = tempfile::tempdir().unwrap();
        save(&ds, out.path()).unwrap();
        let again: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.path().join(MANIFEST)).unwrap()).unwrap();
        assert_eq!(again["annotator"], v["annotator"]);
    }

    #[test]
    fn malformed_manifest_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        save(&small(), dir.path()).unwrap();
        fs::write(dir.path().join(MANIFEST), "{\"version\": 1").unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Format { .. })));
    }
}
