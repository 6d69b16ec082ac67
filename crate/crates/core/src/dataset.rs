//! On-disk datasets: one `GBUF1` blob per sample plus a JSON manifest.

use std::fs;
use std::path::Path;

use gbuf_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::blob::{sha256_hex, Blob, TensorEntry};
use crate::scenegen::{Camera, GBufferSet, SceneSample, StyleTag, CLASS_NAMES, GBUFFER_CHANNELS};
use crate::{Error, Exec, Result};

pub const SAMPLE_MAGIC: &[u8; 5] = b"GBUF1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub index: usize,
    pub file: String,
    pub seed: u64,
    pub style: StyleTag,
    pub height: usize,
    pub width: usize,
    pub camera: Camera,
    pub bytes: usize,
    pub sha256: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub format: String,
    pub channels: Vec<String>,
    pub classes: Vec<String>,
    pub samples: Vec<SampleEntry>,
}

#[derive(Serialize, Deserialize)]
struct SampleMeta {
    index: usize,
    seed: u64,
    style: StyleTag,
    camera: Camera,
}

pub fn sample_to_blob(s: &SceneSample) -> Blob {
    let mut b = Blob {
        tensors: Vec::new(),
        meta: serde_json::to_value(SampleMeta {
            index: s.index,
            seed: s.seed,
            style: s.style,
            camera: s.camera,
        })
        .expect("plain struct"),
    };
    b.push_f64("image", s.image.shape(), s.image.data().to_vec());
    for (name, t) in s.gbuffers.channels() {
        b.push_f64(name, t.shape(), t.data().to_vec());
    }
    let (h, w) = s.hw();
    b.push_u32("labels", &[h, w], s.labels.iter().map(|&l| l as u32).collect());
    b
}

pub fn sample_from_blob(b: &Blob) -> Result<SceneSample> {
    let meta: SampleMeta = serde_json::from_value(b.meta.clone())?;
    let tensor = |name: &str| -> Result<Tensor> {
        let (shape, data) = b.f64(name)?;
        Ok(Tensor::from_vec(shape, data.to_vec())?)
    };
    let (_, labels) = b.u32("labels")?;
    Ok(SceneSample {
        index: meta.index,
        seed: meta.seed,
        style: meta.style,
        camera: meta.camera,
        image: tensor("image")?,
        gbuffers: GBufferSet::from_channels(tensor)?,
        labels: labels.iter().map(|&l| l as usize).collect(),
    })
}

pub fn sample_file_name(index: usize) -> String {
    format!("sample_{index:06}.gbuf")
}

/// Writes every sample and then the manifest; the manifest is the commit point.
pub fn write_dataset(samples: &[SceneSample], dir: &Path, exec: Exec) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let entries = exec.try_map(samples.len(), |i| -> Result<SampleEntry> {
        let s = &samples[i];
        let blob = sample_to_blob(s);
        let bytes = blob.encode(SAMPLE_MAGIC);
        let file = sample_file_name(i);
        fs::write(dir.join(&file), &bytes)?;
        let (height, width) = s.hw();
        Ok(SampleEntry {
            index: i,
            file,
            seed: s.seed,
            style: s.style,
            height,
            width,
            camera: s.camera,
            bytes: bytes.len(),
            sha256: sha256_hex(&bytes),
            tensors: blob.entries(),
        })
    })?;
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        format: String::from_utf8_lossy(SAMPLE_MAGIC).into_owned(),
        channels: GBUFFER_CHANNELS.iter().map(|s| s.to_string()).collect(),
        classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        samples: entries,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let raw = fs::read(&path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let m: Manifest = serde_json::from_slice(&raw)?;
    if m.schema_version != SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "{}: schema version {} (expected {SCHEMA_VERSION})",
            path.display(),
            m.schema_version
        )));
    }
    Ok(m)
}

pub fn read_sample(dir: &Path, entry: &SampleEntry) -> Result<SceneSample> {
    let integrity = |detail: String| Error::Integrity {
        index: entry.index,
        detail,
    };
    let bytes = fs::read(dir.join(&entry.file)).map_err(|e| integrity(format!("{}: {e}", entry.file)))?;
    if bytes.len() != entry.bytes {
        return Err(integrity(format!(
            "{} has {} bytes, manifest says {}",
            entry.file,
            bytes.len(),
            entry.bytes
        )));
    }
    if sha256_hex(&bytes) != entry.sha256 {
        return Err(integrity(format!("{} checksum mismatch", entry.file)));
    }
    let blob = Blob::decode(SAMPLE_MAGIC, &bytes).map_err(|e| integrity(e.to_string()))?;
    sample_from_blob(&blob).map_err(|e| integrity(e.to_string()))
}

/// 8-bit RGB PNG of a `[3, H, W]` image in [0, 1].
pub fn save_png(image: &Tensor, path: &Path) -> Result<()> {
    let (c, h, w) = image.chw()?;
    if c < 3 {
        return Err(crate::shape_err(format!("{c}-channel image cannot be saved as RGB")));
    }
    let mut px = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            px.extend((0..3).map(|ch| (image.at3(ch, y, x) * 255.0).round().clamp(0.0, 255.0) as u8));
        }
    }
    image::RgbImage::from_raw(w as u32, h as u32, px)
        .expect("buffer matches dimensions")
        .save(path)
        .map_err(|e| Error::Io(std::io::Error::other(e)))
}

pub fn read_dataset(dir: &Path, exec: Exec) -> Result<Vec<SceneSample>> {
    let m = read_manifest(dir)?;
    exec.try_map(m.samples.len(), |i| read_sample(dir, &m.samples[i]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_dataset, LayoutConfig};

    fn data() -> Vec<SceneSample> {
        generate_dataset(&LayoutConfig::default(), 3, 11, StyleTag::Target, Exec::Sequential).unwrap()
    }

    #[test]
    fn round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let samples = data();
        let m = write_dataset(&samples, dir.path(), Exec::Parallel).unwrap();
        assert_eq!(m.samples.len(), 3);
        assert_eq!(read_dataset(dir.path(), Exec::Sequential).unwrap(), samples);
    }

    #[test]
    fn manifest_lists_gbuffer_fields() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(&data(), dir.path(), Exec::Sequential).unwrap();
        let fields: Vec<&str> = data()[0].gbuffers.channels().iter().map(|(n, _)| *n).collect();
        assert_eq!(m.channels, fields);
        let names: Vec<&str> = m.samples[0].tensors.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(&names[1..10], &fields[..]);
        assert_eq!(read_manifest(dir.path()).unwrap(), m);
    }

    #[test]
    fn truncation_reports_sample_index() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(&data(), dir.path(), Exec::Sequential).unwrap();
        let victim = dir.path().join(&m.samples[1].file);
        let bytes = fs::read(&victim).unwrap();
        fs::write(&victim, &bytes[..bytes.len() / 2]).unwrap();
        match read_dataset(dir.path(), Exec::Sequential) {
            Err(Error::Integrity { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected integrity error, got {other:?}"),
        }
        // same length, flipped byte
        let mut bad = bytes.clone();
        bad[bytes.len() - 3] ^= 1;
        fs::write(&victim, &bad).unwrap();
        assert!(matches!(read_dataset(dir.path(), Exec::Sequential), Err(Error::Integrity { index: 1, .. })));
    }

    #[test]
    fn byte_identical_datasets_for_equal_seeds() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_dataset(&data(), a.path(), Exec::Parallel).unwrap();
        write_dataset(&data(), b.path(), Exec::Sequential).unwrap();
        for f in ["manifest.json", "sample_000000.gbuf", "sample_000002.gbuf"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
    }
}
