//! Label providers and the on-disk label cache.

use std::fs;
use std::path::{Path, PathBuf};

use gbuf_autodiff::Tensor;

use crate::blob::{sha256_hex, Blob};
use crate::scenegen::{SceneSample, NUM_CLASSES};
use crate::{Error, Result};

pub const LABEL_MAGIC: &[u8; 5] = b"GLBL1";

/// Produces a class map for a dataset image (real or unmodified rendered).
pub trait LabelProvider: Send + Sync {
    fn num_classes(&self) -> usize;
    fn labels(&self, sample: &SceneSample) -> Result<Vec<usize>>;
}

/// The generator's own per-pixel classes.
#[derive(Clone, Copy, Debug, Default)]
pub struct GroundTruthLabels;

impl LabelProvider for GroundTruthLabels {
    fn num_classes(&self) -> usize {
        NUM_CLASSES
    }

    fn labels(&self, sample: &SceneSample) -> Result<Vec<usize>> {
        Ok(sample.labels.clone())
    }
}

/// Content hash of an image, used as the cache key.
pub fn image_key(image: &Tensor) -> String {
    let mut bytes = Vec::with_capacity(image.len() * 8 + 24);
    for d in image.shape() {
        bytes.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    for v in image.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    sha256_hex(&bytes)
}

/// Serves label maps from one file per image, filling misses from `inner`.
pub struct CachedLabels<P> {
    dir: PathBuf,
    inner: P,
}

impl<P: LabelProvider> CachedLabels<P> {
    pub fn new(dir: impl Into<PathBuf>, inner: P) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir, inner })
    }

    pub fn path_for(&self, image: &Tensor) -> PathBuf {
        self.dir.join(format!("{}.lbl", image_key(image)))
    }

    pub fn read(&self, path: &Path, expected_len: usize) -> Result<Vec<usize>> {
        let blob = Blob::decode(LABEL_MAGIC, &fs::read(path)?)?;
        let (_, labels) = blob.u32("labels")?;
        if labels.len() != expected_len {
            return Err(Error::Config(format!("{}: wrong label map size", path.display())));
        }
        Ok(labels.iter().map(|&l| l as usize).collect())
    }

    pub fn write(&self, path: &Path, h: usize, w: usize, labels: &[usize]) -> Result<()> {
        let mut blob = Blob::default();
        blob.push_u32("labels", &[h, w], labels.iter().map(|&l| l as u32).collect());
        fs::write(path, blob.encode(LABEL_MAGIC))?;
        Ok(())
    }
}

impl<P: LabelProvider> LabelProvider for CachedLabels<P> {
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn labels(&self, sample: &SceneSample) -> Result<Vec<usize>> {
        let (h, w) = sample.hw();
        let path = self.path_for(&sample.image);
        if path.exists() {
            return self.read(&path, h * w);
        }
        let labels = self.inner.labels(sample)?;
        self.write(&path, h, w, &labels)?;
        Ok(labels)
    }
}

/// Fills the cache for every sample; returns the cache files in order.
pub fn precompute_labels<P: LabelProvider>(samples: &[SceneSample], cache: &CachedLabels<P>) -> Result<Vec<PathBuf>> {
    samples
        .iter()
        .map(|s| {
            cache.labels(s)?;
            Ok(cache.path_for(&s.image))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_dataset, LayoutConfig, StyleTag};
    use crate::Exec;

    #[test]
    fn cache_matches_fresh_labels() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate_dataset(&LayoutConfig::default(), 4, 2, StyleTag::Target, Exec::Sequential).unwrap();
        let cache = CachedLabels::new(dir.path(), GroundTruthLabels).unwrap();
        let files = precompute_labels(&data, &cache).unwrap();
        assert!(files.iter().all(|f| f.exists()));
        // a second provider reading only from disk
        let reread = CachedLabels::new(dir.path(), GroundTruthLabels).unwrap();
        for s in &data {
            assert_eq!(reread.labels(s).unwrap(), GroundTruthLabels.labels(s).unwrap());
        }
        assert_ne!(image_key(&data[0].image), image_key(&data[1].image));
    }
}
