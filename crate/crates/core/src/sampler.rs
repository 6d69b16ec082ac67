//! Patch crops, patch embeddings and cross-dataset matching.

use std::fs;
use std::path::{Path, PathBuf};

use gbuf_autodiff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::PerceptualBackbone;
use crate::blob::Blob;
use crate::scenegen::SceneSample;
use crate::{shape_err, Error, Exec, Result};

pub const EMBED_MAGIC: &[u8; 5] = b"GEMB1";
pub const DEFAULT_THRESHOLD: f64 = 0.5;
const UNIT_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingPolicy {
    Uniform,
    Matched,
}

/// A square crop of one image in a dataset.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchRef {
    pub dataset: String,
    pub image: usize,
    pub x: usize,
    pub y: usize,
    pub side: usize,
}

impl PatchRef {
    pub fn pixels(&self, image: &Tensor) -> Result<Tensor> {
        Ok(image.crop(self.y, self.x, self.side, self.side)?)
    }
}

pub fn crop_area_ratio(crop: usize, h: usize, w: usize) -> f64 {
    (crop * crop) as f64 / (h * w) as f64
}

fn check_crop(crop: usize, h: usize, w: usize) -> Result<()> {
    if crop == 0 || crop > h.min(w) {
        return Err(Error::Config(format!("crop {crop} does not fit a {h}x{w} image")));
    }
    Ok(())
}

/// A uniformly placed crop.
pub fn random_patch<R: Rng + ?Sized>(dataset: &str, image: usize, h: usize, w: usize, crop: usize, rng: &mut R) -> Result<PatchRef> {
    check_crop(crop, h, w)?;
    Ok(PatchRef {
        dataset: dataset.to_string(),
        image,
        x: rng.random_range(0..=w - crop),
        y: rng.random_range(0..=h - crop),
        side: crop,
    })
}

/// `count` i.i.d. crop positions in one sample. Both policies draw positions
/// the same way; matching happens afterwards on the embeddings.
pub fn crop_patches<R: Rng + ?Sized>(
    dataset: &str,
    sample: &SceneSample,
    _policy: SamplingPolicy,
    crop: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<PatchRef>> {
    let (h, w) = sample.hw();
    (0..count).map(|_| random_patch(dataset, sample.index, h, w, crop, rng)).collect()
}

/// Rescales to unit length. Vectors already of norm exactly 1 are returned
/// untouched so that stored embeddings round-trip bit-exactly.
pub fn normalize(v: &mut [f64]) -> Result<()> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !n.is_finite() || n == 0.0 {
        return Err(Error::NonFinite(format!("cannot normalize vector of norm {n}")));
    }
    if n != 1.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    Ok(())
}

/// Deepest-tap feature of a receptive-field sized patch, averaged over
/// space and scaled to unit length.
pub fn embed_patch(pixels: &Tensor, backbone: &dyn PerceptualBackbone) -> Result<Vec<f64>> {
    let (c, h, w) = pixels.chw()?;
    let rf = backbone.receptive_field();
    if c != 3 || h != rf || w != rf {
        return Err(shape_err(format!("patch {c}x{h}x{w}, expected 3x{rf}x{rf}")));
    }
    let taps = backbone.features(pixels)?;
    let deep = taps.last().ok_or_else(|| shape_err("backbone has no taps"))?;
    let (dc, dh, dw) = deep.chw()?;
    let mut v: Vec<f64> = (0..dc).map(|ch| deep.channel(ch).iter().sum::<f64>() / (dh * dw) as f64).collect();
    normalize(&mut v)?;
    Ok(v)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Exhaustive cosine index over unit-normalized real-patch embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchIndex {
    dim: usize,
    rows: Vec<f64>,
    threshold: f64,
}

impl MatchIndex {
    pub fn build(embeddings: &[Vec<f64>], threshold: f64) -> Result<Self> {
        let dim = embeddings.first().map_or(0, Vec::len);
        let mut rows = Vec::with_capacity(embeddings.len() * dim);
        for e in embeddings {
            if e.len() != dim {
                return Err(shape_err(format!("embedding of length {} in a {dim}-d index", e.len())));
            }
            let mut e = e.clone();
            normalize(&mut e)?;
            rows.extend(e);
        }
        Ok(Self { dim, rows, threshold })
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 { 0 } else { self.rows.len() / self.dim }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    /// Indices of all rows with cosine strictly above the threshold.
    pub fn query(&self, phi: &[f64]) -> Result<Vec<usize>> {
        if self.is_empty() {
            return Ok(Vec::new());
        }
        if phi.len() != self.dim {
            return Err(shape_err(format!("query of length {} in a {}-d index", phi.len(), self.dim)));
        }
        let norm = phi.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(Error::Precondition(format!("query norm {norm} is not 1")));
        }
        Ok((0..self.len()).filter(|&i| cosine(self.row(i), phi) > self.threshold).collect())
    }

    /// Highest cosine against any row; diagnostics only.
    pub fn best(&self, phi: &[f64]) -> f64 {
        (0..self.len()).map(|i| cosine(self.row(i), phi)).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Subtracts the mean of both sets from every row and renormalizes.
/// Post-ReLU pooled features share a large positive component, and without
/// this nearly every pair has cosine above 0.9.
pub fn center_pooled(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let Some(dim) = a.iter().chain(b).map(Vec::len).next() else {
        return Ok((Vec::new(), Vec::new()));
    };
    let mut mean = vec![0.0; dim];
    for v in a.iter().chain(b) {
        if v.len() != dim {
            return Err(shape_err(format!("embedding of length {} among {dim}-d rows", v.len())));
        }
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    let n = (a.len() + b.len()) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let center = |rows: &[Vec<f64>]| {
        rows.iter()
            .map(|v| {
                let mut c: Vec<f64> = v.iter().zip(&mean).map(|(x, m)| x - m).collect();
                normalize(&mut c)?;
                Ok(c)
            })
            .collect::<Result<Vec<_>>>()
    };
    Ok((center(a)?, center(b)?))
}

/// Match sets for every synthetic patch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchTable {
    pub threshold: f64,
    pub num_real: usize,
    pub matches: Vec<Vec<usize>>,
    /// Best cosine seen by each synthetic patch.
    pub best: Vec<f64>,
}

impl MatchTable {
    pub fn build(index: &MatchIndex, synthetic: &[Vec<f64>], exec: Exec) -> Result<Self> {
        let matches = exec.try_map(synthetic.len(), |i| index.query(&synthetic[i]))?;
        let best = exec.map(synthetic.len(), |i| index.best(&synthetic[i]));
        Ok(Self { threshold: index.threshold(), num_real: index.len(), matches, best })
    }

    /// Centers both sets on their pooled mean, then matches every synthetic
    /// row against the real rows.
    pub fn centered(synthetic: &[Vec<f64>], real: &[Vec<f64>], threshold: f64, exec: Exec) -> Result<Self> {
        let (syn, real) = center_pooled(synthetic, real)?;
        Self::build(&MatchIndex::build(&real, threshold)?, &syn, exec)
    }

    pub fn matched_count(&self) -> usize {
        self.matches.iter().filter(|m| !m.is_empty()).count()
    }
}

/// Draws synthetic-first training pairs from a match table.
#[derive(Clone, Debug)]
pub struct PairSampler {
    table: MatchTable,
    eligible: Vec<usize>,
}

impl PairSampler {
    pub fn new(table: MatchTable) -> Result<Self> {
        let eligible: Vec<usize> = (0..table.matches.len()).filter(|&i| !table.matches[i].is_empty()).collect();
        if eligible.is_empty() {
            let best = table.best.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            return Err(Error::SamplingExhausted(format!(
                "none of {} synthetic patches has a match among {} real patches at threshold {} (best cosine {best})",
                table.matches.len(),
                table.num_real,
                table.threshold
            )));
        }
        Ok(Self { table, eligible })
    }

    /// Synthetic patches excluded for lack of any match.
    pub fn skipped(&self) -> usize {
        self.table.matches.len() - self.eligible.len()
    }

    pub fn table(&self) -> &MatchTable {
        &self.table
    }

    /// `(synthetic index, real index)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        let s = self.eligible[rng.random_range(0..self.eligible.len())];
        let m = &self.table.matches[s];
        (s, m[rng.random_range(0..m.len())])
    }
}

pub fn sample_training_pair<R: Rng + ?Sized>(sampler: &PairSampler, rng: &mut R) -> (usize, usize) {
    sampler.sample(rng)
}

/// Patch locations with their unit embeddings, one row each.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    pub backbone: String,
    pub patches: Vec<PatchRef>,
    pub dim: usize,
    pub data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RowManifest {
    format: String,
    backbone: String,
    dim: usize,
    payload_sha256: String,
    rows: Vec<PatchRef>,
}

impl EmbeddingStore {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.patches.len()).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
        (dir.join(format!("{name}.gemb")), dir.join(format!("{name}.json")))
    }

    pub fn write(&self, dir: &Path, name: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut blob = Blob::default();
        blob.push_f64("embeddings", &[self.patches.len(), self.dim], self.data.clone());
        let bytes = blob.encode(EMBED_MAGIC);
        let (bin, json) = Self::paths(dir, name);
        fs::write(&bin, &bytes)?;
        let manifest = RowManifest {
            format: "GEMB1".into(),
            backbone: self.backbone.clone(),
            dim: self.dim,
            payload_sha256: crate::blob::sha256_hex(&bytes),
            rows: self.patches.clone(),
        };
        fs::write(json, serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn read(dir: &Path, name: &str) -> Result<Self> {
        let (bin, json) = Self::paths(dir, name);
        let manifest: RowManifest = serde_json::from_slice(&fs::read(json)?)?;
        let bytes = fs::read(bin)?;
        if crate::blob::sha256_hex(&bytes) != manifest.payload_sha256 {
            return Err(Error::Precondition(format!("embedding store {name} does not match its row manifest")));
        }
        let blob = Blob::decode(EMBED_MAGIC, &bytes)?;
        let (shape, data) = blob.f64("embeddings")?;
        if shape != [manifest.rows.len(), manifest.dim] {
            return Err(shape_err(format!("embedding matrix {shape:?} for {} rows", manifest.rows.len())));
        }
        let store = Self { backbone: manifest.backbone, patches: manifest.rows, dim: manifest.dim, data: data.to_vec() };
        for i in 0..store.len() {
            let n = store.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            if (n - 1.0).abs() > UNIT_TOL {
                return Err(Error::Precondition(format!("row {i} has norm {n}")));
            }
        }
        Ok(store)
    }
}

/// Crops `per_image` random receptive-field patches from every sample and
/// embeds them. Positions depend only on `seed` and the sample index.
pub fn embed_dataset(
    dataset: &str,
    samples: &[SceneSample],
    per_image: usize,
    backbone: &dyn PerceptualBackbone,
    backbone_id: &str,
    seed: u64,
    exec: Exec,
) -> Result<EmbeddingStore> {
    let crop = backbone.receptive_field();
    let per_sample = exec.try_map(samples.len(), |i| {
        let s = &samples[i];
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (s.index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let patches = crop_patches(dataset, s, SamplingPolicy::Matched, crop, per_image, &mut rng)?;
        let embs = patches.iter().map(|p| embed_patch(&p.pixels(&s.image)?, backbone)).collect::<Result<Vec<_>>>()?;
        Ok::<_, Error>((patches, embs))
    })?;
    let dim = backbone.tap_channels().last().copied().unwrap_or(0);
    let mut store = EmbeddingStore { backbone: backbone_id.to_string(), patches: Vec::new(), dim, data: Vec::new() };
    for (patches, embs) in per_sample {
        store.patches.extend(patches);
        store.data.extend(embs.into_iter().flatten());
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, RandomConvBackbone};
    use crate::scenegen::{generate_dataset, LayoutConfig, StyleTag};
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        normalize(&mut v).unwrap();
        v
    }

    #[test]
    fn paper_scale_crop_area() {
        let r = crop_area_ratio(196, 526, 1052);
        assert!((r - 0.07).abs() < 0.005, "{r}");
    }

    #[test]
    fn full_size_crop_has_one_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let p = random_patch("a", 0, 16, 16, 16, &mut rng).unwrap();
            assert_eq!((p.x, p.y), (0, 0));
        }
        assert!(matches!(random_patch("a", 0, 16, 20, 17, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn brute_force_match_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // Correlated around a few centers so that matches actually occur.
        let centers: Vec<Vec<f64>> = (0..4).map(|_| random_unit(&mut rng, 512)).collect();
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|i| {
                let noise = random_unit(&mut rng, 512);
                let mut v: Vec<f64> = centers[i % 4].iter().zip(&noise).map(|(c, n)| c + 0.9 * n).collect();
                normalize(&mut v).unwrap();
                v
            })
            .collect();
        let index = MatchIndex::build(&rows, 0.5).unwrap();
        let mut total = 0;
        for q in &rows {
            let got = index.query(q).unwrap();
            let mut want = Vec::new();
            for (j, r) in rows.iter().enumerate() {
                let mut dot = 0.0;
                for k in 0..512 {
                    dot += q[k] * r[k];
                }
                if dot > 0.5 {
                    want.push(j);
                }
            }
            assert_eq!(got, want);
            total += got.len();
        }
        assert!(total > 200, "only self matches: {total}");
    }

    #[test]
    fn threshold_is_strict() {
        let index = MatchIndex::build(&[vec![1.0, 0.0]], 0.5).unwrap();
        let half = [0.5, 0.75f64.sqrt()];
        assert_eq!(cosine(index.row(0), &half), 0.5);
        assert!(index.query(&half).unwrap().is_empty());
        assert!(index.query(&[0.0, 1.0]).unwrap().is_empty());
        assert_eq!(index.query(&[1.0, 0.0]).unwrap(), vec![0]);
        assert!(MatchIndex::build(&[], 0.5).unwrap().query(&[1.0]).unwrap().is_empty());
    }

    #[test]
    fn centering_removes_the_shared_component() {
        // all rows near one direction: raw cosines are all close to 1
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let base = random_unit(&mut rng, 32);
        let jitter = |rng: &mut ChaCha8Rng| {
            let n = random_unit(rng, 32);
            let mut v: Vec<f64> = base.iter().zip(&n).map(|(b, e)| 4.0 * b + e).collect();
            normalize(&mut v).unwrap();
            v
        };
        let a: Vec<Vec<f64>> = (0..40).map(|_| jitter(&mut rng)).collect();
        let b: Vec<Vec<f64>> = (0..60).map(|_| jitter(&mut rng)).collect();
        assert_eq!(MatchTable::build(&MatchIndex::build(&b, 0.5).unwrap(), &a, Exec::Sequential).unwrap().matched_count(), 40);
        let (ca, cb) = center_pooled(&a, &b).unwrap();
        for v in ca.iter().chain(&cb) {
            assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let table = MatchTable::centered(&a, &b, 0.5, Exec::Sequential).unwrap();
        let pairs: usize = table.matches.iter().map(Vec::len).sum();
        assert!(pairs < 40 * 60 / 10, "{pairs} pairs after centering");
        // an exact copy still matches itself
        let with_copy: Vec<Vec<f64>> = b.iter().cloned().chain([a[0].clone()]).collect();
        let t = MatchTable::centered(&a, &with_copy, 0.5, Exec::Sequential).unwrap();
        assert!(t.matches[0].contains(&60));
    }

    #[test]
    fn impossible_threshold_exhausts() {
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let index = MatchIndex::build(&rows, 1.01).unwrap();
        let table = MatchTable::build(&index, &rows, Exec::Sequential).unwrap();
        assert!(matches!(PairSampler::new(table), Err(Error::SamplingExhausted(_))));
    }

    #[test]
    fn unique_matches_pair_deterministically() {
        let table = MatchTable { threshold: 0.5, num_real: 3, matches: vec![vec![2], vec![], vec![0]], best: vec![1.0, 0.0, 1.0] };
        let sampler = PairSampler::new(table).unwrap();
        assert_eq!(sampler.skipped(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let (s, r) = sample_training_pair(&sampler, &mut rng);
            assert_eq!(r, [2, 99, 0][s]);
        }
    }

    #[test]
    fn duplicate_real_patches_are_equally_likely() {
        // Three identical real rows match the single synthetic patch.
        let rows = vec![vec![0.6, 0.8]; 3];
        let index = MatchIndex::build(&rows, 0.5).unwrap();
        let table = MatchTable::build(&index, &[vec![0.6, 0.8]], Exec::Sequential).unwrap();
        let sampler = PairSampler::new(table).unwrap();
        let mut counts = [0f64; 3];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 10_000;
        for _ in 0..n {
            counts[sampler.sample(&mut rng).1] += 1.0;
        }
        let e = n as f64 / 3.0;
        let chi2: f64 = counts.iter().map(|c| (c - e) * (c - e) / e).sum();
        let p = 1.0 - statrs::distribution::ContinuousCDF::cdf(&statrs::distribution::ChiSquared::new(2.0).unwrap(), chi2);
        assert!(p > 0.01, "chi2 {chi2} p {p}");
    }

    fn toy_backbone() -> RandomConvBackbone {
        RandomConvBackbone::new(&BackboneConfig { widths: vec![4, 8, 8, 16, 16], ..Default::default() }).unwrap()
    }

    #[test]
    fn patch_embeddings() {
        let bb = toy_backbone();
        let rf = bb.receptive_field();
        let img = Tensor::from_fn(&[3, rf, rf], |i| ((i * 31) % 29) as f64 / 29.0);
        let a = embed_patch(&img, &bb).unwrap();
        assert_eq!(a.len(), 16);
        assert_eq!(a, embed_patch(&img.clone(), &bb).unwrap());
        assert!((cosine(&a, &a) - 1.0).abs() < 1e-12);
        let index = MatchIndex::build(&[a.clone()], 0.5).unwrap();
        assert_eq!(index.query(&a).unwrap(), vec![0]);
        let small = img.crop(0, 0, rf - 1, rf - 1).unwrap();
        assert!(matches!(embed_patch(&small, &bb), Err(Error::Tensor(_))));
    }

    #[test]
    fn store_round_trip() {
        let bb = toy_backbone();
        let cfg = LayoutConfig::default();
        let samples = generate_dataset(&cfg, 2, 3, StyleTag::Source, Exec::Sequential).unwrap();
        let store = embed_dataset("source", &samples, 3, &bb, "toy", 7, Exec::Parallel).unwrap();
        assert_eq!(store.len(), 6);
        assert_eq!(store, embed_dataset("source", &samples, 3, &bb, "toy", 7, Exec::Sequential).unwrap());
        let dir = tempfile::tempdir().unwrap();
        store.write(dir.path(), "src").unwrap();
        assert_eq!(EmbeddingStore::read(dir.path(), "src").unwrap(), store);
        let (bin, _) = EmbeddingStore::paths(dir.path(), "src");
        let mut bytes = fs::read(&bin).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(&bin, bytes).unwrap();
        assert!(EmbeddingStore::read(dir.path(), "src").is_err());
    }

    proptest! {
        #[test]
        fn scaled_queries_match_identically(seed in 0u64..1000, scale in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<Vec<f64>> = (0..30).map(|_| random_unit(&mut rng, 6)).collect();
            let index = MatchIndex::build(&rows, 0.5).unwrap();
            let q = random_unit(&mut rng, 6);
            let mut scaled: Vec<f64> = q.iter().map(|x| x * scale).collect();
            normalize(&mut scaled).unwrap();
            prop_assert_eq!(index.query(&q).unwrap(), index.query(&scaled).unwrap());
            let scaled_rows: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|x| 2.0 * x).collect()).collect();
            let index2 = MatchIndex::build(&scaled_rows, 0.5).unwrap();
            for i in 0..index2.len() {
                let n: f64 = index2.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
                prop_assert!((n - 1.0).abs() < 1e-6);
            }
            prop_assert_eq!(index.query(&q).unwrap(), index2.query(&q).unwrap());
            let a = &rows[0];
            let b = &rows[1];
            prop_assert_eq!(cosine(a, b), cosine(b, a));
        }
    }
}
