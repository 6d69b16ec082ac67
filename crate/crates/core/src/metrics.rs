//! Kernel distances between feature sets, semantically aligned patch
//! pairing and per-class layout statistics.

use std::fs;
use std::path::{Path, PathBuf};

use gbuf_autodiff::Tensor;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::PerceptualBackbone;
use crate::discriminator::LabelMap;
use crate::scenegen::CLASS_NAMES;
use crate::{shape_err, Error, Exec, Result};

/// Side of the label grid each patch is reduced to.
pub const ENCODING_SIDE: usize = 16;
pub const ENCODING_LEN: usize = ENCODING_SIDE * ENCODING_SIDE;
/// A pair is kept when more than this many encoding entries agree.
pub const DEFAULT_RETENTION: usize = ENCODING_LEN / 2;
/// Metric values are reported multiplied by this.
pub const REPORT_SCALE: f64 = 1000.0;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `(a.b / d + 1)^3`.
pub fn poly_kernel(a: &[f64], b: &[f64]) -> f64 {
    let t = dot(a, b) / a.len() as f64 + 1.0;
    t * t * t
}

fn sorted_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

fn check_rows(x: &[Vec<f64>]) -> Result<usize> {
    let d = x.first().map_or(0, Vec::len);
    if x.iter().any(|r| r.len() != d) {
        return Err(shape_err("feature rows of unequal length"));
    }
    Ok(d)
}

/// Unbiased squared MMD under the cubic polynomial kernel. Kernel values are
/// summed in sorted order, which makes the result exactly symmetric and
/// invariant to row order.
pub fn mmd2_unbiased(x: &[Vec<f64>], y: &[Vec<f64>], exec: Exec) -> Result<f64> {
    let (n, m) = (x.len(), y.len());
    if n < 2 || m < 2 {
        return Err(Error::Precondition(format!("mmd needs at least 2 rows per set, got {n} and {m}")));
    }
    let (dx, dy) = (check_rows(x)?, check_rows(y)?);
    if dx != dy {
        return Err(shape_err(format!("feature dimensions {dx} and {dy} differ")));
    }
    let within = |s: &[Vec<f64>]| -> f64 {
        let rows = exec.map(s.len(), |i| (0..s.len()).filter(|&j| j != i).map(|j| poly_kernel(&s[i], &s[j])).collect::<Vec<_>>());
        sorted_sum(rows.concat())
    };
    let cross = exec.map(n, |i| y.iter().map(|b| poly_kernel(&x[i], b)).collect::<Vec<_>>());
    let (nf, mf) = (n as f64, m as f64);
    let kxx = within(x) / (nf * (nf - 1.0));
    let kyy = within(y) / (mf * (mf - 1.0));
    let kxy = sorted_sum(cross.concat()) / (nf * mf);
    Ok(kxx + kyy - 2.0 * kxy)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub value: f64,
    pub std: f64,
    pub subset_size: usize,
    pub n_subsets: usize,
    /// Retained patch pairs, for the aligned metrics.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub retained: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubsetProtocol {
    pub subset_size: usize,
    pub n_subsets: usize,
    pub seed: u64,
}

impl Default for SubsetProtocol {
    fn default() -> Self {
        Self { subset_size: 100, n_subsets: 10, seed: 0 }
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Row subsets for one MMD evaluation. Equal-length sets with room for two
/// disjoint subsets draw both from one permutation of shared indices, so a
/// set compared against itself never reuses a row; otherwise the two draws
/// are independent.
fn draw_subsets<R: Rng>(rng: &mut R, na: usize, nb: usize, s: usize) -> (Vec<usize>, Vec<usize>) {
    if na == nb && na >= 2 * s {
        let idx = sample_indices(rng, na, 2 * s).into_vec();
        (idx[..s].to_vec(), idx[s..].to_vec())
    } else {
        (sample_indices(rng, na, s).into_vec(), sample_indices(rng, nb, s).into_vec())
    }
}

fn subset_mmd(name: &str, a: &[Vec<f64>], b: &[Vec<f64>], s: usize, proto: &SubsetProtocol, exec: Exec) -> Result<MetricReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(proto.seed);
    let draws: Vec<_> = (0..proto.n_subsets).map(|_| draw_subsets(&mut rng, a.len(), b.len(), s)).collect();
    let pick = |rows: &[Vec<f64>], idx: &[usize]| idx.iter().map(|&i| rows[i].clone()).collect::<Vec<_>>();
    let vals = exec.try_map(draws.len(), |k| {
        let (ia, ib) = &draws[k];
        mmd2_unbiased(&pick(a, ia), &pick(b, ib), Exec::Sequential)
    })?;
    let (mean, std) = mean_std(&vals);
    Ok(MetricReport {
        name: name.to_string(),
        value: mean * REPORT_SCALE,
        std: std * REPORT_SCALE,
        subset_size: s,
        n_subsets: proto.n_subsets,
        retained: None,
    })
}

/// Mean and population std of subset MMD estimates, both scaled by 1000.
pub fn kid(a: &[Vec<f64>], b: &[Vec<f64>], proto: &SubsetProtocol, exec: Exec) -> Result<MetricReport> {
    let s = proto.subset_size;
    if s < 2 || proto.n_subsets == 0 || a.len() < s || b.len() < s {
        return Err(Error::Config(format!(
            "kid needs subsets of at least 2 drawn from sets of {} and {} rows, got subset_size {s} x {}",
            a.len(),
            b.len(),
            proto.n_subsets
        )));
    }
    subset_mmd("KID", a, b, s, proto, exec)
}

/// Spatially averaged deepest-tap features, one row per image.
pub fn image_features(images: &[Tensor], backbone: &dyn PerceptualBackbone, exec: Exec) -> Result<Vec<Vec<f64>>> {
    exec.try_map(images.len(), |i| {
        let taps = backbone.features(&images[i])?;
        let deep = taps.last().ok_or_else(|| shape_err("backbone has no taps"))?;
        let (c, h, w) = deep.chw()?;
        Ok((0..c).map(|ch| deep.channel(ch).iter().sum::<f64>() / (h * w) as f64).collect())
    })
}

/// Reduces a square label patch to a 16x16 class grid: mode per cell when
/// the patch is larger, nearest neighbor otherwise. Mode ties go to the lower
/// class id.
pub fn encode_label_patch(patch: &LabelMap) -> Result<Vec<usize>> {
    if patch.h != patch.w || patch.h == 0 {
        return Err(shape_err(format!("label patch {}x{} is not square", patch.h, patch.w)));
    }
    let s = patch.h;
    if s < ENCODING_SIDE {
        return Ok(patch.resample(ENCODING_SIDE, ENCODING_SIDE).labels);
    }
    let top = patch.labels.iter().copied().max().unwrap_or(0);
    let mut counts = vec![0usize; top + 1];
    let mut out = Vec::with_capacity(ENCODING_LEN);
    for cy in 0..ENCODING_SIDE {
        let (y0, y1) = (cy * s / ENCODING_SIDE, (cy + 1) * s / ENCODING_SIDE);
        for cx in 0..ENCODING_SIDE {
            let (x0, x1) = (cx * s / ENCODING_SIDE, (cx + 1) * s / ENCODING_SIDE);
            counts.iter_mut().for_each(|c| *c = 0);
            for y in y0..y1 {
                for &l in &patch.labels[y * s + x0..y * s + x1] {
                    counts[l] += 1;
                }
            }
            let best = (0..counts.len()).fold(0, |b, c| if counts[c] > counts[b] { c } else { b });
            out.push(best);
        }
    }
    Ok(out)
}

pub fn agreement(a: &[usize], b: &[usize]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x == y).count()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    /// Lowest real index among equally good candidates.
    #[default]
    Lowest,
    /// A seeded uniform choice among equally good candidates.
    Seeded(u64),
}

/// For each synthetic encoding, the real encoding with the most agreeing
/// entries; kept when the agreement exceeds `retention`.
pub fn pair_patches(synthetic: &[Vec<usize>], real: &[Vec<usize>], retention: usize, tie: TieBreak, exec: Exec) -> Vec<(usize, usize)> {
    if real.is_empty() {
        return Vec::new();
    }
    let best = exec.map(synthetic.len(), |i| {
        let counts: Vec<usize> = real.iter().map(|r| agreement(&synthetic[i], r)).collect();
        let top = *counts.iter().max().expect("nonempty");
        let j = match tie {
            TieBreak::Lowest => counts.iter().position(|&c| c == top).expect("max exists"),
            TieBreak::Seeded(seed) => {
                let ties: Vec<usize> = (0..counts.len()).filter(|&j| counts[j] == top).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                ties[rng.random_range(0..ties.len())]
            }
        };
        (j, top)
    });
    best.into_iter().enumerate().filter(|(_, (_, c))| *c > retention).map(|(i, (j, _))| (i, j)).collect()
}

/// An image with its per-pixel classes.
#[derive(Clone, Copy, Debug)]
pub struct LabeledImage<'a> {
    pub image: &'a Tensor,
    pub labels: &'a [usize],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SkvdConfig {
    pub subsets: SubsetProtocol,
    /// Patch side as a fraction of the image height.
    pub patch_fraction: usize,
    /// Patches drawn per set before pairing; 0 keeps all.
    pub max_patches: usize,
    pub retention: usize,
    /// Seeded by default: with `Lowest`, every flat patch (all sky, all
    /// road) pairs with the same real patch, and the repeated rows bias the
    /// estimate upward.
    pub tie_break: TieBreak,
}

impl Default for SkvdConfig {
    fn default() -> Self {
        Self { subsets: SubsetProtocol::default(), patch_fraction: 8, max_patches: 1000, retention: DEFAULT_RETENTION, tie_break: TieBreak::Seeded(0) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct GridPatch {
    image: usize,
    y: usize,
    x: usize,
}

fn grid_patches(sets: &[LabeledImage<'_>], side: usize) -> Result<Vec<GridPatch>> {
    let mut out = Vec::new();
    for (k, s) in sets.iter().enumerate() {
        let (_, h, w) = s.image.chw()?;
        if s.labels.len() != h * w {
            return Err(shape_err(format!("image {k}: {} labels for {h}x{w}", s.labels.len())));
        }
        for y in (0..=h - side).step_by(side) {
            for x in (0..=w - side).step_by(side) {
                out.push(GridPatch { image: k, y, x });
            }
        }
    }
    Ok(out)
}

fn subsample<R: Rng>(patches: Vec<GridPatch>, max: usize, rng: &mut R) -> Vec<GridPatch> {
    if max == 0 || patches.len() <= max {
        return patches;
    }
    let mut idx = sample_indices(rng, patches.len(), max).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| patches[i]).collect()
}

fn encode_patches(set: &[LabeledImage<'_>], patches: &[GridPatch], side: usize, exec: Exec) -> Result<Vec<Vec<usize>>> {
    exec.try_map(patches.len(), |i| {
        let p = patches[i];
        let img = &set[p.image];
        let (_, h, w) = img.image.chw()?;
        let full = LabelMap { h, w, labels: img.labels.to_vec() };
        encode_label_patch(&full.crop(p.y, p.x, side, side))
    })
}

/// Tap features of a patch: the full-image feature map averaged over the
/// cells the patch covers.
fn footprint_mean(feat: &Tensor, stride: usize, p: GridPatch, side: usize) -> Result<Vec<f64>> {
    let (c, fh, fw) = feat.chw()?;
    let y0 = (p.y / stride).min(fh - 1);
    let x0 = (p.x / stride).min(fw - 1);
    let y1 = (p.y + side).div_ceil(stride).clamp(y0 + 1, fh);
    let x1 = (p.x + side).div_ceil(stride).clamp(x0 + 1, fw);
    let n = ((y1 - y0) * (x1 - x0)) as f64;
    Ok((0..c)
        .map(|ch| {
            let plane = feat.channel(ch);
            let mut s = 0.0;
            for y in y0..y1 {
                s += plane[y * fw + x0..y * fw + x1].iter().sum::<f64>();
            }
            s / n
        })
        .collect())
}

pub fn tap_name(tap: usize) -> String {
    format!("sKVD_L{}", tap + 1)
}

/// Semantically aligned kernel distance at each requested tap (0-based).
pub fn skvd(
    a: &[LabeledImage<'_>],
    b: &[LabeledImage<'_>],
    backbone: &dyn PerceptualBackbone,
    taps: &[usize],
    cfg: &SkvdConfig,
    exec: Exec,
) -> Result<Vec<MetricReport>> {
    let (_, h, w) = a.first().ok_or_else(|| Error::MetricUndefined("first set is empty".into()))?.image.chw()?;
    if b.is_empty() {
        return Err(Error::MetricUndefined("second set is empty".into()));
    }
    if cfg.patch_fraction == 0 {
        return Err(Error::Config("patch_fraction must be positive".into()));
    }
    let side = (h.min(w) / cfg.patch_fraction).max(1);
    if let Some(&t) = taps.iter().find(|&&t| t >= backbone.num_taps()) {
        return Err(Error::Config(format!("tap L{} not in a {}-tap backbone", t + 1, backbone.num_taps())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.subsets.seed);
    let pa = subsample(grid_patches(a, side)?, cfg.max_patches, &mut rng);
    let pb = subsample(grid_patches(b, side)?, cfg.max_patches, &mut rng);
    let ea = encode_patches(a, &pa, side, exec)?;
    let eb = encode_patches(b, &pb, side, exec)?;
    let pairs = pair_patches(&ea, &eb, cfg.retention, cfg.tie_break, exec);
    if pairs.len() < 2 {
        return Err(Error::MetricUndefined(format!(
            "{} of {} patches kept a partner among {} (need at least 2 pairs, retention > {} of {ENCODING_LEN})",
            pairs.len(),
            pa.len(),
            pb.len(),
            cfg.retention
        )));
    }
    let s = cfg.subsets.subset_size.min(pairs.len()).max(2);

    let strides = backbone.tap_strides();
    let images_used = |set: &[LabeledImage<'_>], ps: &[GridPatch], side_a: bool| {
        let mut used = vec![false; set.len()];
        for &(i, j) in &pairs {
            used[if side_a { ps[i].image } else { ps[j].image }] = true;
        }
        used
    };
    let features = |set: &[LabeledImage<'_>], used: Vec<bool>| {
        exec.try_map(set.len(), |k| if used[k] { backbone.features(set[k].image).map(Some) } else { Ok(None) })
    };
    let fa = features(a, images_used(a, &pa, true))?;
    let fb = features(b, images_used(b, &pb, false))?;
    let mut reports = Vec::with_capacity(taps.len());
    for &t in taps {
        let rows = |feats: &[Option<Vec<Tensor>>], p: GridPatch| footprint_mean(&feats[p.image].as_ref().expect("computed")[t], strides[t], p, side);
        let xa = pairs.iter().map(|&(i, _)| rows(&fa, pa[i])).collect::<Result<Vec<_>>>()?;
        let xb = pairs.iter().map(|&(_, j)| rows(&fb, pb[j])).collect::<Result<Vec<_>>>()?;
        let proto = SubsetProtocol { seed: cfg.subsets.seed.wrapping_add(t as u64 + 1), ..cfg.subsets };
        let mut r = subset_mmd(&tap_name(t), &xa, &xb, s, &proto, exec)?;
        r.retained = Some(pairs.len());
        reports.push(r);
    }
    Ok(reports)
}

/// Per-class occupancy frequency on a fixed grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityMaps {
    pub h: usize,
    pub w: usize,
    /// `rho[c][y * w + x]`.
    pub rho: Vec<Vec<f64>>,
}

pub fn layout_density(maps: &[LabelMap], num_classes: usize, h: usize, w: usize) -> Result<DensityMaps> {
    if maps.is_empty() {
        return Err(Error::Precondition("layout density needs at least one label map".into()));
    }
    let mut rho = vec![vec![0.0; h * w]; num_classes];
    for m in maps {
        for (cell, &l) in m.resample(h, w).labels.iter().enumerate() {
            let row = rho.get_mut(l).ok_or_else(|| Error::Config(format!("class {l} outside a {num_classes}-class palette")))?;
            row[cell] += 1.0;
        }
    }
    let n = maps.len() as f64;
    rho.iter_mut().flatten().for_each(|v| *v /= n);
    Ok(DensityMaps { h, w, rho })
}

impl DensityMaps {
    /// One 8-bit grayscale PNG per class, intensity `round(255 * rho)`.
    pub fn write_pngs(&self, dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut paths = Vec::new();
        for (c, plane) in self.rho.iter().enumerate() {
            let name = CLASS_NAMES.get(c).map_or_else(|| format!("class{c}"), |s| s.to_string());
            let path = dir.join(format!("{prefix}_{name}.png"));
            let px: Vec<u8> = plane.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
            image::GrayImage::from_raw(self.w as u32, self.h as u32, px)
                .expect("buffer matches dimensions")
                .save(&path)
                .map_err(|e| Error::Io(std::io::Error::other(e)))?;
            paths.push(path);
        }
        Ok(paths)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rng: &mut ChaCha8Rng, n: usize, d: usize, shift: f64) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| StandardNormal.sample(rng)).map(|v: f64| v + shift).collect()).collect()
    }

    fn oracle(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
        let k = |a: &Vec<f64>, b: &Vec<f64>| (a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>() / a.len() as f64 + 1.0).powi(3);
        let (n, m) = (x.len() as f64, y.len() as f64);
        let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
        for i in 0..x.len() { for j in 0..x.len() { if i != j { sxx += k(&x[i], &x[j]); } } }
        for i in 0..y.len() { for j in 0..y.len() { if i != j { syy += k(&y[i], &y[j]); } } }
        for a in x { for b in y { sxy += k(a, b); } }
        sxx / (n * (n - 1.0)) + syy / (m * (m - 1.0)) - 2.0 * sxy / (n * m)
    }

    #[test]
    fn matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = gaussian(&mut rng, 4, 5, 0.0);
        let y = gaussian(&mut rng, 4, 5, 0.3);
        assert!((mmd2_unbiased(&x, &y, Exec::Parallel).unwrap() - oracle(&x, &y)).abs() < 1e-12);
    }

    #[test]
    fn degenerate_sets_give_zero() {
        let v = vec![0.3, -1.0, 2.0];
        let x = vec![v.clone(); 5];
        let y = vec![v; 3];
        assert_eq!(mmd2_unbiased(&x, &y, Exec::Sequential).unwrap(), 0.0);
        assert!(matches!(mmd2_unbiased(&x, &[vec![1.0; 2], vec![1.0; 2]], Exec::Sequential), Err(Error::Tensor(_))));
        assert!(matches!(mmd2_unbiased(&x[..1], &x, Exec::Sequential), Err(Error::Precondition(_))));
    }

    #[test]
    fn kernel_is_elementwise_cubic() {
        let a = [1.0, 2.0, -1.0, 0.5];
        let b = [0.5, -1.0, 3.0, 2.0];
        // a.b = 0.5 - 2 - 3 + 1 = -3.5
        assert_eq!(poly_kernel(&a, &b), (-3.5f64 / 4.0 + 1.0).powi(3));
    }

    #[test]
    fn mean_shift_beats_permutation_null() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = gaussian(&mut rng, 500, 8, 0.0);
        let y = gaussian(&mut rng, 500, 8, 2.0);
        let obs = mmd2_unbiased(&x, &y, Exec::Parallel).unwrap();
        let mut pooled: Vec<Vec<f64>> = x.iter().chain(&y).cloned().collect();
        let mut null = Vec::new();
        for _ in 0..30 {
            rand::seq::SliceRandom::shuffle(pooled.as_mut_slice(), &mut rng);
            null.push(mmd2_unbiased(&pooled[..500], &pooled[500..], Exec::Parallel).unwrap());
        }
        let (_, sd) = mean_std(&null);
        assert!(obs > 5.0 * sd, "{obs} vs null sd {sd}");
    }

    #[test]
    fn kid_is_deterministic_and_checks_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = gaussian(&mut rng, 60, 4, 0.0);
        let proto = SubsetProtocol { subset_size: 20, n_subsets: 5, seed: 9 };
        let r = kid(&a, &a, &proto, Exec::Parallel).unwrap();
        assert_eq!(r, kid(&a, &a, &proto, Exec::Sequential).unwrap());
        assert!(r.value.abs() <= 3.0 * r.std, "{r:?}");
        assert!(r.std >= 0.0);
        let big = SubsetProtocol { subset_size: 61, ..proto };
        assert!(matches!(kid(&a, &a, &big, Exec::Sequential), Err(Error::Config(_))));
    }

    #[test]
    fn label_encodings() {
        let uniform = LabelMap::new(24, 24, vec![3; 576]).unwrap();
        assert_eq!(encode_label_patch(&uniform).unwrap(), vec![3; 256]);
        let small = LabelMap::new(8, 8, vec![2; 64]).unwrap();
        assert_eq!(encode_label_patch(&small).unwrap().len(), ENCODING_LEN);
        assert!(matches!(encode_label_patch(&LabelMap::new(4, 8, vec![0; 32]).unwrap()), Err(Error::Tensor(_))));

        // 32x32 patch: each 2x2 cell holds three pixels of one class and one
        // of another, so the cell mode is the dominant class.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dom: Vec<usize> = (0..256).map(|_| rng.random_range(0..5)).collect();
        let mut px = vec![0; 1024];
        for cy in 0..16 {
            for cx in 0..16 {
                let d = dom[cy * 16 + cx];
                for (k, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                    px[(2 * cy + dy) * 32 + 2 * cx + dx] = if k == 3 { (d + 1) % 5 } else { d };
                }
            }
        }
        assert_eq!(encode_label_patch(&LabelMap::new(32, 32, px).unwrap()).unwrap(), dom);
    }

    fn brute_pairs(s: &[Vec<usize>], r: &[Vec<usize>], keep: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, a) in s.iter().enumerate() {
            let (mut bj, mut bc) = (0, 0);
            for (j, b) in r.iter().enumerate() {
                let mut c = 0;
                for k in 0..a.len() {
                    if a[k] == b[k] {
                        c += 1;
                    }
                }
                if j == 0 || c > bc {
                    bj = j;
                    bc = c;
                }
            }
            if bc > keep {
                out.push((i, bj));
            }
        }
        out
    }

    #[test]
    fn pairing_extremes() {
        let a = vec![vec![1; 256]];
        assert_eq!(pair_patches(&a, &[vec![0; 256], vec![1; 256]], 128, TieBreak::Lowest, Exec::Sequential), vec![(0, 1)]);
        assert!(pair_patches(&a, &[vec![0; 256], vec![2; 256]], 128, TieBreak::Lowest, Exec::Sequential).is_empty());
        let mut half = vec![1; 256];
        half[..128].iter_mut().for_each(|v| *v = 0);
        assert!(pair_patches(&a, &[half.clone()], 128, TieBreak::Lowest, Exec::Sequential).is_empty());
        half[0] = 1;
        assert_eq!(pair_patches(&a, &[half], 128, TieBreak::Lowest, Exec::Sequential), vec![(0, 0)]);
    }

    #[test]
    fn density_maps() {
        let one = LabelMap::new(2, 2, vec![0, 1, 1, 2]).unwrap();
        let d = layout_density(&[one.clone()], 3, 2, 2).unwrap();
        assert_eq!(d.rho, vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 1.0, 0.0], vec![0.0, 0.0, 0.0, 1.0]]);
        let two = LabelMap::new(2, 2, vec![0, 0, 2, 2]).unwrap();
        let d = layout_density(&[one, two], 3, 2, 2).unwrap();
        assert_eq!(d.rho, vec![vec![1.0, 0.5, 0.0, 0.0], vec![0.0, 0.5, 0.5, 0.0], vec![0.0, 0.0, 0.5, 1.0]]);
        for cell in 0..4 {
            assert_eq!(d.rho.iter().map(|r| r[cell]).sum::<f64>(), 1.0);
        }
        let dir = tempfile::tempdir().unwrap();
        let paths = d.write_pngs(dir.path(), "target").unwrap();
        assert_eq!(paths.len(), 3);
        let img = image::open(&paths[1]).unwrap().to_luma8();
        assert_eq!(img.as_raw(), &vec![0, 128, 128, 0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn symmetric_and_order_free(seed in 0u64..10_000, n in 2usize..10, m in 2usize..10, d in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = gaussian(&mut rng, n, d, 0.0);
            let y = gaussian(&mut rng, m, d, 0.5);
            let v = mmd2_unbiased(&x, &y, Exec::Sequential).unwrap();
            prop_assert_eq!(v, mmd2_unbiased(&y, &x, Exec::Parallel).unwrap());
            let mut xs = x.clone();
            rand::seq::SliceRandom::shuffle(xs.as_mut_slice(), &mut rng);
            let mut ys = y.clone();
            rand::seq::SliceRandom::shuffle(ys.as_mut_slice(), &mut rng);
            prop_assert_eq!(v, mmd2_unbiased(&xs, &ys, Exec::Sequential).unwrap());
            prop_assert!((v - oracle(&x, &y)).abs() < 1e-12);
        }

        #[test]
        fn pairing_matches_oracle_and_is_monotone(seed in 0u64..10_000, keep in 40usize..80) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let enc = |rng: &mut ChaCha8Rng| (0..256).map(|_| rng.random_range(0..3)).collect::<Vec<usize>>();
            let s: Vec<_> = (0..12).map(|_| enc(&mut rng)).collect();
            let r: Vec<_> = (0..15).map(|_| enc(&mut rng)).collect();
            let got = pair_patches(&s, &r, keep, TieBreak::Lowest, Exec::Parallel);
            prop_assert_eq!(&got, &brute_pairs(&s, &r, keep));
            prop_assert_eq!(&got, &pair_patches(&s, &r, keep, TieBreak::Lowest, Exec::Sequential));
            let looser = pair_patches(&s, &r, keep - 10, TieBreak::Lowest, Exec::Sequential);
            for p in &got {
                prop_assert!(looser.contains(p));
            }
            let seeded = pair_patches(&s, &r, keep, TieBreak::Seeded(seed), Exec::Parallel);
            prop_assert_eq!(seeded, pair_patches(&s, &r, keep, TieBreak::Seeded(seed), Exec::Sequential));
        }
    }
}
