//! Per-level discriminators over frozen backbone features, with label
//! embedding projection, plus the running accuracy used for throttling.

use gbuf_autodiff::nn::Init;
use gbuf_autodiff::{Binder, Conv2d, ConvSpec, Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::PerceptualBackbone;
use crate::enhancer::{group_count, GN_EPS};
use crate::scenegen::NUM_CLASSES;
use crate::{shape_err, Error, Result};

pub const LEAKY_SLOPE: f64 = 0.2;
/// Real/fake decision boundary for {0, 1} least-squares targets.
pub const DECISION_MID: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    /// Output widths of the five conv-groupnorm-leaky layers; the last one
    /// is the embedding dimension.
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub max_groups: usize,
    pub num_classes: usize,
    pub accuracy_decay: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            widths: vec![64, 128, 256, 256, 256],
            strides: vec![1, 2, 1, 2, 1],
            max_groups: 8,
            num_classes: NUM_CLASSES,
            accuracy_decay: 0.99,
        }
    }
}

impl DiscriminatorConfig {
    pub fn embed_dim(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.strides.len() || self.widths.contains(&0) {
            return Err(Error::Config("discriminator needs one stride per layer width".into()));
        }
        if self.strides.iter().any(|&s| s != 1 && s != 2) {
            return Err(Error::Config("discriminator strides must be 1 or 2".into()));
        }
        if !(0.0..1.0).contains(&self.accuracy_decay) {
            return Err(Error::Config("accuracy_decay must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// A class map at some resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    pub labels: Vec<usize>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != h * w {
            return Err(shape_err(format!("{} labels for {h}x{w}", labels.len())));
        }
        Ok(Self { h, w, labels })
    }

    /// Nearest-neighbor resampling (pixel centers).
    pub fn resample(&self, oh: usize, ow: usize) -> LabelMap {
        let pick = |o: usize, src: usize, dst: usize| (((o as f64 + 0.5) * src as f64 / dst as f64) as usize).min(src - 1);
        let mut out = Vec::with_capacity(oh * ow);
        for y in 0..oh {
            let sy = pick(y, self.h, oh);
            for x in 0..ow {
                out.push(self.labels[sy * self.w + pick(x, self.w, ow)]);
            }
        }
        LabelMap { h: oh, w: ow, labels: out }
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> LabelMap {
        let mut out = Vec::with_capacity(h * w);
        for y in y0..y0 + h {
            out.extend_from_slice(&self.labels[y * self.w + x0..y * self.w + x0 + w]);
        }
        LabelMap { h, w, labels: out }
    }
}

#[derive(Clone, Debug)]
pub struct LevelDiscriminator {
    pub stem: Vec<Conv2d>,
    pub groups: Vec<usize>,
    pub head: [Conv2d; 2],
    pub embedding: Option<ParamId>,
}

impl LevelDiscriminator {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        cfg: &DiscriminatorConfig,
        projection: bool,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut c = c_in;
        let mut stem = Vec::new();
        let mut groups = Vec::new();
        for (i, (&w, &s)) in cfg.widths.iter().zip(&cfg.strides).enumerate() {
            stem.push(Conv2d::new(store, &format!("{name}.cgl{i}"), ConvSpec::new(c, w, 3).stride(s).bias(false), rng));
            groups.push(group_count(w, cfg.max_groups));
            c = w;
        }
        let d = cfg.embed_dim();
        let head = [
            Conv2d::new(store, &format!("{name}.head0"), ConvSpec::new(d, d, 3), rng),
            Conv2d::new(store, &format!("{name}.head1"), ConvSpec::new(d, 1, 3).init(Init::He(0.5)), rng),
        ];
        let embedding = projection.then(|| {
            let dist = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("finite std");
            let table = Tensor::from_fn(&[cfg.num_classes, d], |_| dist.sample(rng));
            store.add(format!("{name}.embedding"), table)
        });
        Ok(Self { stem, groups, head, embedding })
    }

    /// Stem output `y` and head output `z`.
    pub fn stem_and_head(&self, g: &mut Graph, b: &mut Binder<'_>, feat: Var) -> Result<(Var, Var)> {
        let mut y = feat;
        for (conv, &groups) in self.stem.iter().zip(&self.groups) {
            let t = conv.forward(g, b, y)?;
            let t = g.group_norm(t, groups, GN_EPS)?;
            y = g.leaky_relu(t, LEAKY_SLOPE);
        }
        let z = self.head[0].forward(g, b, y)?;
        let z = g.leaky_relu(z, LEAKY_SLOPE);
        let z = self.head[1].forward(g, b, z)?;
        Ok((y, z))
    }

    /// `s = z + <y, e(label)>` per pixel; without an embedding table `s = z`.
    pub fn forward(&self, g: &mut Graph, b: &mut Binder<'_>, feat: Var, labels: Option<&LabelMap>) -> Result<Var> {
        let (y, z) = self.stem_and_head(g, b, feat)?;
        project(g, b, self.embedding, y, z, labels)
    }
}

/// Adds the label projection `sum_ch y * e(label)` to the head output.
pub fn project(g: &mut Graph, b: &mut Binder<'_>, table: Option<ParamId>, y: Var, z: Var, labels: Option<&LabelMap>) -> Result<Var> {
    let Some(table) = table else { return Ok(z) };
    let labels = labels.ok_or_else(|| Error::Config("projection discriminator needs labels".into()))?;
    let (_, h, w) = g.value(y).chw()?;
    let lm = labels.resample(h, w);
    let e = b.get(g, table)?;
    let e = g.embed(e, &lm.labels, h, w)?;
    let ye = g.mul(y, e)?;
    let p = g.sum_channels(ye)?;
    Ok(g.add(z, p)?)
}

pub fn score_level(d: &LevelDiscriminator, store: &ParamStore, features: &Tensor, labels: Option<&LabelMap>) -> Result<Tensor> {
    let mut g = Graph::new();
    let mut b = Binder::new(store, false);
    let x = g.constant(features.clone());
    let s = d.forward(&mut g, &mut b, x, labels)?;
    Ok(g.value(s).clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticKind {
    /// One discriminator per backbone tap, with label projection.
    Perceptual,
    /// Perceptual levels without the label projection.
    PerceptualNoProjection,
    /// Four discriminators on the image at scales 1, 1/2, 1/4, 1/8.
    PatchGan,
}

pub const PATCHGAN_SCALES: usize = 4;

/// The discriminator ensemble. Each level owns its parameter store.
#[derive(Clone, Debug)]
pub struct Critic {
    pub kind: CriticKind,
    pub levels: Vec<LevelDiscriminator>,
    pub stores: Vec<ParamStore>,
}

impl Critic {
    pub fn new<R: Rng + ?Sized>(kind: CriticKind, cfg: &DiscriminatorConfig, backbone: &dyn PerceptualBackbone, rng: &mut R) -> Result<Self> {
        let inputs = match kind {
            CriticKind::PatchGan => vec![3; PATCHGAN_SCALES],
            _ => backbone.tap_channels(),
        };
        let projection = kind == CriticKind::Perceptual;
        let mut levels = Vec::new();
        let mut stores = Vec::new();
        for (k, c) in inputs.into_iter().enumerate() {
            let mut store = ParamStore::new();
            levels.push(LevelDiscriminator::new(&mut store, &format!("disc{k}"), c, cfg, projection, rng)?);
            stores.push(store);
        }
        Ok(Self { kind, levels, stores })
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Per-level discriminator inputs for an image already on the graph.
    pub fn level_inputs(&self, g: &mut Graph, backbone: &dyn PerceptualBackbone, image: Var) -> Result<Vec<Var>> {
        match self.kind {
            CriticKind::PatchGan => patchgan_inputs(g, image),
            _ => backbone.forward(g, image),
        }
    }

    pub fn uses_labels(&self) -> bool {
        self.kind == CriticKind::Perceptual
    }
}

/// The image cropped to a multiple of 8 and average-pooled to four scales.
pub fn patchgan_inputs(g: &mut Graph, image: Var) -> Result<Vec<Var>> {
    let (_, h, w) = g.value(image).chw()?;
    let top = 1 << (PATCHGAN_SCALES - 1);
    let (h8, w8) = (h / top * top, w / top * top);
    if h8 == 0 || w8 == 0 {
        return Err(shape_err(format!("{h}x{w} image too small for {PATCHGAN_SCALES} scales")));
    }
    let base = if (h8, w8) == (h, w) { image } else { g.crop(image, 0, 0, h8, w8)? };
    (0..PATCHGAN_SCALES).map(|i| Ok(g.avg_pool(base, 1 << i)?)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorVerdict {
    pub scores: Vec<Tensor>,
}

/// Runs the frozen backbone once and every level on its input. Nothing here
/// records gradients.
pub fn score_image(image: &Tensor, labels: Option<&LabelMap>, backbone: &dyn PerceptualBackbone, critic: &Critic) -> Result<DiscriminatorVerdict> {
    let mut g = Graph::new();
    let x = g.constant(image.clone());
    let inputs = critic.level_inputs(&mut g, backbone, x)?;
    let mut scores = Vec::with_capacity(critic.len());
    for ((d, store), &inp) in critic.levels.iter().zip(&critic.stores).zip(&inputs) {
        let mut b = Binder::new(store, false);
        let s = d.forward(&mut g, &mut b, inp, labels)?;
        scores.push(g.value(s).clone());
    }
    Ok(DiscriminatorVerdict { scores })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Truth {
    Real,
    Fake,
}

/// Fraction of pixels on the correct side of the decision boundary.
pub fn correctness(scores: &Tensor, truth: Truth) -> f64 {
    let ok = scores
        .data()
        .iter()
        .filter(|&&s| match truth {
            Truth::Real => s > DECISION_MID,
            Truth::Fake => s <= DECISION_MID,
        })
        .count();
    ok as f64 / scores.len() as f64
}

/// Exponential moving averages of per-level accuracy, starting at 0.5.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTracker {
    pub r: Vec<f64>,
    pub decay: f64,
}

impl AccuracyTracker {
    pub fn new(levels: usize, decay: f64) -> Self {
        Self { r: vec![0.5; levels], decay }
    }

    pub fn update(&mut self, level: usize, correct: f64) -> f64 {
        let r = &mut self.r[level];
        *r = self.decay * *r + (1.0 - self.decay) * correct;
        *r
    }
}

pub fn update_accuracy(tracker: &mut AccuracyTracker, verdict: &DiscriminatorVerdict, truth: Truth) {
    for (k, s) in verdict.scores.iter().enumerate() {
        tracker.update(k, correctness(s, truth));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, RandomConvBackbone};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> DiscriminatorConfig {
        DiscriminatorConfig { widths: vec![4, 8, 8, 8, 8], ..Default::default() }
    }

    fn level(proj: bool) -> (ParamStore, LevelDiscriminator) {
        let mut store = ParamStore::new();
        let d = LevelDiscriminator::new(&mut store, "d", 3, &cfg(), proj, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (store, d)
    }

    fn feat() -> Tensor {
        Tensor::from_fn(&[3, 8, 8], |i| ((i * 7919) % 13) as f64 / 13.0 - 0.4)
    }

    fn labels() -> LabelMap {
        LabelMap::new(8, 8, (0..64).map(|i| (i / 13) % NUM_CLASSES).collect()).unwrap()
    }

    fn head_only(d: &LevelDiscriminator, store: &ParamStore) -> Tensor {
        let mut g = Graph::new();
        let mut b = Binder::new(store, false);
        let x = g.constant(feat());
        let (_, z) = d.stem_and_head(&mut g, &mut b, x).unwrap();
        g.value(z).clone()
    }

    #[test]
    fn zero_embedding_leaves_head_score() {
        let (mut store, d) = level(true);
        let e = d.embedding.unwrap();
        *store.value_mut(e) = Tensor::zeros(store.value(e).shape());
        let s = score_level(&d, &store, &feat(), Some(&labels())).unwrap();
        assert_eq!(s, head_only(&d, &store));
        assert_eq!(s.shape(), &[1, 2, 2]);
    }

    #[test]
    fn one_pixel_projection_by_hand() {
        let mut store = ParamStore::new();
        let table = store.add("e", Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0]).unwrap());
        let mut g = Graph::new();
        let mut b = Binder::new(&store, false);
        let y = g.constant(Tensor::from_vec(&[3, 1, 1], vec![0.5, -2.0, 1.5]).unwrap());
        let z = g.constant(Tensor::from_vec(&[1, 1, 1], vec![0.25]).unwrap());
        let lm = LabelMap::new(1, 1, vec![1]).unwrap();
        let s = project(&mut g, &mut b, Some(table), y, z, Some(&lm)).unwrap();
        // 0.25 + 0.5*-1 + -2*0.5 + 1.5*4
        assert_eq!(g.value(s).data(), &[4.75]);
        let zero_y = g.constant(Tensor::zeros(&[3, 1, 1]));
        let s0 = project(&mut g, &mut b, Some(table), zero_y, z, Some(&lm)).unwrap();
        assert_eq!(g.value(s0).data(), &[0.25]);
    }

    #[test]
    fn projection_is_linear_in_the_table() {
        let (store, d) = level(true);
        let e = d.embedding.unwrap();
        let z = head_only(&d, &store);
        let s1 = score_level(&d, &store, &feat(), Some(&labels())).unwrap();
        let mut doubled = store.clone();
        *doubled.value_mut(e) = store.value(e).map(|v| 2.0 * v);
        let s2 = score_level(&d, &doubled, &feat(), Some(&labels())).unwrap();
        for ((a, b), z) in s1.data().iter().zip(s2.data()).zip(z.data()) {
            assert!(((b - z) - 2.0 * (a - z)).abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_class_is_a_palette_error() {
        let (store, d) = level(true);
        let bad = LabelMap::new(8, 8, vec![NUM_CLASSES; 64]).unwrap();
        assert!(matches!(
            score_level(&d, &store, &feat(), Some(&bad)),
            Err(Error::Tensor(gbuf_autodiff::Error::Palette { .. }))
        ));
    }

    #[test]
    fn nearest_resampling() {
        let lm = LabelMap::new(2, 2, vec![0, 1, 2, 3]).unwrap();
        assert_eq!(lm.resample(4, 4).labels, vec![0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3]);
        assert_eq!(lm.resample(4, 4).resample(2, 2), lm);
        assert_eq!(lm.resample(1, 1).labels.len(), 1);
    }

    #[test]
    fn ensemble_verdicts() {
        let bb = RandomConvBackbone::new(&BackboneConfig { widths: vec![4; 5], ..Default::default() }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let critic = Critic::new(CriticKind::Perceptual, &cfg(), &bb, &mut rng).unwrap();
        let img = Tensor::from_fn(&[3, 33, 33], |i| (i % 17) as f64 / 17.0);
        let lm = LabelMap::new(33, 33, (0..33 * 33).map(|i| i % NUM_CLASSES).collect()).unwrap();
        let v = score_image(&img, Some(&lm), &bb, &critic).unwrap();
        assert_eq!(v.scores.len(), 5);
        assert_eq!(v, score_image(&img.clone(), Some(&lm), &bb, &critic).unwrap());

        let pg = Critic::new(CriticKind::PatchGan, &cfg(), &bb, &mut rng).unwrap();
        let v = score_image(&img, None, &bb, &pg).unwrap();
        let sizes: Vec<usize> = v.scores.iter().map(|s| s.shape()[1]).collect();
        assert_eq!(sizes, vec![8, 4, 2, 1]);
        assert!(pg.levels.iter().all(|l| l.embedding.is_none()));
    }

    #[test]
    fn no_projection_reduces_to_head() {
        let (store, d) = level(false);
        assert_eq!(score_level(&d, &store, &feat(), None).unwrap(), head_only(&d, &store));
        assert_eq!(score_level(&d, &store, &feat(), Some(&labels())).unwrap(), head_only(&d, &store));
    }

    #[test]
    fn accuracy_ema() {
        let mut t = AccuracyTracker::new(1, 0.99);
        assert!((t.update(0, 1.0) - 0.505).abs() < 1e-15);
        let mut prev = t.r[0];
        for _ in 0..2000 {
            let r = t.update(0, 1.0);
            assert!(r > prev);
            prev = r;
        }
        assert!(prev > 0.99);
    }

    #[test]
    fn random_symmetric_scores_settle_near_half() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut t = AccuracyTracker::new(1, 0.99);
        for i in 0..1000 {
            let s = Tensor::from_fn(&[1, 4, 4], |_| 0.5 + rng.random_range(-1.0..1.0));
            let truth = if i % 2 == 0 { Truth::Real } else { Truth::Fake };
            update_accuracy(&mut t, &DiscriminatorVerdict { scores: vec![s] }, truth);
        }
        assert!((t.r[0] - 0.5).abs() <= 0.05, "r = {}", t.r[0]);
    }

    #[test]
    fn correctness_counts_pixels() {
        let s = Tensor::from_vec(&[1, 1, 4], vec![0.9, 0.5, 0.1, 0.7]).unwrap();
        assert_eq!(correctness(&s, Truth::Real), 0.5);
        assert_eq!(correctness(&s, Truth::Fake), 0.5);
    }
}
