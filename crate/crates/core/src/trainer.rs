//! Adversarial training: least-squares losses, perceptual regularizer, R1
//! penalty, learning-rate schedule, clipping and discriminator throttling.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use gbuf_autodiff::optim::{clip_global_norm, Adam, AdamConfig};
use gbuf_autodiff::{Binder, Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, PerceptualBackbone, RandomConvBackbone};
use crate::blob::Blob;
use crate::discriminator::{
    correctness, AccuracyTracker, Critic, CriticKind, DiscriminatorConfig, LabelMap, LevelDiscriminator, Truth,
};
use crate::encoder::EncoderConfig;
use crate::enhancer::{EnhancerConfig, Generator, Ingest, Modulation};
use crate::labels::LabelProvider;
use crate::perceptual::distance_from_taps;
use crate::sampler::{embed_dataset, random_patch, EmbeddingStore, MatchTable, PairSampler, PatchRef, SamplingPolicy};
use crate::scenegen::SceneSample;
use crate::{Error, Exec, Result};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"GBCK1";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, weight_decay: 1e-4, eps: 1e-8 }
    }
}

impl From<AdamSettings> for AdamConfig {
    fn from(a: AdamSettings) -> Self {
        AdamConfig { beta1: a.beta1, beta2: a.beta2, eps: a.eps, weight_decay: a.weight_decay }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThrottleConfig {
    pub enabled: bool,
    pub r_target: f64,
    pub gain: f64,
    pub p_max: f64,
    pub ema_decay: f64,
}

impl Default for ThrottleConfig {
    fn default() -> Self {
        Self { enabled: true, r_target: 0.8, gain: 2.0, p_max: 0.9, ema_decay: 0.99 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lpips_weight: f64,
    pub adam: AdamSettings,
    pub lr: f64,
    pub lr_halving_period: u64,
    pub grad_clip: f64,
    pub gp_weight: f64,
    /// Finite-difference step for the penalty's parameter gradient.
    pub r1_delta: f64,
    pub batch_size: usize,
    pub total_iters: u64,
    pub checkpoint_every: u64,
    pub throttle: ThrottleConfig,
    pub policy: SamplingPolicy,
    /// Patch side; defaults to the backbone receptive field.
    pub crop: Option<usize>,
    pub match_threshold: f64,
    pub patches_per_image: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lpips_weight: 5.0,
            adam: AdamSettings::default(),
            lr: 1e-4,
            lr_halving_period: 100_000,
            grad_clip: 1000.0,
            gp_weight: 0.06,
            r1_delta: 1e-3,
            batch_size: 1,
            total_iters: 1_000_000,
            checkpoint_every: 10_000,
            throttle: ThrottleConfig::default(),
            policy: SamplingPolicy::Matched,
            crop: None,
            match_threshold: 0.5,
            patches_per_image: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("lpips_weight", self.lpips_weight),
            ("gp_weight", self.gp_weight),
            ("adam.weight_decay", self.adam.weight_decay),
            ("throttle.gain", self.throttle.gain),
        ];
        if let Some((name, v)) = nonneg.iter().find(|(_, v)| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("{name} must be a finite non-negative number, got {v}")));
        }
        if !(self.lr > 0.0) || !(self.grad_clip > 0.0) || !(self.r1_delta > 0.0) {
            return Err(Error::Config("lr, grad_clip and r1_delta must be positive".into()));
        }
        if self.total_iters == 0 || self.lr_halving_period == 0 {
            return Err(Error::Config("total_iters and lr_halving_period must be at least 1".into()));
        }
        if self.batch_size != 1 {
            return Err(Error::Config(format!("batch_size {} unsupported; training uses single patch pairs", self.batch_size)));
        }
        let t = &self.throttle;
        if !(0.0..=1.0).contains(&t.r_target) || !(0.0..=1.0).contains(&t.p_max) || !(0.0..1.0).contains(&t.ema_decay) {
            return Err(Error::Config("throttle r_target and p_max must lie in [0, 1], ema_decay in [0, 1)".into()));
        }
        if self.patches_per_image == 0 {
            return Err(Error::Config("patches_per_image must be positive".into()));
        }
        Ok(())
    }
}

impl TrainConfig {
    /// Short runs on 64x64 toy scenes.
    pub fn toy() -> Self {
        Self { lr: 1e-3, total_iters: 2000, checkpoint_every: 500, ..Default::default() }
    }
}

/// `lr0 * 2^-floor(iteration / period)`.
pub fn lr_at(cfg: &TrainConfig, iteration: u64) -> f64 {
    let halvings = iteration / cfg.lr_halving_period;
    cfg.lr * 0.5f64.powi(halvings.min(i32::MAX as u64) as i32)
}

/// Probability of skipping a discriminator's backward pass.
pub fn throttle_probability(r: f64, cfg: &ThrottleConfig) -> f64 {
    if !cfg.enabled {
        return 0.0;
    }
    (cfg.gain * (r - cfg.r_target)).clamp(0.0, cfg.p_max)
}

/// Network sizes and the frozen backbone.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub encoder: EncoderConfig,
    pub enhancer: EnhancerConfig,
    pub discriminator: DiscriminatorConfig,
}

impl ModelConfig {
    /// Small widths for 64x64 toy scenes on a CPU.
    pub fn toy() -> Self {
        Self {
            backbone: BackboneConfig { widths: vec![8, 16, 32, 64, 64], ..Default::default() },
            encoder: EncoderConfig { base_channels: 4, ..Default::default() },
            enhancer: EnhancerConfig { channels: vec![4, 8, 16, 32], blocks_per_stage: 1, rad_blocks: 1, ..Default::default() },
            discriminator: DiscriminatorConfig { widths: vec![8, 16, 16, 16, 16], ..Default::default() },
        }
    }
}

/// Controlled-experiment configurations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Condition {
    #[default]
    Ours,
    /// Uniformly placed crops of the given side, no matching.
    UniformCrop(usize),
    NoGbuffer,
    Concat,
    Spade,
    PatchGan,
    NoProjection,
    NoAdaptiveBackprop,
}

/// What a condition changes relative to the base configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub ingest: Ingest,
    pub modulation: Option<Modulation>,
    pub critic: CriticKind,
    pub policy: Option<SamplingPolicy>,
    pub crop: Option<usize>,
    pub throttle: bool,
}

impl Condition {
    pub fn variant(self) -> Variant {
        let base = Variant { ingest: Ingest::Encoder, modulation: None, critic: CriticKind::Perceptual, policy: None, crop: None, throttle: true };
        match self {
            Condition::Ours => base,
            Condition::UniformCrop(c) => Variant { policy: Some(SamplingPolicy::Uniform), crop: Some(c), ..base },
            Condition::NoGbuffer => Variant { ingest: Ingest::Disabled, ..base },
            Condition::Concat => Variant { ingest: Ingest::Concat, ..base },
            Condition::Spade => Variant { modulation: Some(Modulation::Spade), ..base },
            Condition::PatchGan => Variant { critic: CriticKind::PatchGan, ..base },
            Condition::NoProjection => Variant { critic: CriticKind::PerceptualNoProjection, ..base },
            Condition::NoAdaptiveBackprop => Variant { throttle: false, ..base },
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::Ours => f.write_str("ours"),
            Condition::UniformCrop(c) => write!(f, "unif-crop-{c}"),
            Condition::NoGbuffer => f.write_str("no-gbuffer"),
            Condition::Concat => f.write_str("concat"),
            Condition::Spade => f.write_str("spade"),
            Condition::PatchGan => f.write_str("patchgan"),
            Condition::NoProjection => f.write_str("no-projection"),
            Condition::NoAdaptiveBackprop => f.write_str("no-adaptive-backprop"),
        }
    }
}

impl FromStr for Condition {
    type Err = Error;

    /// Accepts the kebab-case names and the table labels, e.g.
    /// "Unif. sampl., crop 256" or "Ours (No G-buffer)".
    fn from_str(s: &str) -> Result<Self> {
        let mut key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        if key != "ours" {
            key = key.strip_prefix("ours").unwrap_or(&key).to_string();
        }
        if key.starts_with("unif") {
            let digits: String = key.chars().rev().take_while(char::is_ascii_digit).collect::<Vec<_>>().into_iter().rev().collect();
            return digits
                .parse()
                .ok()
                .filter(|&c| c > 0)
                .map(Condition::UniformCrop)
                .ok_or_else(|| Error::Config(format!("condition {s:?} needs a crop size")));
        }
        Ok(match key.as_str() {
            "ours" => Condition::Ours,
            "nogbuffer" => Condition::NoGbuffer,
            "concat" => Condition::Concat,
            "spade" => Condition::Spade,
            "patchgan" => Condition::PatchGan,
            "noprojection" => Condition::NoProjection,
            "noadaptivebackprop" => Condition::NoAdaptiveBackprop,
            _ => return Err(Error::Config(format!("unknown condition {s:?}"))),
        })
    }
}

impl From<Condition> for String {
    fn from(c: Condition) -> Self {
        c.to_string()
    }
}

impl TryFrom<String> for Condition {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Rendered source scenes and real target scenes with their class maps.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub source: Vec<SceneSample>,
    pub source_labels: Vec<LabelMap>,
    pub target: Vec<SceneSample>,
    pub target_labels: Vec<LabelMap>,
}

impl TrainData {
    pub fn new(source: Vec<SceneSample>, target: Vec<SceneSample>, provider: &dyn LabelProvider) -> Result<Self> {
        if source.is_empty() || target.is_empty() {
            return Err(Error::Precondition("training needs source and target samples".into()));
        }
        let maps = |set: &[SceneSample]| -> Result<Vec<LabelMap>> {
            set.iter()
                .map(|s| {
                    let (h, w) = s.hw();
                    LabelMap::new(h, w, provider.labels(s)?)
                })
                .collect()
        };
        Ok(Self { source_labels: maps(&source)?, target_labels: maps(&target)?, source, target })
    }
}

/// Where training pairs come from.
#[derive(Clone, Debug)]
pub enum PatchSource {
    Uniform { crop: usize },
    Matched { sampler: PairSampler, synthetic: Vec<PatchRef>, real: Vec<PatchRef> },
}

impl PatchSource {
    pub fn from_stores(synthetic: &EmbeddingStore, real: &EmbeddingStore, threshold: f64, exec: Exec) -> Result<Self> {
        let table = MatchTable::centered(&synthetic.rows(), &real.rows(), threshold, exec)?;
        let sampler = PairSampler::new(table)?;
        if sampler.skipped() > 0 {
            log::warn!("{} of {} synthetic patches have no match and are never sampled", sampler.skipped(), synthetic.len());
        }
        Ok(PatchSource::Matched { sampler, synthetic: synthetic.patches.clone(), real: real.patches.clone() })
    }

    /// Builds the pair source the configuration asks for, embedding patches
    /// when matching is on.
    pub fn build(cfg: &TrainConfig, condition: Condition, data: &TrainData, backbone: &dyn PerceptualBackbone, seed: u64, exec: Exec) -> Result<Self> {
        let v = condition.variant();
        let policy = v.policy.unwrap_or(cfg.policy);
        let rf = backbone.receptive_field();
        match policy {
            SamplingPolicy::Uniform => Ok(PatchSource::Uniform { crop: v.crop.or(cfg.crop).unwrap_or(rf) }),
            SamplingPolicy::Matched => {
                if let Some(c) = cfg.crop.filter(|&c| c != rf) {
                    return Err(Error::Config(format!("matched sampling needs crop = receptive field {rf}, got {c}")));
                }
                let id = "training";
                let syn = embed_dataset("source", &data.source, cfg.patches_per_image, backbone, id, seed, exec)?;
                let real = embed_dataset("target", &data.target, cfg.patches_per_image, backbone, id, seed ^ 0x7A56, exec)?;
                Self::from_stores(&syn, &real, cfg.match_threshold, exec)
            }
        }
    }

    pub fn crop(&self) -> usize {
        match self {
            PatchSource::Uniform { crop } => *crop,
            PatchSource::Matched { synthetic, .. } => synthetic[0].side,
        }
    }
}

fn check_finite(what: &str, v: f64, iteration: u64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{what} = {v} at iteration {iteration}")))
    }
}

/// Parameter gradients of the patch score `mean(s)` and its gradient with
/// respect to the level input.
fn score_sum_grads(
    d: &LevelDiscriminator,
    store: &ParamStore,
    x: &Tensor,
    labels: Option<&LabelMap>,
    params: bool,
) -> Result<(Tensor, Vec<Tensor>)> {
    let mut g = Graph::new();
    let mut b = Binder::new(store, params);
    let xv = g.leaf(x.clone(), true);
    let s = d.forward(&mut g, &mut b, xv, labels)?;
    let total = g.mean(s);
    let grads = g.backward(total)?;
    let gx = grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    let gp = if params { b.grads(&grads) } else { Vec::new() };
    Ok((gx, gp))
}

/// `||d mean(s) / dx||^2` at `x`, with the input gradient itself.
pub fn r1_penalty(d: &LevelDiscriminator, store: &ParamStore, x: &Tensor, labels: Option<&LabelMap>) -> Result<(f64, Tensor)> {
    let (gx, _) = score_sum_grads(d, store, x, labels, false)?;
    Ok((gx.sq_norm(), gx))
}

/// Penalty value and its parameter gradient. The mixed second derivative is
/// taken by central differences of parameter gradients along the input
/// gradient direction.
pub fn r1_param_grads(
    d: &LevelDiscriminator,
    store: &ParamStore,
    x: &Tensor,
    labels: Option<&LabelMap>,
    delta: f64,
) -> Result<(f64, Vec<Tensor>)> {
    let (pen, v) = r1_penalty(d, store, x, labels)?;
    let n = pen.sqrt();
    if n == 0.0 {
        return Ok((0.0, store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect()));
    }
    let step = delta / n;
    let xp = x.zip_map(&v, |a, b| a + step * b)?;
    let xm = x.zip_map(&v, |a, b| a - step * b)?;
    let (_, gp) = score_sum_grads(d, store, &xp, labels, true)?;
    let (_, gm) = score_sum_grads(d, store, &xm, labels, true)?;
    let k = n / delta;
    let grads = gp.iter().zip(&gm).map(|(p, m)| p.zip_map(m, |a, b| k * (a - b))).collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((pen, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LevelLog {
    pub d_loss: Option<f64>,
    pub r1: Option<f64>,
    pub accuracy: f64,
    pub p_skip: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub iteration: u64,
    pub lr: f64,
    pub g_adv: f64,
    pub g_perceptual: f64,
    pub g_total: f64,
    pub levels: Vec<LevelLog>,
}

struct LevelOutcome {
    correct: f64,
    update: Option<(f64, f64, Vec<Tensor>)>,
}

/// One training run: networks, optimizers, throttle state and the single
/// random stream that drives sampling and skip draws.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: ModelConfig,
    pub condition: Condition,
    pub seed: u64,
    pub backbone: RandomConvBackbone,
    pub generator: Generator,
    pub gen_store: ParamStore,
    pub gen_opt: Adam,
    pub critic: Critic,
    pub disc_opts: Vec<Adam>,
    pub tracker: AccuracyTracker,
    pub rng: ChaCha8Rng,
    pub iteration: u64,
    pub exec: Exec,
    pub data: TrainData,
    pub source: PatchSource,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, model: ModelConfig, condition: Condition, data: TrainData, seed: u64, exec: Exec) -> Result<Self> {
        cfg.validate()?;
        let backbone = RandomConvBackbone::new(&model.backbone)?;
        let source = PatchSource::build(&cfg, condition, &data, &backbone, seed, exec)?;
        Self::with_source(cfg, model, condition, data, source, seed, exec)
    }

    pub fn with_source(
        cfg: TrainConfig,
        model: ModelConfig,
        condition: Condition,
        data: TrainData,
        source: PatchSource,
        seed: u64,
        exec: Exec,
    ) -> Result<Self> {
        cfg.validate()?;
        let v = condition.variant();
        let backbone = RandomConvBackbone::new(&model.backbone)?;
        let mut init = ChaCha8Rng::seed_from_u64(seed);
        let mut enh = model.enhancer.clone();
        if let Some(m) = v.modulation {
            enh.modulation = m;
        }
        let mut gen_store = ParamStore::new();
        let generator = Generator::new(&mut gen_store, &model.encoder, &enh, v.ingest, &mut init)?;
        let critic = Critic::new(v.critic, &model.discriminator, &backbone, &mut init)?;
        let adam: AdamConfig = cfg.adam.into();
        let gen_opt = Adam::new(adam, &gen_store);
        let disc_opts = critic.stores.iter().map(|s| Adam::new(adam, s)).collect();
        let mut throttle = cfg.throttle;
        throttle.enabled &= v.throttle;
        let cfg = TrainConfig { throttle, ..cfg };
        let tracker = AccuracyTracker::new(critic.len(), cfg.throttle.ema_decay);
        let (h, w) = (data.source[0].hw(), data.target[0].hw());
        if source.crop() > h.0.min(h.1).min(w.0).min(w.1) {
            return Err(Error::Config(format!("crop {} larger than the training images", source.crop())));
        }
        Ok(Self {
            cfg,
            model,
            condition,
            seed,
            backbone,
            generator,
            gen_store,
            gen_opt,
            critic,
            disc_opts,
            tracker,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_7EA1),
            iteration: 0,
            exec,
            data,
            source,
        })
    }

    fn draw_pair(&mut self) -> Result<(PatchRef, PatchRef)> {
        match &self.source {
            PatchSource::Uniform { crop } => {
                let i = self.rng.random_range(0..self.data.source.len());
                let (h, w) = self.data.source[i].hw();
                let sp = random_patch("source", i, h, w, *crop, &mut self.rng)?;
                let j = self.rng.random_range(0..self.data.target.len());
                let (h, w) = self.data.target[j].hw();
                let rp = random_patch("target", j, h, w, *crop, &mut self.rng)?;
                Ok((sp, rp))
            }
            PatchSource::Matched { sampler, synthetic, real } => {
                let (s, r) = sampler.sample(&mut self.rng);
                Ok((synthetic[s].clone(), real[r].clone()))
            }
        }
    }

    /// Level inputs of an image as plain tensors.
    fn level_features(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let inputs = self.critic.level_inputs(&mut g, &self.backbone, x)?;
        Ok(inputs.into_iter().map(|v| g.value(v).clone()).collect())
    }

    pub fn step(&mut self) -> Result<StepLog> {
        let it = self.iteration;
        let lr = lr_at(&self.cfg, it);
        let (sp, rp) = self.draw_pair()?;
        let side = sp.side;
        let src = &self.data.source[sp.image];
        let syn_labels = self.data.source_labels[sp.image].crop(sp.y, sp.x, side, side);
        let use_labels = self.critic.uses_labels();

        // generator
        let mut g = Graph::new();
        let mut gb = Binder::new(&self.gen_store, true);
        let full = self.generator.forward(&mut g, &mut gb, &src.image, &src.gbuffers)?;
        let fake = g.crop(full, sp.y, sp.x, side, side)?;
        let input = g.constant(src.image.crop(sp.y, sp.x, side, side)?);
        let fake_taps = self.backbone.forward(&mut g, fake)?;
        let inputs = match self.critic.kind {
            CriticKind::PatchGan => crate::discriminator::patchgan_inputs(&mut g, fake)?,
            _ => fake_taps.clone(),
        };
        let mut adv = None;
        for ((d, store), &x) in self.critic.levels.iter().zip(&self.critic.stores).zip(&inputs) {
            let mut db = Binder::new(store, false);
            let s = d.forward(&mut g, &mut db, x, use_labels.then_some(&syn_labels))?;
            let t = g.add_scalar(s, -1.0);
            let t = g.square(t);
            let m = g.mean(t);
            adv = Some(match adv {
                None => m,
                Some(a) => g.add(a, m)?,
            });
        }
        let adv = adv.ok_or_else(|| Error::Config("critic has no levels".into()))?;
        let input_taps = self.backbone.forward(&mut g, input)?;
        let perc = distance_from_taps(&mut g, &fake_taps, &input_taps)?;
        let weighted = g.scale(perc, self.cfg.lpips_weight);
        let total = g.add(adv, weighted)?;
        let g_adv = check_finite("generator adversarial loss", g.value(adv).data()[0], it)?;
        let g_perc = check_finite("perceptual loss", g.value(perc).data()[0], it)?;
        let g_total = g.value(total).data()[0];
        let grads = g.backward(total)?;
        let mut ggrads = gb.grads(&grads);
        clip_global_norm(&mut ggrads, self.cfg.grad_clip);
        let fake_val = g.value(fake).clone();
        drop(g);
        self.gen_opt.update(&mut self.gen_store, &ggrads, lr);
        self.gen_store.refresh_spectral(1);

        // discriminators
        let tgt = &self.data.target[rp.image];
        let real_labels = self.data.target_labels[rp.image].crop(rp.y, rp.x, side, side);
        let real_feats = self.level_features(&tgt.image.crop(rp.y, rp.x, side, side)?)?;
        let fake_feats = self.level_features(&fake_val)?;
        let k = self.critic.len();
        let draws: Vec<f64> = (0..k).map(|_| self.rng.random::<f64>()).collect();
        let p_skip: Vec<f64> = self.tracker.r.iter().map(|&r| throttle_probability(r, &self.cfg.throttle)).collect();
        let cfg = &self.cfg;
        let critic = &self.critic;
        let outcomes = self.exec.try_map(k, |lvl| {
            let d = &critic.levels[lvl];
            let store = &critic.stores[lvl];
            let (rl, fl) = if use_labels { (Some(&real_labels), Some(&syn_labels)) } else { (None, None) };
            let mut g = Graph::new();
            let mut b = Binder::new(store, true);
            let xr = g.constant(real_feats[lvl].clone());
            let xf = g.constant(fake_feats[lvl].clone());
            let sr = d.forward(&mut g, &mut b, xr, rl)?;
            let sf = d.forward(&mut g, &mut b, xf, fl)?;
            let (real_s, fake_s) = (g.value(sr).clone(), g.value(sf).clone());
            let n_r = real_s.len() as f64;
            let n_f = fake_s.len() as f64;
            let correct = (correctness(&real_s, Truth::Real) * n_r + correctness(&fake_s, Truth::Fake) * n_f) / (n_r + n_f);
            if draws[lvl] < p_skip[lvl] {
                return Ok(LevelOutcome { correct, update: None });
            }
            let lr_ = g.add_scalar(sr, -1.0);
            let lr_ = g.square(lr_);
            let lr_ = g.mean(lr_);
            let lf = g.square(sf);
            let lf = g.mean(lf);
            let loss = g.add(lr_, lf)?;
            let mut l = g.value(loss).data()[0];
            let grads = g.backward(loss)?;
            let mut grads = b.grads(&grads);
            let mut pen = 0.0;
            if cfg.gp_weight > 0.0 {
                let (p, hvp) = r1_param_grads(d, store, &real_feats[lvl], rl, cfg.r1_delta)?;
                pen = p;
                for (gr, h) in grads.iter_mut().zip(&hvp) {
                    *gr = gr.zip_map(h, |a, b| a + cfg.gp_weight * b)?;
                }
                l += cfg.gp_weight * p;
            }
            check_finite(&format!("discriminator {lvl} loss"), l, it)?;
            check_finite(&format!("discriminator {lvl} penalty"), pen, it)?;
            Ok::<_, Error>(LevelOutcome { correct, update: Some((l, pen, grads)) })
        })?;
        let mut levels = Vec::with_capacity(k);
        for (lvl, out) in outcomes.into_iter().enumerate() {
            let mut log = LevelLog { d_loss: None, r1: None, accuracy: 0.0, p_skip: p_skip[lvl] };
            if let Some((l, pen, mut grads)) = out.update {
                clip_global_norm(&mut grads, self.cfg.grad_clip);
                self.disc_opts[lvl].update(&mut self.critic.stores[lvl], &grads, lr);
                self.critic.stores[lvl].refresh_spectral(1);
                log.d_loss = Some(l);
                log.r1 = Some(pen);
            }
            log.accuracy = self.tracker.update(lvl, out.correct);
            levels.push(log);
        }
        self.iteration += 1;
        Ok(StepLog { iteration: it, lr, g_adv, g_perceptual: g_perc, g_total, levels })
    }

    /// Runs until `until` iterations, logging every step and writing a
    /// checkpoint every `checkpoint_every` iterations when a directory is given.
    pub fn train(&mut self, until: u64, log: Option<&mut LossLog>, checkpoints: Option<&Path>) -> Result<()> {
        let mut log = log;
        while self.iteration < until {
            let rec = self.step()?;
            if let Some(l) = log.as_deref_mut() {
                l.write(&rec)?;
            }
            if let Some(dir) = checkpoints {
                if self.cfg.checkpoint_every > 0 && self.iteration % self.cfg.checkpoint_every == 0 {
                    self.save_checkpoint(&dir.join(format!("checkpoint-{:08}.gbck", self.iteration)))?;
                }
            }
        }
        if let Some(l) = log {
            l.flush()?;
        }
        Ok(())
    }

    pub fn enhance(&self, sample: &SceneSample) -> Result<Tensor> {
        self.generator.enhance(&self.gen_store, &sample.image, &sample.gbuffers)
    }

    fn meta(&self) -> serde_json::Value {
        serde_json::json!({
            "iteration": self.iteration,
            "seed": self.seed,
            "condition": self.condition.to_string(),
            "config": self.cfg,
            "model": self.model,
            "gen_adam_step": self.gen_opt.step,
            "disc_adam_steps": self.disc_opts.iter().map(|o| o.step).collect::<Vec<_>>(),
            "rng": self.rng,
        })
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let mut blob = Blob { meta: self.meta(), ..Default::default() };
        let mut push_store = |prefix: &str, store: &ParamStore, opt: &Adam| {
            for (name, t) in store.named_tensors() {
                let shape = t.shape().to_vec();
                blob.push_f64(&format!("{prefix}/{name}"), &shape, t.into_vec());
            }
            for (i, (m, v)) in opt.m.iter().zip(&opt.v).enumerate() {
                blob.push_f64(&format!("{prefix}/adam_m/{i}"), m.shape(), m.data().to_vec());
                blob.push_f64(&format!("{prefix}/adam_v/{i}"), v.shape(), v.data().to_vec());
            }
        };
        push_store("gen", &self.gen_store, &self.gen_opt);
        for (k, (s, o)) in self.critic.stores.iter().zip(&self.disc_opts).enumerate() {
            push_store(&format!("disc{k}"), s, o);
        }
        blob.push_f64("tracker", &[self.tracker.r.len()], self.tracker.r.clone());
        blob.encode(CHECKPOINT_MAGIC)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("partial");
        fs::File::create(&tmp)?.write_all(&self.checkpoint_bytes())?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    /// Restores weights, optimizer moments, throttle state, iteration and the
    /// random stream. The trainer must have been built from the same
    /// configuration.
    pub fn load_checkpoint_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let blob = Blob::decode(CHECKPOINT_MAGIC, bytes)?;
        let meta = &blob.meta;
        let expect = self.meta();
        // Run length may change on resume; everything else must agree.
        let trimmed = |v: &serde_json::Value| {
            let mut v = v.clone();
            if let Some(o) = v.as_object_mut() {
                o.remove("total_iters");
                o.remove("checkpoint_every");
            }
            v
        };
        for key in ["condition", "config", "model", "seed"] {
            let (a, b) = if key == "config" { (trimmed(&meta[key]), trimmed(&expect[key])) } else { (meta[key].clone(), expect[key].clone()) };
            if a != b {
                return Err(Error::Config(format!("checkpoint {key} differs from this run's configuration")));
            }
        }
        let tensor = |name: &str| -> Result<Tensor> {
            let (shape, data) = blob.f64(name)?;
            Ok(Tensor::from_vec(shape, data.to_vec())?)
        };
        let load_store = |prefix: &str, store: &mut ParamStore, opt: &mut Adam, step: u64| -> Result<()> {
            let names: Vec<String> = store.named_tensors().into_iter().map(|(n, _)| n).collect();
            let named = names.iter().map(|n| Ok((n.clone(), tensor(&format!("{prefix}/{n}"))?))).collect::<Result<Vec<_>>>()?;
            store.load_named(&named)?;
            for i in 0..opt.m.len() {
                opt.m[i] = tensor(&format!("{prefix}/adam_m/{i}"))?;
                opt.v[i] = tensor(&format!("{prefix}/adam_v/{i}"))?;
            }
            opt.step = step;
            Ok(())
        };
        let num = |v: &serde_json::Value| v.as_u64().ok_or_else(|| Error::Config("checkpoint metadata is malformed".into()));
        load_store("gen", &mut self.gen_store, &mut self.gen_opt, num(&meta["gen_adam_step"])?)?;
        let steps = meta["disc_adam_steps"].as_array().ok_or_else(|| Error::Config("checkpoint metadata is malformed".into()))?;
        for k in 0..self.critic.len() {
            let step = num(steps.get(k).unwrap_or(&serde_json::Value::Null))?;
            load_store(&format!("disc{k}"), &mut self.critic.stores[k], &mut self.disc_opts[k], step)?;
        }
        let (_, r) = blob.f64("tracker")?;
        self.tracker.r = r.to_vec();
        self.rng = serde_json::from_value(meta["rng"].clone())?;
        self.iteration = num(&meta["iteration"])?;
        Ok(())
    }

    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        self.load_checkpoint_bytes(&fs::read(path)?)
    }
}

/// Rebuilds the generator stored in a checkpoint. Checkpoints carry their
/// model configuration and condition, so nothing else is needed.
pub fn generator_from_checkpoint(bytes: &[u8]) -> Result<(Generator, ParamStore, Condition)> {
    let blob = Blob::decode(CHECKPOINT_MAGIC, bytes)?;
    let model: ModelConfig = serde_json::from_value(blob.meta["model"].clone())?;
    let condition: Condition = serde_json::from_value(blob.meta["condition"].clone())?;
    let v = condition.variant();
    let mut enh = model.enhancer.clone();
    if let Some(m) = v.modulation {
        enh.modulation = m;
    }
    let mut store = ParamStore::new();
    let generator = Generator::new(&mut store, &model.encoder, &enh, v.ingest, &mut ChaCha8Rng::seed_from_u64(0))?;
    let named = store
        .named_tensors()
        .into_iter()
        .map(|(n, _)| {
            let (shape, data) = blob.f64(&format!("gen/{n}"))?;
            Ok((n, Tensor::from_vec(shape, data.to_vec())?))
        })
        .collect::<Result<Vec<_>>>()?;
    store.load_named(&named)?;
    Ok((generator, store, condition))
}

/// Per-iteration loss curves as CSV.
pub struct LossLog {
    writer: csv::Writer<Box<dyn Write + Send>>,
    header_written: bool,
}

impl LossLog {
    pub fn new(out: Box<dyn Write + Send>) -> Self {
        Self { writer: csv::Writer::from_writer(out), header_written: false }
    }

    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self::new(Box::new(fs::File::create(path)?)))
    }

    pub fn write(&mut self, rec: &StepLog) -> Result<()> {
        if !self.header_written {
            let mut h: Vec<String> = ["iteration", "lr", "g_adv", "g_perceptual", "g_total"].map(String::from).to_vec();
            for k in 0..rec.levels.len() {
                h.extend(["d_loss", "r1", "r", "p_skip"].map(|c| format!("{c}_{}", k + 1)));
            }
            self.writer.write_record(&h)?;
            self.header_written = true;
        }
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        let mut row = vec![rec.iteration.to_string(), rec.lr.to_string(), rec.g_adv.to_string(), rec.g_perceptual.to_string(), rec.g_total.to_string()];
        for l in &rec.levels {
            row.extend([opt(l.d_loss), opt(l.r1), l.accuracy.to_string(), l.p_skip.to_string()]);
        }
        self.writer.write_record(&row)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_points() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(&cfg, 0), 1e-4);
        assert_eq!(lr_at(&cfg, 99_999), 1e-4);
        assert_eq!(lr_at(&cfg, 100_000), 5e-5);
        assert_eq!(lr_at(&cfg, 250_000), 2.5e-5);
    }

    #[test]
    fn throttle_anchor_points() {
        let t = ThrottleConfig::default();
        assert_eq!(throttle_probability(0.8, &t), 0.0);
        assert_eq!(throttle_probability(0.0, &t), 0.0);
        assert_eq!(throttle_probability(1.0, &t), 2.0 * (1.0 - 0.8));
        assert!((throttle_probability(1.0, &t) - 0.4).abs() <= f64::EPSILON);
        assert_eq!(throttle_probability(1.0, &ThrottleConfig { gain: 100.0, ..t }), 0.9);
        assert_eq!(throttle_probability(1.0, &ThrottleConfig { enabled: false, ..t }), 0.0);
    }

    #[test]
    fn condition_names() {
        for (s, c) in [
            ("ours", Condition::Ours),
            ("Unif. sampl., crop 256", Condition::UniformCrop(256)),
            ("Ours (Unif. sampl., crop 196)", Condition::UniformCrop(196)),
            ("unif-crop-48", Condition::UniformCrop(48)),
            ("No G-buffer", Condition::NoGbuffer),
            ("Concat", Condition::Concat),
            ("SPADE", Condition::Spade),
            ("PatchGAN", Condition::PatchGan),
            ("No projection", Condition::NoProjection),
            ("No adaptive backprop", Condition::NoAdaptiveBackprop),
        ] {
            assert_eq!(s.parse::<Condition>().unwrap(), c, "{s}");
            assert_eq!(c.to_string().parse::<Condition>().unwrap(), c);
        }
        assert!("unif".parse::<Condition>().is_err());
        assert!("mystery".parse::<Condition>().is_err());
        assert!(!Condition::NoAdaptiveBackprop.variant().throttle);
        let u = Condition::UniformCrop(256).variant();
        assert_eq!((u.policy, u.crop), (Some(SamplingPolicy::Uniform), Some(256)));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { lpips_weight: -1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { total_iters: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 2, ..Default::default() }.validate().is_err());
    }
}
