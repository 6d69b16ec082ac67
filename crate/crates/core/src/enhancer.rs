//! Multi-branch enhancement network whose normalization layers are modulated
//! by encoded G-buffer features.

use gbuf_autodiff::nn::Init;
use gbuf_autodiff::{Binder, Conv2d, ConvSpec, Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{validate_scales, EncoderConfig, GBufferEncoder, ResidualBlock};
use crate::scenegen::{GBufferSet, ENCODER_INPUT_CHANNELS};
use crate::{shape_err, Error, Result};

pub const GN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modulation {
    /// `gamma(g) * GN(x) + beta(g)` with residual blocks on `g`.
    Rad,
    /// `GN(x) * (1 + gamma(g)) + beta(g)` with one shared conv on `g`.
    Spade,
    /// Per-channel learned affine after group normalization.
    GroupAffine,
    /// Per-channel learned affine after instance normalization.
    InstanceAffine,
}

impl Modulation {
    pub fn uses_pyramid(self) -> bool {
        matches!(self, Modulation::Rad | Modulation::Spade)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnhancerConfig {
    /// Branch scales as downsampling factors, finest first.
    pub scales: Vec<usize>,
    pub channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub max_groups: usize,
    pub rad_blocks: usize,
    pub modulation: Modulation,
    pub image_channels: usize,
    /// Start gamma/beta predictors at zero weights (constant modulation).
    pub zero_init_modulation: bool,
}

impl Default for EnhancerConfig {
    fn default() -> Self {
        Self {
            scales: vec![1, 2, 4, 8],
            channels: vec![16, 32, 64, 128],
            blocks_per_stage: 2,
            max_groups: 8,
            rad_blocks: 3,
            modulation: Modulation::Rad,
            image_channels: 3,
            zero_init_modulation: false,
        }
    }
}

impl EnhancerConfig {
    pub fn validate(&self) -> Result<()> {
        validate_scales(&self.scales)?;
        if self.channels.len() != self.scales.len() {
            return Err(Error::Config(format!(
                "enhancer has {} scales but {} channel widths",
                self.scales.len(),
                self.channels.len()
            )));
        }
        if self.channels.contains(&0) || self.blocks_per_stage == 0 || self.max_groups == 0 || self.image_channels < 3 {
            return Err(Error::Config("enhancer widths, blocks and groups must be positive".into()));
        }
        Ok(())
    }

    pub fn groups(&self, channels: usize) -> usize {
        group_count(channels, self.max_groups)
    }
}

/// Largest divisor of `channels` not above `max_groups`.
pub fn group_count(channels: usize, max_groups: usize) -> usize {
    (1..=max_groups.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

#[derive(Clone, Debug)]
pub enum ModulatorKind {
    Rad { blocks: Vec<ResidualBlock>, gamma: Conv2d, beta: Conv2d },
    Spade { shared: Conv2d, gamma: Conv2d, beta: Conv2d },
    Affine { gamma: ParamId, beta: ParamId },
}

/// One normalization site bound to a branch scale.
#[derive(Clone, Debug)]
pub struct Modulator {
    pub kind: ModulatorKind,
    pub groups: usize,
    pub level: usize,
}

impl Modulator {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: &EnhancerConfig,
        g_channels: usize,
        channels: usize,
        level: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let head_init = if cfg.zero_init_modulation { Init::Zeros } else { Init::He(0.1) };
        let kind = match cfg.modulation {
            Modulation::Rad => {
                let blocks = (0..cfg.rad_blocks)
                    .map(|i| ResidualBlock::new(store, &format!("{name}.rad{i}"), g_channels, g_channels, 1, rng))
                    .collect::<Result<Vec<_>>>()?;
                let gamma = Conv2d::new(store, &format!("{name}.gamma"), ConvSpec::new(g_channels, channels, 1).init(head_init), rng);
                let beta = Conv2d::new(store, &format!("{name}.beta"), ConvSpec::new(g_channels, channels, 1).init(head_init), rng);
                if let Some(b) = gamma.bias {
                    *store.value_mut(b) = Tensor::ones(&[channels]);
                }
                ModulatorKind::Rad { blocks, gamma, beta }
            }
            Modulation::Spade => {
                let shared = Conv2d::new(store, &format!("{name}.shared"), ConvSpec::new(g_channels, g_channels, 3), rng);
                let gamma = Conv2d::new(store, &format!("{name}.gamma"), ConvSpec::new(g_channels, channels, 3).init(head_init), rng);
                let beta = Conv2d::new(store, &format!("{name}.beta"), ConvSpec::new(g_channels, channels, 3).init(head_init), rng);
                ModulatorKind::Spade { shared, gamma, beta }
            }
            Modulation::GroupAffine | Modulation::InstanceAffine => ModulatorKind::Affine {
                gamma: store.add(format!("{name}.affine_gamma"), Tensor::ones(&[channels])),
                beta: store.add(format!("{name}.affine_beta"), Tensor::zeros(&[channels])),
            },
        };
        let groups = match cfg.modulation {
            Modulation::InstanceAffine => channels,
            _ => cfg.groups(channels),
        };
        Ok(Self { kind, groups, level })
    }

    /// Normalizes `x` and applies the modulation predicted from `gfeat`.
    pub fn forward(&self, g: &mut Graph, b: &mut Binder<'_>, x: Var, gfeat: Option<Var>) -> Result<Var> {
        let xn = g.group_norm(x, self.groups, GN_EPS)?;
        match &self.kind {
            ModulatorKind::Affine { gamma, beta } => {
                let (gm, bt) = (b.get(g, *gamma)?, b.get(g, *beta)?);
                Ok(g.channel_affine(xn, gm, bt)?)
            }
            ModulatorKind::Rad { blocks, gamma, beta } => {
                let mut h = self.conditioning(g, x, gfeat)?;
                for blk in blocks {
                    h = blk.forward(g, b, h)?;
                }
                let gm = gamma.forward(g, b, h)?;
                let bt = beta.forward(g, b, h)?;
                let y = g.mul(gm, xn)?;
                Ok(g.add(y, bt)?)
            }
            ModulatorKind::Spade { shared, gamma, beta } => {
                let h = self.conditioning(g, x, gfeat)?;
                let h = shared.forward(g, b, h)?;
                let h = g.relu(h);
                let gm = gamma.forward(g, b, h)?;
                let gm = g.add_scalar(gm, 1.0);
                let bt = beta.forward(g, b, h)?;
                let y = g.mul(gm, xn)?;
                Ok(g.add(y, bt)?)
            }
        }
    }

    fn conditioning(&self, g: &Graph, x: Var, gfeat: Option<Var>) -> Result<Var> {
        let f = gfeat.ok_or_else(|| Error::Config(format!("no G-buffer features for branch {}", self.level)))?;
        if g.shape(f)[1..] != g.shape(x)[1..] {
            return Err(shape_err(format!(
                "G-buffer features {:?} do not match image features {:?}",
                g.shape(f),
                g.shape(x)
            )));
        }
        Ok(f)
    }
}

/// `gamma(gf) * GN(x) + beta(gf)` for a RAD modulator.
pub fn rad_forward(g: &mut Graph, b: &mut Binder<'_>, m: &Modulator, x: Var, gfeat: Var) -> Result<Var> {
    if !matches!(m.kind, ModulatorKind::Rad { .. }) {
        return Err(Error::Config("rad_forward needs a RAD modulator".into()));
    }
    m.forward(g, b, x, Some(gfeat))
}

/// conv -> mod -> relu -> conv -> mod -> +x -> relu
#[derive(Clone, Debug)]
pub struct BasicBlock {
    pub conv1: Conv2d,
    pub mod1: Modulator,
    pub conv2: Conv2d,
    pub mod2: Modulator,
}

impl BasicBlock {
    fn forward(&self, g: &mut Graph, b: &mut Binder<'_>, x: Var, gfeat: Option<Var>) -> Result<Var> {
        let h = self.conv1.forward(g, b, x)?;
        let h = self.mod1.forward(g, b, h, gfeat)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, b, h)?;
        let h = self.mod2.forward(g, b, h, gfeat)?;
        let h = g.add(h, x)?;
        Ok(g.relu(h))
    }
}

#[derive(Clone, Debug)]
enum Exchange {
    Identity,
    Up { conv: Conv2d, factor: usize },
    Down { convs: Vec<Conv2d> },
}

#[derive(Clone, Debug)]
struct Stage {
    branches: Vec<Vec<BasicBlock>>,
    /// `exchange[i][j]` maps branch `j` onto branch `i`; empty for one branch.
    exchange: Vec<Vec<Exchange>>,
}

#[derive(Clone, Debug)]
pub struct Enhancer {
    pub cfg: EnhancerConfig,
    stem: [Conv2d; 2],
    stages: Vec<Stage>,
    transitions: Vec<Conv2d>,
    head_mix: Conv2d,
    head_out: Conv2d,
    /// Widths of the G-buffer features expected per branch.
    pub pyramid_channels: Vec<usize>,
}

impl Enhancer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &EnhancerConfig, pyramid_channels: &[usize], rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.scales.len();
        if cfg.modulation.uses_pyramid() && pyramid_channels.len() != n {
            return Err(Error::Config(format!(
                "encoder provides {} scales, enhancer has {n} branches",
                pyramid_channels.len()
            )));
        }
        let ch = &cfg.channels;
        let stem = [
            Conv2d::new(store, &format!("{name}.stem0"), ConvSpec::new(cfg.image_channels, ch[0], 3), rng),
            Conv2d::new(store, &format!("{name}.stem1"), ConvSpec::new(ch[0], ch[0], 3), rng),
        ];
        let mut stages = Vec::with_capacity(n);
        let mut transitions = Vec::with_capacity(n.saturating_sub(1));
        for s in 0..n {
            if s > 0 {
                transitions.push(Conv2d::new(store, &format!("{name}.trans{s}"), ConvSpec::new(ch[s - 1], ch[s], 3).stride(2), rng));
            }
            let mut branches = Vec::with_capacity(s + 1);
            for br in 0..=s {
                let mut blocks = Vec::with_capacity(cfg.blocks_per_stage);
                for k in 0..cfg.blocks_per_stage {
                    let p = format!("{name}.s{s}.b{br}.blk{k}");
                    let gch = pyramid_channels.get(br).copied().unwrap_or(0);
                    blocks.push(BasicBlock {
                        conv1: Conv2d::new(store, &format!("{p}.conv1"), ConvSpec::new(ch[br], ch[br], 3).bias(false), rng),
                        mod1: Modulator::new(store, &format!("{p}.mod1"), cfg, gch, ch[br], br, rng)?,
                        conv2: Conv2d::new(store, &format!("{p}.conv2"), ConvSpec::new(ch[br], ch[br], 3).bias(false), rng),
                        mod2: Modulator::new(store, &format!("{p}.mod2"), cfg, gch, ch[br], br, rng)?,
                    });
                }
                branches.push(blocks);
            }
            let mut exchange = Vec::new();
            if s > 0 {
                for i in 0..=s {
                    let mut row = Vec::with_capacity(s + 1);
                    for j in 0..=s {
                        let p = format!("{name}.s{s}.fuse{i}_{j}");
                        row.push(if i == j {
                            Exchange::Identity
                        } else if j > i {
                            Exchange::Up {
                                conv: Conv2d::new(store, &p, ConvSpec::new(ch[j], ch[i], 1), rng),
                                factor: 1 << (j - i),
                            }
                        } else {
                            let convs = (0..i - j)
                                .map(|k| {
                                    let out = if k + 1 == i - j { ch[i] } else { ch[j] };
                                    Conv2d::new(store, &format!("{p}.down{k}"), ConvSpec::new(ch[j], out, 3).stride(2), rng)
                                })
                                .collect();
                            Exchange::Down { convs }
                        });
                    }
                    exchange.push(row);
                }
            }
            stages.push(Stage { branches, exchange });
        }
        let total: usize = ch.iter().sum();
        let head_mix = Conv2d::new(store, &format!("{name}.head_mix"), ConvSpec::new(total, ch[0], 1), rng);
        let head_out = Conv2d::new(store, &format!("{name}.head_out"), ConvSpec::new(ch[0], 3, 3).init(Init::He(0.1)), rng);
        Ok(Self {
            cfg: cfg.clone(),
            stem,
            stages,
            transitions,
            head_mix,
            head_out,
            pyramid_channels: pyramid_channels.to_vec(),
        })
    }

    /// Strides of every layer applied before the first branch split.
    pub fn pre_split_strides(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.stem.iter().map(|c| c.spec.stride).collect();
        for blk in &self.stages[0].branches[0] {
            s.push(blk.conv1.spec.stride);
            s.push(blk.conv2.spec.stride);
        }
        s
    }

    pub fn modulators(&self) -> impl Iterator<Item = &Modulator> {
        self.stages
            .iter()
            .flat_map(|s| s.branches.iter().flatten())
            .flat_map(|b| [&b.mod1, &b.mod2])
    }

    /// `image` is `[image_channels, H, W]`; the first three channels are the
    /// RGB input that the output is added to.
    pub fn forward(&self, g: &mut Graph, b: &mut Binder<'_>, image: Var, pyramid: Option<&[Var]>) -> Result<Var> {
        let (c, h, w) = g.value(image).chw()?;
        let n = self.cfg.scales.len();
        let top = 1 << (n - 1);
        if c != self.cfg.image_channels {
            return Err(shape_err(format!("enhancer expects {} input channels, got {c}", self.cfg.image_channels)));
        }
        if h % top != 0 || w % top != 0 {
            return Err(shape_err(format!("{h}x{w} not divisible by {top}")));
        }
        let feats: Vec<Option<Var>> = if self.cfg.modulation.uses_pyramid() {
            let p = pyramid.ok_or_else(|| Error::Config("modulated enhancer needs a G-buffer pyramid".into()))?;
            (0..n)
                .map(|i| {
                    p.get(i)
                        .copied()
                        .map(Some)
                        .ok_or_else(|| Error::Config(format!("pyramid is missing scale 1/{}", 1 << i)))
                })
                .collect::<Result<_>>()?
        } else {
            vec![None; n]
        };

        let x = self.stem[0].forward(g, b, image)?;
        let x = g.relu(x);
        let x = self.stem[1].forward(g, b, x)?;
        let mut xs = vec![g.relu(x)];
        for (s, stage) in self.stages.iter().enumerate() {
            if s > 0 {
                let t = self.transitions[s - 1].forward(g, b, xs[s - 1])?;
                xs.push(g.relu(t));
            }
            for (br, blocks) in stage.branches.iter().enumerate() {
                for blk in blocks {
                    xs[br] = blk.forward(g, b, xs[br], feats[br])?;
                }
            }
            if s > 0 {
                xs = self.exchange(g, b, stage, &xs)?;
            }
        }
        let mut ups = Vec::with_capacity(n);
        for (i, &x) in xs.iter().enumerate() {
            ups.push(g.upsample_bilinear(x, 1 << i)?);
        }
        let cat = g.concat(&ups)?;
        let y = self.head_mix.forward(g, b, cat)?;
        let y = g.relu(y);
        let y = self.head_out.forward(g, b, y)?;
        let rgb = if c == 3 { image } else { g.crop_channels(image, 0, 3)? };
        let y = g.add(y, rgb)?;
        Ok(g.soft_clamp(y, 0.0, 1.0))
    }

    fn exchange(&self, g: &mut Graph, b: &mut Binder<'_>, stage: &Stage, xs: &[Var]) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(xs.len());
        for row in &stage.exchange {
            let mut acc: Option<Var> = None;
            for (j, op) in row.iter().enumerate() {
                let v = match op {
                    Exchange::Identity => xs[j],
                    Exchange::Up { conv, factor } => {
                        let t = conv.forward(g, b, xs[j])?;
                        g.upsample_bilinear(t, *factor)?
                    }
                    Exchange::Down { convs } => {
                        let mut t = xs[j];
                        for (k, conv) in convs.iter().enumerate() {
                            t = conv.forward(g, b, t)?;
                            if k + 1 < convs.len() {
                                t = g.relu(t);
                            }
                        }
                        t
                    }
                };
                acc = Some(match acc {
                    None => v,
                    Some(a) => g.add(a, v)?,
                });
            }
            let a = acc.expect("at least one branch");
            out.push(g.relu(a));
        }
        Ok(out)
    }
}

/// How the generator consumes G-buffers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ingest {
    /// Encoder pyramid feeding the enhancer's modulators.
    Encoder,
    /// G-buffers appended to the image channels.
    Concat,
    /// Concat architecture with the G-buffer channels zeroed.
    Disabled,
}

/// Encoder and enhancer sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Generator {
    pub encoder: Option<GBufferEncoder>,
    pub enhancer: Enhancer,
    pub ingest: Ingest,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        enc_cfg: &EncoderConfig,
        enh_cfg: &EnhancerConfig,
        ingest: Ingest,
        rng: &mut R,
    ) -> Result<Self> {
        let mut enh_cfg = enh_cfg.clone();
        match ingest {
            Ingest::Encoder => {
                if !enh_cfg.modulation.uses_pyramid() {
                    return Err(Error::Config("encoder ingest needs rad or spade modulation".into()));
                }
                if enc_cfg.scales != enh_cfg.scales {
                    return Err(Error::Config(format!(
                        "encoder scales {:?} differ from enhancer branch scales {:?}",
                        enc_cfg.scales, enh_cfg.scales
                    )));
                }
                let encoder = GBufferEncoder::new(store, "enc", enc_cfg, rng)?;
                let widths: Vec<usize> = (0..enc_cfg.scales.len()).map(|l| enc_cfg.width(l)).collect();
                let enhancer = Enhancer::new(store, "enh", &enh_cfg, &widths, rng)?;
                Ok(Self { encoder: Some(encoder), enhancer, ingest })
            }
            Ingest::Concat | Ingest::Disabled => {
                if enh_cfg.modulation.uses_pyramid() {
                    enh_cfg.modulation = Modulation::InstanceAffine;
                }
                enh_cfg.image_channels = 3 + ENCODER_INPUT_CHANNELS;
                let enhancer = Enhancer::new(store, "enh", &enh_cfg, &[], rng)?;
                Ok(Self { encoder: None, enhancer, ingest })
            }
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &mut Binder<'_>, image: &Tensor, gbuf: &GBufferSet) -> Result<Var> {
        match (&self.encoder, self.ingest) {
            (Some(enc), _) => {
                let gx = g.constant(gbuf.encoder_input());
                let pyr = enc.forward(g, b, gx, &gbuf.masks())?;
                let x = g.constant(image.clone());
                self.enhancer.forward(g, b, x, Some(&pyr))
            }
            (None, ingest) => {
                let mut gin = gbuf.encoder_input();
                if ingest == Ingest::Disabled {
                    gin = Tensor::zeros(gin.shape());
                }
                let x = g.constant(Tensor::concat_channels(&[image, &gin])?);
                self.enhancer.forward(g, b, x, None)
            }
        }
    }

    pub fn enhance(&self, store: &ParamStore, image: &Tensor, gbuf: &GBufferSet) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut b = Binder::new(store, false);
        let y = self.forward(&mut g, &mut b, image, gbuf)?;
        Ok(g.value(y).clone())
    }
}

/// Concat condition: standard trunk with instance normalization over the
/// image stacked with the G-buffers.
pub fn enhance_variant_concat(gen: &Generator, store: &ParamStore, image: &Tensor, gbuf: &GBufferSet) -> Result<Tensor> {
    if gen.ingest == Ingest::Encoder {
        return Err(Error::Config("generator was built for encoder ingest".into()));
    }
    gen.enhance(store, image, gbuf)
}
