//! G-buffer encoder: per-object-group streams fused by masks, then a chain of
//! residual blocks tapped at every enhancer scale.

use gbuf_autodiff::nn::Init;
use gbuf_autodiff::{Binder, Conv2d, ConvSpec, Graph, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::scenegen::{GBufferSet, ENCODER_INPUT_CHANNELS, NUM_CLASSES};
use crate::{shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub n_streams: usize,
    pub input_channels: usize,
    /// Width at full resolution; doubles at every coarser scale.
    pub base_channels: usize,
    /// Output scales as downsampling factors, e.g. `[1, 2, 4, 8]`.
    pub scales: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_streams: NUM_CLASSES,
            input_channels: ENCODER_INPUT_CHANNELS,
            base_channels: 16,
            scales: vec![1, 2, 4, 8],
        }
    }
}

/// Scales must be `1, 2, 4, ...` with no gaps.
pub fn validate_scales(scales: &[usize]) -> Result<()> {
    if scales.is_empty() || scales.iter().enumerate().any(|(i, &s)| s != 1 << i) {
        return Err(Error::Config(format!(
            "scales {scales:?}: expected consecutive powers of two starting at 1"
        )));
    }
    Ok(())
}

impl EncoderConfig {
    pub fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn validate(&self) -> Result<()> {
        validate_scales(&self.scales)?;
        if self.n_streams == 0 || self.base_channels == 0 || self.input_channels == 0 {
            return Err(Error::Config("encoder stream count and widths must be positive".into()));
        }
        Ok(())
    }
}

/// Two spectrally normalized 3x3 convolutions with a ReLU between them plus
/// a skip path. The skip is a 1x1 projection only when shape changes.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub proj: Option<Conv2d>,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
}

impl ResidualBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, stride: usize, rng: &mut R) -> Result<Self> {
        Self::with_init(store, name, c_in, c_out, stride, Init::He(1.0), rng)
    }

    /// `main` initializes the two main-branch convolutions; `Init::Zeros`
    /// makes the block start as its skip path.
    pub fn with_init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        main: Init,
        rng: &mut R,
    ) -> Result<Self> {
        if stride != 1 && stride != 2 {
            return Err(Error::Config(format!("{name}: stride {stride} not in {{1, 2}}")));
        }
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), ConvSpec::new(c_in, c_out, 3).stride(stride).spectral(true).init(main), rng);
        let conv2 = Conv2d::new(store, &format!("{name}.conv2"), ConvSpec::new(c_out, c_out, 3).spectral(true).init(main), rng);
        let proj = (c_in != c_out || stride != 1)
            .then(|| Conv2d::new(store, &format!("{name}.proj"), ConvSpec::new(c_in, c_out, 1).stride(stride).spectral(true), rng));
        Ok(Self { conv1, conv2, proj, c_in, c_out, stride })
    }

    pub fn forward(&self, g: &mut Graph, b: &mut Binder<'_>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, b, x)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, b, h)?;
        let skip = match &self.proj {
            Some(p) => p.forward(g, b, x)?,
            None => x,
        };
        Ok(g.add(h, skip)?)
    }
}

fn check_partition(masks: &[Vec<f64>], hw: usize) -> Result<()> {
    for i in 0..hw {
        let s: f64 = masks.iter().map(|m| m[i]).sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Precondition(format!("object masks sum to {s} at pixel {i}, expected 1")));
        }
    }
    Ok(())
}

/// `sum_c m_c * f_c` at every pixel.
pub fn fuse_streams(g: &mut Graph, feats: &[Var], masks: &[Vec<f64>]) -> Result<Var> {
    if feats.is_empty() || feats.len() != masks.len() {
        return Err(shape_err(format!("{} streams vs {} masks", feats.len(), masks.len())));
    }
    let shape = g.shape(feats[0]).to_vec();
    let (_, h, w) = g.value(feats[0]).chw()?;
    for (f, m) in feats.iter().zip(masks) {
        if g.shape(*f) != shape.as_slice() {
            return Err(shape_err(format!("stream shapes {:?} vs {shape:?}", g.shape(*f))));
        }
        if m.len() != h * w {
            return Err(shape_err(format!("mask of {} pixels for {h}x{w} features", m.len())));
        }
    }
    check_partition(masks, h * w)?;
    let mut acc = g.mask_mul(feats[0], &masks[0])?;
    for (f, m) in feats.iter().zip(masks).skip(1) {
        let t = g.mask_mul(*f, m)?;
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

/// Area-averages masks by `factor`; partition of unity is preserved.
pub fn downsample_masks(masks: &[Vec<f64>], h: usize, w: usize, factor: usize) -> Vec<Vec<f64>> {
    masks
        .iter()
        .map(|m| gbuf_autodiff::kernels::avg_pool(m, 1, h, w, factor))
        .collect()
}

#[derive(Clone, Debug)]
pub struct GBufferEncoder {
    pub cfg: EncoderConfig,
    pub streams: Vec<[ResidualBlock; 2]>,
    pub chain: Vec<ResidualBlock>,
}

/// Encoder outputs, one tensor per scale.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub scales: Vec<usize>,
    pub tensors: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn get(&self, scale: usize) -> Option<&Tensor> {
        self.scales.iter().position(|&s| s == scale).map(|i| &self.tensors[i])
    }
}

impl GBufferEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let b = cfg.base_channels;
        let mut streams = Vec::with_capacity(cfg.n_streams);
        for s in 0..cfg.n_streams {
            streams.push([
                ResidualBlock::new(store, &format!("{name}.stream{s}.res0"), cfg.input_channels, b, 1, rng)?,
                ResidualBlock::new(store, &format!("{name}.stream{s}.res1"), b, b, 1, rng)?,
            ]);
        }
        let mut chain = vec![ResidualBlock::new(store, &format!("{name}.chain0"), b, b, 1, rng)?];
        for level in 1..cfg.scales.len() {
            chain.push(ResidualBlock::new(store, &format!("{name}.chain{level}"), cfg.width(level - 1), cfg.width(level), 2, rng)?);
        }
        Ok(Self { cfg: cfg.clone(), streams, chain })
    }

    /// Returns one feature map per configured scale, finest first.
    pub fn forward(&self, g: &mut Graph, b: &mut Binder<'_>, x: Var, masks: &[Vec<f64>]) -> Result<Vec<Var>> {
        let (c, h, w) = g.value(x).chw()?;
        if c != self.cfg.input_channels {
            return Err(shape_err(format!("encoder expects {} channels, got {c}", self.cfg.input_channels)));
        }
        let top = 1 << (self.cfg.scales.len() - 1);
        if h % top != 0 || w % top != 0 {
            return Err(shape_err(format!("{h}x{w} not divisible by {top}")));
        }
        if masks.len() != self.streams.len() {
            return Err(shape_err(format!("{} masks for {} streams", masks.len(), self.streams.len())));
        }
        let mut feats = Vec::with_capacity(self.streams.len());
        for [r0, r1] in &self.streams {
            let f = r0.forward(g, b, x)?;
            feats.push(r1.forward(g, b, f)?);
        }
        let mut cur = fuse_streams(g, &feats, masks)?;
        let mut taps = Vec::with_capacity(self.chain.len());
        for (i, block) in self.chain.iter().enumerate() {
            if i > 0 {
                // tap before every downsampling block
                taps.push(cur);
            }
            cur = block.forward(g, b, cur)?;
        }
        taps.push(cur);
        Ok(taps)
    }
}

pub fn encode_gbuffers(enc: &GBufferEncoder, store: &ParamStore, gbuf: &GBufferSet) -> Result<FeaturePyramid> {
    let mut g = Graph::new();
    let mut b = Binder::new(store, false);
    let x = g.constant(gbuf.encoder_input());
    let taps = enc.forward(&mut g, &mut b, x, &gbuf.masks())?;
    Ok(FeaturePyramid {
        scales: enc.cfg.scales.clone(),
        tensors: taps.iter().map(|&t| g.value(t).clone()).collect(),
    })
}
