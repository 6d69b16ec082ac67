//! Frozen perceptual feature extractors.

use gbuf_autodiff::nn::Init;
use gbuf_autodiff::{Binder, Conv2d, ConvSpec, Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A fixed multi-tap feature pyramid over images in [0, 1].
pub trait PerceptualBackbone: Send + Sync {
    fn tap_channels(&self) -> Vec<usize>;

    /// Cumulative stride of every tap.
    fn tap_strides(&self) -> Vec<usize>;

    /// Receptive field of the deepest tap, in pixels.
    fn receptive_field(&self) -> usize;

    /// Records the forward pass on `g`. Parameters enter as constants, so
    /// gradients reach the image but never the backbone.
    fn forward(&self, g: &mut Graph, image: Var) -> Result<Vec<Var>>;

    fn num_taps(&self) -> usize {
        self.tap_channels().len()
    }

    fn features(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let taps = self.forward(&mut g, x)?;
        Ok(taps.into_iter().map(|t| g.value(t).clone()).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            widths: vec![64, 128, 256, 512, 512],
            strides: vec![1, 2, 2, 2, 2],
            kernel: 3,
            seed: 0x5EED,
        }
    }
}

/// Receptive field of a conv stack: `r += (k - 1) * jump; jump *= stride`.
pub fn receptive_field(kernel: usize, strides: &[usize]) -> usize {
    let (mut r, mut jump) = (1, 1);
    for &s in strides {
        r += (kernel - 1) * jump;
        jump *= s;
    }
    r
}

/// Randomly initialized, frozen conv-ReLU pyramid with one tap per stage.
#[derive(Clone, Debug)]
pub struct RandomConvBackbone {
    pub cfg: BackboneConfig,
    pub store: ParamStore,
    convs: Vec<Conv2d>,
}

impl RandomConvBackbone {
    pub fn new(cfg: &BackboneConfig) -> Result<Self> {
        if cfg.widths.is_empty() || cfg.widths.len() != cfg.strides.len() || cfg.kernel % 2 == 0 {
            return Err(Error::Config(
                "backbone needs one stride per width and an odd kernel".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let mut c_in = 3;
        let convs = cfg
            .widths
            .iter()
            .zip(&cfg.strides)
            .enumerate()
            .map(|(i, (&w, &s))| {
                let spec = ConvSpec::new(c_in, w, cfg.kernel).stride(s).init(Init::He(1.0));
                c_in = w;
                Conv2d::new(&mut store, &format!("backbone.conv{i}"), spec, &mut rng)
            })
            .collect();
        Ok(Self { cfg: cfg.clone(), store, convs })
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Digest of all weights, for checking that nothing modified them.
    pub fn fingerprint(&self) -> String {
        let mut bytes = Vec::new();
        for (_, t) in self.store.named_tensors() {
            t.data().iter().for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
        }
        crate::blob::sha256_hex(&bytes)
    }
}

impl PerceptualBackbone for RandomConvBackbone {
    fn tap_channels(&self) -> Vec<usize> {
        self.cfg.widths.clone()
    }

    fn tap_strides(&self) -> Vec<usize> {
        self.cfg
            .strides
            .iter()
            .scan(1, |acc, &s| {
                *acc *= s;
                Some(*acc)
            })
            .collect()
    }

    fn receptive_field(&self) -> usize {
        receptive_field(self.cfg.kernel, &self.cfg.strides)
    }

    fn forward(&self, g: &mut Graph, image: Var) -> Result<Vec<Var>> {
        let mut b = Binder::new(&self.store, false);
        let x = g.scale(image, 2.0);
        let mut x = g.add_scalar(x, -1.0);
        let mut taps = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let y = conv.forward(g, &mut b, x)?;
            x = g.relu(y);
            taps.push(x);
        }
        Ok(taps)
    }
}
