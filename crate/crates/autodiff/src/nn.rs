//! Parameterized layers built on [`Graph`] ops.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::graph::{Graph, Var};
use crate::params::{Binder, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Weight initialization for a convolution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// He-normal with standard deviation `gain * sqrt(2 / fan_in)`.
    He(f64),
    Zeros,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub bias: bool,
    pub spectral: bool,
    pub init: Init,
}

impl ConvSpec {
    pub fn new(c_in: usize, c_out: usize, kernel: usize) -> Self {
        Self {
            c_in,
            c_out,
            kernel,
            stride: 1,
            bias: true,
            spectral: false,
            init: Init::He(1.0),
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn spectral(mut self, on: bool) -> Self {
        self.spectral = on;
        self
    }

    pub fn bias(mut self, on: bool) -> Self {
        self.bias = on;
        self
    }

    pub fn init(mut self, init: Init) -> Self {
        self.init = init;
        self
    }
}

/// Square-kernel convolution with "same" padding (`kernel / 2`).
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, spec: ConvSpec, rng: &mut R) -> Self {
        let shape = [spec.c_out, spec.c_in, spec.kernel, spec.kernel];
        let fan_in = (spec.c_in * spec.kernel * spec.kernel) as f64;
        let value = match spec.init {
            Init::Zeros => Tensor::zeros(&shape),
            Init::He(gain) => {
                let dist = Normal::new(0.0, gain * (2.0 / fan_in).sqrt()).expect("finite std");
                Tensor::from_fn(&shape, |_| dist.sample(rng))
            }
        };
        let wname = format!("{name}.weight");
        let weight = if spec.spectral && spec.init != Init::Zeros {
            store.add_spectral(wname, value, rng)
        } else {
            // a zero matrix has no spectral norm; such layers stay unnormalized
            store.add(wname, value)
        };
        let bias = spec
            .bias
            .then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[spec.c_out])));
        Self { spec, weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, b: &mut Binder<'_>, x: Var) -> Result<Var> {
        let c = g.shape(x).first().copied().unwrap_or(0);
        if c != self.spec.c_in {
            return Err(Error::Shape(format!(
                "{}: declared {} input channels, got {c}",
                b.store().name(self.weight),
                self.spec.c_in
            )));
        }
        let w = b.get(g, self.weight)?;
        let bias = match self.bias {
            Some(id) => Some(b.get(g, id)?),
            None => None,
        };
        g.conv2d(x, w, bias, self.spec.stride, self.spec.kernel / 2)
    }
}
