//! G-buffer conditioned image enhancement at desk scale.
//!
//! The crate covers the full pipeline: a procedural deferred-shading scene
//! generator, the G-buffer encoder and modulated multi-branch enhancer, the
//! perceptual discriminator ensemble with label projection, feature-matched
//! patch sampling, adversarial training with throttled discriminator updates
//! and the kernel distance metrics used for evaluation.


pub mod backbone;
pub mod blob;
pub mod config;
pub mod dataset;
pub mod discriminator;
pub mod encoder;
pub mod enhancer;
pub mod labels;
pub mod metrics;
pub mod parallel;
pub mod perceptual;
pub mod sampler;
pub mod scenegen;
pub mod trainer;

pub use parallel::Exec;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] gbuf_autodiff::Error),
    #[error("integrity error in sample {index}: {detail}")]
    Integrity { index: usize, detail: String },
    #[error("blob: {0}")]
    Blob(#[from] blob::BlobError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("sampling exhausted: {0}")]
    SamplingExhausted(String),
    #[error("metric undefined: {0}")]
    MetricUndefined(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Tensor(gbuf_autodiff::Error::Shape(msg.into()))
}
