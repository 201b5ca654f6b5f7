pub mod attention;
pub mod error;
pub mod features;
pub mod geometry;
mod kernels;
pub mod membank;
pub mod metrics;
pub mod pipeline;
pub mod pretrain;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/geometry.md")]
    struct Geometry;
    #[doc = include_str!("../../../book/src/attention.md")]
    struct Attention;
    #[doc = include_str!("../../../book/src/pretraining.md")]
    struct Pretraining;
    #[doc = include_str!("../../../book/src/membank.md")]
    struct MemoryBank;
    #[doc = include_str!("../../../book/src/metrics.md")]
    struct Metrics;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
