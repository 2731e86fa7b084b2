//! Generative diffusion modelling of limit order books.
//!
//! The crate converts Level-2 order book streams into a two-channel image
//! format, trains an inpainting denoising-diffusion model over those
//! images, samples future book states conditioned on a history, and
//! scores generated sequences against real data with distributional
//! metrics. A zero-intelligence baseline simulator and synthetic stream
//! generators round out the toolkit.
//!
//! Start with the guide in `book/` (buildable with mdbook; its code
//! blocks run as doctests) or the module docs below:
//!
//! - [`book`]: book-state data model, CSV ingestion, windowing
//! - [`codec`]: book windows <-> 2-channel images, normalization, padding
//! - [`diffusion`]: noise schedule, forward marginal, inpainting sampler
//! - [`nn`]: the UNet noise predictor, training loop, checkpoints
//! - [`metrics`]: score series, L1/Wasserstein-1 distances, bootstrap CIs
//! - [`baseline`]: Cont-style zero-intelligence simulator
//! - [`synth`]: deterministic synthetic stream generators
//! - [`config`]: the TOML run configuration shared by all subcommands
//! - [`cli`]: the `lobdiff` command-line pipeline

pub mod baseline;
pub mod book;
pub mod cli;
pub mod codec;
pub mod config;
pub mod diffusion;
pub mod metrics;
pub mod nn;
pub mod synth;

pub use book::{BookState, LevelQuote, Side, WindowMode, WindowSpec};
pub use synth::SynthRegime;

/// Runs every code block in the guide as a doctest, keeping the book and
/// the library in lockstep.
#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/order-books.md")]
    mod order_books {}
    #[doc = include_str!("../../../book/src/image-format.md")]
    mod image_format {}
    #[doc = include_str!("../../../book/src/diffusion.md")]
    mod diffusion {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/baseline-and-synthetic.md")]
    mod baseline_and_synthetic {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
