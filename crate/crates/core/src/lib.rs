//! Cross-platform text classification with adversarial encoder alignment.
//!
//! The pipeline trains a small transformer encoder plus a batch-normalised
//! classifier on a labelled source platform, then adapts a second encoder so
//! that unlabelled target-platform posts map into the source representation
//! space: a discriminator tries to tell the platforms apart while the target
//! encoder is trained to fool it, with a KL-divergence term keeping the
//! classifier hypothesis stable on source inputs. Adaptive batch
//! normalisation re-estimates the classifier statistics on the target stream
//! before evaluation.
//!
//! Modules follow the stages of that pipeline:
//!
//! - [`corpus`]: dataset loading, vocabulary, token encoding, batching,
//!   oversampling and the input-length search.
//! - [`encoder`]: the transformer encoder with per-layer hidden states,
//!   manual backpropagation and source→target parameter sharing.
//! - [`selector`]: layer transferability probes (hidden state selection).
//! - [`heads`]: the AdaBN classifier and the platform discriminator.
//! - [`losses`]: cross-entropy, discriminator/adversarial losses and the
//!   KL-divergence encoder measurer.
//! - [`training`]: Adam, source training, the adversarial adaptation loop
//!   and the finite-difference gradient checker.
//! - [`evaluation`]: macro-F1 metrics, the end-to-end configuration runner
//!   and embedding export.
//! - [`tsne`]: exact t-SNE projection for embedding diagnostics.
//! - [`checkpoint`]: binary tensor containers that round-trip bit-exactly.
//! - [`synthetic`]: the deterministic vocabulary-shift benchmark generator.
//! - [`config`]: TOML run configuration.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod heads;
pub mod losses;
pub mod selector;
pub mod synthetic;
pub mod tensor;
pub mod training;
pub mod tsne;

pub use error::{Error, Result};
