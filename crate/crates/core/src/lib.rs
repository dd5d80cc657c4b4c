//! Patch-level sparse autoencoders for vision-backbone features.
//!
//! The crate covers the full analysis loop on a corpus of per-image feature
//! grids:
//!
//! - [`store`]: the `MSAE` corpus container, box sidecars, splitting
//! - [`sae`]: the bias-free ReLU autoencoder, its loss and analytic gradients
//! - [`trainer`]: Adam training over shuffled patches
//! - [`probe`]: class-wise mean latents and neuron rankings
//! - [`intervene`]: top-k activated / deactivated latent masks and AUC sweeps
//! - [`head`]: pooled linear classifier standing in for the downstream head
//! - [`metrics`]: exact Mann-Whitney AUC-ROC
//! - [`localize`]: heatmaps, percentile boxes, IoU and detection AP
//! - [`synth`]: planted-dictionary corpora with known concept atoms and boxes
//! - [`render`]: PGM/PPM output for heatmaps and plots
//! - [`pipeline`]: the end-to-end synthetic reproduction run

pub mod error;
pub mod head;
pub mod intervene;
pub mod localize;
pub mod metrics;
pub mod pipeline;
pub mod probe;
pub mod render;
pub mod sae;
pub mod store;
pub mod synth;
pub mod trainer;

mod codec;

pub use error::{Error, Result};
pub use head::LinearHead;
pub use intervene::{InterventionMask, MaskMode};
pub use localize::{LocalizationReport, ScoredBox};
pub use probe::LatentSummary;
pub use sae::SaeModel;
pub use store::{FeatureGrid, PatchFeatureSet, Rect};
pub use synth::{SynthConfig, SynthOracle};
pub use trainer::{TrainConfig, TrainLog};
