//! Swin Transformer pipeline for telling computer-generated images (CGI) apart
//! from authentic camera images.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] - dense tensors and a reverse-mode tape.
//! * [`colorframe`] - RGB to YCbCr conversion, resizing and normalization.
//! * [`dataset`] - CIFAKE-style folder ingestion, seeded splits and batching.
//! * [`swin`] - the windowed-attention classifier and its checkpoint format.
//! * [`trainer`] - cross-entropy, Adam and the training/evaluation loops.
//! * [`metrics`] - confusion counts, precision/recall/F1 and ROC/AUC.
//! * [`tsne`] - exact t-SNE over extracted features.
//! * [`plot`] - small self-contained SVG writers for curves and scatters.

pub mod colorframe;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod plot;
pub mod swin;
pub mod tensor;
pub mod trainer;
pub mod tsne;

pub use error::{Error, Result};
pub use tensor::{Float, Tape, Tensor, Var};
