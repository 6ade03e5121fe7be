//! Desk-scale referring multi-object tracking.
//!
//! The pipeline decouples a referring expression into a static-object stream
//! and a spatial-motion stream, fuses text and synthetic visual features with
//! bidirectional cross-attention, injects the decoupled semantics into object
//! queries across a two-phase decoder, and supervises training with
//! detection, referring, and structural-consistency losses. Tracking quality
//! is scored with HOTA-family metrics. All numerics run on a minimal dense
//! tensor type with reverse-mode differentiation and a finite-difference
//! oracle.

pub mod bif;
pub mod decouple;
pub mod encode;
pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod psdql;
pub mod rng;
pub mod scc;
pub mod scene;
pub mod tensor;
pub mod track;
pub mod train;

pub use tensor::{Graph, NodeId, ParamStore, Tensor2D, TensorError};
