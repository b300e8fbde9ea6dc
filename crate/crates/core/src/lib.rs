//! Multiplex graph contrastive learning.
//!
//! A GCN encoder is trained by contrasting the final-layer embedding of each
//! node in one augmented view against every layer's embedding of the other
//! view. Negative pairs are down-weighted by topological affinities of the
//! corresponding ego-network patches, estimated once up front from Node2Vec or
//! VGAE embeddings.
//!
//! The crate is organised bottom-up:
//!
//! * [`dataset`] loads graphs and provides normalisation, splits and ego-nets.
//! * [`augment`] draws the two corrupted views used at every step.
//! * [`encoder`] is the GCN with per-layer projections and hand-written
//!   backward pass.
//! * [`pae`] computes topological patch embeddings and soft-negative weights.
//! * [`loss`] is the weighted multi-scale InfoNCE objective and its gradients.
//! * [`trainer`] ties these together with Adam.
//! * [`eval`] and [`analysis`] consume trained encoders.

#[cfg(feature = "openblas")]
extern crate openblas_src;

pub mod analysis;
pub mod augment;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod loss;
pub mod optim;
pub mod pae;
pub mod real;
pub mod sparse;
pub mod threads;
pub mod trainer;

pub use augment::{AugmentConfig, GraphView, ViewAugment};
pub use config::RunConfig;
pub use dataset::{Adjacency, GraphDataset, NormalizedAdjacency, Split};
pub use encoder::{Activation, EncoderParams, EncoderShape, LayerEmbeddings};
pub use error::{Error, Result};
pub use eval::EvalReport;
pub use loss::{LossConfig, LossMode};
pub use pae::{AffinityTable, PatchTopoEmbeddings, TopoBackend, TopoConfig};
pub use real::Real;
pub use trainer::{TrainConfig, TrainHistory};
