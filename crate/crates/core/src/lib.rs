//! Sequence mixers as explicit matrices and as fast operators: softmax and
//! FAVOR+ attention, selective state-space scans, Bi-Mamba and Hydra, the
//! block stack built on them, and diagnostics for inspecting mixing matrices.

pub mod attention;
pub mod blocks;
pub mod diagnostics;
pub mod error;
pub mod mixer;
pub mod rng;
pub mod ssm;
pub mod store;

pub use attention::{AttentionKind, AttentionWeights, MultiHeadConfig, OrthogonalFeatureMatrix, QkvTriple, RopeConfig};
pub use blocks::{BlockStack, BlockStackConfig, DcHydraBlock, MixerKind};
pub use diagnostics::{Histogram, MixerReport};
pub use error::{MixError, Result};
pub use mixer::{FeatureSequence, MatrixMixer, MixerClass, StructureReport, DEFAULT_RANK_TOL};
pub use rng::MixRng;
pub use ssm::{BiMambaParams, HydraParams, ScanParams, SelectiveWeights};
pub use store::TensorStore;
