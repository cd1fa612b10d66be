//! The point-wise attentive continuous-convolution fusion operator: semantic
//! feature retrieval, neighbor assembly, forward and backward passes, and the
//! end-to-end cloud fusion entry points.

mod fusion;
mod operator;
mod params;
mod retrieval;

pub use fusion::{fuse_cloud, FuseConfig, FusionMode};
pub use operator::{pacf_backward, pacf_forward, pacf_forward_cached, ForwardCache, FusedFeatures, PacfGradients};
pub use params::{
    decode_params, encode_params, read_params, write_params, Dense, MlpSpec, PacfParams, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use retrieval::{
    assemble_neighbors, retrieve_features, retrieve_features_with, NeighborFeatures, Sampling, SemanticFeatures,
};
