//! Offline construction of memory banks from calibration traces.

mod build;
mod keys;
mod kmeans;

pub use build::{
    aggregate_cluster, build_bank, build_bank_chunked, build_bank_with, merge_chunk_traces, BuildOptions, BuildReport,
};
pub use keys::{
    fit_whitening, make_lookup_key, whitening_subsample, CalibSample, CentroidOrg, KeyMode, KeyPipeline, RopeMode,
    SlotLayout, WhiteningMatrix, WhiteningTransform, DEFAULT_EPSILON_SCALE, DEFAULT_WHITENING_SUBSAMPLE,
};
pub use kmeans::{minibatch_kmeans, ClusterSpec, Clustering};
