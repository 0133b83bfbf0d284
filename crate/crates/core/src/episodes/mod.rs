//! Synthetic volumes, pseudo-masks, cross-validation folds and episodes.

pub mod rfv;
pub mod sampler;
pub mod supervoxel;
pub mod volume;

pub use sampler::{
    make_folds, sample_episode, AccessLog, Episode, EpisodeSampler, FoldSpec, InMemoryPool, Mode,
    PatientData, SamplerConfig, Setting, SliceStack, VolumePool,
};
pub use supervoxel::{cluster_pseudo_masks, ClusterParams, PseudoMaskSet};
pub use volume::{generate_synthetic_volume, SynthParams, VolumeAdapter, VolumeScan};
