//! Analysis tools: per-layer rate profiles, partial reconstructions,
//! temperature sampling and the depth ablations.

mod ablation;
mod rate;
mod reconstruct;

pub use ablation::{
    depth_ablation, depth_label, layer_distribution_ablation, train_cell, AblationResult, AblationRow, AblationSettings,
};
pub use rate::{kl_per_layer, RateProfile, RateRow, COLLAPSE_THRESHOLD_BPD};
pub use reconstruct::{latent_fractions, partial_reconstruct, sample, PixelReadout, PARTIAL_TEMPERATURE};
