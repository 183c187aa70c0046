mod config;
mod model;
mod params;
mod spec;

pub use config::{DownsampleMode, ModelConfig, PriorMode};
pub use model::{FixedNoise, Forward, LatentPolicy, LayerRecord, NoiseSource, RngNoise, TopDownState, Vdvae, ZeroNoise};
pub use params::{is_residual_output, param_count, residual_scale, Bound, Parameters};
pub use spec::{group_independent, BlockGroup, BlockSpec, Direction, ExecutionPlan};
