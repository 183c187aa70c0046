use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::normalize::NormStats;
use crate::arch::{ModelConfig, Parameters};
use crate::error::Result;

/// Everything needed to continue training bit-exactly. Randomness is a
/// pure function of `(config.seed, step)`, so the step counter is the RNG
/// state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: ModelConfig,
    pub config: TrainConfig,
    pub params: Parameters<f32>,
    pub ema: Parameters<f32>,
    pub adam_m: Parameters<f32>,
    pub adam_v: Parameters<f32>,
    pub norm: NormStats,
    /// Batches processed, applied or not.
    pub step: u64,
    pub applied: u64,
    pub skip_count: u64,
}

/// Stream reserved for parameter initialization; steps use `step + 1`.
const INIT_STREAM: u64 = 0;

pub fn init_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(INIT_STREAM);
    rng
}

/// The generator driving batch selection and latent noise at `step`.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step + 1);
    rng
}

impl TrainState {
    pub fn new(model: ModelConfig, config: TrainConfig, norm: NormStats) -> Result<Self> {
        model.validate()?;
        config.validate()?;
        let params = Parameters::<f32>::init(&model, &mut init_rng(config.seed))?;
        Ok(TrainState {
            ema: params.clone(),
            adam_m: params.zeros_like(),
            adam_v: params.zeros_like(),
            params,
            model,
            config,
            norm,
            step: 0,
            applied: 0,
            skip_count: 0,
        })
    }

    pub fn skipped_fraction(&self) -> f64 {
        if self.step == 0 {
            0.0
        } else {
            self.skip_count as f64 / self.step as f64
        }
    }
}
