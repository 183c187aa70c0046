//! Executable checks of the two structural results: a deep enough VAE can
//! represent any autoregressive model exactly, and its reparameterized
//! prior is an autoregressive flow.

mod prop1;
mod prop2;

pub use prop1::{prop1_equivalence_check, ArEquivalentVae, DiscreteArModel, MAX_AR_DIM};
pub use prop2::{prior_jacobian, prior_map, prop2_config, prop2_jacobian_check, prop2_params, Prop2Report, PROP2_STEP};
