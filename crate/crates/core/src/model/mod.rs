//! Latent class models over capture profiles.

mod params;
mod prob;
mod spec;

pub use params::{check_params, validate, ParameterSet, Violation};
pub(crate) use prob::{class_conditional, mixture};
pub use prob::{
    block_log_odds_ratios, cell_probability, full_distribution, marginal_inclusion,
    miss_probability, CaptureProfile, MissProbability,
};
pub(crate) use prob::shared_block_distribution;
pub use spec::{interaction_masks, Block, BlockKind, DependenceTerm, Layout, ModelSpec, MAX_REGISTERS};

/// Probabilities are clamped to `[EPSILON, 1 - EPSILON]` before taking logs.
pub const EPSILON: f64 = 1e-10;
