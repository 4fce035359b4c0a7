//! Dense step-level reward shaping for policy-gradient training on a
//! synthetic step-structured reasoning task.
//!
//! * [`trajectory`]: questions, steps, solutions, prefixes, reward sequences.
//! * [`env`]: modular chain arithmetic with exact reachability.
//! * [`shaping`]: Clip, Delta and the other dense-reward transforms.
//! * [`reward_models`]: surrogate process and outcome reward models.
//! * [`trainer`]: tabular softmax policy and PPO.
//! * [`metrics`]: greedy, sampling and pass@k evaluation.
//! * [`audit`]: repetition probes for reward hacking.

pub mod audit;
pub mod env;
pub mod error;
pub mod metrics;
pub mod reward_models;
pub mod rng;
pub mod shaping;
pub mod trainer;
pub mod trajectory;

pub use error::Error;
