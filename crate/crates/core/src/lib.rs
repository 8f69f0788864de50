//! Group-relative policy optimization for intent detection, with reward-based
//! curriculum sampling, on a compact bag-of-embeddings policy.
//!
//! The crate is organised the same way the training pipeline runs:
//!
//! - [`corpus`]: intent schemas, dialogues, the synthetic generator and the
//!   generalization split builders.
//! - [`prompting`]: the ReAct instruction renderer and the word-level vocabulary.
//! - [`rewards`]: completion parsing plus format, answer and combined rewards.
//! - [`policy`]: the autoregressive toy policy (sampling, scoring, gradients).
//! - [`grpo`]: advantages, the clipped GRPO loss, SFT loss and training loops.
//! - [`curriculum`]: offline reward collection, scoring, selection and the
//!   two-stage curriculum run.
//! - [`evalreport`]: accuracy, score histograms and completion-length stats.
//! - [`cli`]: the `intent-rl` command line front end.

pub mod cli;
pub mod config;
pub mod corpus;
pub mod curriculum;
pub mod error;
pub mod evalreport;
pub mod grpo;
pub mod policy;
pub mod prompting;
pub mod rewards;
pub mod seeds;

pub use error::{Error, Result};
