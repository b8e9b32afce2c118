//! Single shared encoder with task-specific projection heads, trained on
//! inverse-cloze pretraining, supervised dense retrieval and extractive QA
//! under a scheduled multi-task loss with validation-gated index refresh.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod index;
pub mod parallel;
pub mod pipeline;
pub mod scheduler;
pub mod synthetic;
pub mod tasks;
pub mod trainer;

pub use error::{Result, RomError};
