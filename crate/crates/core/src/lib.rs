//! Evaluation harness for model-written narratives of SHAP explanations.

pub mod assumptions;
pub mod error;
pub mod explanation;
pub mod extraction;
pub mod faithfulness;
pub mod gateway;
pub mod manipulation;
pub mod pipeline;
pub mod prompt;
pub mod report;
pub mod runner;
pub mod similarity;

pub use error::{Error, Result};
