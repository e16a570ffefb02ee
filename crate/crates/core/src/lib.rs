// SPDX-License-Identifier: Apache-2.0

//! Evaluation harness for forecasting a patient's next eGFR value from a
//! trajectory chart plus clinical text, across prompt templates, model
//! backends, ensembles and tabular baselines.

pub mod backend;
pub mod baseline;
pub mod chart;
pub mod cohort;
pub mod ensemble;
pub mod error;
pub mod extract;
pub mod par;
pub mod pipeline;
pub mod prompt;
pub mod report;

pub use error::{Error, Result};
pub use par::Execution;
