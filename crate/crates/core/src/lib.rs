//! Hierarchical CNN-RNN mortality prediction from clinical notes, with a
//! recurrent time-series baseline and a multi-modal fusion model.

pub mod cli;
pub mod cohort;
pub mod embed;
pub mod error;
pub mod models;
pub mod ndcore;
pub mod notesproc;
pub mod pipeline;
pub mod traineval;

pub use error::{Error, Result};
