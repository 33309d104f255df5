//! Administer multiple-choice questionnaires to language-model backends and
//! audit the answers: choice-order adjustment, labeling and position bias
//! tests, alignment with reference populations, sequential synthetic
//! respondents and a classifier two-sample test.

pub mod alignment;
pub mod backend;
pub mod bias;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod prompt;
pub mod questionnaire;
pub mod stats;

pub use error::{Error, Result};
