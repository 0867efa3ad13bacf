pub mod acquisition;
pub mod contour;
pub mod data_model;
pub mod error;
pub mod evaluation;
pub mod ingestion;
pub mod oracle;
pub mod orchestrator;
pub mod png_io;
pub mod predictor;
pub mod seed;
pub mod uncertainty;

pub use error::{Error, Result};
