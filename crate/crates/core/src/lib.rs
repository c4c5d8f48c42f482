pub mod cli;
pub mod error;
pub mod graphs;
pub mod ingest;
pub mod interpret;
pub mod model;
pub mod numeric;
pub mod pipeline;
pub mod spatial;
pub mod train_eval;

pub use error::{Error, Result};
