pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod seed;
pub mod style;
pub mod tokenizer;

pub use error::{Error, ErrorKind, Result};
pub use codec::{AudioBuffer, CodebookSet, FrameConfig, FrameMatrix, QuantizedTokenGrid};
pub use config::RunConfig;
pub use style::ControlVector;
pub use tokenizer::PhonemeSequence;
