//! Document-grounded response generation with response-anticipated document
//! memories: a teacher reweights document self-attention using the reference
//! response, a student learns to anticipate those weights from the document
//! and context alone, and an alternating schedule trains both around a shared
//! encoder/decoder base.

pub mod config;
pub mod data;
pub mod decoder;
pub mod encoders;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod selfcheck;
pub mod student;
pub mod tensor;
pub mod training;

pub use config::{ModelConfig, RunConfig, TrainConfig, Variant};
pub use data::{Sample, Vocabulary};
pub use params::{ParamStore, ParamTag};

/// Reserved vocabulary ids shared across the whole pipeline.
pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
/// Ids below this are reserved; real word types start here.
pub const FIRST_WORD_ID: u32 = 4;
