//! Retrieval-augmented text generation toolkit for steel structure
//! demolition engineering: corpus cleaning and chunking, instruction-data
//! synthesis, vector and graph retrieval, a five-role proposal pipeline,
//! an objective-exam harness with modal voting, BLEU/ROUGE, and LoRA algebra.
//!
//! Numeric code that does not touch provider data is generic over
//! [`num::Scalar`] (`f32`/`f64`); exam accuracies are exact fractions.

pub mod collab;
pub mod corpus;
pub mod dataset;
pub mod exam;
pub mod index;
pub mod lora;
pub mod metrics;
pub mod num;
pub mod parallel;
pub mod providers;
pub mod retrieve;
pub mod template;

pub use num::Scalar;

/// Adapter in double precision, the default for config and CLI work.
pub type Adapter = lora::LowRankAdapter<f64>;
pub type Adapter32 = lora::LowRankAdapter<f32>;
pub type Matrix = lora::Matrix<f64>;
pub type Matrix32 = lora::Matrix<f32>;
/// Exact accuracy fraction used by exam reports.
pub type Accuracy = exam::Accuracy;
