//! Desk-scale visual speech recognition with a vector-quantized compact
//! audio memory and a cross-attention audio bridging module, trained with
//! a hybrid CTC/attention loss on synthetic audiovisual features.

pub mod abm;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod ctc;
pub mod error;
pub mod evalkit;
pub mod memory;
pub mod params;
pub mod quantizer;
pub mod seqnet;
pub mod tensor;
pub mod trainer;
