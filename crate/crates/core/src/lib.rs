//! Source-free domain adaptation with a fixed simplex-ETF classifier and
//! spatial self-attention.
//!
//! The crate is organised bottom-up: [`tensor`] provides arrays and
//! reverse-mode differentiation; [`etf`], [`attention`] and [`encoder`]
//! build the model; [`adaptation`] trains it on a labelled source domain
//! and adapts it to an unlabelled target domain; [`nc`] measures
//! neural-collapse statistics; [`data`] generates and stores benchmark
//! domains; [`checkpoint`] and [`pipeline`] tie runs together.

pub mod adaptation;
pub mod attention;
pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod etf;
pub mod nc;
pub mod pipeline;
pub mod runtime;
pub mod tensor;

pub use classifier::Classifier;
pub use config::{DivSign, RunConfig};
pub use encoder::{init_encoder, EncoderModel};
pub use error::{Error, Result};
pub use etf::{build_etf, validate_etf, EtfClassifier, EtfValidationReport};
pub use tensor::{Tape, Tensor, Var};
