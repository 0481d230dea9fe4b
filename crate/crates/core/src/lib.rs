//! Flow-matching virtual try-on at desk scale.
//!
//! The crate covers the full loop: a procedural try-on world with an exact
//! renderer ([`synthworld`]), the multi-condition position index and rotary
//! embedding ([`posindex`]), a small diffusion transformer with LoRA adapters
//! ([`model`]), the flow-matching objective and Euler sampler ([`flow`]), the
//! two-stage mask-based / person-to-person training pipeline ([`pipeline`]),
//! reference-image generation ([`refgen`]) and the evaluation metrics
//! ([`metrics`]).

pub mod error;
pub mod flow;
pub mod image;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod posindex;
pub mod refgen;
pub mod synthworld;
pub mod tensor;

pub use error::{Error, Result};
