//! Progressive multi-stage person re-identification with attention-guided
//! feature mixing.
//!
//! A backbone produces one feature map per image. Stage heads run in
//! sequence; between stages the most attended blocks of the previous
//! stage's Grad-CAM are replaced with features of a different identity, so
//! later stages learn from regions the earlier ones did not rely on. At test
//! time the stage embeddings are concatenated into one descriptor.

pub mod analysis;
pub mod attribution;
pub mod checkpoint;
pub mod config;
pub mod datapipe;
pub mod error;
pub mod eval;
pub mod featmix;
pub mod losses;
pub mod model;
pub mod optim;
pub mod trainer;

pub use config::Config;
pub use error::{Error, Result};
