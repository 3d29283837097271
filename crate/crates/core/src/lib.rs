//! Test-time adaptation for object removal with a diffusion backbone.
//!
//! The pipeline builds a three-label region map from tags, adapts low-rank
//! adapters on a single image, then samples the edited image.

pub mod autodiff;
pub mod backbone;
pub mod bfe;
pub mod clients;
pub mod error;
pub mod fixtures;
pub mod harness;
pub mod io;
pub mod lora;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod region;
pub mod scene;
pub mod segment;
pub mod tensor;
pub mod tta;
pub mod types;

pub use error::{Error, ErrorClass, Result};

/// Lowercase hex encoding.
pub fn hex(bytes: &[u8]) -> String {
    use std::fmt::Write;
    bytes
        .iter()
        .fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}
