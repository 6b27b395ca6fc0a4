//! Multimodal denoising and alignment for face anti-spoofing.
//!
//! Pipeline: frozen toy encoders ([`backbone`]) produce per-modality tokens;
//! [`md2a`] fuses modalities and removes common-mode attention using a
//! same-domain partner sample; [`udsa`] adapts the pooled embedding through a
//! U-shaped stack; [`rs2`] aligns every stack layer to a frozen text space and
//! trains a text-constrained classifier. [`trainer`] and [`protocol`] wire
//! these into cross-domain experiments on [`synthdata`].

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod fingerprint;
pub mod gradcheck;
pub mod md2a;
pub mod metrics;
pub mod model;
pub mod params;
pub mod protocol;
pub mod rng;
pub mod rs2;
pub mod selftest;
pub mod synthdata;
pub mod tensor_io;
pub mod trainer;
pub mod types;
pub mod udsa;

pub use error::{MmdaError, Result};
