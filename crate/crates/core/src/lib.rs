//! Serial speaker disentanglement and anonymization.
//!
//! A speech encoder turns a waveform into 50 Hz frames, a speaker encoder
//! pools a global embedding that is subtracted from every frame, and an
//! eight-layer residual quantizer splits what remains into a content stream
//! (layer 1, distilled from a semantic teacher) and prosody residuals. The
//! decoder adds a speaker embedding back before synthesis; anonymization
//! replaces it with zeros.

pub mod anonymizer;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod container;
pub mod dsp;
pub mod encoders;
pub mod error;
pub mod gan;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rvq;
pub mod scenario;
pub mod teacher;
pub mod trainer;

pub use error::{MusaError, Result};
