//! Raw-waveform multi-channel source separation with a multi-resolution
//! convolutional auto-encoder.

pub mod audio;
pub mod bss_eval;
pub mod checkpoint;
pub mod datapipe;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod pipeline;
pub mod ops;
pub mod real;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod wav;

pub use audio::AudioClip;
pub use error::{Error, Result};
pub use model::{GradientSet, LayerKind, LayerSpec, Mode, Model, ModelConfig, SetSpec};
pub use real::Real;
pub use tensor::{BatchNormParams, FilterSetParams, Tensor3};
