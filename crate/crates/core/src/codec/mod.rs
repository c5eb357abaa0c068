//! Toy neural-codec stand-in: filter-bank frames, residual vector
//! quantization, and sinusoidal resynthesis.

pub mod audio;
pub mod frames;
pub mod rvq;

pub use audio::AudioBuffer;
pub use frames::{frame_analyze, frame_synthesize, FilterBank, FrameConfig, FrameMatrix};
pub use rvq::{
    fit_codebooks, fit_codebooks_with, residual_energies, rvq_decode, rvq_encode, CodebookSet, FitOptions,
    QuantizedTokenGrid, STAGES,
};
