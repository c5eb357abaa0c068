//! Inference: stage 1 from the AR decoder, stages 2..8 greedily from the NAR
//! decoder, then codes back to audio.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::train::Models;
use crate::codec::{rvq_decode, AudioBuffer, CodebookSet, FilterBank, QuantizedTokenGrid, STAGES};
use crate::error::{Error, Result};
use crate::nn::{Scalar, Tensor2};
use crate::seed::derive_seed;
use crate::style::{ControlVector, StyleKeys};
use crate::tokenizer;

pub const DEFAULT_TEMPERATURE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisRequest {
    pub text: String,
    /// Codes of the enrolment audio.
    pub prompt: QuantizedTokenGrid,
    pub control: ControlVector,
    pub seed: u64,
    pub temperature: f64,
    /// Stage-1 length cap; `None` means `4 * prompt + 64`.
    pub max_len: Option<usize>,
}

impl SynthesisRequest {
    pub fn new(text: impl Into<String>, prompt: QuantizedTokenGrid, control: ControlVector, seed: u64) -> Self {
        Self {
            text: text.into(),
            prompt,
            control,
            seed,
            temperature: DEFAULT_TEMPERATURE,
            max_len: None,
        }
    }

    pub fn max_len(&self) -> usize {
        self.max_len.unwrap_or(4 * self.prompt.len() + 64)
    }
}

#[derive(Debug, Clone)]
pub struct Synthesis {
    pub grid: QuantizedTokenGrid,
    pub audio: AudioBuffer,
    /// Stage 1 stopped at the length cap instead of end-of-sequence.
    pub truncated: bool,
    /// Head-averaged style attention (frames x tokens) for stages 2..8,
    /// over prompt and generated frames.
    pub attention: Vec<Tensor2<f64>>,
}

/// Run the full pipeline with keys `c * S`.
pub fn synthesize<T: Scalar>(
    m: &Models<T>,
    books: &CodebookSet,
    req: &SynthesisRequest,
) -> Result<Synthesis> {
    req.control.validate(m.cfg.style_tokens)?;
    run(m, books, req, StyleKeys::Scaled(&req.control))
}

/// The same pipeline with the scaling step removed (keys are `S`); the
/// request's control vector is ignored.
pub fn synthesize_bypassed<T: Scalar>(
    m: &Models<T>,
    books: &CodebookSet,
    req: &SynthesisRequest,
) -> Result<Synthesis> {
    run(m, books, req, StyleKeys::Bypass)
}

/// Stage-1 codes and the NAR-completed grid, without audio.
pub fn generate_grid<T: Scalar>(
    m: &Models<T>,
    req: &SynthesisRequest,
    keys: StyleKeys,
) -> Result<(QuantizedTokenGrid, bool, Vec<Tensor2<f64>>)> {
    if req.prompt.is_empty() {
        return Err(Error::EmptyPrompt);
    }
    if req.prompt.codebook_size() != m.cfg.codebook_size {
        return Err(Error::DimensionMismatch {
            expected: m.cfg.codebook_size,
            got: req.prompt.codebook_size(),
        });
    }
    let text = tokenizer::tokenize(&req.text)?.as_usize();
    let prompt1: Vec<usize> = req.prompt.stage(0).iter().map(|&c| c as usize).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(req.seed, "synthesize/ar"));
    let gen = m
        .ar
        .generate(&m.ar_ps, &text, &prompt1, req.temperature, req.max_len(), &mut rng)?;
    if gen.codes.is_empty() {
        return Err(Error::EmptyGeneration);
    }
    let len = gen.codes.len();
    let mut codes = vec![vec![0u32; len]; STAGES];
    codes[0] = gen.codes;
    let p = req.prompt.len();
    let mut attention = Vec::with_capacity(STAGES - 1);
    for d in 2..=STAGES {
        let target = QuantizedTokenGrid::new(codes.clone(), m.cfg.codebook_size)?;
        let grid = req.prompt.concat(&target)?;
        let (logits, cache) = m.nar.forward(&m.nar_ps, &text, &grid, p, d, keys)?;
        codes[d - 1] = (0..logits.rows())
            .map(|r| super::nar::argmax_row(logits.row(r)) as u32)
            .collect();
        attention.push(cache.style.weights().cast());
    }
    Ok((
        QuantizedTokenGrid::new(codes, m.cfg.codebook_size)?,
        gen.truncated,
        attention,
    ))
}

fn run<T: Scalar>(
    m: &Models<T>,
    books: &CodebookSet,
    req: &SynthesisRequest,
    keys: StyleKeys,
) -> Result<Synthesis> {
    if books.size() != m.cfg.codebook_size {
        return Err(Error::DimensionMismatch {
            expected: m.cfg.codebook_size,
            got: books.size(),
        });
    }
    let (grid, truncated, attention) = generate_grid(m, req, keys)?;
    let frames = rvq_decode(&grid, books, STAGES)?;
    let audio = FilterBank::new(&books.frame)?.synthesize(&frames)?;
    Ok(Synthesis {
        grid,
        audio,
        truncated,
        attention,
    })
}
