//! The two token predictors: an autoregressive decoder for stage 1 and a
//! non-autoregressive decoder, driven by the style network, for stages 2..8.

mod ar;
mod nar;
pub mod synth;
pub mod train;

pub use ar::{ArCache, ArGeneration, ArModel};
pub use nar::{NarCache, NarModel};

use crate::codec::STAGES;
use crate::error::{Error, Result};
use crate::nn::{Embedding, Grads, ParamStore, Scalar, Tensor2};
use crate::style::StyleConfig;
use crate::tokenizer::VOCAB_SIZE;

/// Network dimensions shared by both decoders.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_style: usize,
    pub style_tokens: usize,
    pub style_heads: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    pub ar_blocks: usize,
    pub nar_blocks: usize,
    pub codebook_size: usize,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            d_model: 64,
            d_style: 32,
            style_tokens: 10,
            style_heads: 8,
            heads: 4,
            ff_hidden: 256,
            ar_blocks: 2,
            nar_blocks: 3,
            codebook_size: 64,
        }
    }

    /// Published sizes: 1024-wide embeddings, 10 style tokens of width 256,
    /// 12 blocks, 16 heads, 2048 feed-forward units, EnCodec's 1024 codes.
    pub fn paper_scale() -> Self {
        Self {
            d_model: 1024,
            d_style: 256,
            style_tokens: 10,
            style_heads: 8,
            heads: 16,
            ff_hidden: 2048,
            ar_blocks: 12,
            nar_blocks: 12,
            codebook_size: 1024,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("d_style", self.d_style),
            ("style_tokens", self.style_tokens),
            ("style_heads", self.style_heads),
            ("heads", self.heads),
            ("ff_hidden", self.ff_hidden),
            ("ar_blocks", self.ar_blocks),
            ("nar_blocks", self.nar_blocks),
            ("codebook_size", self.codebook_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % 2 != 0 {
            return Err(Error::Config("d_model must be even".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config("d_model not divisible by heads".into()));
        }
        if self.d_style % self.style_heads != 0 {
            return Err(Error::Config("d_style not divisible by style_heads".into()));
        }
        Ok(())
    }

    pub fn style(&self) -> StyleConfig {
        StyleConfig {
            d_model: self.d_model,
            d_style: self.d_style,
            tokens: self.style_tokens,
            heads: self.style_heads,
            codebook_size: self.codebook_size,
        }
    }

    /// Std of the residual-branch output projections.
    fn out_std(&self, blocks: usize) -> f64 {
        1.0 / ((self.d_model * 2 * blocks.max(1)) as f64).sqrt()
    }
}

pub const TEXT_VOCAB: usize = VOCAB_SIZE;
const EMB_STD: f64 = 1.0;
/// Small classifier weights start both decoders near the uniform prediction.
const HEAD_STD: f64 = 0.02;

/// Input segments: text, prompt frames, target frames.
const SEGMENTS: usize = 3;

/// One sinusoidal position row, same formula as
/// [`crate::nn::sinusoidal_positions`].
fn position_row<T: Scalar>(t: usize, dim: usize) -> Vec<T> {
    (0..dim)
        .map(|j| {
            let i = (j / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * i / dim as f64);
            T::c(if j % 2 == 0 { angle.sin() } else { angle.cos() })
        })
        .collect()
}

/// Adds per-segment positions (restarting at 0 in each segment) and the
/// segment embedding to `x`, whose rows are the segments laid end to end.
fn add_positions<T: Scalar>(
    ps: &ParamStore<T>,
    seg_emb: &Embedding,
    x: &mut Tensor2<T>,
    lens: &[usize],
) -> Result<()> {
    let dim = x.cols();
    let longest = lens.iter().copied().max().unwrap_or(0);
    let pos = crate::nn::sinusoidal_positions::<T>(longest, dim)?;
    let table = ps.get(seg_emb.table);
    let mut r = 0;
    for (s, &len) in lens.iter().enumerate() {
        for t in 0..len {
            for ((v, p), e) in x.row_mut(r).iter_mut().zip(pos.row(t)).zip(table.row(s)) {
                *v += *p + *e;
            }
            r += 1;
        }
    }
    Ok(())
}

fn add_positions_backward<T: Scalar>(
    seg_emb: &Embedding,
    dx: &Tensor2<T>,
    lens: &[usize],
    grads: &mut Grads<T>,
) {
    let g = grads.get_mut(seg_emb.table);
    let mut r = 0;
    for (s, &len) in lens.iter().enumerate() {
        for _ in 0..len {
            for (a, b) in g.row_mut(s).iter_mut().zip(dx.row(r)) {
                *a += *b;
            }
            r += 1;
        }
    }
}

fn check_ids(ids: &[usize], size: usize) -> Result<()> {
    match ids.iter().find(|&&i| i >= size) {
        Some(&index) => Err(Error::IndexOutOfRange { index, size }),
        None => Ok(()),
    }
}

/// Number of stages the NAR decoder predicts.
pub const NAR_STAGES: usize = STAGES - 1;
