use rand::Rng;

use super::{add_positions, add_positions_backward, check_ids, position_row, ModelConfig, EMB_STD, HEAD_STD, SEGMENTS, TEXT_VOCAB};
use crate::error::{Error, Result};
use crate::nn::block::BlockCache;
use crate::nn::layers::NormCache;
use crate::nn::sample::softmax_sample;
use crate::nn::{AttnMask, Block, Embedding, Grads, KvCache, LayerNorm, Linear, ParamStore, Scalar, Tensor2};

/// Causal decoder over `[text; prompt stage 1; target stage 1]` predicting
/// the next stage-1 code or end-of-sequence.
#[derive(Debug, Clone)]
pub struct ArModel {
    pub cfg: ModelConfig,
    text_emb: Embedding,
    code_emb: Embedding,
    seg_emb: Embedding,
    blocks: Vec<Block>,
    norm: LayerNorm,
    head: Linear,
}

#[derive(Debug, Clone)]
pub struct ArCache<T> {
    text: Vec<usize>,
    codes: Vec<usize>,
    lens: [usize; 3],
    blocks: Vec<BlockCache<T>>,
    norm: NormCache<T>,
    normed: Tensor2<T>,
}

/// Stage-1 codes from sampling. `truncated` is set when `max_len` was hit
/// before end-of-sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArGeneration {
    pub codes: Vec<u32>,
    pub truncated: bool,
}

impl ArModel {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        cfg: &ModelConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let k = cfg.codebook_size;
        let out_std = cfg.out_std(cfg.ar_blocks);
        let text_emb = Embedding::new(ps, "ar.text_emb", TEXT_VOCAB, d, EMB_STD, rng);
        let code_emb = Embedding::new(ps, "ar.code_emb", k + 1, d, EMB_STD, rng);
        let seg_emb = Embedding::new(ps, "ar.seg_emb", SEGMENTS, d, EMB_STD, rng);
        let blocks = (0..cfg.ar_blocks)
            .map(|i| Block::new(ps, &format!("ar.block{i}"), d, cfg.heads, cfg.ff_hidden, None, out_std, rng))
            .collect::<Result<_>>()?;
        let norm = LayerNorm::new(ps, "ar.norm", d);
        let head = Linear::with_std(ps, "ar.head", d, k + 1, true, HEAD_STD, rng);
        Ok(Self {
            cfg: cfg.clone(),
            text_emb,
            code_emb,
            seg_emb,
            blocks,
            norm,
            head,
        })
    }

    /// Class index of end-of-sequence.
    pub fn eos(&self) -> usize {
        self.cfg.codebook_size
    }

    /// Training labels: the target codes followed by end-of-sequence.
    pub fn labels(&self, target: &[usize]) -> Vec<usize> {
        let mut l = target.to_vec();
        l.push(self.eos());
        l
    }

    fn embed<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        text: &[usize],
        codes: &[usize],
        lens: &[usize],
    ) -> Result<Tensor2<T>> {
        let mut x = self.text_emb.forward(ps, text)?;
        x.push_rows(&self.code_emb.forward(ps, codes)?);
        add_positions(ps, &self.seg_emb, &mut x, lens)?;
        Ok(x)
    }

    /// Teacher-forced logits, `(L + 1) x (K + 1)`: row `i` predicts
    /// `target[i]`, the last row predicts end-of-sequence.
    pub fn forward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        text: &[usize],
        prompt: &[usize],
        target: &[usize],
    ) -> Result<(Tensor2<T>, ArCache<T>)> {
        if prompt.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        let k = self.cfg.codebook_size;
        check_ids(text, TEXT_VOCAB)?;
        check_ids(prompt, k)?;
        check_ids(target, k)?;
        let lens = [text.len(), prompt.len(), target.len()];
        let codes: Vec<usize> = prompt.iter().chain(target).copied().collect();
        let mut x = self.embed(ps, text, &codes, &lens)?;
        let mask = AttnMask::Causal { prefix: text.len() };
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(ps, &x, None, mask)?;
            x = y;
            caches.push(c);
        }
        let start = text.len() + prompt.len() - 1;
        let h = x.slice_rows(start, x.rows());
        let (normed, norm) = self.norm.forward(ps, &h)?;
        let logits = self.head.forward(ps, &normed)?;
        Ok((
            logits,
            ArCache {
                text: text.to_vec(),
                codes,
                lens,
                blocks: caches,
                norm,
                normed,
            },
        ))
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        cache: &ArCache<T>,
        dlogits: &Tensor2<T>,
        grads: &mut Grads<T>,
    ) {
        let dnormed = self.head.backward(ps, &cache.normed, dlogits, grads);
        let dh = self.norm.backward(ps, &cache.norm, &dnormed, grads);
        let total: usize = cache.lens.iter().sum();
        let start = total - dh.rows();
        let mut dx = Tensor2::zeros(total, self.cfg.d_model);
        for r in 0..dh.rows() {
            dx.row_mut(start + r).copy_from_slice(dh.row(r));
        }
        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            dx = b.backward(ps, c, &dx, grads).0;
        }
        add_positions_backward(&self.seg_emb, &dx, &cache.lens, grads);
        let t = cache.text.len();
        self.text_emb.backward(&cache.text, &dx.slice_rows(0, t), grads);
        self.code_emb.backward(&cache.codes, &dx.slice_rows(t, total), grads);
    }

    /// Sample stage-1 codes after the prompt until end-of-sequence or
    /// `max_len` codes.
    pub fn generate<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        text: &[usize],
        prompt: &[usize],
        temperature: f64,
        max_len: usize,
        rng: &mut impl Rng,
    ) -> Result<ArGeneration> {
        if prompt.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        if temperature.is_nan() || temperature <= 0.0 {
            return Err(Error::NonPositiveTemperature(temperature));
        }
        check_ids(text, TEXT_VOCAB)?;
        check_ids(prompt, self.cfg.codebook_size)?;
        let mask = AttnMask::Causal { prefix: text.len() };
        let mut kv: Vec<KvCache<T>> = self.blocks.iter().map(|_| KvCache::new(self.cfg.d_model)).collect();
        let mut x = self.embed(ps, text, prompt, &[text.len(), prompt.len()])?;
        let mut out = Vec::new();
        loop {
            for (b, c) in self.blocks.iter().zip(&mut kv) {
                x = b.forward_cached(ps, &x, c, mask)?;
            }
            let last = x.slice_rows(x.rows() - 1, x.rows());
            let (normed, _) = self.norm.forward(ps, &last)?;
            let logits: Vec<f32> = self
                .head
                .forward(ps, &normed)?
                .data()
                .iter()
                .map(|v| v.to_f32().unwrap_or(f32::NAN))
                .collect();
            let next = softmax_sample(&logits, temperature, rng)?;
            if next == self.eos() {
                return Ok(ArGeneration {
                    codes: out,
                    truncated: false,
                });
            }
            if out.len() == max_len {
                return Ok(ArGeneration {
                    codes: out,
                    truncated: true,
                });
            }
            out.push(next as u32);
            let mut row = self.code_emb.forward(ps, &[next])?;
            let pos = position_row::<T>(out.len() - 1, self.cfg.d_model);
            let seg = ps.get(self.seg_emb.table).row(2);
            for ((v, p), s) in row.row_mut(0).iter_mut().zip(&pos).zip(seg) {
                *v += *p + *s;
            }
            x = row;
        }
    }
}
