use rand::Rng;

use super::{add_positions, add_positions_backward, check_ids, ModelConfig, EMB_STD, HEAD_STD, NAR_STAGES, SEGMENTS, TEXT_VOCAB};
use crate::codec::QuantizedTokenGrid;
use crate::error::{Error, Result};
use crate::nn::block::BlockCache;
use crate::nn::layers::NormCache;
use crate::nn::{AttnMask, Block, Embedding, Grads, LayerNorm, Linear, ParamStore, Scalar, Tensor2};
use crate::style::{check_stage, StyleCache, StyleKeys, StyleNetwork};

/// Non-causal decoder over `[text; Y]` predicting one stage `d` of the
/// target frames, with every norm conditioned on a stage embedding.
#[derive(Debug, Clone)]
pub struct NarModel {
    pub cfg: ModelConfig,
    text_emb: Embedding,
    seg_emb: Embedding,
    stage_emb: Embedding,
    pub style: StyleNetwork,
    blocks: Vec<Block>,
    norm: LayerNorm,
    head: Linear,
}

#[derive(Debug, Clone)]
pub struct NarCache<T> {
    text: Vec<usize>,
    lens: [usize; 3],
    d: usize,
    pub style: StyleCache<T>,
    blocks: Vec<BlockCache<T>>,
    norm: NormCache<T>,
    normed: Tensor2<T>,
}

impl NarModel {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        cfg: &ModelConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let out_std = cfg.out_std(cfg.nar_blocks);
        let text_emb = Embedding::new(ps, "nar.text_emb", TEXT_VOCAB, d, EMB_STD, rng);
        let seg_emb = Embedding::new(ps, "nar.seg_emb", SEGMENTS, d, EMB_STD, rng);
        let stage_emb = Embedding::new(ps, "nar.stage_emb", NAR_STAGES, d, EMB_STD, rng);
        let style = StyleNetwork::new(ps, "nar.style", &cfg.style(), out_std, rng)?;
        let blocks = (0..cfg.nar_blocks)
            .map(|i| {
                Block::new(ps, &format!("nar.block{i}"), d, cfg.heads, cfg.ff_hidden, Some(d), out_std, rng)
            })
            .collect::<Result<_>>()?;
        let norm = LayerNorm::new(ps, "nar.norm", d);
        let head = Linear::with_std(ps, "nar.head", d, cfg.codebook_size, true, HEAD_STD, rng);
        Ok(Self {
            cfg: cfg.clone(),
            text_emb,
            seg_emb,
            stage_emb,
            style,
            blocks,
            norm,
            head,
        })
    }

    /// Logits for stage `d` of the target frames, `L_t x K`. `grid` holds
    /// the prompt frames followed by the target frames; in the target part
    /// only stages `1..d-1` are read.
    pub fn forward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        text: &[usize],
        grid: &QuantizedTokenGrid,
        prompt_len: usize,
        d: usize,
        keys: StyleKeys,
    ) -> Result<(Tensor2<T>, NarCache<T>)> {
        check_stage(d)?;
        check_ids(text, TEXT_VOCAB)?;
        if grid.codebook_size() != self.cfg.codebook_size {
            return Err(Error::ShapeMismatch(format!(
                "grid has {} codes per stage, model expects {}",
                grid.codebook_size(),
                self.cfg.codebook_size
            )));
        }
        if prompt_len > grid.len() {
            return Err(Error::ShapeMismatch("prompt longer than grid".into()));
        }
        let (y, style) = self.style.forward(ps, grid, prompt_len, d, keys)?;
        let lens = [text.len(), prompt_len, grid.len() - prompt_len];
        let mut x = self.text_emb.forward(ps, text)?;
        x.push_rows(&y);
        add_positions(ps, &self.seg_emb, &mut x, &lens)?;
        let cond = self.stage_emb.forward(ps, &[d - 2])?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (o, c) = b.forward(ps, &x, Some(&cond), AttnMask::None)?;
            x = o;
            caches.push(c);
        }
        // Only the target frames are classified.
        let h = x.slice_rows(lens[0] + lens[1], x.rows());
        let (normed, norm) = self.norm.forward(ps, &h)?;
        let logits = self.head.forward(ps, &normed)?;
        Ok((
            logits,
            NarCache {
                text: text.to_vec(),
                lens,
                d,
                style,
                blocks: caches,
                norm,
                normed,
            },
        ))
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        cache: &NarCache<T>,
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
        let mut dcond = Tensor2::zeros(1, self.cfg.d_model);
        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            let (dxi, dc) = b.backward(ps, c, &dx, grads);
            dx = dxi;
            if let Some(dc) = dc {
                dcond.add_assign(&dc);
            }
        }
        self.stage_emb.backward(&[cache.d - 2], &dcond, grads);
        add_positions_backward(&self.seg_emb, &dx, &cache.lens, grads);
        let t = cache.text.len();
        self.text_emb.backward(&cache.text, &dx.slice_rows(0, t), grads);
        self.style.backward(ps, &cache.style, &dx.slice_rows(t, total), grads);
    }

    /// Greedy codes for stage `d` of the target frames.
    pub fn predict<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        text: &[usize],
        grid: &QuantizedTokenGrid,
        prompt_len: usize,
        d: usize,
        keys: StyleKeys,
    ) -> Result<Vec<u32>> {
        let (logits, _) = self.forward(ps, text, grid, prompt_len, d, keys)?;
        Ok((0..logits.rows()).map(|r| argmax_row(logits.row(r)) as u32).collect())
    }
}

/// First index of the row maximum.
pub(crate) fn argmax_row<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
