//! Style network: a learned token bank `S`, a control vector `c` that
//! row-scales it into the attention keys, and the attention path that turns
//! summed stage embeddings into the style embedding `Y`.

use rand::Rng;

use crate::codec::{QuantizedTokenGrid, STAGES};
use crate::error::{Error, Result};
use crate::nn::attention::AttnCache;
use crate::nn::{AttnMask, Embedding, Grads, MultiHeadAttention, ParamId, ParamStore, Scalar, Tensor2};

pub const CONTROL_MIN: f64 = 0.5;
pub const CONTROL_MAX: f64 = 2.5;

/// Per-token scale factors `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlVector(Vec<f64>);

impl ControlVector {
    pub fn ones(n: usize) -> Self {
        Self(vec![1.0; n])
    }

    /// All ones except `c[index] = value`.
    pub fn single(n: usize, index: usize, value: f64) -> Self {
        let mut v = vec![1.0; n];
        v[index] = value;
        Self(v)
    }

    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_ones(&self) -> bool {
        self.0.iter().all(|&v| v == 1.0)
    }

    /// Length must be `n` and every entry within `[0.5, 2.5]`.
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.0.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                got: self.0.len(),
            });
        }
        for (index, &value) in self.0.iter().enumerate() {
            if !(CONTROL_MIN..=CONTROL_MAX).contains(&value) {
                return Err(Error::ControlOutOfRange { index, value });
            }
        }
        Ok(())
    }

    /// Training accepts only the all-ones vector.
    pub fn validate_training(&self, n: usize) -> Result<()> {
        self.validate(n)?;
        if self.is_ones() {
            Ok(())
        } else {
            Err(Error::TrainingControl)
        }
    }
}

/// `K[i][j] = c[i] * S[i][j]`.
pub fn scale_tokens<T: Scalar>(s: &Tensor2<T>, c: &ControlVector) -> Result<Tensor2<T>> {
    c.validate(s.rows())?;
    let mut k = s.clone();
    for (i, &ci) in c.values().iter().enumerate() {
        let ci = T::c(ci);
        k.row_mut(i).iter_mut().for_each(|v| *v = ci * *v);
    }
    Ok(k)
}

/// How the attention keys are formed.
#[derive(Debug, Clone, Copy)]
pub enum StyleKeys<'a> {
    Scaled(&'a ControlVector),
    /// Keys are `S` itself, with no scaling step at all.
    Bypass,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StyleConfig {
    pub d_model: usize,
    pub d_style: usize,
    pub tokens: usize,
    pub heads: usize,
    pub codebook_size: usize,
}

#[derive(Debug, Clone)]
pub struct StyleNetwork {
    pub cfg: StyleConfig,
    /// One `K x D_m` table per quantizer stage.
    pub stage_emb: Vec<Embedding>,
    pub bank: ParamId,
    pub attn: MultiHeadAttention,
}

#[derive(Debug, Clone)]
pub struct StyleCache<T> {
    /// Per stage, the codes of the frames that summed it. Those frames are
    /// always a prefix of the sequence (the prompt, or everything).
    used: Vec<Vec<usize>>,
    scale: Vec<T>,
    pub attn: AttnCache<T>,
}

impl<T: Scalar> StyleCache<T> {
    /// Head-averaged attention over the style tokens, `L x N`.
    pub fn weights(&self) -> Tensor2<T> {
        self.attn.mean_weights()
    }
}

impl StyleNetwork {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        cfg: &StyleConfig,
        out_std: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let emb_std = 1.0 / (cfg.d_model as f64).sqrt();
        let stage_emb = (0..STAGES)
            .map(|s| {
                Embedding::new(
                    ps,
                    &format!("{name}.stage_emb{s}"),
                    cfg.codebook_size,
                    cfg.d_model,
                    emb_std,
                    rng,
                )
            })
            .collect();
        let bank = ps.add_normal(
            format!("{name}.tokens"),
            cfg.tokens,
            cfg.d_style,
            0.5 / (cfg.d_style as f64).sqrt(),
            rng,
        );
        let attn = MultiHeadAttention::new(
            ps,
            &format!("{name}.attn"),
            cfg.d_model,
            cfg.d_style,
            cfg.d_style,
            cfg.d_style,
            cfg.d_model,
            cfg.heads,
            out_std,
            rng,
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            stage_emb,
            bank,
            attn,
        })
    }

    /// Number of stages summed at frame `t`: all of them inside the prompt,
    /// stages `1..d-1` after it.
    fn stages_at(t: usize, prompt_len: usize, d: usize) -> usize {
        if t < prompt_len {
            STAGES
        } else {
            d - 1
        }
    }

    /// `A[t] = sum_s emb_s(codes[s][t])`.
    pub fn acoustic_base<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        grid: &QuantizedTokenGrid,
        prompt_len: usize,
        d: usize,
    ) -> Result<Tensor2<T>> {
        check_stage(d)?;
        let mut a = Tensor2::zeros(grid.len(), self.cfg.d_model);
        for t in 0..grid.len() {
            for s in 0..Self::stages_at(t, prompt_len, d) {
                let code = grid.stage(s)[t] as usize;
                let table = ps.get(self.stage_emb[s].table);
                if code >= table.rows() {
                    return Err(Error::IndexOutOfRange {
                        index: code,
                        size: table.rows(),
                    });
                }
                for (o, v) in a.row_mut(t).iter_mut().zip(table.row(code)) {
                    *o += *v;
                }
            }
        }
        Ok(a)
    }

    fn keys<T: Scalar>(&self, ps: &ParamStore<T>, keys: StyleKeys) -> Result<(Tensor2<T>, Vec<T>)> {
        let s = ps.get(self.bank);
        match keys {
            StyleKeys::Scaled(c) => Ok((
                scale_tokens(s, c)?,
                c.values().iter().map(|&v| T::c(v)).collect(),
            )),
            StyleKeys::Bypass => Ok((s.clone(), vec![T::one(); s.rows()])),
        }
    }

    /// Pre-softmax style attention scores per head, `L x N` each.
    pub fn scores<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        grid: &QuantizedTokenGrid,
        prompt_len: usize,
        d: usize,
        keys: StyleKeys,
    ) -> Result<Vec<Tensor2<T>>> {
        let a = self.acoustic_base(ps, grid, prompt_len, d)?;
        let (k, _) = self.keys(ps, keys)?;
        self.attn.scores(ps, &a, &k)
    }

    /// The style embedding `Y = A + W_o * Attn(A W_q, (c * S) W_k, S W_v)`.
    pub fn forward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        grid: &QuantizedTokenGrid,
        prompt_len: usize,
        d: usize,
        keys: StyleKeys,
    ) -> Result<(Tensor2<T>, StyleCache<T>)> {
        let mut y = self.acoustic_base(ps, grid, prompt_len, d)?;
        let (k, scale) = self.keys(ps, keys)?;
        let s = ps.get(self.bank);
        let (att, cache) = self.attn.forward(ps, &y, &k, s, AttnMask::None)?;
        y.add_assign(&att);
        let used = (0..STAGES)
            .map(|s| {
                (0..grid.len())
                    .take_while(|&t| s < Self::stages_at(t, prompt_len, d))
                    .map(|t| grid.stage(s)[t] as usize)
                    .collect()
            })
            .collect();
        Ok((
            y,
            StyleCache {
                used,
                scale,
                attn: cache,
            },
        ))
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        cache: &StyleCache<T>,
        dy: &Tensor2<T>,
        grads: &mut Grads<T>,
    ) {
        let (dq, dk, dv) = self.attn.backward(ps, &cache.attn, dy, grads);
        let mut da = dy.clone();
        da.add_assign(&dq);
        let dbank = grads.get_mut(self.bank);
        for i in 0..self.cfg.tokens {
            let c = cache.scale[i];
            for ((g, k), v) in dbank.row_mut(i).iter_mut().zip(dk.row(i)).zip(dv.row(i)) {
                *g += c * *k + *v;
            }
        }
        for (s, ids) in cache.used.iter().enumerate() {
            let g = grads.get_mut(self.stage_emb[s].table);
            for (r, id) in ids.iter().enumerate() {
                for (a, b) in g.row_mut(*id).iter_mut().zip(da.row(r)) {
                    *a += *b;
                }
            }
        }
    }

    /// Head-averaged attention weights over the style tokens, `L x N`.
    pub fn attention_weights<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        grid: &QuantizedTokenGrid,
        prompt_len: usize,
        d: usize,
        keys: StyleKeys,
    ) -> Result<Tensor2<T>> {
        Ok(self.forward(ps, grid, prompt_len, d, keys)?.1.weights())
    }
}

pub(crate) fn check_stage(d: usize) -> Result<()> {
    if (2..=STAGES).contains(&d) {
        Ok(())
    } else {
        Err(Error::InvalidStage(d))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_param_grads, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> StyleConfig {
        StyleConfig {
            d_model: 6,
            d_style: 4,
            tokens: 3,
            heads: 2,
            codebook_size: 5,
        }
    }

    fn grid(len: usize, rng: &mut ChaCha8Rng) -> QuantizedTokenGrid {
        QuantizedTokenGrid::new(
            (0..STAGES).map(|_| (0..len).map(|_| rng.random_range(0..5)).collect()).collect(),
            5,
        )
        .unwrap()
    }

    #[test]
    fn scaling_rows() {
        let s = Tensor2::from_fn(10, 4, |i, j| (i * 4 + j) as f64 * 0.37 - 3.0);
        assert_eq!(scale_tokens(&s, &ControlVector::ones(10)).unwrap(), s);
        let k = scale_tokens(&s, &ControlVector::single(10, 0, 0.5)).unwrap();
        assert!(k.row(0).iter().zip(s.row(0)).all(|(a, b)| *a == 0.5 * b));
        assert_eq!(k.row(1), s.row(1));
        let k = scale_tokens(&s, &ControlVector::single(10, 0, 2.5)).unwrap();
        assert!(k.row(0).iter().zip(s.row(0)).all(|(a, b)| *a == 2.5 * b));
        assert!(matches!(
            scale_tokens(&s, &ControlVector::single(10, 3, 2.6)),
            Err(Error::ControlOutOfRange { index: 3, .. })
        ));
        assert!(matches!(
            scale_tokens(&s, &ControlVector::single(10, 0, 0.4)),
            Err(Error::ControlOutOfRange { index: 0, .. })
        ));
        assert!(matches!(
            scale_tokens(&s, &ControlVector::ones(9)),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn ones_equal_bypass_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamStore::<f64>::new();
        let net = StyleNetwork::new(&mut ps, "s", &cfg(), 1.0, &mut rng).unwrap();
        let g = grid(7, &mut rng);
        let ones = ControlVector::ones(3);
        let (a, _) = net.forward(&ps, &g, 2, 4, StyleKeys::Scaled(&ones)).unwrap();
        let (b, _) = net.forward(&ps, &g, 2, 4, StyleKeys::Bypass).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn later_stages_do_not_leak_past_prompt() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamStore::<f64>::new();
        let net = StyleNetwork::new(&mut ps, "s", &cfg(), 1.0, &mut rng).unwrap();
        let g = grid(6, &mut rng);
        let mut codes: Vec<Vec<u32>> = g.stages().to_vec();
        codes[3][4] = (codes[3][4] + 1) % 5;
        let g2 = QuantizedTokenGrid::new(codes, 5).unwrap();
        let (a, _) = net.forward::<f64>(&ps, &g, 2, 3, StyleKeys::Bypass).unwrap();
        let (b, _) = net.forward::<f64>(&ps, &g2, 2, 3, StyleKeys::Bypass).unwrap();
        assert_eq!(a, b);
        let (c, _) = net.forward::<f64>(&ps, &g2, 2, 5, StyleKeys::Bypass).unwrap();
        let (d, _) = net.forward::<f64>(&ps, &g, 2, 5, StyleKeys::Bypass).unwrap();
        assert_ne!(c, d);
    }

    #[test]
    fn scores_are_linear_in_each_control() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamStore::<f64>::new();
        let net = StyleNetwork::new(&mut ps, "s", &cfg(), 1.0, &mut rng).unwrap();
        let g = grid(5, &mut rng);
        let base = ControlVector::ones(3);
        let s1 = net.scores(&ps, &g, 0, 2, StyleKeys::Scaled(&base)).unwrap();
        for k in 0..3 {
            let c = ControlVector::single(3, k, 2.0);
            let s2 = net.scores(&ps, &g, 0, 2, StyleKeys::Scaled(&c)).unwrap();
            for (h1, h2) in s1.iter().zip(&s2) {
                for t in 0..5 {
                    for i in 0..3 {
                        let want = if i == k { 2.0 * h1.get(t, i) } else { h1.get(t, i) };
                        let got = h2.get(t, i);
                        assert!((got - want).abs() <= 1e-12 * want.abs().max(1e-300));
                    }
                }
            }
        }
    }

    #[test]
    fn single_token_ignores_control() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ps = ParamStore::<f64>::new();
        let c1 = StyleConfig { tokens: 1, ..cfg() };
        let net = StyleNetwork::new(&mut ps, "s", &c1, 1.0, &mut rng).unwrap();
        let g = grid(4, &mut rng);
        let lo = ControlVector::new(vec![0.5]);
        let hi = ControlVector::new(vec![2.5]);
        let (a, ca) = net.forward::<f64>(&ps, &g, 0, 3, StyleKeys::Scaled(&lo)).unwrap();
        let (b, _) = net.forward::<f64>(&ps, &g, 0, 3, StyleKeys::Scaled(&hi)).unwrap();
        assert!(ca.weights().data().iter().all(|&w| w == 1.0));
        assert_eq!(a, b);
    }

    #[test]
    fn gradients_including_token_bank() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamStore::<f64>::new();
        let net = StyleNetwork::new(&mut ps, "s", &cfg(), 1.0, &mut rng).unwrap();
        for v in ps.values_mut() {
            *v = random_tensor(v.rows(), v.cols(), &mut rng);
        }
        let g = grid(5, &mut rng);
        let c = ControlVector::new(vec![0.5, 1.7, 2.5]);
        let w = random_tensor(5, 6, &mut rng);
        let loss = |ps: &ParamStore<f64>| {
            let (y, _) = net.forward(ps, &g, 2, 3, StyleKeys::Scaled(&c)).unwrap();
            y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = net.forward(&ps, &g, 2, 3, StyleKeys::Scaled(&c)).unwrap();
        let mut grads = ps.zero_grads();
        net.backward(&ps, &cache, &w, &mut grads);
        check_param_grads(&ps, &grads, loss, 1e-4);
    }
}
