//! Multi-head scaled dot-product attention.

use rand::Rng;

use super::layers::Linear;
use super::params::{Grads, ParamStore};
use super::tensor::{matmul, Scalar, Tensor2};
use crate::error::{Error, Result};

/// Which keys each query row may attend to. Every variant allows a prefix
/// of the key sequence, so a row is described by how many keys it sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnMask {
    None,
    /// Rows `< prefix` see keys `< prefix`; row `i >= prefix` sees keys `<= i`.
    /// `prefix == 0` is the ordinary causal mask.
    Causal { prefix: usize },
}

impl AttnMask {
    #[inline]
    pub fn visible(self, row: usize, keys: usize) -> usize {
        match self {
            AttnMask::None => keys,
            AttnMask::Causal { prefix } if row < prefix => prefix.min(keys),
            AttnMask::Causal { .. } => (row + 1).min(keys),
        }
    }
}

/// Projections `Q = q_in Wq + bq`, `K = k_in Wk`, `V = v_in Wv + bv`, per-head
/// `softmax(Q_h K_h^T / sqrt(d_h) + mask) V_h`, then `Wo`.
///
/// The key projection has no bias: a key bias only adds a per-row constant to
/// the scores, and leaving it out keeps scores linear in the key input.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub inner: usize,
}

#[derive(Debug, Clone)]
pub struct AttnCache<T> {
    q_in: Tensor2<T>,
    k_in: Tensor2<T>,
    v_in: Tensor2<T>,
    q: Tensor2<T>,
    k: Tensor2<T>,
    v: Tensor2<T>,
    /// Softmax weights, one `Lq x Lk` matrix per head.
    pub probs: Vec<Tensor2<T>>,
    ctx: Tensor2<T>,
}

impl<T: Scalar> AttnCache<T> {
    /// Softmax weights averaged over heads.
    pub fn mean_weights(&self) -> Tensor2<T> {
        let mut out = self.probs[0].clone();
        for p in &self.probs[1..] {
            out.add_assign(p);
        }
        out.scale(T::one() / T::c(self.probs.len() as f64));
        out
    }
}

impl MultiHeadAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        q_dim: usize,
        k_dim: usize,
        v_dim: usize,
        inner: usize,
        out_dim: usize,
        heads: usize,
        out_std: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || inner % heads != 0 {
            return Err(Error::ShapeMismatch(format!(
                "attention dim {inner} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            wq: Linear::new(ps, &format!("{name}.q"), q_dim, inner, true, rng),
            wk: Linear::new(ps, &format!("{name}.k"), k_dim, inner, false, rng),
            wv: Linear::new(ps, &format!("{name}.v"), v_dim, inner, true, rng),
            wo: Linear::with_std(ps, &format!("{name}.o"), inner, out_dim, true, out_std, rng),
            heads,
            inner,
        })
    }

    /// Self-attention convenience constructor.
    pub fn self_attention<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        out_std: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::new(ps, name, dim, dim, dim, dim, dim, heads, out_std, rng)
    }

    pub fn head_dim(&self) -> usize {
        self.inner / self.heads
    }

    fn scale<T: Scalar>(&self) -> T {
        T::one() / T::c(self.head_dim() as f64).sqrt()
    }

    /// Scaled pre-softmax scores per head (no mask applied).
    pub fn scores<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        q_in: &Tensor2<T>,
        k_in: &Tensor2<T>,
    ) -> Result<Vec<Tensor2<T>>> {
        let q = self.wq.forward(ps, q_in)?;
        let k = self.wk.forward(ps, k_in)?;
        let dh = self.head_dim();
        Ok((0..self.heads)
            .map(|h| {
                let mut s = Tensor2::zeros(q.rows(), k.rows());
                s.gemm_into(
                    0,
                    self.scale(),
                    q.col_block(h * dh, dh),
                    k.col_block(h * dh, dh).t(),
                    T::zero(),
                );
                s
            })
            .collect())
    }

    pub fn forward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        q_in: &Tensor2<T>,
        k_in: &Tensor2<T>,
        v_in: &Tensor2<T>,
        mask: AttnMask,
    ) -> Result<(Tensor2<T>, AttnCache<T>)> {
        if k_in.rows() != v_in.rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} keys but {} values",
                k_in.rows(),
                v_in.rows()
            )));
        }
        let q = self.wq.forward(ps, q_in)?;
        let k = self.wk.forward(ps, k_in)?;
        let v = self.wv.forward(ps, v_in)?;
        let (lq, lk) = (q.rows(), k.rows());
        let dh = self.head_dim();
        let mut ctx = Tensor2::zeros(lq, self.inner);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let mut s = Tensor2::zeros(lq, lk);
            s.gemm_into(
                0,
                self.scale(),
                q.col_block(h * dh, dh),
                k.col_block(h * dh, dh).t(),
                T::zero(),
            );
            masked_softmax_rows(&mut s, mask);
            ctx.gemm_into(h * dh, T::one(), s.view(), v.col_block(h * dh, dh), T::zero());
            probs.push(s);
        }
        let out = self.wo.forward(ps, &ctx)?;
        Ok((
            out,
            AttnCache {
                q_in: q_in.clone(),
                k_in: k_in.clone(),
                v_in: v_in.clone(),
                q,
                k,
                v,
                probs,
                ctx,
            },
        ))
    }

    /// Returns gradients w.r.t. `(q_in, k_in, v_in)`.
    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        cache: &AttnCache<T>,
        dout: &Tensor2<T>,
        grads: &mut Grads<T>,
    ) -> (Tensor2<T>, Tensor2<T>, Tensor2<T>) {
        let dctx = self.wo.backward(ps, &cache.ctx, dout, grads);
        let (lq, lk) = (cache.q.rows(), cache.k.rows());
        let dh = self.head_dim();
        let mut dq = Tensor2::zeros(lq, self.inner);
        let mut dk = Tensor2::zeros(lk, self.inner);
        let mut dv = Tensor2::zeros(lk, self.inner);
        let scale = self.scale::<T>();
        for (h, p) in cache.probs.iter().enumerate() {
            let dctx_h = dctx.col_block(h * dh, dh);
            dv.gemm_into(h * dh, T::one(), p.view().t(), dctx_h, T::zero());
            let mut ds = matmul(dctx_h, cache.v.col_block(h * dh, dh).t());
            for r in 0..lq {
                let pr = p.row(r);
                let row = ds.row_mut(r);
                let dot: T = row.iter().zip(pr).map(|(g, p)| *g * *p).sum();
                for (g, p) in row.iter_mut().zip(pr) {
                    *g = *p * (*g - dot) * scale;
                }
            }
            dq.gemm_into(h * dh, T::one(), ds.view(), cache.k.col_block(h * dh, dh), T::zero());
            dk.gemm_into(h * dh, T::one(), ds.view().t(), cache.q.col_block(h * dh, dh), T::zero());
        }
        let dq_in = self.wq.backward(ps, &cache.q_in, &dq, grads);
        let dk_in = self.wk.backward(ps, &cache.k_in, &dk, grads);
        let dv_in = self.wv.backward(ps, &cache.v_in, &dv, grads);
        (dq_in, dk_in, dv_in)
    }
}

/// Projected keys and values of every position seen so far, for
/// incremental decoding.
#[derive(Debug, Clone)]
pub struct KvCache<T> {
    k: Tensor2<T>,
    v: Tensor2<T>,
}

impl<T: Scalar> KvCache<T> {
    pub fn new(inner: usize) -> Self {
        Self {
            k: Tensor2::zeros(0, inner),
            v: Tensor2::zeros(0, inner),
        }
    }

    pub fn len(&self) -> usize {
        self.k.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.k.rows() == 0
    }
}

impl MultiHeadAttention {
    /// Self-attention for rows at positions `cache.len()..` given the keys
    /// and values already cached; the new rows' keys and values are appended.
    pub fn forward_cached<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        x: &Tensor2<T>,
        cache: &mut KvCache<T>,
        mask: AttnMask,
    ) -> Result<Tensor2<T>> {
        let start = cache.len();
        let q = self.wq.forward(ps, x)?;
        cache.k.push_rows(&self.wk.forward(ps, x)?);
        cache.v.push_rows(&self.wv.forward(ps, x)?);
        let total = cache.len();
        let dh = self.head_dim();
        let mut ctx = Tensor2::zeros(x.rows(), self.inner);
        let mut s = Tensor2::zeros(1, total);
        for r in 0..x.rows() {
            let vis = mask.visible(start + r, total);
            let qr = Tensor2::from_vec(1, self.inner, q.row(r).to_vec())?;
            for h in 0..self.heads {
                s.gemm_into(
                    0,
                    self.scale(),
                    qr.col_block(h * dh, dh),
                    cache.k.col_block(h * dh, dh).t(),
                    T::zero(),
                );
                masked_softmax_rows(&mut s, AttnMask::Causal { prefix: vis });
                let mut out = Tensor2::zeros(1, dh);
                out.gemm_into(0, T::one(), s.view(), cache.v.col_block(h * dh, dh), T::zero());
                ctx.row_mut(r)[h * dh..(h + 1) * dh].copy_from_slice(out.row(0));
            }
        }
        self.wo.forward(ps, &ctx)
    }
}

/// In-place row softmax over the visible prefix of each row; hidden
/// entries become exactly zero.
pub fn masked_softmax_rows<T: Scalar>(s: &mut Tensor2<T>, mask: AttnMask) {
    let cols = s.cols();
    for r in 0..s.rows() {
        let vis = mask.visible(r, cols);
        let row = s.row_mut(r);
        if vis == 0 {
            row.iter_mut().for_each(|v| *v = T::zero());
            continue;
        }
        let max = row[..vis].iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in &mut row[..vis] {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = T::one() / sum;
        for v in &mut row[..vis] {
            *v *= inv;
        }
        for v in &mut row[vis..] {
            *v = T::zero();
        }
    }
}
