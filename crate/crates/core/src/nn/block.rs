//! Pre-norm transformer block: `x + Attn(Norm(x))`, then `+ FF(Norm(.))`.

use rand::Rng;

use super::attention::{AttnCache, AttnMask, KvCache, MultiHeadAttention};
use super::layers::{AdaNormCache, AdaptiveLayerNorm, FeedForward, FfCache, LayerNorm, NormCache};
use super::params::{Grads, ParamStore};
use super::tensor::{Scalar, Tensor2};
use crate::error::Result;

#[derive(Debug, Clone)]
pub enum Norm {
    Plain(LayerNorm),
    /// Conditioned on a `1 x cond_dim` vector.
    Adaptive(AdaptiveLayerNorm),
}

#[derive(Debug, Clone)]
pub enum NormState<T> {
    Plain(NormCache<T>),
    Adaptive(AdaNormCache<T>),
}

impl Norm {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        cond_dim: Option<usize>,
    ) -> Self {
        match cond_dim {
            None => Norm::Plain(LayerNorm::new(ps, name, dim)),
            Some(c) => Norm::Adaptive(AdaptiveLayerNorm::new(ps, name, c, dim)),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        x: &Tensor2<T>,
        cond: Option<&Tensor2<T>>,
    ) -> Result<(Tensor2<T>, NormState<T>)> {
        match self {
            Norm::Plain(n) => {
                let (y, c) = n.forward(ps, x)?;
                Ok((y, NormState::Plain(c)))
            }
            Norm::Adaptive(n) => {
                let cond = cond.ok_or_else(|| {
                    crate::Error::ShapeMismatch("adaptive norm needs a condition".into())
                })?;
                let (y, c) = n.forward(ps, x, cond)?;
                Ok((y, NormState::Adaptive(c)))
            }
        }
    }

    /// Returns `dx` and, for the adaptive variant, the condition gradient.
    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        state: &NormState<T>,
        dy: &Tensor2<T>,
        grads: &mut Grads<T>,
    ) -> (Tensor2<T>, Option<Tensor2<T>>) {
        match (self, state) {
            (Norm::Plain(n), NormState::Plain(c)) => (n.backward(ps, c, dy, grads), None),
            (Norm::Adaptive(n), NormState::Adaptive(c)) => {
                let (dx, dc) = n.backward(ps, c, dy, grads);
                (dx, Some(dc))
            }
            _ => unreachable!("norm state from a different norm kind"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub norm1: Norm,
    pub attn: MultiHeadAttention,
    pub norm2: Norm,
    pub ff: FeedForward,
}

#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    n1: NormState<T>,
    pub attn: AttnCache<T>,
    n2: NormState<T>,
    ff: FfCache<T>,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        cond_dim: Option<usize>,
        out_std: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            norm1: Norm::new(ps, &format!("{name}.norm1"), dim, cond_dim),
            attn: MultiHeadAttention::self_attention(ps, &format!("{name}.attn"), dim, heads, out_std, rng)?,
            norm2: Norm::new(ps, &format!("{name}.norm2"), dim, cond_dim),
            ff: FeedForward::new(ps, &format!("{name}.ff"), dim, hidden, out_std, rng),
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        x: &Tensor2<T>,
        cond: Option<&Tensor2<T>>,
        mask: AttnMask,
    ) -> Result<(Tensor2<T>, BlockCache<T>)> {
        let (h1, n1) = self.norm1.forward(ps, x, cond)?;
        let (a, attn) = self.attn.forward(ps, &h1, &h1, &h1, mask)?;
        let mut x2 = x.clone();
        x2.add_assign(&a);
        let (h2, n2) = self.norm2.forward(ps, &x2, cond)?;
        let (f, ff) = self.ff.forward(ps, &h2)?;
        x2.add_assign(&f);
        Ok((x2, BlockCache { n1, attn, n2, ff }))
    }

    /// Returns `dx` and the summed condition gradient, if conditioned.
    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        cache: &BlockCache<T>,
        dy: &Tensor2<T>,
        grads: &mut Grads<T>,
    ) -> (Tensor2<T>, Option<Tensor2<T>>) {
        let dh2 = self.ff.backward(ps, &cache.ff, dy, grads);
        let (dn2, dc2) = self.norm2.backward(ps, &cache.n2, &dh2, grads);
        let mut dx2 = dy.clone();
        dx2.add_assign(&dn2);
        let (mut dh1, dk, dv) = self.attn.backward(ps, &cache.attn, &dx2, grads);
        dh1.add_assign(&dk);
        dh1.add_assign(&dv);
        let (dn1, dc1) = self.norm1.backward(ps, &cache.n1, &dh1, grads);
        dx2.add_assign(&dn1);
        let dcond = match (dc1, dc2) {
            (Some(mut a), Some(b)) => {
                a.add_assign(&b);
                Some(a)
            }
            _ => None,
        };
        (dx2, dcond)
    }

    /// Incremental forward for unconditioned blocks.
    pub fn forward_cached<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        x: &Tensor2<T>,
        kv: &mut KvCache<T>,
        mask: AttnMask,
    ) -> Result<Tensor2<T>> {
        let (h1, _) = self.norm1.forward(ps, x, None)?;
        let a = self.attn.forward_cached(ps, &h1, kv, mask)?;
        let mut x2 = x.clone();
        x2.add_assign(&a);
        let (h2, _) = self.norm2.forward(ps, &x2, None)?;
        let (f, _) = self.ff.forward(ps, &h2)?;
        x2.add_assign(&f);
        Ok(x2)
    }
}
