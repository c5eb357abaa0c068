//! Dense layers with explicit forward and backward passes.

use rand::Rng;

use super::params::{Grads, ParamId, ParamStore};
use super::tensor::{matmul, Scalar, Tensor2};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn shape_err(what: &str, expected: usize, got: usize) -> Error {
    Error::ShapeMismatch(format!("{what}: expected {expected} columns, got {got}"))
}

/// `y = x W + b` with `W: in x out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let std = 1.0 / (in_dim as f64).sqrt();
        Self::with_std(ps, name, in_dim, out_dim, bias, std, rng)
    }

    pub fn with_std<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let w = ps.add_normal(format!("{name}.w"), in_dim, out_dim, std, rng);
        let b = bias.then(|| ps.add(format!("{name}.b"), Tensor2::zeros(1, out_dim)));
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    /// Zero weights and a constant bias.
    pub fn constant<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias_value: f64,
    ) -> Self {
        let w = ps.add(format!("{name}.w"), Tensor2::zeros(in_dim, out_dim));
        let b = ps.add(
            format!("{name}.b"),
            Tensor2::filled(1, out_dim, T::c(bias_value)),
        );
        Self {
            w,
            b: Some(b),
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Tensor2<T>) -> Result<Tensor2<T>> {
        if x.cols() != self.in_dim {
            return Err(shape_err("linear input", self.in_dim, x.cols()));
        }
        let mut y = matmul(x.view(), ps.get(self.w).view());
        if let Some(b) = self.b {
            y.add_row_broadcast(ps.get(b).data());
        }
        Ok(y)
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        x: &Tensor2<T>,
        dy: &Tensor2<T>,
        grads: &mut Grads<T>,
    ) -> Tensor2<T> {
        self.backward_params(x, dy, grads);
        matmul(dy.view(), ps.get(self.w).view().t())
    }

    pub fn backward_params<T: Scalar>(&self, x: &Tensor2<T>, dy: &Tensor2<T>, grads: &mut Grads<T>) {
        grads
            .get_mut(self.w)
            .gemm_into(0, T::one(), x.view().t(), dy.view(), T::one());
        if let Some(b) = self.b {
            let db = dy.sum_rows();
            for (g, d) in grads.get_mut(b).data_mut().iter_mut().zip(db) {
                *g += d;
            }
        }
    }
}

/// Row lookup table.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        vocab: usize,
        dim: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let table = ps.add_normal(name, vocab, dim, std, rng);
        Self { table, vocab, dim }
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, ids: &[usize]) -> Result<Tensor2<T>> {
        embedding_lookup(ps.get(self.table), ids)
    }

    pub fn backward<T: Scalar>(&self, ids: &[usize], dy: &Tensor2<T>, grads: &mut Grads<T>) {
        embedding_scatter(grads.get_mut(self.table), ids, dy);
    }
}

/// Gather rows of `table`.
pub fn embedding_lookup<T: Scalar>(table: &Tensor2<T>, ids: &[usize]) -> Result<Tensor2<T>> {
    let mut out = Tensor2::zeros(ids.len(), table.cols());
    for (r, &id) in ids.iter().enumerate() {
        if id >= table.rows() {
            return Err(Error::IndexOutOfRange {
                index: id,
                size: table.rows(),
            });
        }
        out.row_mut(r).copy_from_slice(table.row(id));
    }
    Ok(out)
}

pub fn embedding_scatter<T: Scalar>(grad_table: &mut Tensor2<T>, ids: &[usize], dy: &Tensor2<T>) {
    for (r, &id) in ids.iter().enumerate() {
        for (g, d) in grad_table.row_mut(id).iter_mut().zip(dy.row(r)) {
            *g += *d;
        }
    }
}

/// Fixed sinusoidal position table, `pos[t][2i] = sin(t / 10000^(2i/D))`
/// and `pos[t][2i+1] = cos(..)`.
pub fn sinusoidal_positions<T: Scalar>(len: usize, dim: usize) -> Result<Tensor2<T>> {
    if dim % 2 != 0 {
        return Err(Error::OddDimension(dim));
    }
    Ok(Tensor2::from_fn(len, dim, |t, j| {
        let i = (j / 2) as f64;
        let angle = t as f64 / 10000f64.powf(2.0 * i / dim as f64);
        T::c(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    }))
}

/// Per-row standardization cache shared by both norm layers.
#[derive(Debug, Clone)]
pub struct NormCache<T> {
    pub xhat: Tensor2<T>,
    pub inv_std: Vec<T>,
}

pub fn normalize_rows<T: Scalar>(x: &Tensor2<T>) -> NormCache<T> {
    let d = T::c(x.cols() as f64);
    let eps = T::c(LAYER_NORM_EPS);
    let mut xhat = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = xhat.row_mut(r);
        let mean = row.iter().copied().sum::<T>() / d;
        let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / d;
        let is = T::one() / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * is;
        }
        inv_std.push(is);
    }
    NormCache { xhat, inv_std }
}

pub fn normalize_rows_backward<T: Scalar>(cache: &NormCache<T>, dxhat: &Tensor2<T>) -> Tensor2<T> {
    let d = T::c(dxhat.cols() as f64);
    let mut dx = dxhat.clone();
    for r in 0..dx.rows() {
        let xh = cache.xhat.row(r);
        let row = dx.row_mut(r);
        let mean_g = row.iter().copied().sum::<T>() / d;
        let mean_gx = row.iter().zip(xh).map(|(g, x)| *g * *x).sum::<T>() / d;
        let is = cache.inv_std[r];
        for (g, x) in row.iter_mut().zip(xh) {
            *g = is * (*g - mean_g - *x * mean_gx);
        }
    }
    dx
}

/// Layer norm with learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gain = ps.add(format!("{name}.gain"), Tensor2::filled(1, dim, T::one()));
        let bias = ps.add(format!("{name}.bias"), Tensor2::zeros(1, dim));
        Self { gain, bias, dim }
    }

    pub fn forward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        x: &Tensor2<T>,
    ) -> Result<(Tensor2<T>, NormCache<T>)> {
        if x.cols() != self.dim {
            return Err(shape_err("layer norm", self.dim, x.cols()));
        }
        let cache = normalize_rows(x);
        let g = ps.get(self.gain).data();
        let b = ps.get(self.bias).data();
        let mut y = cache.xhat.clone();
        for r in 0..y.rows() {
            for ((v, g), b) in y.row_mut(r).iter_mut().zip(g).zip(b) {
                *v = *v * *g + *b;
            }
        }
        Ok((y, cache))
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        cache: &NormCache<T>,
        dy: &Tensor2<T>,
        grads: &mut Grads<T>,
    ) -> Tensor2<T> {
        let g = ps.get(self.gain).data();
        let mut dgain = vec![T::zero(); self.dim];
        let mut dxhat = dy.clone();
        for r in 0..dy.rows() {
            let xh = cache.xhat.row(r);
            for (j, v) in dxhat.row_mut(r).iter_mut().enumerate() {
                dgain[j] += *v * xh[j];
                *v *= g[j];
            }
        }
        for (a, d) in grads.get_mut(self.gain).data_mut().iter_mut().zip(dgain) {
            *a += d;
        }
        let db = dy.sum_rows();
        for (a, d) in grads.get_mut(self.bias).data_mut().iter_mut().zip(db) {
            *a += d;
        }
        normalize_rows_backward(cache, &dxhat)
    }
}

/// Layer norm whose gain and bias are affine functions of a condition
/// vector broadcast over time: `y = gamma(c) * xhat + beta(c)`.
#[derive(Debug, Clone)]
pub struct AdaptiveLayerNorm {
    pub gamma: Linear,
    pub beta: Linear,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct AdaNormCache<T> {
    pub norm: NormCache<T>,
    pub cond: Tensor2<T>,
    pub gamma: Tensor2<T>,
}

impl AdaptiveLayerNorm {
    /// Starts out as a plain layer norm: both maps have zero weights and
    /// the gamma map has bias 1.
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, cond_dim: usize, dim: usize) -> Self {
        let gamma = Linear::constant(ps, &format!("{name}.gamma"), cond_dim, dim, 1.0);
        let beta = Linear::constant(ps, &format!("{name}.beta"), cond_dim, dim, 0.0);
        Self { gamma, beta, dim }
    }

    pub fn forward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        x: &Tensor2<T>,
        cond: &Tensor2<T>,
    ) -> Result<(Tensor2<T>, AdaNormCache<T>)> {
        if x.cols() != self.dim {
            return Err(shape_err("adaptive layer norm", self.dim, x.cols()));
        }
        if cond.rows() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "condition must be a single row, got {}",
                cond.rows()
            )));
        }
        let gamma = self.gamma.forward(ps, cond)?;
        let beta = self.beta.forward(ps, cond)?;
        let norm = normalize_rows(x);
        let mut y = norm.xhat.clone();
        for r in 0..y.rows() {
            for ((v, g), b) in y.row_mut(r).iter_mut().zip(gamma.data()).zip(beta.data()) {
                *v = *v * *g + *b;
            }
        }
        Ok((
            y,
            AdaNormCache {
                norm,
                cond: cond.clone(),
                gamma,
            },
        ))
    }

    /// Returns `(dx, dcond)`.
    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        cache: &AdaNormCache<T>,
        dy: &Tensor2<T>,
        grads: &mut Grads<T>,
    ) -> (Tensor2<T>, Tensor2<T>) {
        let g = cache.gamma.data();
        let mut dgamma = Tensor2::zeros(1, self.dim);
        let mut dxhat = dy.clone();
        for r in 0..dy.rows() {
            let xh = cache.norm.xhat.row(r);
            let dg = dgamma.data_mut();
            for (j, v) in dxhat.row_mut(r).iter_mut().enumerate() {
                dg[j] += *v * xh[j];
                *v *= g[j];
            }
        }
        let dbeta = Tensor2::from_vec(1, self.dim, dy.sum_rows()).expect("row shape");
        let mut dcond = self.gamma.backward(ps, &cache.cond, &dgamma, grads);
        dcond.add_assign(&self.beta.backward(ps, &cache.cond, &dbeta, grads));
        (normalize_rows_backward(&cache.norm, &dxhat), dcond)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// `x * Phi(x)` with the tanh approximation of the normal CDF.
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::c(0.5);
    let inner = T::c(GELU_C) * (x + T::c(GELU_A) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::c(0.5);
    let inner = T::c(GELU_C) * (x + T::c(GELU_A) * x * x * x);
    let th = inner.tanh();
    let dinner = T::c(GELU_C) * (T::one() + T::c(3.0 * GELU_A) * x * x);
    half * (T::one() + th) + half * x * (T::one() - th * th) * dinner
}

/// Two linear layers around a GELU.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

#[derive(Debug, Clone)]
pub struct FfCache<T> {
    x: Tensor2<T>,
    pre: Tensor2<T>,
    act: Tensor2<T>,
}

impl FeedForward {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        out_std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let up = Linear::new(ps, &format!("{name}.up"), dim, hidden, true, rng);
        let down = Linear::with_std(ps, &format!("{name}.down"), hidden, dim, true, out_std, rng);
        Self { up, down }
    }

    pub fn forward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        x: &Tensor2<T>,
    ) -> Result<(Tensor2<T>, FfCache<T>)> {
        let pre = self.up.forward(ps, x)?;
        let mut act = pre.clone();
        act.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        let y = self.down.forward(ps, &act)?;
        Ok((
            y,
            FfCache {
                x: x.clone(),
                pre,
                act,
            },
        ))
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        cache: &FfCache<T>,
        dy: &Tensor2<T>,
        grads: &mut Grads<T>,
    ) -> Tensor2<T> {
        let mut dact = self.down.backward(ps, &cache.act, dy, grads);
        for (d, p) in dact.data_mut().iter_mut().zip(cache.pre.data()) {
            *d *= gelu_grad(*p);
        }
        self.up.backward(ps, &cache.x, &dact, grads)
    }
}
