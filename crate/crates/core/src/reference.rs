//! Brute-force reference attention and a single transformer layer with a KV
//! cache, used as ground truth by the tiled kernels and the executors.
//!
//! The layer follows the plain projection / attention / MLP recurrence with
//! residual connections and no normalization:
//!
//! ```text
//! X_O     = softmax(X_Q X_K^T / sqrt(D)) X_V W_O + X
//! X_next  = gelu(X_O W_1) W_2 + X_O
//! ```

use std::ops::Range;

use thiserror::Error;

use crate::tensor::{matmul, softmax_row_in_place, Element, Tensor, TensorError};

/// Additive value used for masked attention scores.
pub const MASK_FILL: f64 = -1e30;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttentionError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("kv cache: {0}")]
    Cache(String),
}

/// Shapes `[B, Sq, N, D]` and `[B, Skv, N, D]` extracted from Q and K/V.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct AttnDims {
    pub batch: usize,
    pub q_len: usize,
    pub kv_len: usize,
    pub heads: usize,
    pub head_dim: usize,
}

pub(crate) fn check_qkv<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<AttnDims, AttentionError> {
    let (b, sq, n, d) = q.dims4("attention")?;
    let (bk, skv, nk, dk) = k.dims4("attention")?;
    if k.shape() != v.shape() {
        return Err(AttentionError::Shape(format!(
            "K {:?} and V {:?} differ",
            k.shape(),
            v.shape()
        )));
    }
    if (b, n, d) != (bk, nk, dk) {
        return Err(AttentionError::Shape(format!(
            "Q {:?} incompatible with K/V {:?}",
            q.shape(),
            k.shape()
        )));
    }
    if skv < sq {
        return Err(AttentionError::Shape(format!(
            "query length {sq} exceeds key length {skv}"
        )));
    }
    Ok(AttnDims {
        batch: b,
        q_len: sq,
        kv_len: skv,
        heads: n,
        head_dim: d,
    })
}

/// Copies head `h` of batch `b` out of a `[B, S, N, D]` tensor as `[S, D]`.
pub(crate) fn head_slice<T: Element>(t: &Tensor<T>, b: usize, h: usize) -> Tensor<f64> {
    let s = t.shape();
    let (seq, n, d) = (s[1], s[2], s[3]);
    let data = t.data();
    Tensor::from_fn([seq, d], |i| {
        let (pos, c) = (i / d, i % d);
        data[((b * seq + pos) * n + h) * d + c].to_f64()
    })
}

/// K transposed and V for one (batch, head) pair.
struct HeadKv {
    k_t: Tensor<f64>,
    v: Tensor<f64>,
}

/// Attention of the given query rows (`[rows, D]`, at absolute key positions
/// `positions`) against one head's keys and values, materializing the score
/// matrix.
fn head_attention(
    q_rows: &Tensor<f64>,
    positions: &[usize],
    kv: &HeadKv,
    causal: bool,
) -> Result<Tensor<f64>, AttentionError> {
    let d = q_rows.shape()[1];
    let sqrt_d = (d as f64).sqrt();
    let mut scores = matmul(q_rows, &kv.k_t)?;
    let skv = scores.shape()[1];
    for (row, &pos) in scores.data_mut().chunks_mut(skv.max(1)).zip(positions) {
        for (j, s) in row.iter_mut().enumerate() {
            *s /= sqrt_d;
            if causal && j > pos {
                *s += MASK_FILL;
            }
        }
        softmax_row_in_place(row);
    }
    Ok(matmul(&scores, &kv.v)?)
}

/// Standard attention `softmax(Q K^T / sqrt(D) + mask) V` per batch and head.
///
/// Q is `[B, Sq, N, D]` and K/V are `[B, Skv, N, D]` with `Sq <= Skv`. With
/// `causal` set, query `i` sits at key position `Skv - Sq + i` and sees keys
/// up to and including that position.
pub fn std_attention<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    causal: bool,
) -> Result<Tensor<T>, AttentionError> {
    let dims = check_qkv(q, k, v)?;
    let rows = attention_rows(q, k, v, causal, 0..dims.batch * dims.q_len)?;
    Ok(rows.reshape(q.shape().to_vec())?)
}

/// Standard attention restricted to the flattened query rows `rows` of the
/// `B·Sq` row space. Returns `[rows.len(), N, D]`.
///
/// Each row is computed with exactly the same floating-point operations as in
/// [`std_attention`], so any split of the row space reproduces it bit for bit.
pub fn attention_rows<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    causal: bool,
    rows: Range<usize>,
) -> Result<Tensor<T>, AttentionError> {
    let dims = check_qkv(q, k, v)?;
    let AttnDims {
        batch,
        q_len,
        kv_len,
        heads,
        head_dim,
    } = dims;
    if rows.end > batch * q_len || rows.start > rows.end {
        return Err(AttentionError::Shape(format!(
            "row range {rows:?} outside 0..{}",
            batch * q_len
        )));
    }
    let n_rows = rows.len();
    let mut out = vec![T::default(); n_rows * heads * head_dim];
    let first_batch = rows.start / q_len.max(1);
    let last_batch = if n_rows == 0 {
        first_batch
    } else {
        (rows.end - 1) / q_len + 1
    };
    for b in first_batch..last_batch {
        let lo = rows.start.max(b * q_len);
        let hi = rows.end.min((b + 1) * q_len);
        let positions: Vec<usize> = (lo..hi).map(|r| kv_len - q_len + (r - b * q_len)).collect();
        for h in 0..heads {
            let kv = HeadKv {
                k_t: head_slice(k, b, h).transpose()?,
                v: head_slice(v, b, h),
            };
            let qd = q.data();
            let q_rows = Tensor::from_fn([hi - lo, head_dim], |i| {
                let (r, c) = (lo + i / head_dim, i % head_dim);
                qd[(r * heads + h) * head_dim + c].to_f64()
            });
            let o = head_attention(&q_rows, &positions, &kv, causal)?;
            for (i, orow) in o.data().chunks(head_dim).enumerate() {
                let base = ((lo - rows.start + i) * heads + h) * head_dim;
                for (dst, &val) in out[base..base + head_dim].iter_mut().zip(orow) {
                    *dst = T::from_f64(val);
                }
            }
        }
    }
    Ok(Tensor::from_vec([n_rows, heads, head_dim], out)?)
}

/// GELU, tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

/// Projection and MLP weights of one transformer layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub w_1: Tensor,
    pub w_2: Tensor,
}

impl LayerWeights {
    pub fn new(
        w_q: Tensor,
        w_k: Tensor,
        w_v: Tensor,
        w_o: Tensor,
        w_1: Tensor,
        w_2: Tensor,
    ) -> Result<Self, AttentionError> {
        let h1 = w_q.shape().first().copied().unwrap_or(0);
        let h2 = w_1.shape().get(1).copied().unwrap_or(0);
        for (name, t, want) in [
            ("W_Q", &w_q, [h1, h1]),
            ("W_K", &w_k, [h1, h1]),
            ("W_V", &w_v, [h1, h1]),
            ("W_O", &w_o, [h1, h1]),
            ("W_1", &w_1, [h1, h2]),
            ("W_2", &w_2, [h2, h1]),
        ] {
            if t.shape() != want {
                return Err(AttentionError::Shape(format!(
                    "{name} has shape {:?}, expected {want:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self {
            w_q,
            w_k,
            w_v,
            w_o,
            w_1,
            w_2,
        })
    }

    pub fn zeros(h1: usize, h2: usize) -> Self {
        Self {
            w_q: Tensor::zeros([h1, h1]),
            w_k: Tensor::zeros([h1, h1]),
            w_v: Tensor::zeros([h1, h1]),
            w_o: Tensor::zeros([h1, h1]),
            w_1: Tensor::zeros([h1, h2]),
            w_2: Tensor::zeros([h2, h1]),
        }
    }

    /// Seeded random weights scaled by `1/sqrt(fan_in)`.
    pub fn random(h1: usize, h2: usize, seed: u64) -> Self {
        let s1 = 1.0 / (h1 as f64).sqrt();
        let s2 = 1.0 / (h2 as f64).sqrt();
        let w = |shape: [usize; 2], off: u64, s: f64| {
            Tensor::random(shape, seed.wrapping_add(off)).map(|x| x * s)
        };
        Self {
            w_q: w([h1, h1], 0, s1),
            w_k: w([h1, h1], 1, s1),
            w_v: w([h1, h1], 2, s1),
            w_o: w([h1, h1], 3, s1),
            w_1: w([h1, h2], 4, s1),
            w_2: w([h2, h1], 5, s2),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn ffn(&self) -> usize {
        self.w_1.shape()[1]
    }
}

/// Keys and values of one layer, `[B, S_cached, H1]` each.
///
/// Single writer: a cache must not be shared across concurrent decode steps.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    k: Tensor,
    v: Tensor,
    capacity: Option<usize>,
}

impl KvCache {
    pub fn new(batch: usize, hidden: usize) -> Self {
        Self {
            k: Tensor::zeros([batch, 0, hidden]),
            v: Tensor::zeros([batch, 0, hidden]),
            capacity: None,
        }
    }

    /// A cache that refuses to grow past `capacity` positions (`S + O`).
    pub fn with_capacity(batch: usize, hidden: usize, capacity: usize) -> Self {
        Self {
            capacity: Some(capacity),
            ..Self::new(batch, hidden)
        }
    }

    /// Wraps existing `[B, S, H1]` keys and values.
    pub fn from_tensors(k: Tensor, v: Tensor) -> Result<Self, AttentionError> {
        if k.rank() != 3 || k.shape() != v.shape() {
            return Err(AttentionError::Cache(format!(
                "K {:?} and V {:?} must share a rank-3 shape",
                k.shape(),
                v.shape()
            )));
        }
        Ok(Self {
            k,
            v,
            capacity: None,
        })
    }

    pub fn batch(&self) -> usize {
        self.k.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.k.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hidden(&self) -> usize {
        self.k.shape()[2]
    }

    pub fn k(&self) -> &Tensor {
        &self.k
    }

    pub fn v(&self) -> &Tensor {
        &self.v
    }

    /// Appends `[B, t, H1]` keys and values along the sequence axis.
    pub fn append(&mut self, k_new: &Tensor, v_new: &Tensor) -> Result<(), AttentionError> {
        let (b, h) = (self.batch(), self.hidden());
        if k_new.rank() != 3
            || k_new.shape() != v_new.shape()
            || k_new.shape()[0] != b
            || k_new.shape()[2] != h
        {
            return Err(AttentionError::Cache(format!(
                "cannot append {:?}/{:?} to a [{b}, _, {h}] cache",
                k_new.shape(),
                v_new.shape()
            )));
        }
        let t = k_new.shape()[1];
        let old = self.len();
        if let Some(cap) = self.capacity {
            if old + t > cap {
                return Err(AttentionError::Cache(format!(
                    "appending {t} positions to {old} exceeds capacity {cap}"
                )));
            }
        }
        let concat = |cur: &Tensor, new: &Tensor| {
            let mut data = Vec::with_capacity(b * (old + t) * h);
            for bi in 0..b {
                data.extend_from_slice(&cur.data()[bi * old * h..(bi + 1) * old * h]);
                data.extend_from_slice(&new.data()[bi * t * h..(bi + 1) * t * h]);
            }
            Tensor::from_vec([b, old + t, h], data)
        };
        self.k = concat(&self.k, k_new)?;
        self.v = concat(&self.v, v_new)?;
        Ok(())
    }
}

fn check_hidden(
    x: &Tensor,
    w: &LayerWeights,
    heads: usize,
) -> Result<(usize, usize), AttentionError> {
    if x.rank() != 3 {
        return Err(AttentionError::Shape(format!(
            "layer input must be [B, S, H1], got {:?}",
            x.shape()
        )));
    }
    let h1 = x.shape()[2];
    if h1 != w.hidden() {
        return Err(AttentionError::Shape(format!(
            "input hidden {h1} != weight hidden {}",
            w.hidden()
        )));
    }
    if heads == 0 || h1 % heads != 0 {
        return Err(AttentionError::Shape(format!(
            "hidden {h1} is not divisible into {heads} heads"
        )));
    }
    Ok((h1, h1 / heads))
}

/// Attention block + MLP block shared by prefill and decode.
fn layer_tail(x2: &Tensor, attn: Tensor, w: &LayerWeights) -> Result<Tensor, AttentionError> {
    let x_o = matmul(&attn, &w.w_o)?.add(x2)?;
    let hidden = matmul(&x_o, &w.w_1)?.map(gelu);
    Ok(matmul(&hidden, &w.w_2)?.add(&x_o)?)
}

/// Prefill of one layer over `[B, S, H1]` input with causal attention. The
/// projected keys and values are stored into the (empty) cache.
pub fn prefill_layer(
    x: &Tensor,
    w: &LayerWeights,
    cache: &mut KvCache,
    heads: usize,
) -> Result<Tensor, AttentionError> {
    let (h1, d) = check_hidden(x, w, heads)?;
    let (b, s) = (x.shape()[0], x.shape()[1]);
    if !cache.is_empty() || cache.batch() != b || cache.hidden() != h1 {
        return Err(AttentionError::Cache(format!(
            "prefill needs an empty [{b}, 0, {h1}] cache, got [{}, {}, {}]",
            cache.batch(),
            cache.len(),
            cache.hidden()
        )));
    }
    let x2 = x.clone().reshape([b * s, h1])?;
    let x_k = matmul(&x2, &w.w_k)?;
    let x_v = matmul(&x2, &w.w_v)?;
    let x_q = matmul(&x2, &w.w_q)?;
    let attn = std_attention(
        &x_q.reshape([b, s, heads, d])?,
        &x_k.clone().reshape([b, s, heads, d])?,
        &x_v.clone().reshape([b, s, heads, d])?,
        true,
    )?
    .reshape([b * s, h1])?;
    cache.append(&x_k.reshape([b, s, h1])?, &x_v.reshape([b, s, h1])?)?;
    Ok(layer_tail(&x2, attn, w)?.reshape([b, s, h1])?)
}

/// One decode step: appends the token's key/value to the cache and attends
/// the single query against the whole cache.
pub fn decode_step(
    t: &Tensor,
    w: &LayerWeights,
    cache: &mut KvCache,
    heads: usize,
) -> Result<Tensor, AttentionError> {
    let (h1, d) = check_hidden(t, w, heads)?;
    let b = t.shape()[0];
    if t.shape()[1] != 1 {
        return Err(AttentionError::Shape(format!(
            "decode input must be [B, 1, H1], got {:?}",
            t.shape()
        )));
    }
    if cache.is_empty() {
        return Err(AttentionError::Cache(
            "decode needs a non-empty cache".into(),
        ));
    }
    if cache.batch() != b || cache.hidden() != h1 {
        return Err(AttentionError::Cache(format!(
            "cache is [{}, _, {}] but token is {:?}",
            cache.batch(),
            cache.hidden(),
            t.shape()
        )));
    }
    let t2 = t.clone().reshape([b, h1])?;
    let t_k = matmul(&t2, &w.w_k)?;
    let t_v = matmul(&t2, &w.w_v)?;
    cache.append(&t_k.reshape([b, 1, h1])?, &t_v.reshape([b, 1, h1])?)?;
    let t_q = matmul(&t2, &w.w_q)?;
    let len = cache.len();
    let attn = std_attention(
        &t_q.reshape([b, 1, heads, d])?,
        &cache.k().clone().reshape([b, len, heads, d])?,
        &cache.v().clone().reshape([b, len, heads, d])?,
        true,
    )?
    .reshape([b, h1])?;
    Ok(layer_tail(&t2, attn, w)?.reshape([b, 1, h1])?)
}
