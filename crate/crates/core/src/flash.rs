//! Blocked attention with the online-softmax recurrence.
//!
//! KV columns are cut into level-2 blocks of `b_kv2` columns on a global
//! grid; level-1 blocks of `b_kv1` columns only group consecutive level-2
//! blocks, so for a fixed `b_kv2` the result does not depend on `b_kv1`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::{block_bounds, build_mmask, classify_ranges, BlockMaskKind, MMask, MaskError};
use crate::reference::{check_qkv, AttentionError, MASK_FILL};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlashError {
    #[error("invalid tile config: {0}")]
    Config(String),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileConfig {
    pub b_q: usize,
    pub b_kv1: usize,
    pub b_kv2: usize,
    pub causal: bool,
    /// Side of the mask generator is `2 * mask_size`.
    pub mask_size: usize,
}

impl TileConfig {
    pub fn new(b_q: usize, b_kv1: usize, b_kv2: usize, causal: bool, mask_size: usize) -> Self {
        Self {
            b_q,
            b_kv1,
            b_kv2,
            causal,
            mask_size,
        }
    }

    /// Single-level tiling: `b_kv1 == b_kv2 == b_kv`.
    pub fn unified(b_q: usize, b_kv: usize, causal: bool) -> Self {
        Self::new(b_q, b_kv, b_kv, causal, b_q.max(b_kv))
    }

    pub fn validate(&self) -> Result<(), FlashError> {
        let Self {
            b_q,
            b_kv1,
            b_kv2,
            mask_size,
            ..
        } = *self;
        if b_q == 0 || b_kv1 == 0 || b_kv2 == 0 || mask_size == 0 {
            return Err(FlashError::Config(format!(
                "all block sizes must be positive: {self:?}"
            )));
        }
        if b_kv1 % b_kv2 != 0 {
            return Err(FlashError::Config(format!(
                "b_kv2={b_kv2} does not divide b_kv1={b_kv1}"
            )));
        }
        if b_q > mask_size || b_kv2 > mask_size {
            return Err(FlashError::Config(format!(
                "b_q={b_q} and b_kv2={b_kv2} must not exceed M={mask_size}"
            )));
        }
        Ok(())
    }
}

/// Running row statistics for one query block.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxState {
    /// Running row max.
    pub m: Vec<f64>,
    /// Running row sum of `exp(s - m)`.
    pub l: Vec<f64>,
    /// Unnormalized output, `rows × head_dim`.
    pub acc: Vec<f64>,
    head_dim: usize,
}

impl SoftmaxState {
    pub fn new(rows: usize, head_dim: usize) -> Self {
        Self {
            m: vec![f64::NEG_INFINITY; rows],
            l: vec![0.0; rows],
            acc: vec![0.0; rows * head_dim],
            head_dim,
        }
    }

    pub fn rows(&self) -> usize {
        self.m.len()
    }

    /// Folds one block of scaled scores (`rows × cols`, masks already
    /// applied) and its `cols × head_dim` values into the state.
    pub fn update(&mut self, scores: &[f64], v_block: &[f64]) {
        let rows = self.rows();
        let d = self.head_dim;
        if rows == 0 {
            return;
        }
        let cols = scores.len() / rows;
        debug_assert_eq!(scores.len(), rows * cols);
        debug_assert_eq!(v_block.len(), cols * d);
        let mut p = vec![0.0; cols];
        for r in 0..rows {
            let srow = &scores[r * cols..(r + 1) * cols];
            let row_max = srow.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let m_new = self.m[r].max(row_max);
            // exp(-inf - m_new) = 0 covers the first block.
            let scale = if self.m[r] == f64::NEG_INFINITY {
                0.0
            } else {
                (self.m[r] - m_new).exp()
            };
            let mut sum = 0.0;
            for (pj, &s) in p.iter_mut().zip(srow) {
                *pj = (s - m_new).exp();
                sum += *pj;
            }
            self.l[r] = scale * self.l[r] + sum;
            self.m[r] = m_new;
            let acc = &mut self.acc[r * d..(r + 1) * d];
            for (c, a) in acc.iter_mut().enumerate() {
                let mut pv = 0.0;
                for (j, &pj) in p.iter().enumerate() {
                    pv += pj * v_block[j * d + c];
                }
                *a = scale * *a + pv;
            }
        }
    }

    /// `acc / l`; rows that never saw an unmasked score come out as zeros.
    /// A NaN sum propagates instead of being mistaken for such a row.
    pub fn finalize(&self) -> Vec<f64> {
        let d = self.head_dim;
        let mut out = self.acc.clone();
        for (r, row) in out.chunks_mut(d.max(1)).enumerate().take(self.rows()) {
            let l = self.l[r];
            for x in row {
                *x = if l == 0.0 { 0.0 } else { *x / l };
            }
        }
        out
    }
}

/// Adds `0` where the mask is set and [`MASK_FILL`] where it is clear.
pub fn apply_bmask(scores: &mut [f64], mask: &[Vec<bool>]) {
    let cols = mask.first().map_or(0, Vec::len);
    for (srow, mrow) in scores.chunks_mut(cols.max(1)).zip(mask) {
        for (s, &keep) in srow.iter_mut().zip(mrow) {
            *s += if keep { 0.0 } else { MASK_FILL };
        }
    }
}

/// Scaled scores `Q_blk K_blk^T / sqrt(D)` for row-major `rows × d` and
/// `cols × d` blocks.
pub fn block_scores(q_blk: &[f64], k_blk: &[f64], d: usize) -> Vec<f64> {
    let sqrt_d = (d as f64).sqrt();
    let rows = q_blk.len() / d.max(1);
    let cols = k_blk.len() / d.max(1);
    let mut s = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let qr = &q_blk[r * d..(r + 1) * d];
        for c in 0..cols {
            let kc = &k_blk[c * d..(c + 1) * d];
            let mut acc = 0.0;
            for (x, y) in qr.iter().zip(kc) {
                acc += x * y;
            }
            s.push(acc / sqrt_d);
        }
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    /// Work-stealing over (batch, head, q-block) tasks.
    #[default]
    Parallel,
    /// One task after another on the calling thread.
    Sequential,
}

/// Level-2 block counts by mask kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct SkipStats {
    pub empty: usize,
    pub full: usize,
    pub partial: usize,
}

impl SkipStats {
    pub fn total(&self) -> usize {
        self.empty + self.full + self.partial
    }

    pub fn empty_fraction(&self) -> f64 {
        self.empty as f64 / self.total().max(1) as f64
    }
}

/// Kind counts over the `ceil(S/b_q) × ceil(S/b_kv2)` level-2 grid of one
/// (batch, head) score matrix.
pub fn skip_stats(s: usize, cfg: &TileConfig) -> SkipStats {
    let mut st = SkipStats::default();
    if cfg.b_q == 0 || cfg.b_kv2 == 0 {
        return st;
    }
    for i in 0..s.div_ceil(cfg.b_q) {
        for j in 0..s.div_ceil(cfg.b_kv2) {
            let kind = if cfg.causal {
                classify_ranges(block_bounds(i, j, cfg.b_q, cfg.b_kv2, s))
            } else {
                BlockMaskKind::Full
            };
            match kind {
                BlockMaskKind::Empty => st.empty += 1,
                BlockMaskKind::Full => st.full += 1,
                BlockMaskKind::Partial { .. } => st.partial += 1,
            }
        }
    }
    st
}

/// Per-head contiguous copies of Q, K and V as `f64`, `[S, D]` each.
struct HeadData {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
}

fn gather_head<T: Element>(t: &Tensor<T>, b: usize, h: usize) -> Vec<f64> {
    let s = t.shape();
    let (seq, n, d) = (s[1], s[2], s[3]);
    let data = t.data();
    let mut out = Vec::with_capacity(seq * d);
    for pos in 0..seq {
        let base = ((b * seq + pos) * n + h) * d;
        out.extend(data[base..base + d].iter().map(|x| x.to_f64()));
    }
    out
}

/// Output rows of query block `qi` of one head.
fn q_block_output(
    head: &HeadData,
    qi: usize,
    s: usize,
    d: usize,
    cfg: &TileConfig,
    mmask: &MMask,
) -> Result<Vec<f64>, FlashError> {
    let r0 = qi * cfg.b_q;
    let r1 = (r0 + cfg.b_q).min(s);
    let q_blk = &head.q[r0 * d..r1 * d];
    let mut state = SoftmaxState::new(r1 - r0, d);
    let per_l1 = cfg.b_kv1 / cfg.b_kv2;
    for j1 in 0..s.div_ceil(cfg.b_kv1) {
        for j in j1 * per_l1..((j1 + 1) * per_l1).min(s.div_ceil(cfg.b_kv2)) {
            let kind = if cfg.causal {
                mmask.classify_block(qi, j, cfg.b_q, cfg.b_kv2, s)?
            } else {
                BlockMaskKind::Full
            };
            if kind == BlockMaskKind::Empty {
                continue;
            }
            let c0 = j * cfg.b_kv2;
            let c1 = (c0 + cfg.b_kv2).min(s);
            let mut scores = block_scores(q_blk, &head.k[c0 * d..c1 * d], d);
            if let BlockMaskKind::Partial { d: off } = kind {
                apply_bmask(&mut scores, &mmask.extract_bmask(off, r1 - r0, c1 - c0)?);
            }
            state.update(&scores, &head.v[c0 * d..c1 * d]);
        }
    }
    Ok(state.finalize())
}

/// Blocked attention over `[B, S, N, D]` tensors; see the module docs for the
/// block order.
pub fn flash_attention<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    cfg: &TileConfig,
) -> Result<Tensor<T>, FlashError> {
    flash_attention_with(q, k, v, cfg, Execution::Parallel)
}

pub fn flash_attention_with<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    cfg: &TileConfig,
    exec: Execution,
) -> Result<Tensor<T>, FlashError> {
    cfg.validate()?;
    let dims = check_qkv(q, k, v)?;
    if dims.q_len != dims.kv_len {
        return Err(FlashError::Attention(AttentionError::Shape(format!(
            "blocked attention needs equal query and key lengths, got {} and {}",
            dims.q_len, dims.kv_len
        ))));
    }
    let (b, s, n, d) = (dims.batch, dims.q_len, dims.heads, dims.head_dim);
    let mmask = build_mmask(cfg.mask_size)?;
    let n_qb = s.div_ceil(cfg.b_q);

    let heads: Vec<(usize, usize)> = (0..b).flat_map(|bi| (0..n).map(move |h| (bi, h))).collect();
    let load = |&(bi, h): &(usize, usize)| HeadData {
        q: gather_head(q, bi, h),
        k: gather_head(k, bi, h),
        v: gather_head(v, bi, h),
    };
    let head_data: Vec<HeadData> = match exec {
        Execution::Parallel => heads.par_iter().map(load).collect(),
        Execution::Sequential => heads.iter().map(load).collect(),
    };
    let tasks: Vec<(usize, usize)> = (0..heads.len())
        .flat_map(|hi| (0..n_qb).map(move |qi| (hi, qi)))
        .collect();
    let run = |&(hi, qi): &(usize, usize)| q_block_output(&head_data[hi], qi, s, d, cfg, &mmask);
    let tiles: Vec<Vec<f64>> = match exec {
        Execution::Parallel => tasks.par_iter().map(run).collect::<Result<_, _>>()?,
        Execution::Sequential => tasks.iter().map(run).collect::<Result<_, _>>()?,
    };

    let mut out = vec![T::default(); b * s * n * d];
    for (&(hi, qi), tile) in tasks.iter().zip(&tiles) {
        let (bi, h) = heads[hi];
        for (r, row) in tile.chunks(d.max(1)).enumerate() {
            let pos = qi * cfg.b_q + r;
            let base = ((bi * s + pos) * n + h) * d;
            for (dst, &x) in out[base..base + d].iter_mut().zip(row) {
                *dst = T::from_f64(x);
            }
        }
    }
    Ok(Tensor::from_vec(q.shape().to_vec(), out).map_err(AttentionError::from)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::std_attention;

    fn qkv(shape: [usize; 4], seed: u64) -> (Tensor, Tensor, Tensor) {
        (
            Tensor::random(shape, seed),
            Tensor::random(shape, seed + 1),
            Tensor::random(shape, seed + 2),
        )
    }

    #[test]
    fn config_validation() {
        assert!(TileConfig::new(16, 32, 8, true, 16).validate().is_ok());
        assert!(TileConfig::new(16, 30, 8, true, 16).validate().is_err());
        assert!(TileConfig::new(32, 32, 8, true, 16).validate().is_err());
        assert!(TileConfig::new(0, 8, 8, true, 16).validate().is_err());
    }

    #[test]
    fn one_block_matches_reference() {
        let (q, k, v) = qkv([1, 12, 2, 8], 1);
        for causal in [false, true] {
            let o = flash_attention(&q, &k, &v, &TileConfig::unified(12, 12, causal)).unwrap();
            let e = std_attention(&q, &k, &v, causal).unwrap();
            assert!(o.max_abs_diff(&e).unwrap() <= 1e-14);
        }
    }

    #[test]
    fn two_level_causal_matches_reference() {
        let (q, _, _) = qkv([1, 64, 2, 16], 5);
        let cfg = TileConfig::new(16, 32, 8, true, 16);
        let o = flash_attention(&q, &q, &q, &cfg).unwrap();
        let e = std_attention(&q, &q, &q, true).unwrap();
        assert!(o.max_abs_diff(&e).unwrap() <= 1e-12);
    }

    #[test]
    fn ragged_tail_blocks() {
        let (q, k, v) = qkv([2, 37, 3, 4], 9);
        let cfg = TileConfig::new(8, 12, 4, true, 8);
        let o = flash_attention(&q, &k, &v, &cfg).unwrap();
        let e = std_attention(&q, &k, &v, true).unwrap();
        assert!(o.max_abs_diff(&e).unwrap() <= 1e-12);
    }

    #[test]
    fn sequential_and_parallel_agree_bitwise() {
        let (q, k, v) = qkv([2, 40, 2, 8], 13);
        let cfg = TileConfig::new(8, 16, 8, true, 8);
        let a = flash_attention_with(&q, &k, &v, &cfg, Execution::Parallel).unwrap();
        let b = flash_attention_with(&q, &k, &v, &cfg, Execution::Sequential).unwrap();
        assert!(a.bitwise_eq(&b));
    }

    #[test]
    fn full_path_equals_all_ones_partial_path() {
        let q = Tensor::random([5, 8], 20).into_data();
        let k = Tensor::random([7, 8], 21).into_data();
        let v = Tensor::random([7, 8], 22).into_data();
        let mut full = SoftmaxState::new(5, 8);
        let mut partial = SoftmaxState::new(5, 8);
        for _ in 0..2 {
            full.update(&block_scores(&q, &k, 8), &v);
            let mut s = block_scores(&q, &k, 8);
            apply_bmask(&mut s, &vec![vec![true; 7]; 5]);
            partial.update(&s, &v);
        }
        let (a, b) = (full.finalize(), partial.finalize());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn skip_stat_examples() {
        assert_eq!(
            skip_stats(8, &TileConfig::unified(8, 8, true)),
            SkipStats {
                empty: 0,
                full: 0,
                partial: 1
            }
        );
        let st = skip_stats(64, &TileConfig::unified(8, 8, true));
        assert_eq!((st.empty, st.total()), (28, 64));
        let st = skip_stats(64, &TileConfig::unified(8, 8, false));
        assert_eq!((st.full, st.total()), (64, 64));
    }

    #[test]
    fn narrow_mode_stays_close() {
        let (q, k, v) = qkv([1, 32, 2, 16], 30);
        let (qn, kn, vn) = (q.cast::<f32>(), k.cast::<f32>(), v.cast::<f32>());
        let o = flash_attention(&qn, &kn, &vn, &TileConfig::new(8, 16, 8, true, 8)).unwrap();
        let e = std_attention(&qn, &kn, &vn, true).unwrap();
        assert!(o.max_abs_diff(&e).unwrap() <= 1e-5);
    }
}
