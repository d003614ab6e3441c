//! Causal tiling mask: a `(2M)×(2M)` lower-triangular generator from which
//! the mask of any score block with extents `≤ M` is cut by shifting.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MaskError {
    #[error("mask size M must be positive")]
    ZeroSize,
    #[error("block extents {b_r}x{b_c} must be positive and at most M={m}")]
    Extent { b_r: usize, b_c: usize, m: usize },
    #[error("block ({i}, {j}) with extents {b_r}x{b_c} starts outside sequence length {s}")]
    OutOfRange {
        i: usize,
        j: usize,
        b_r: usize,
        b_c: usize,
        s: usize,
    },
    #[error("offset {d} outside the partial range for a {b_r}x{b_c} block")]
    Offset { d: i64, b_r: usize, b_c: usize },
}

/// How a score block relates to the causal diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BlockMaskKind {
    /// Every entry is masked; the block can be skipped.
    Empty,
    /// Every entry is visible; the block needs no mask.
    Full,
    /// Mixed block; entry `(r, c)` is visible iff `r - c >= d`.
    Partial { d: i64 },
}

/// Lower-triangular generator: `bits[x][y] = (x >= y)`, side `2M`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MMask {
    m: usize,
    bits: Vec<bool>,
}

pub fn build_mmask(m: usize) -> Result<MMask, MaskError> {
    if m == 0 {
        return Err(MaskError::ZeroSize);
    }
    let side = 2 * m;
    let bits = (0..side * side).map(|i| i / side >= i % side).collect();
    Ok(MMask { m, bits })
}

/// Row and column ranges of block `(i, j)` clamped to `[0, s)`.
pub fn block_bounds(
    i: usize,
    j: usize,
    b_r: usize,
    b_c: usize,
    s: usize,
) -> ((usize, usize), (usize, usize)) {
    let r0 = i * b_r;
    let c0 = j * b_c;
    ((r0, (r0 + b_r).min(s)), (c0, (c0 + b_c).min(s)))
}

impl MMask {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn side(&self) -> usize {
        2 * self.m
    }

    pub fn bit(&self, x: usize, y: usize) -> Option<bool> {
        let side = self.side();
        (x < side && y < side).then(|| self.bits[x * side + y])
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    fn check_extents(&self, b_r: usize, b_c: usize) -> Result<(), MaskError> {
        if b_r == 0 || b_c == 0 || b_r > self.m || b_c > self.m {
            return Err(MaskError::Extent {
                b_r,
                b_c,
                m: self.m,
            });
        }
        Ok(())
    }

    /// Classifies block `(i, j)` of an `s×s` causal score matrix tiled into
    /// `b_r×b_c` blocks. Edge blocks are classified on their clamped ranges.
    pub fn classify_block(
        &self,
        i: usize,
        j: usize,
        b_r: usize,
        b_c: usize,
        s: usize,
    ) -> Result<BlockMaskKind, MaskError> {
        self.check_extents(b_r, b_c)?;
        if i * b_r >= s || j * b_c >= s {
            return Err(MaskError::OutOfRange { i, j, b_r, b_c, s });
        }
        Ok(classify_ranges(block_bounds(i, j, b_r, b_c, s)))
    }

    /// Cuts the `b_r×b_c` block mask for offset `d` out of the generator, at
    /// origin `(max(0, -d), max(0, d))`.
    ///
    /// Accepted offsets are `-(max(b_r, b_c) - 1) ..= max(b_r, b_c) - 1`,
    /// which covers every `Partial` offset of an in-range block and keeps
    /// every read inside the generator.
    pub fn extract_bmask(
        &self,
        d: i64,
        b_r: usize,
        b_c: usize,
    ) -> Result<Vec<Vec<bool>>, MaskError> {
        self.check_extents(b_r, b_c)?;
        let reach = b_r.max(b_c) as i64 - 1;
        if d < -reach || d > reach {
            return Err(MaskError::Offset { d, b_r, b_c });
        }
        let r0 = (-d).max(0) as usize;
        let c0 = d.max(0) as usize;
        (0..b_r)
            .map(|r| {
                (0..b_c)
                    .map(|c| {
                        self.bit(r0 + r, c0 + c)
                            .ok_or(MaskError::Offset { d, b_r, b_c })
                    })
                    .collect()
            })
            .collect()
    }
}

/// Classification of a block given its global `[row_start, row_end)` and
/// `[col_start, col_end)` ranges.
pub(crate) fn classify_ranges(
    ((r0, r1), (c0, c1)): ((usize, usize), (usize, usize)),
) -> BlockMaskKind {
    if c1 - 1 <= r0 {
        BlockMaskKind::Full
    } else if c0 > r1 - 1 {
        BlockMaskKind::Empty
    } else {
        BlockMaskKind::Partial {
            d: c0 as i64 - r0 as i64,
        }
    }
}

/// Byte counts of a full `S×S` mask and of the `(2M)×(2M)` generator.
///
/// Computed in `u128` so that large sequence lengths cannot overflow.
pub fn mask_memory_bytes(s: u64, m: u64, bytes_per_element: u64) -> (u128, u128) {
    let bpe = bytes_per_element as u128;
    let s = s as u128;
    let side = 2 * m as u128;
    (s * s * bpe, side * side * bpe)
}
