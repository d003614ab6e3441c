//! Dense row-major tensors and read-only block views.
//!
//! Every numeric module in the crate passes data around as a [`Tensor`].
//! Storage precision is a type parameter: `Tensor<f64>` is the wide mode and
//! `Tensor<f32>` the narrow mode. Reductions always accumulate in `f64` and
//! sum left to right, so results are reproducible bit for bit.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} elements but {actual} were supplied")]
    Length {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("block view at offsets {offsets:?} with extents {extents:?} exceeds shape {shape:?}")]
    OutOfRange {
        shape: Vec<usize>,
        offsets: Vec<usize>,
        extents: Vec<usize>,
    },
    #[error("NaN encountered in {op} at flat index {index}")]
    NaN { op: &'static str, index: usize },
}

/// Storage precision tag of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// 64-bit storage.
    Wide,
    /// 32-bit storage.
    Narrow,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Precision::Wide => f.write_str("wide"),
            Precision::Narrow => f.write_str("narrow"),
        }
    }
}

/// Scalar types a [`Tensor`] can store.
pub trait Element: Copy + Default + PartialEq + fmt::Debug + Send + Sync + 'static {
    const PRECISION: Precision;
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Element for f64 {
    const PRECISION: Precision = Precision::Wide;
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
}

impl Element for f32 {
    const PRECISION: Precision = Precision::Narrow;
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

/// A dense row-major array with shape metadata.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("precision", &T::PRECISION)
            .field("len", &self.data.len())
            .finish()
    }
}

impl<T: Element> Tensor<T> {
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self, TensorError> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::Length {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::default(); n],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// `n × n` identity matrix.
    pub fn identity(n: usize) -> Self {
        Self::from_fn([n, n], |i| {
            T::from_f64(if i / n == i % n { 1.0 } else { 0.0 })
        })
    }

    /// Uniform values in `[-1, 1)` drawn from a seeded ChaCha8 stream.
    pub fn random(shape: impl Into<Vec<usize>>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::random_with(shape, &mut rng)
    }

    pub fn random_with<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::from_f64(rng.random_range(-1.0..1.0)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn precision(&self) -> Precision {
        T::PRECISION
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Row-major strides of the shape.
    pub fn strides(&self) -> Vec<usize> {
        row_major_strides(&self.shape)
    }

    fn flat_index(&self, coord: &[usize]) -> Option<usize> {
        if coord.len() != self.shape.len() {
            return None;
        }
        let mut idx = 0;
        for (&c, &extent) in coord.iter().zip(&self.shape) {
            if c >= extent {
                return None;
            }
            idx = idx * extent + c;
        }
        Some(idx)
    }

    pub fn get(&self, coord: &[usize]) -> Option<T> {
        self.flat_index(coord).map(|i| self.data[i])
    }

    /// Same data under a new shape with an equal element count.
    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self, TensorError> {
        Self::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::from_f64(x.to_f64())).collect(),
        }
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Self, TensorError> {
        let (m, n) = self.dims2("transpose")?;
        Ok(Self::from_fn([n, m], |i| self.data[(i % m) * n + i / m]))
    }

    /// Elementwise sum of two tensors of identical shape.
    pub fn add(&self, other: &Self) -> Result<Self, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::Dimension {
                op: "add",
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| T::from_f64(a.to_f64() + b.to_f64()))
                .collect(),
        })
    }

    /// Largest absolute elementwise difference, computed in wide precision.
    pub fn max_abs_diff<U: Element>(&self, other: &Tensor<U>) -> Result<f64, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::Dimension {
                op: "max_abs_diff",
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max))
    }

    /// Bitwise equality of shape and contents.
    pub fn bitwise_eq(&self, other: &Self) -> bool
    where
        T: Bits,
    {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.bits() == b.bits())
    }

    /// A read-only window onto the sub-block starting at `offsets` with the
    /// given `extents`.
    pub fn block_view(
        &self,
        offsets: &[usize],
        extents: &[usize],
    ) -> Result<BlockView<'_, T>, TensorError> {
        let in_range = offsets.len() == self.rank()
            && extents.len() == self.rank()
            && offsets
                .iter()
                .zip(extents)
                .zip(&self.shape)
                .all(|((&o, &e), &s)| o.checked_add(e).is_some_and(|end| end <= s));
        if !in_range {
            return Err(TensorError::OutOfRange {
                shape: self.shape.clone(),
                offsets: offsets.to_vec(),
                extents: extents.to_vec(),
            });
        }
        Ok(BlockView {
            tensor: self,
            offsets: offsets.to_vec(),
            extents: extents.to_vec(),
        })
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(TensorError::Dimension {
                op,
                detail: format!("expected a rank-2 tensor, got shape {:?}", self.shape),
            }),
        }
    }

    pub(crate) fn dims4(
        &self,
        op: &'static str,
    ) -> Result<(usize, usize, usize, usize), TensorError> {
        match self.shape[..] {
            [a, b, c, d] => Ok((a, b, c, d)),
            _ => Err(TensorError::Dimension {
                op,
                detail: format!("expected a rank-4 tensor, got shape {:?}", self.shape),
            }),
        }
    }
}

/// Raw bit patterns, for bitwise comparisons of float data.
pub trait Bits {
    fn bits(&self) -> u64;
}

impl Bits for f64 {
    fn bits(&self) -> u64 {
        self.to_bits()
    }
}

impl Bits for f32 {
    fn bits(&self) -> u64 {
        self.to_bits() as u64
    }
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Strided read-only view of a rectangular sub-block of a [`Tensor`].
#[derive(Debug, Clone)]
pub struct BlockView<'a, T: Element> {
    tensor: &'a Tensor<T>,
    offsets: Vec<usize>,
    extents: Vec<usize>,
}

impl<T: Element> BlockView<'_, T> {
    pub fn extents(&self) -> &[usize] {
        &self.extents
    }

    /// Reads the element at a view-local coordinate; `None` outside the block.
    pub fn get(&self, coord: &[usize]) -> Option<T> {
        if coord.len() != self.extents.len() || coord.iter().zip(&self.extents).any(|(c, e)| c >= e)
        {
            return None;
        }
        let global: Vec<usize> = coord
            .iter()
            .zip(&self.offsets)
            .map(|(c, o)| c + o)
            .collect();
        self.tensor.get(&global)
    }

    /// Copies the block into a fresh contiguous tensor.
    pub fn to_tensor(&self) -> Tensor<T> {
        let strides = row_major_strides(&self.extents);
        Tensor::from_fn(self.extents.clone(), |flat| {
            let coord: Vec<usize> = strides
                .iter()
                .zip(&self.extents)
                .map(|(s, e)| (flat / s) % e)
                .collect();
            self.get(&coord).expect("coordinate inside block")
        })
    }
}

/// Dot product of two equally long slices, accumulated left to right in `f64`.
#[inline]
pub(crate) fn dot<T: Element>(a: &[T], b: &[T]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x.to_f64() * y.to_f64();
    }
    acc
}

/// `c[i][j] = Σ_k a[i][k]·b[k][j]`, summed over `k` in increasing order in
/// wide precision.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(TensorError::Dimension {
            op: "matmul",
            detail: format!("inner extents differ: [{m},{k}] x [{k2},{n}]"),
        });
    }
    let bt = b.transpose()?;
    let mut out = Vec::with_capacity(m * n);
    for row in a.data.chunks_exact(k.max(1)).take(m) {
        for col in bt.data.chunks_exact(k.max(1)).take(n) {
            out.push(T::from_f64(dot(row, col)));
        }
    }
    // k == 0 degenerates to an all-zero product.
    if k == 0 {
        out = vec![T::default(); m * n];
    }
    Tensor::from_vec([m, n], out)
}

/// Softmax of one row in place, computed in wide precision.
///
/// A row made only of `-inf` becomes all zeros.
pub(crate) fn softmax_row_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        row.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Row-wise softmax stabilized by subtracting the row maximum.
pub fn softmax_rows<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (_, n) = x.dims2("softmax_rows")?;
    if let Some(index) = x.data.iter().position(|v| v.to_f64().is_nan()) {
        return Err(TensorError::NaN {
            op: "softmax_rows",
            index,
        });
    }
    let mut out = Vec::with_capacity(x.len());
    let mut row = vec![0.0; n];
    for chunk in x.data.chunks(n.max(1)) {
        row.clear();
        row.extend(chunk.iter().map(|v| v.to_f64()));
        softmax_row_in_place(&mut row);
        out.extend(row.iter().map(|&v| T::from_f64(v)));
    }
    Tensor::from_vec(x.shape.clone(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.data()[i * k + p] * b.data()[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        Tensor::from_vec([m, n], c).unwrap()
    }

    #[test]
    fn identity_times_a_is_a() {
        let a = Tensor::<f64>::random([3, 5], 1);
        let c = matmul(&Tensor::identity(3), &a).unwrap();
        assert!(c.bitwise_eq(&a));
    }

    #[test]
    fn times_zeros_is_zeros() {
        let a = Tensor::<f64>::random([4, 3], 2);
        let c = matmul(&a, &Tensor::zeros([3, 6])).unwrap();
        assert_eq!(c.shape(), &[4, 6]);
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_matches_triple_loop_exactly() {
        let a = Tensor::<f64>::random([7, 5], 11);
        let b = Tensor::<f64>::random([5, 4], 12);
        assert!(matmul(&a, &b).unwrap().bitwise_eq(&naive_matmul(&a, &b)));
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let err = matmul(&Tensor::<f64>::zeros([2, 3]), &Tensor::zeros([4, 2])).unwrap_err();
        assert!(matches!(err, TensorError::Dimension { .. }));
    }

    #[test]
    fn softmax_uniform_row() {
        let x = Tensor::<f64>::from_vec([1, 3], vec![0.0, 0.0, 0.0]).unwrap();
        let y = softmax_rows(&x).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_neg_inf_entries() {
        let x = Tensor::from_vec([1, 2], vec![3.7, f64::NEG_INFINITY]).unwrap();
        assert_eq!(softmax_rows(&x).unwrap().data(), &[1.0, 0.0]);
        let masked = Tensor::from_vec([1, 2], vec![f64::NEG_INFINITY; 2]).unwrap();
        assert_eq!(softmax_rows(&masked).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let x = Tensor::<f64>::random([4, 6], 5).map(|v| 4.0 * v);
        let y = softmax_rows(&x).unwrap();
        for r in 0..4 {
            let row = &x.data()[r * 6..r * 6 + 6];
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            for (c, v) in row.iter().enumerate() {
                let expect = v.exp() / denom;
                assert!((y.data()[r * 6 + c] - expect).abs() <= 1e-14);
            }
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let x = Tensor::from_vec([1, 2], vec![0.0, f64::NAN]).unwrap();
        assert_eq!(
            softmax_rows(&x).unwrap_err(),
            TensorError::NaN {
                op: "softmax_rows",
                index: 1
            }
        );
    }

    #[test]
    fn block_view_reads_match_direct_reads() {
        let t = Tensor::<f64>::from_fn([3, 4, 5], |i| i as f64);
        for o0 in 0..3 {
            for o1 in 0..4 {
                for o2 in 0..5 {
                    let ext = [3 - o0, 4 - o1, 5 - o2];
                    let v = t.block_view(&[o0, o1, o2], &ext).unwrap();
                    for a in 0..ext[0] {
                        for b in 0..ext[1] {
                            for c in 0..ext[2] {
                                assert_eq!(v.get(&[a, b, c]), t.get(&[o0 + a, o1 + b, o2 + c]));
                            }
                        }
                    }
                    assert_eq!(v.get(&ext), None);
                }
            }
        }
    }

    #[test]
    fn block_view_rejects_out_of_range() {
        let t = Tensor::<f64>::zeros([4, 4]);
        assert!(t.block_view(&[2, 0], &[3, 1]).is_err());
        assert!(t.block_view(&[0], &[1]).is_err());
        let copy = t.block_view(&[1, 1], &[2, 3]).unwrap().to_tensor();
        assert_eq!(copy.shape(), &[2, 3]);
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(matches!(
            Tensor::<f64>::from_vec([2, 2], vec![0.0; 3]),
            Err(TensorError::Length { .. })
        ));
    }
}
