//! Shared fixtures for the benchmarks.

use tiled_attn::{Element, Tensor};

/// Seeded `[B, S, N, D]` query, key and value tensors.
pub fn qkv<T: Element>(b: usize, s: usize, n: usize, d: usize, seed: u64) -> [Tensor<T>; 3] {
    let shape = [b, s, n, d];
    [
        Tensor::random(shape, seed),
        Tensor::random(shape, seed ^ 0x5555),
        Tensor::random(shape, seed ^ 0xaaaa),
    ]
}
