use proptest::prelude::*;
use tiled_attn::{
    decode_step, matmul, prefill_layer, softmax_rows, std_attention, KvCache, LayerWeights, Tensor,
};

proptest! {
    #[test]
    fn identity_associates_exactly(m in 1..=12usize, k in 1..=12usize, n in 1..=12usize, seed in any::<u64>()) {
        let a = Tensor::<f64>::random([m, k], seed);
        let b = Tensor::<f64>::random([k, n], seed ^ 1);
        let i = Tensor::<f64>::identity(m);
        let left = matmul(&matmul(&i, &a).unwrap(), &b).unwrap();
        let right = matmul(&i, &matmul(&a, &b).unwrap()).unwrap();
        prop_assert!(left.bitwise_eq(&right));
        prop_assert!(left.bitwise_eq(&matmul(&a, &b).unwrap()));
    }

    #[test]
    fn block_views_read_through(
        shape in prop::collection::vec(1..=4usize, 1..=4),
        seed in any::<u64>(),
        picks in prop::collection::vec((any::<prop::sample::Index>(), any::<prop::sample::Index>()), 4),
    ) {
        let t = Tensor::<f64>::random(shape.clone(), seed);
        let rank = shape.len();
        let mut offsets = Vec::with_capacity(rank);
        let mut extents = Vec::with_capacity(rank);
        for (axis, &s) in shape.iter().enumerate() {
            let (o, e) = picks[axis];
            let off = o.index(s);
            offsets.push(off);
            extents.push(1 + e.index(s - off));
        }
        let view = t.block_view(&offsets, &extents).unwrap();
        let total: usize = extents.iter().product();
        for flat in 0..total {
            let mut local = vec![0; rank];
            let mut rem = flat;
            for axis in (0..rank).rev() {
                local[axis] = rem % extents[axis];
                rem /= extents[axis];
            }
            let global: Vec<usize> = local.iter().zip(&offsets).map(|(l, o)| l + o).collect();
            prop_assert_eq!(view.get(&local), t.get(&global));
        }
        let mut past = vec![0; rank];
        past[0] = extents[0];
        prop_assert!(view.get(&past).is_none());
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1..=6usize, cols in 1..=40usize, scale in 0.1f64..50.0, seed in any::<u64>()) {
        let x = Tensor::<f64>::random([rows, cols], seed).map(|v| v * scale);
        let y = softmax_rows(&x).unwrap();
        for r in y.data().chunks(cols) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let y32 = softmax_rows(&x.cast::<f32>()).unwrap();
        for r in y32.data().chunks(cols) {
            prop_assert!((r.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }
}

#[test]
fn fully_masked_row_is_zero() {
    let x = Tensor::from_vec(
        [2, 3],
        vec![
            f64::NEG_INFINITY,
            f64::NEG_INFINITY,
            f64::NEG_INFINITY,
            0.0,
            1.0,
            2.0,
        ],
    )
    .unwrap();
    let y = softmax_rows(&x).unwrap();
    assert_eq!(&y.data()[..3], &[0.0, 0.0, 0.0]);
    assert!((y.data()[3..].iter().sum::<f64>() - 1.0).abs() <= 1e-15);
}

/// Every later key/value row is replaced in turn; outputs up to `t` keep
/// their bits.
#[test]
fn causal_outputs_ignore_the_future() {
    let (n, d) = (2, 4);
    for s in 1..=8usize {
        let q = Tensor::<f64>::random([1, s, n, d], s as u64);
        let k = Tensor::<f64>::random([1, s, n, d], 100 + s as u64);
        let v = Tensor::<f64>::random([1, s, n, d], 200 + s as u64);
        let base = std_attention(&q, &k, &v, true).unwrap();
        let row = n * d;
        for t in 0..s {
            for future in t + 1..s {
                let mut k2 = k.clone();
                let mut v2 = v.clone();
                for x in &mut k2.data_mut()[future * row..(future + 1) * row] {
                    *x = 7.5 - *x;
                }
                for x in &mut v2.data_mut()[future * row..(future + 1) * row] {
                    *x *= -3.0;
                }
                let out = std_attention(&q, &k2, &v2, true).unwrap();
                let (a, b) = (&base.data()[..(t + 1) * row], &out.data()[..(t + 1) * row]);
                assert!(
                    a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
                    "s={s} t={t}"
                );
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn incremental_decode_matches_prefill(
        batch in 1..=2usize,
        heads in prop::sample::select(vec![1usize, 2, 4]),
        head_dim in prop::sample::select(vec![2usize, 4]),
        s0 in 1..=6usize,
        steps in 1..=4usize,
        seed in any::<u64>(),
    ) {
        let h1 = heads * head_dim;
        let w = LayerWeights::random(h1, 2 * h1, seed);
        let total = s0 + steps;
        let x = Tensor::<f64>::random([batch, total, h1], seed ^ 7);
        let mut full_cache = KvCache::new(batch, h1);
        let full = prefill_layer(&x, &w, &mut full_cache, heads).unwrap();

        let head = Tensor::from_fn([batch, s0, h1], |e| {
            let (b, rest) = (e / (s0 * h1), e % (s0 * h1));
            x.data()[b * total * h1 + rest]
        });
        let mut cache = KvCache::new(batch, h1);
        prefill_layer(&head, &w, &mut cache, heads).unwrap();
        for step in 0..steps {
            let pos = s0 + step;
            let token = Tensor::from_fn([batch, 1, h1], |e| {
                let (b, c) = (e / h1, e % h1);
                x.data()[(b * total + pos) * h1 + c]
            });
            let out = decode_step(&token, &w, &mut cache, heads).unwrap();
            prop_assert_eq!(cache.len(), pos + 1);
            for b in 0..batch {
                for c in 0..h1 {
                    let want = full.data()[(b * total + pos) * h1 + c];
                    prop_assert!((out.data()[b * h1 + c] - want).abs() <= 1e-12);
                }
            }
        }
    }
}
