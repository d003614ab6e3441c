use proptest::prelude::*;
use tiled_attn::mask::block_bounds;
use tiled_attn::{build_mmask, mask_memory_bytes, BlockMaskKind, MMask, MaskError};

/// Tiles an `s×s` causal mask with `b_r×b_c` blocks and assembles it from
/// block kinds and extracted block masks.
fn assemble(m: &MMask, s: usize, b_r: usize, b_c: usize) -> Vec<bool> {
    let mut out = vec![false; s * s];
    for i in 0..s.div_ceil(b_r) {
        for j in 0..s.div_ceil(b_c) {
            let ((r0, r1), (c0, c1)) = block_bounds(i, j, b_r, b_c, s);
            let fill = |out: &mut Vec<bool>, f: &dyn Fn(usize, usize) -> bool| {
                for r in r0..r1 {
                    for c in c0..c1 {
                        out[r * s + c] = f(r - r0, c - c0);
                    }
                }
            };
            match m.classify_block(i, j, b_r, b_c, s).unwrap() {
                BlockMaskKind::Empty => fill(&mut out, &|_, _| false),
                BlockMaskKind::Full => fill(&mut out, &|_, _| true),
                BlockMaskKind::Partial { d } => {
                    let bm = m.extract_bmask(d, r1 - r0, c1 - c0).unwrap();
                    fill(&mut out, &|r, c| bm[r][c]);
                }
            }
        }
    }
    out
}

fn lower_triangular(s: usize) -> Vec<bool> {
    (0..s * s).map(|e| e / s >= e % s).collect()
}

#[test]
fn square_blocks_reconstruct_every_length() {
    let m = build_mmask(32).unwrap();
    for s in 1..=512 {
        let want = lower_triangular(s);
        for b in [2, 4, 8, 16, 32] {
            assert!(assemble(&m, s, b, b) == want, "s={s} b={b}");
        }
    }
}

#[test]
fn dividing_rectangular_blocks_reconstruct() {
    let m = build_mmask(32).unwrap();
    for s in 1..=512usize {
        let divisors: Vec<usize> = (1..=32).filter(|b| s.is_multiple_of(*b)).collect();
        let want = lower_triangular(s);
        for &b_r in &divisors {
            for &b_c in &divisors {
                assert!(assemble(&m, s, b_r, b_c) == want, "s={s} {b_r}x{b_c}");
            }
        }
    }
}

proptest! {
    #[test]
    fn ragged_rectangles_reconstruct(s in 1..=200usize, b_r in 1..=16usize, b_c in 1..=16usize) {
        let m = build_mmask(16).unwrap();
        prop_assert!(assemble(&m, s, b_r, b_c) == lower_triangular(s));
    }
}

#[test]
fn extraction_stays_inside_the_generator() {
    for mm in 1..=16usize {
        let m = build_mmask(mm).unwrap();
        let side = m.side() as i64;
        for b_r in 1..=mm {
            for b_c in 1..=mm {
                for d in -side..=side {
                    let reach = b_r.max(b_c) as i64 - 1;
                    match m.extract_bmask(d, b_r, b_c) {
                        Ok(bm) => {
                            assert!((-reach..=reach).contains(&d));
                            for (r, row) in bm.iter().enumerate() {
                                for (c, &bit) in row.iter().enumerate() {
                                    assert_eq!(bit, r as i64 - c as i64 >= d);
                                }
                            }
                        }
                        Err(e) => {
                            assert!(!(-reach..=reach).contains(&d));
                            assert!(matches!(e, MaskError::Offset { .. }));
                        }
                    }
                }
                assert!(m.extract_bmask(0, b_r, mm + 1).is_err());
            }
        }
    }
}

#[test]
fn empty_share_tends_to_half() {
    let m = build_mmask(32).unwrap();
    let b = 16;
    for n_b in [1usize, 2, 8, 64] {
        let s = n_b * b;
        let empty = (0..n_b)
            .flat_map(|i| (0..n_b).map(move |j| (i, j)))
            .filter(|&(i, j)| m.classify_block(i, j, b, b, s).unwrap() == BlockMaskKind::Empty)
            .count();
        assert_eq!(empty, n_b * (n_b - 1) / 2);
        if n_b == 64 {
            assert!(empty as f64 / (n_b * n_b) as f64 >= 0.49);
        }
    }
}

#[test]
fn full_mask_bytes_at_64k() {
    let (full, gen) = mask_memory_bytes(64 * 1024, 512, 2);
    assert_eq!(full, 8 * (1u128 << 30));
    assert_eq!(gen, 1024 * 1024 * 2);
}
