//! `attn-check`: blocked attention against the dense reference on seeded
//! random configurations.

use anyhow::Result;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use tiled_attn::{flash_attention, std_attention, Tensor, TileConfig};

use crate::config::AttnCheckConfig;
use crate::output::{num, Report};

pub const CSV_HEADER: &str =
    "case,batch,seq,heads,head_dim,causal,b_q,b_kv1,b_kv2,mask_size,wide_err,narrow_err";

#[derive(Debug, Clone, Serialize)]
pub struct CaseResult {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub tile: TileConfig,
    pub wide_err: f64,
    pub narrow_err: f64,
}

#[derive(Serialize)]
struct Summary {
    seed: u64,
    cases: usize,
    max_wide_err: f64,
    max_narrow_err: f64,
    wide_tolerance: f64,
    narrow_tolerance: f64,
}

/// `[B, S, N, D]` and the tiling of one case.
fn sample(cfg: &AttnCheckConfig, rng: &mut ChaCha8Rng) -> ([usize; 4], TileConfig) {
    let b = rng.random_range(1..=cfg.max_batch);
    let s = rng.random_range(1..=cfg.max_seq);
    let n = rng.random_range(1..=cfg.max_heads);
    let d = *cfg.head_dims.choose(rng).expect("validated non-empty");
    let causal = rng.random_bool(0.5);
    let b_q = *cfg.block_sizes.choose(rng).expect("validated non-empty");
    let b_kv2 = *cfg.block_sizes.choose(rng).expect("validated non-empty");
    let b_kv1 = b_kv2 * rng.random_range(1..=cfg.max_level1_factor);
    let mask_size = b_q.max(b_kv2) << rng.random_range(0..=1);
    (
        [b, s, n, d],
        TileConfig::new(b_q, b_kv1, b_kv2, causal, mask_size),
    )
}

/// Runs every case; both precisions are checked against the f64 reference.
pub fn run_cases(cfg: &AttnCheckConfig, seed: u64) -> Result<Vec<CaseResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cfg.cases);
    for _ in 0..cfg.cases {
        let (shape, tile) = sample(cfg, &mut rng);
        let [b, s, n, d] = shape;
        let data_seed: u64 = rng.random();
        let q = Tensor::<f64>::random(shape, data_seed);
        let k = Tensor::<f64>::random(shape, data_seed ^ 0x5555);
        let v = Tensor::<f64>::random(shape, data_seed ^ 0xaaaa);
        let want = std_attention(&q, &k, &v, tile.causal)?;
        let wide_err = flash_attention(&q, &k, &v, &tile)?.max_abs_diff(&want)?;
        let (q32, k32, v32) = (q.cast::<f32>(), k.cast::<f32>(), v.cast::<f32>());
        let want32 = std_attention(&q32.cast::<f64>(), &k32.cast(), &v32.cast(), tile.causal)?;
        let narrow_err = flash_attention(&q32, &k32, &v32, &tile)?.max_abs_diff(&want32)?;
        out.push(CaseResult {
            batch: b,
            seq: s,
            heads: n,
            head_dim: d,
            tile,
            wide_err,
            narrow_err,
        });
    }
    Ok(out)
}

pub fn run(cfg: &AttnCheckConfig, seed: u64) -> Result<Report> {
    let cases = run_cases(cfg, seed)?;
    let mut csv = format!("{CSV_HEADER}\n");
    for (i, c) in cases.iter().enumerate() {
        let t = &c.tile;
        csv.push_str(&format!(
            "{i},{},{},{},{},{},{},{},{},{},{},{}\n",
            c.batch,
            c.seq,
            c.heads,
            c.head_dim,
            t.causal,
            t.b_q,
            t.b_kv1,
            t.b_kv2,
            t.mask_size,
            num(c.wide_err),
            num(c.narrow_err)
        ));
    }
    let max_wide = cases.iter().map(|c| c.wide_err).fold(0.0, f64::max);
    let max_narrow = cases.iter().map(|c| c.narrow_err).fold(0.0, f64::max);

    let mut report = Report::default();
    report.check(
        "wide error within tolerance",
        max_wide <= cfg.wide_tolerance,
        format!("max {max_wide:e} <= {:e}", cfg.wide_tolerance),
    );
    report.check(
        "narrow error within tolerance",
        max_narrow <= cfg.narrow_tolerance,
        format!("max {max_narrow:e} <= {:e}", cfg.narrow_tolerance),
    );
    report.text("attn_check.csv", csv);
    report.json(
        "attn_check.json",
        &Summary {
            seed,
            cases: cases.len(),
            max_wide_err: max_wide,
            max_narrow_err: max_narrow,
            wide_tolerance: cfg.wide_tolerance,
            narrow_tolerance: cfg.narrow_tolerance,
        },
    )?;
    Ok(report)
}
