//! `pipeline-sim` and `allreduce-sim`.

use anyhow::Result;
use serde::Serialize;
use tiled_attn::comm::allreduce_csv;
use tiled_attn::pipeline::tiling_csv;
use tiled_attn::{
    choose_block_rows, compare_allreduce, compare_tilings, simulate_two_level, simulate_unified,
    sync_count_formula, tiled_allreduce_schedule, tp_attention_linear, tp_attention_linear_tiled,
    AllreduceRow, AttnShape, ClusterConfig, HardwareModel, OverlapWorkload, Tensor, TilingRow,
    Timeline, TpInputs,
};

use crate::config::{AllreduceCheckConfig, AllreduceConfig, PipelineConfig};
use crate::output::Report;

pub fn pipeline_shape(cfg: &PipelineConfig) -> AttnShape {
    AttnShape::new(cfg.batch, cfg.seqs[0], cfg.heads, cfg.head_dim, cfg.q_block)
}

pub fn tiling_rows(cfg: &PipelineConfig, hw: &HardwareModel) -> Result<Vec<TilingRow>> {
    Ok(compare_tilings(
        &pipeline_shape(cfg),
        &cfg.seqs,
        cfg.b_kv,
        cfg.b_kv1,
        cfg.b_kv2,
        hw,
    )?)
}

#[derive(Serialize)]
struct PipelineTimelines<'a> {
    profile: &'a str,
    seq: usize,
    unified: &'a Timeline,
    two_level: &'a Timeline,
}

pub fn run_pipeline(cfg: &PipelineConfig, hw: &HardwareModel) -> Result<Report> {
    let rows = tiling_rows(cfg, hw)?;
    let mut report = Report::default();

    let shape = pipeline_shape(cfg);
    let ratio_ok = rows.iter().all(|r| {
        let sh = shape.with_seq(r.seq);
        r.unified_syncs == sync_count_formula(&sh, cfg.b_kv)
            && r.two_level_syncs == sync_count_formula(&sh, cfg.b_kv1)
            && r.unified_syncs * cfg.b_kv == r.two_level_syncs * cfg.b_kv1
    });
    report.check(
        "sync counts follow the level-1 block count",
        ratio_ok,
        format!("unified/two-level = {}/{}", cfg.b_kv1, cfg.b_kv),
    );
    let positive = rows.iter().all(|r| r.reduction_pct > 0.0);
    report.check(
        "two-level tiling reduces makespan",
        positive,
        rows.iter()
            .map(|r| format!("{}:{:.2}%", r.seq, r.reduction_pct))
            .collect::<Vec<_>>()
            .join(" "),
    );

    let small = shape.with_seq(cfg.timeline_seq);
    let u = simulate_unified(&small, cfg.b_kv, hw)?;
    let t = simulate_two_level(&small, cfg.b_kv1, cfg.b_kv2, hw)?;
    let valid = u.timeline.validate().is_ok() && t.timeline.validate().is_ok();
    report.check("timelines respect dependencies and resources", valid, "");

    report.text("pipeline_tiling.csv", tiling_csv(&rows));
    report.json(
        "pipeline_timeline.json",
        &PipelineTimelines {
            profile: &hw.name,
            seq: cfg.timeline_seq,
            unified: &u.timeline,
            two_level: &t.timeline,
        },
    )?;
    Ok(report)
}

pub fn allreduce_workload(cfg: &AllreduceConfig) -> OverlapWorkload {
    OverlapWorkload {
        batch: cfg.batch,
        seq: cfg.seqs[0],
        heads: cfg.heads,
        head_dim: cfg.head_dim,
        devices: cfg.devices,
        elem_bytes: 2,
    }
}

pub fn allreduce_rows(cfg: &AllreduceConfig, hw: &HardwareModel) -> Result<Vec<AllreduceRow>> {
    Ok(compare_allreduce(
        &allreduce_workload(cfg),
        &cfg.seqs,
        cfg.n_blocks,
        hw,
    )?)
}

/// Tiled and monolithic projections of one seeded instance; returns
/// whether they share every bit.
pub fn numeric_check(c: &AllreduceCheckConfig, seed: u64) -> Result<bool> {
    let shape = [c.batch, c.seq, c.heads, c.head_dim];
    let q = Tensor::random(shape, seed);
    let k = Tensor::random(shape, seed.wrapping_add(1));
    let v = Tensor::random(shape, seed.wrapping_add(2));
    let w_o = Tensor::random([c.heads * c.head_dim, c.hidden_out], seed.wrapping_add(3));
    let inputs = TpInputs {
        q: &q,
        k: &k,
        v: &v,
        w_o: &w_o,
        causal: c.causal,
    };
    let rows = c.batch * c.seq;
    let blocks = (0..c.n_blocks)
        .map(|i| rows / c.n_blocks + usize::from(i >= c.n_blocks - rows % c.n_blocks))
        .collect();
    let tiled = ClusterConfig::new(c.devices, c.heads, blocks)?;
    let mono = ClusterConfig::new(c.devices, c.heads, vec![rows])?;
    let a = tp_attention_linear(&inputs, &mono)?;
    let b = tp_attention_linear_tiled(&inputs, &tiled)?;
    Ok(a.bitwise_eq(&b))
}

#[derive(Serialize)]
struct AllreduceTimeline<'a> {
    profile: &'a str,
    seq: usize,
    block_rows: &'a [usize],
    tiled: &'a Timeline,
}

pub fn run_allreduce(cfg: &AllreduceConfig, hw: &HardwareModel, seed: u64) -> Result<Report> {
    let rows = allreduce_rows(cfg, hw)?;
    let mut report = Report::default();
    report.check(
        "tiled allreduce results match monolithic bitwise",
        numeric_check(&cfg.check, seed)?,
        format!("seed {seed}"),
    );
    let monotone = rows.windows(2).all(|w| w[1].speedup >= w[0].speedup);
    report.check(
        "speedup is non-decreasing in sequence length",
        monotone,
        rows.iter()
            .map(|r| format!("{}:{:.4}", r.seq, r.speedup))
            .collect::<Vec<_>>()
            .join(" "),
    );

    let w = allreduce_workload(cfg);
    let blocks = choose_block_rows(w.total_rows(), cfg.n_blocks, &w, hw)?;
    let cluster = ClusterConfig::new(w.devices, w.heads, blocks)?;
    let tl = tiled_allreduce_schedule(&cluster, &w, hw)?;
    report.check(
        "schedule respects dependencies and resources",
        tl.validate().is_ok(),
        "",
    );

    report.text("allreduce.csv", allreduce_csv(&rows));
    report.json(
        "allreduce_timeline.json",
        &AllreduceTimeline {
            profile: &hw.name,
            seq: w.seq,
            block_rows: &cluster.block_rows,
            tiled: &tl,
        },
    )?;
    Ok(report)
}
