//! `bench`: every experiment in one run, one CSV each. Timings are
//! simulated, never measured, so the files are reproducible.

use anyhow::Result;

use crate::config::ExperimentConfig;
use crate::output::Report;
use crate::{attn, layout, mask, offload, sim};

pub const LAYOUT_CSV_HEADER: &str = "instr,partitions,compatible,exchanges_needed,c_tiles";

/// Output file of each experiment and the header it starts with.
pub fn csv_headers() -> [(&'static str, &'static str); 6] {
    [
        ("bench_attn.csv", attn::CSV_HEADER),
        ("bench_skip.csv", mask::SKIP_CSV_HEADER),
        ("bench_tiling.csv", tiled_attn::pipeline::TILING_CSV_HEADER),
        (
            "bench_allreduce.csv",
            tiled_attn::comm::ALLREDUCE_CSV_HEADER,
        ),
        ("bench_offload.csv", tiled_attn::offload::LATENCY_CSV_HEADER),
        ("bench_layout.csv", LAYOUT_CSV_HEADER),
    ]
}

pub fn run(cfg: &ExperimentConfig, workers: usize) -> Result<Report> {
    let mut report = Report::default();
    report.absorb(
        attn::run(&cfg.attn_check, cfg.seed)?,
        &[("attn_check.csv", "bench_attn.csv")],
    );
    report.absorb(
        mask::run(&cfg.mask_demo)?,
        &[("mask_skip.csv", "bench_skip.csv")],
    );
    report.absorb(
        sim::run_pipeline(&cfg.pipeline, &cfg.hardware(&cfg.pipeline.profile)?)?,
        &[("pipeline_tiling.csv", "bench_tiling.csv")],
    );
    report.absorb(
        sim::run_allreduce(
            &cfg.allreduce,
            &cfg.hardware(&cfg.allreduce.profile)?,
            cfg.seed,
        )?,
        &[("allreduce.csv", "bench_allreduce.csv")],
    );
    report.absorb(
        offload::run(
            &cfg.offload,
            &cfg.hardware(&cfg.offload.profile)?,
            cfg.seed,
            workers,
        )?,
        &[("offload_latency.csv", "bench_offload.csv")],
    );

    let mut csv = format!("{LAYOUT_CSV_HEADER}\n");
    for r in layout::results(cfg)? {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.instr, r.partitions, r.compat.compatible, r.compat.exchanges_needed, r.compat.c_tiles
        ));
    }
    report.absorb(layout::run(cfg)?, &[]);
    report.text("bench_layout.csv", csv);

    let headers_ok = csv_headers().iter().all(|(name, header)| {
        report
            .file(name)
            .and_then(|b| b.split(|&c| c == b'\n').next())
            .is_some_and(|first| first == header.as_bytes())
    });
    report.check(
        "every CSV starts with its documented header",
        headers_ok,
        "",
    );
    Ok(report)
}
