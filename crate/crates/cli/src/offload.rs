//! `offload-plan`: layer placement, the decode latency sweep, and the host
//! decode kernel's worker invariance.

use anyhow::Result;
use serde::Serialize;
use tiled_attn::offload::latency_csv;
use tiled_attn::{
    cpu_decode_attention, latency_table, plan, prefill_offload_overlap, std_attention,
    HardwareModel, KvCache, LatencyRow, MemoryPlan, PrefillOverlap, Tensor,
};

use crate::config::{DecodeCheckConfig, OffloadConfig};
use crate::output::Report;

pub fn standalone_plan(cfg: &OffloadConfig) -> Result<MemoryPlan> {
    let m = cfg.offload_model();
    Ok(plan(&m, cfg.device_memory, cfg.host_memory, cfg.devices)?)
}

pub fn sweep(cfg: &OffloadConfig, hw: &HardwareModel) -> Result<Vec<LatencyRow>> {
    Ok(latency_table(
        &cfg.model,
        &cfg.seqs,
        cfg.sweep_device_memory,
        cfg.host_memory,
        cfg.devices,
        hw,
    )?)
}

impl OffloadConfig {
    /// The configured model at the standalone plan's sequence length.
    pub fn offload_model(&self) -> tiled_attn::ModelConfig {
        self.model.with_seq(self.plan_seq)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DecodeCheck {
    /// Not serialized: the list may include the environment's worker count.
    #[serde(skip)]
    pub workers: Vec<usize>,
    pub bitwise_invariant: bool,
    pub max_err: f64,
}

/// Host decode attention at each worker count against one worker and the
/// dense causal reference.
pub fn decode_check(c: &DecodeCheckConfig, seed: u64, workers: &[usize]) -> Result<DecodeCheck> {
    let (b, n, d, s) = (c.batch, c.heads, c.head_dim, c.cache_len);
    let q = Tensor::random([b, 1, n, d], seed);
    let k = Tensor::random([b, s, n * d], seed.wrapping_add(1));
    let v = Tensor::random([b, s, n * d], seed.wrapping_add(2));
    let cache = KvCache::from_tensors(k.clone(), v.clone())?;
    let one = cpu_decode_attention(&q, &cache, 1)?;
    let mut invariant = true;
    for &w in workers {
        invariant &= cpu_decode_attention(&q, &cache, w)?.bitwise_eq(&one);
    }
    let want = std_attention(
        &q,
        &k.reshape([b, s, n, d])?,
        &v.reshape([b, s, n, d])?,
        true,
    )?;
    Ok(DecodeCheck {
        workers: workers.to_vec(),
        bitwise_invariant: invariant,
        max_err: one.max_abs_diff(&want)?,
    })
}

#[derive(Serialize)]
struct PlanOutput<'a> {
    model: tiled_attn::ModelConfig,
    device_memory: u64,
    host_memory: u64,
    layers: u64,
    plan: &'a MemoryPlan,
    prefill: PrefillSummary,
    decode_check: &'a DecodeCheck,
}

#[derive(Serialize)]
struct PrefillSummary {
    compute_only: f64,
    with_offload: f64,
    added_latency: f64,
}

impl From<&PrefillOverlap> for PrefillSummary {
    fn from(p: &PrefillOverlap) -> Self {
        Self {
            compute_only: p.compute_only,
            with_offload: p.timeline.makespan(),
            added_latency: p.added_latency,
        }
    }
}

pub fn run(cfg: &OffloadConfig, hw: &HardwareModel, seed: u64, workers: usize) -> Result<Report> {
    let m = cfg.offload_model();
    let p = standalone_plan(cfg)?;
    let rows = sweep(cfg, hw)?;
    let mut counts = vec![2, 3, 8, 64, workers];
    counts.sort_unstable();
    counts.dedup();
    let dec = decode_check(&cfg.decode, seed, &counts)?;

    let mut report = Report::default();
    report.check(
        "device and host layers add up",
        p.l_gpu + p.l_cpu == m.layers,
        format!("{} + {} = {}", p.l_gpu, p.l_cpu, m.layers),
    );
    report.check(
        "plan fits in device and host memory",
        p.feasible,
        format!("S={} on {} devices", m.seq, cfg.devices),
    );
    let offloaded: Vec<&LatencyRow> = rows.iter().filter(|r| r.l_cpu > 0).collect();
    report.check(
        "cooperative decode beats classical when layers are offloaded",
        offloaded
            .iter()
            .all(|r| r.cooperative_total.is_some_and(|c| c < r.classical_total)),
        offloaded
            .iter()
            .map(|r| format!("{}:{:.3}", r.seq, r.speedup().unwrap_or(f64::NAN)))
            .collect::<Vec<_>>()
            .join(" "),
    );
    report.check(
        "host decode is bitwise invariant to worker count",
        dec.bitwise_invariant,
        format!("workers {:?}", dec.workers),
    );
    report.check(
        "host decode matches the dense reference",
        dec.max_err <= cfg.decode.tolerance,
        format!("max {:e} <= {:e}", dec.max_err, cfg.decode.tolerance),
    );

    let prefill = prefill_offload_overlap(&m, &p, hw);
    report.json(
        "offload_plan.json",
        &PlanOutput {
            model: m,
            device_memory: cfg.device_memory,
            host_memory: cfg.host_memory,
            layers: m.layers,
            plan: &p,
            prefill: (&prefill).into(),
            decode_check: &dec,
        },
    )?;
    report.text("offload_latency.csv", latency_csv(&rows));
    Ok(report)
}
