//! Cost model of blocked attention on a decoupled matrix (Cube) / element-wise
//! (Vector) accelerator core, comparing single-level and two-level KV tiling.
//!
//! Per KV block the Cube computes `S = Q K^T`, hands the scores to the Vector
//! unit, which runs `exp` and the row statistic update and hands the
//! probabilities back for `P V` on the Cube. Each handoff costs
//! `sync_latency` plus the transferred bytes over the shared buffer.
//!
//! The Cube runs one block ahead: `QK` of the next block is issued before `PV`
//! of the current one, so the two units overlap. Under two-level tiling the
//! handoffs happen once per level-1 block, while K/V loads stream per level-2
//! block into double buffers.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hardware::HardwareModel;
use crate::timeline::{EventId, Resource, Timeline, Work};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("infeasible tiling: {buffer} needs {need} bytes but holds {capacity}")]
    Infeasible {
        buffer: &'static str,
        need: u64,
        capacity: u64,
    },
    #[error("invalid tiling: {0}")]
    Config(String),
}

/// Attention problem size for the simulators. Attention is non-causal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttnShape {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub q_block: usize,
    #[serde(default = "default_elem_bytes")]
    pub elem_bytes: u64,
}

fn default_elem_bytes() -> u64 {
    2
}

impl AttnShape {
    pub fn new(batch: usize, seq: usize, heads: usize, head_dim: usize, q_block: usize) -> Self {
        Self {
            batch,
            seq,
            heads,
            head_dim,
            q_block,
            elem_bytes: 2,
        }
    }

    pub fn with_seq(self, seq: usize) -> Self {
        Self { seq, ..self }
    }

    fn validate(&self) -> Result<(), PipelineError> {
        if self.batch == 0
            || self.seq == 0
            || self.heads == 0
            || self.head_dim == 0
            || self.q_block == 0
        {
            return Err(PipelineError::Config(format!(
                "all extents must be positive: {self:?}"
            )));
        }
        if self.elem_bytes == 0 {
            return Err(PipelineError::Config("elem_bytes must be positive".into()));
        }
        Ok(())
    }

    /// Resident bytes for one query block against a `b_kv`-column KV block:
    /// Q block, K and V blocks, and the score block.
    pub fn working_set(&self, b_kv: usize) -> u64 {
        let (bq, d) = (self.q_block as u64, self.head_dim as u64);
        let b = b_kv as u64;
        (bq * d + 2 * b * d + bq * b) * self.elem_bytes
    }
}

/// `2 · ceil(S/b) · ceil(S/b_q) · B · N`.
pub fn sync_count_formula(shape: &AttnShape, b: usize) -> usize {
    2 * shape.seq.div_ceil(b) * shape.seq.div_ceil(shape.q_block) * shape.batch * shape.heads
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Unified,
    TwoLevel,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineRun {
    pub scheme: Scheme,
    pub b_kv1: usize,
    pub b_kv2: usize,
    pub sync_count: usize,
    pub makespan: f64,
    pub timeline: Timeline,
}

/// Single-level tiling with single-buffered K/V.
pub fn simulate_unified(
    shape: &AttnShape,
    b_kv: usize,
    hw: &HardwareModel,
) -> Result<PipelineRun, PipelineError> {
    run(shape, b_kv, b_kv, Scheme::Unified, hw, true)
}

/// Two-level tiling with double-buffered level-2 K/V loads.
pub fn simulate_two_level(
    shape: &AttnShape,
    b_kv1: usize,
    b_kv2: usize,
    hw: &HardwareModel,
) -> Result<PipelineRun, PipelineError> {
    run(shape, b_kv1, b_kv2, Scheme::TwoLevel, hw, true)
}

fn check_capacity(
    shape: &AttnShape,
    b_kv1: usize,
    b_kv2: usize,
    scheme: Scheme,
    hw: &HardwareModel,
) -> Result<(), PipelineError> {
    let checks: &[(&'static str, usize, u64)] = match scheme {
        Scheme::Unified => &[("L1", b_kv1, hw.l1_capacity)],
        Scheme::TwoLevel => &[("L0", b_kv2, hw.l0_capacity), ("L1", b_kv1, hw.l1_capacity)],
    };
    for &(buffer, b, capacity) in checks {
        let need = shape.working_set(b);
        if need > capacity {
            return Err(PipelineError::Infeasible {
                buffer,
                need,
                capacity,
            });
        }
    }
    Ok(())
}

/// One level-1 KV block of one query tile.
struct Unit {
    tile: usize,
    rows: usize,
    sub_cols: Vec<usize>,
    first_in_tile: bool,
    last_in_tile: bool,
}

fn units(shape: &AttnShape, b_kv1: usize, b_kv2: usize) -> impl Iterator<Item = Unit> + '_ {
    let s = shape.seq;
    let n_q = s.div_ceil(shape.q_block);
    let n_u = s.div_ceil(b_kv1);
    (0..shape.batch * shape.heads * n_q).flat_map(move |tile| {
        let qi = tile % n_q;
        let rows = (s - qi * shape.q_block).min(shape.q_block);
        (0..n_u).map(move |u| {
            let c_end = ((u + 1) * b_kv1).min(s);
            let sub_cols = (u * b_kv1..c_end)
                .step_by(b_kv2)
                .map(|c| (c_end - c).min(b_kv2))
                .collect();
            Unit {
                tile,
                rows,
                sub_cols,
                first_in_tile: u == 0,
                last_in_tile: u + 1 == n_u,
            }
        })
    })
}

struct Builder<'a> {
    tl: Timeline,
    hw: &'a HardwareModel,
    d: usize,
    bpe: u64,
    depth: usize,
    syncs: usize,
    qk: Vec<EventId>,
    pv: Vec<EventId>,
    last_qk_of_tile: Vec<EventId>,
    lq: EventId,
    hv: EventId,
}

impl Builder<'_> {
    /// Loads, score GEMMs and the element-wise stage of one unit.
    fn front(&mut self, u: &Unit) {
        let (hw, d, bpe) = (self.hw, self.d, self.bpe);
        if u.first_in_tile {
            // Q is double buffered in both schemes.
            let release: Vec<EventId> = u
                .tile
                .checked_sub(2)
                .map(|t| self.last_qk_of_tile[t])
                .into_iter()
                .collect();
            let bytes = (u.rows * d) as u64 * bpe;
            self.lq = self.tl.push(
                Resource::Dma,
                "LQ",
                hw.dma_time(bytes),
                &release,
                Work::Bytes(bytes as f64),
            );
        }
        let mut last = self.lq;
        for &cols in &u.sub_cols {
            let s = self.qk.len();
            let release: Vec<EventId> = s
                .checked_sub(self.depth)
                .map(|p| self.qk[p])
                .into_iter()
                .collect();
            let bytes = (cols * d) as u64 * bpe;
            let lk = self.tl.push(
                Resource::Dma,
                "LK",
                hw.dma_time(bytes),
                &release,
                Work::Bytes(bytes as f64),
            );
            let flops = 2.0 * (u.rows * cols * d) as f64;
            last = self.tl.push(
                Resource::Cube,
                "QK",
                hw.gemm_time(u.rows, cols, d),
                &[lk, self.lq],
                Work::Flops(flops),
            );
            self.qk.push(last);
        }
        if u.last_in_tile {
            self.last_qk_of_tile.push(last);
        }
        let cols: usize = u.sub_cols.iter().sum();
        let score_bytes = (u.rows * cols) as u64 * bpe;
        let hc = self.tl.push(
            Resource::Cube,
            "SYNC_CV",
            hw.handoff_time(score_bytes),
            &[last],
            Work::Bytes(score_bytes as f64),
        );
        let elems = u.rows * cols;
        self.tl.push(
            Resource::Vector,
            "EXP",
            hw.vector_time(elems),
            &[hc],
            Work::Elements(elems as f64),
        );
        let upd = u.rows * d;
        self.tl.push(
            Resource::Vector,
            "UPDATE",
            hw.vector_time(upd),
            &[],
            Work::Elements(upd as f64),
        );
        self.hv = self.tl.push(
            Resource::Vector,
            "SYNC_VC",
            hw.handoff_time(score_bytes),
            &[],
            Work::Bytes(score_bytes as f64),
        );
        self.syncs += 2;
    }

    /// Value loads, `P V` GEMMs and the tile epilogue of one unit.
    fn back(&mut self, u: &Unit) {
        let (hw, d, bpe) = (self.hw, self.d, self.bpe);
        let mut last = self.hv;
        for &cols in &u.sub_cols {
            let s = self.pv.len();
            let release: Vec<EventId> = s
                .checked_sub(self.depth)
                .map(|p| self.pv[p])
                .into_iter()
                .collect();
            let bytes = (cols * d) as u64 * bpe;
            let lv = self.tl.push(
                Resource::Dma,
                "LV",
                hw.dma_time(bytes),
                &release,
                Work::Bytes(bytes as f64),
            );
            let flops = 2.0 * (u.rows * cols * d) as f64;
            last = self.tl.push(
                Resource::Cube,
                "PV",
                hw.gemm_time(u.rows, cols, d),
                &[self.hv, lv],
                Work::Flops(flops),
            );
            self.pv.push(last);
        }
        if u.last_in_tile {
            let elems = u.rows * d;
            let norm = self.tl.push(
                Resource::Vector,
                "NORM",
                hw.vector_time(elems),
                &[last],
                Work::Elements(elems as f64),
            );
            let bytes = elems as u64 * bpe;
            self.tl.push(
                Resource::DmaOut,
                "STORE_O",
                hw.dma_time(bytes),
                &[norm],
                Work::Bytes(bytes as f64),
            );
        }
    }
}

fn run(
    shape: &AttnShape,
    b_kv1: usize,
    b_kv2: usize,
    scheme: Scheme,
    hw: &HardwareModel,
    record: bool,
) -> Result<PipelineRun, PipelineError> {
    shape.validate()?;
    if b_kv1 == 0 || b_kv2 == 0 || !b_kv1.is_multiple_of(b_kv2) {
        return Err(PipelineError::Config(format!(
            "level-2 block {b_kv2} must be positive and divide level-1 block {b_kv1}"
        )));
    }
    if scheme == Scheme::Unified && b_kv1 != b_kv2 {
        return Err(PipelineError::Config(
            "unified tiling has a single block size".into(),
        ));
    }
    check_capacity(shape, b_kv1, b_kv2, scheme, hw)?;
    let mut b = Builder {
        tl: if record {
            Timeline::new()
        } else {
            Timeline::summary_only()
        },
        hw,
        d: shape.head_dim,
        bpe: shape.elem_bytes,
        depth: match scheme {
            Scheme::Unified => 1,
            Scheme::TwoLevel => 2,
        },
        syncs: 0,
        qk: Vec::new(),
        pv: Vec::new(),
        last_qk_of_tile: Vec::new(),
        lq: 0,
        hv: 0,
    };
    let mut it = units(shape, b_kv1, b_kv2);
    if let Some(first) = it.next() {
        b.front(&first);
        let mut cur = first;
        loop {
            let next = it.next();
            // hv of `cur` must survive the lookahead front() call
            let hv_cur = b.hv;
            if let Some(n) = &next {
                b.front(n);
            }
            let hv_next = b.hv;
            b.hv = hv_cur;
            b.back(&cur);
            b.hv = hv_next;
            match next {
                Some(n) => cur = n,
                None => break,
            }
        }
    }
    Ok(PipelineRun {
        scheme,
        b_kv1,
        b_kv2,
        sync_count: b.syncs,
        makespan: b.tl.makespan(),
        timeline: b.tl,
    })
}

/// Makespan and sync count without keeping the event list.
pub fn makespan_only(
    shape: &AttnShape,
    b_kv1: usize,
    b_kv2: usize,
    scheme: Scheme,
    hw: &HardwareModel,
) -> Result<(f64, usize), PipelineError> {
    let r = run(shape, b_kv1, b_kv2, scheme, hw, false)?;
    Ok((r.makespan, r.sync_count))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TilingRow {
    pub seq: usize,
    pub unified_makespan: f64,
    pub two_level_makespan: f64,
    pub reduction_pct: f64,
    pub unified_syncs: usize,
    pub two_level_syncs: usize,
}

/// Unified (`b_kv`) vs two-level (`b_kv1`, `b_kv2`) makespans over a sweep of
/// sequence lengths.
pub fn compare_tilings(
    shape: &AttnShape,
    seqs: &[usize],
    b_kv: usize,
    b_kv1: usize,
    b_kv2: usize,
    hw: &HardwareModel,
) -> Result<Vec<TilingRow>, PipelineError> {
    seqs.iter()
        .map(|&seq| {
            let sh = shape.with_seq(seq);
            let (u, us) = makespan_only(&sh, b_kv, b_kv, Scheme::Unified, hw)?;
            let (t, ts) = makespan_only(&sh, b_kv1, b_kv2, Scheme::TwoLevel, hw)?;
            Ok(TilingRow {
                seq,
                unified_makespan: u,
                two_level_makespan: t,
                reduction_pct: 100.0 * (u - t) / u,
                unified_syncs: us,
                two_level_syncs: ts,
            })
        })
        .collect()
}

pub const TILING_CSV_HEADER: &str =
    "seq,unified_makespan_s,two_level_makespan_s,reduction_pct,unified_syncs,two_level_syncs";

pub fn tiling_csv(rows: &[TilingRow]) -> String {
    let mut out = String::from(TILING_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{:.9e},{:.9e},{:.4},{},{}\n",
            r.seq,
            r.unified_makespan,
            r.two_level_makespan,
            r.reduction_pct,
            r.unified_syncs,
            r.two_level_syncs
        ));
    }
    out
}
