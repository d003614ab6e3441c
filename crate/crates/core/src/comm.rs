//! Tensor-parallel attention + output projection with per-block allreduce.
//!
//! Devices are logical shards in one process. Device `d` owns a contiguous
//! range of heads and the matching rows of `W_O`, so its partial output is
//! `attention(heads_d) · W_O[rows_d, :]`; the full output is the sum over
//! devices. The sum is always taken in device order `0..n`, starting from
//! device 0's partial, so splitting rows into blocks changes nothing
//! numerically.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hardware::HardwareModel;
use crate::reference::{attention_rows, AttentionError};
use crate::tensor::{matmul, Tensor, TensorError};
use crate::timeline::{Resource, Timeline, Work};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CommError {
    #[error("invalid cluster: {0}")]
    Cluster(String),
    #[error("cannot split {total} rows into {blocks} non-empty blocks")]
    TooFewRows { total: usize, blocks: usize },
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    pub n: usize,
    pub heads_per_device: usize,
    /// Extents of consecutive `B·S`-row blocks; the first is the smallest.
    pub block_rows: Vec<usize>,
}

impl ClusterConfig {
    pub fn new(n: usize, heads: usize, block_rows: Vec<usize>) -> Result<Self, CommError> {
        if n == 0 || !heads.is_multiple_of(n) {
            return Err(CommError::Cluster(format!(
                "{n} devices do not divide {heads} heads"
            )));
        }
        let c = Self {
            n,
            heads_per_device: heads / n,
            block_rows,
        };
        c.validate_blocks()?;
        Ok(c)
    }

    pub fn heads(&self) -> usize {
        self.n * self.heads_per_device
    }

    pub fn total_rows(&self) -> usize {
        self.block_rows.iter().sum()
    }

    fn validate_blocks(&self) -> Result<(), CommError> {
        let first = *self
            .block_rows
            .first()
            .ok_or_else(|| CommError::Cluster("empty block list".into()))?;
        if self.block_rows.contains(&0) {
            return Err(CommError::Cluster("blocks must be non-empty".into()));
        }
        if self.block_rows.iter().any(|&r| r < first) {
            return Err(CommError::Cluster(format!(
                "first block ({first} rows) must not exceed any other block"
            )));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CommError> {
        if self.n == 0 || self.heads_per_device == 0 {
            return Err(CommError::Cluster(
                "device and head counts must be positive".into(),
            ));
        }
        self.validate_blocks()
    }
}

/// Heads `[first, first + count)` of a `[B, S, N, D]` tensor.
fn shard_heads(t: &Tensor, first: usize, count: usize) -> Result<Tensor, TensorError> {
    let s = t.shape();
    let (b, seq, n, d) = (s[0], s[1], s[2], s[3]);
    let data = t.data();
    let mut out = Vec::with_capacity(b * seq * count * d);
    for bs in 0..b * seq {
        let base = (bs * n + first) * d;
        out.extend_from_slice(&data[base..base + count * d]);
    }
    Tensor::from_vec([b, seq, count, d], out)
}

/// Rows `[first, first + count)` of a matrix.
fn row_slice(w: &Tensor, first: usize, count: usize) -> Result<Tensor, TensorError> {
    let cols = w.shape()[1];
    Tensor::from_vec(
        [count, cols],
        w.data()[first * cols..(first + count) * cols].to_vec(),
    )
}

struct Shard {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    w_o: Tensor,
}

/// Attention and output projection inputs for a tensor-parallel layer.
pub struct TpInputs<'a> {
    /// `[B, S, N, D]`.
    pub q: &'a Tensor,
    pub k: &'a Tensor,
    pub v: &'a Tensor,
    /// `[N·D, H]`.
    pub w_o: &'a Tensor,
    pub causal: bool,
}

impl TpInputs<'_> {
    fn shards(&self, cluster: &ClusterConfig) -> Result<Vec<Shard>, CommError> {
        cluster.validate()?;
        let (b, s, n, d) = self.q.dims4("tp_attention_linear")?;
        if n != cluster.heads() {
            return Err(CommError::Cluster(format!(
                "cluster covers {} heads but Q has {n}",
                cluster.heads()
            )));
        }
        if cluster.total_rows() != b * s {
            return Err(CommError::Cluster(format!(
                "blocks cover {} rows but B·S = {}",
                cluster.total_rows(),
                b * s
            )));
        }
        if self.w_o.rank() != 2 || self.w_o.shape()[0] != n * d {
            return Err(CommError::Cluster(format!(
                "W_O {:?} does not have {} input rows",
                self.w_o.shape(),
                n * d
            )));
        }
        let hpd = cluster.heads_per_device;
        (0..cluster.n)
            .map(|dev| {
                Ok(Shard {
                    q: shard_heads(self.q, dev * hpd, hpd)?,
                    k: shard_heads(self.k, dev * hpd, hpd)?,
                    v: shard_heads(self.v, dev * hpd, hpd)?,
                    w_o: row_slice(self.w_o, dev * hpd * d, hpd * d)?,
                })
            })
            .collect()
    }
}

/// Device partial for flattened rows `[r0, r0 + rows)`: `[rows, H]`.
fn partial(sh: &Shard, causal: bool, r0: usize, rows: usize) -> Result<Tensor, CommError> {
    let a = attention_rows(&sh.q, &sh.k, &sh.v, causal, r0..r0 + rows)?;
    let width = sh.w_o.shape()[0];
    Ok(matmul(&a.reshape([rows, width])?, &sh.w_o)?)
}

/// Sums device partials in order `0..n`.
fn reduce_in_order(parts: Vec<Tensor>) -> Result<Tensor, CommError> {
    let mut it = parts.into_iter();
    let mut acc = it
        .next()
        .ok_or_else(|| CommError::Cluster("no devices".into()))?;
    for p in it {
        for (a, x) in acc.data_mut().iter_mut().zip(p.data()) {
            *a += x;
        }
    }
    Ok(acc)
}

/// Monolithic scheme: each device computes all rows, then one allreduce.
/// Returns `[B·S, H]`.
pub fn tp_attention_linear(
    inputs: &TpInputs,
    cluster: &ClusterConfig,
) -> Result<Tensor, CommError> {
    let shards = inputs.shards(cluster)?;
    let rows = cluster.total_rows();
    let parts = shards
        .par_iter()
        .map(|sh| partial(sh, inputs.causal, 0, rows))
        .collect::<Result<Vec<_>, _>>()?;
    reduce_in_order(parts)
}

/// Tiled scheme: each row block is computed and reduced on its own, then the
/// reduced blocks are concatenated. Returns `[B·S, H]`.
pub fn tp_attention_linear_tiled(
    inputs: &TpInputs,
    cluster: &ClusterConfig,
) -> Result<Tensor, CommError> {
    let shards = inputs.shards(cluster)?;
    let h = inputs.w_o.shape()[1];
    let mut out = Vec::with_capacity(cluster.total_rows() * h);
    let mut r0 = 0;
    for &rows in &cluster.block_rows {
        let parts = shards
            .par_iter()
            .map(|sh| partial(sh, inputs.causal, r0, rows))
            .collect::<Result<Vec<_>, _>>()?;
        out.extend_from_slice(reduce_in_order(parts)?.data());
        r0 += rows;
    }
    Ok(Tensor::from_vec([cluster.total_rows(), h], out)?)
}

/// Per-device cost of the fused attention + projection for one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverlapWorkload {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub devices: usize,
    #[serde(default = "default_elem_bytes")]
    pub elem_bytes: u64,
}

fn default_elem_bytes() -> u64 {
    2
}

impl OverlapWorkload {
    pub fn with_seq(self, seq: usize) -> Self {
        Self { seq, ..self }
    }

    pub fn total_rows(&self) -> usize {
        self.batch * self.seq
    }

    pub fn hidden(&self) -> usize {
        self.heads * self.head_dim
    }

    fn local_width(&self) -> usize {
        self.heads / self.devices.max(1) * self.head_dim
    }

    /// Device FLOPs per output row: non-causal attention over `S` keys plus
    /// the sharded projection.
    pub fn flops_per_row(&self) -> f64 {
        let w = self.local_width() as f64;
        4.0 * self.seq as f64 * w + 2.0 * w * self.hidden() as f64
    }

    pub fn bytes_per_row(&self) -> u64 {
        self.hidden() as u64 * self.elem_bytes
    }

    pub fn compute_time(&self, rows: usize, hw: &HardwareModel) -> f64 {
        hw.launch_latency + rows as f64 * self.flops_per_row() / hw.cube_rate
    }

    pub fn comm_time(&self, rows: usize, hw: &HardwareModel) -> f64 {
        hw.ring_allreduce_time(self.devices, rows as u64 * self.bytes_per_row())
    }
}

/// Splits `total_rows` into `n_blocks` blocks. The first block is sized so
/// that its allreduce lasts as long as the compute of each later block,
/// which keeps the link busy with the least exposed compute; it is clamped
/// to `[1, total_rows / n_blocks]`. The rest is split evenly, with leftover
/// rows going to the last blocks.
pub fn choose_block_rows(
    total_rows: usize,
    n_blocks: usize,
    work: &OverlapWorkload,
    hw: &HardwareModel,
) -> Result<Vec<usize>, CommError> {
    if n_blocks == 0 || total_rows < n_blocks {
        return Err(CommError::TooFewRows {
            total: total_rows,
            blocks: n_blocks,
        });
    }
    if n_blocks == 1 {
        return Ok(vec![total_rows]);
    }
    let a = work.flops_per_row() / hw.cube_rate;
    let c = 2.0 * (work.devices.saturating_sub(1)) as f64 / work.devices.max(1) as f64
        * work.bytes_per_row() as f64
        / hw.interconnect_bw;
    let even = total_rows / n_blocks;
    let k = (n_blocks - 1) as f64;
    let ideal = a * total_rows as f64 / (c * k + a);
    let first = if ideal.is_finite() {
        (ideal.floor() as usize).clamp(1, even)
    } else {
        even
    };
    let rest = total_rows - first;
    let base = rest / (n_blocks - 1);
    let extra = rest % (n_blocks - 1);
    let mut rows = vec![first];
    rows.extend((0..n_blocks - 1).map(|i| base + usize::from(i >= n_blocks - 1 - extra)));
    Ok(rows)
}

/// Per-block compute followed by a per-block ring allreduce on link
/// `k mod sdma_channels`; block `k`'s allreduce overlaps block `k+1`'s
/// compute.
pub fn tiled_allreduce_schedule(
    cluster: &ClusterConfig,
    work: &OverlapWorkload,
    hw: &HardwareModel,
) -> Result<Timeline, CommError> {
    cluster.validate()?;
    let mut tl = Timeline::new();
    for (k, &rows) in cluster.block_rows.iter().enumerate() {
        let flops = rows as f64 * work.flops_per_row();
        let c = tl.push(
            Resource::Compute,
            "ATTN_LINEAR",
            work.compute_time(rows, hw),
            &[],
            Work::Flops(flops),
        );
        let bytes = rows as u64 * work.bytes_per_row();
        tl.push(
            Resource::Link(k % hw.sdma_channels),
            "B_ALLREDUCE",
            work.comm_time(rows, hw),
            &[c],
            Work::Bytes(bytes as f64),
        );
    }
    Ok(tl)
}

/// The same per-block compute followed by one allreduce of all rows.
pub fn monolithic_allreduce_schedule(
    cluster: &ClusterConfig,
    work: &OverlapWorkload,
    hw: &HardwareModel,
) -> Result<Timeline, CommError> {
    cluster.validate()?;
    let mut tl = Timeline::new();
    let mut last = None;
    for &rows in &cluster.block_rows {
        let flops = rows as f64 * work.flops_per_row();
        last = Some(tl.push(
            Resource::Compute,
            "ATTN_LINEAR",
            work.compute_time(rows, hw),
            &[],
            Work::Flops(flops),
        ));
    }
    let total = cluster.total_rows();
    let bytes = total as u64 * work.bytes_per_row();
    tl.push(
        Resource::Link(0),
        "ALLREDUCE",
        work.comm_time(total, hw),
        &last.into_iter().collect::<Vec<_>>(),
        Work::Bytes(bytes as f64),
    );
    Ok(tl)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AllreduceRow {
    pub seq: usize,
    pub baseline: f64,
    pub tiled: f64,
    pub speedup: f64,
    pub first_block_rows: usize,
}

/// Monolithic vs tiled makespans over a sweep of sequence lengths, with
/// blocks from [`choose_block_rows`].
pub fn compare_allreduce(
    work: &OverlapWorkload,
    seqs: &[usize],
    n_blocks: usize,
    hw: &HardwareModel,
) -> Result<Vec<AllreduceRow>, CommError> {
    if work.devices == 0 || !work.heads.is_multiple_of(work.devices) {
        return Err(CommError::Cluster(format!(
            "{} devices do not divide {} heads",
            work.devices, work.heads
        )));
    }
    seqs.iter()
        .map(|&seq| {
            let w = work.with_seq(seq);
            let blocks = choose_block_rows(w.total_rows(), n_blocks, &w, hw)?;
            let cluster = ClusterConfig::new(w.devices, w.heads, blocks)?;
            let baseline = monolithic_allreduce_schedule(&cluster, &w, hw)?.makespan();
            let tiled = tiled_allreduce_schedule(&cluster, &w, hw)?.makespan();
            Ok(AllreduceRow {
                seq,
                baseline,
                tiled,
                speedup: baseline / tiled,
                first_block_rows: cluster.block_rows[0],
            })
        })
        .collect()
}

pub const ALLREDUCE_CSV_HEADER: &str =
    "seq,baseline_makespan_s,tiled_makespan_s,speedup,first_block_rows";

pub fn allreduce_csv(rows: &[AllreduceRow]) -> String {
    let mut out = String::from(ALLREDUCE_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{:.9e},{:.9e},{:.4},{}\n",
            r.seq, r.baseline, r.tiled, r.speedup, r.first_block_rows
        ));
    }
    out
}
