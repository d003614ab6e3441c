//! Cooperative host/device placement of the KV cache.
//!
//! The first `L_CPU` layers keep their KV cache in host memory; during
//! decoding their attention runs on host workers and only the single-token
//! Q/K/V and the attention result cross the bus. The remaining `L_GPU`
//! layers stay on the devices.
//!
//! Byte accounting over `n` devices, `w` bytes per scalar:
//!
//! ```text
//! M_w     = L (4 H1² + 2 H1 H2) w            (all devices together)
//! M_kv    = 2 w B H1 (S + O) / n              (one layer, one device)
//! M_mid   = 3 w B S H1 / n                    (one device)
//! M_vocab = V H1 w                            (one device)
//! L_GPU   = floor((n M_GPU - M_w - n M_mid - n M_vocab) / (n M_kv))
//! ```
//!
//! With `w = 2` these are `L(8H1² + 4H1H2)`, `4BH1(S+O)/n` and `6BSH1/n`.

use std::thread;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flash::{block_scores, SoftmaxState};
use crate::hardware::HardwareModel;
use crate::reference::KvCache;
use crate::tensor::{Tensor, TensorError};
use crate::timeline::{Resource, Timeline, Work};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OffloadError {
    #[error("invalid model config: {0}")]
    Model(String),
    #[error("worker count must be at least 1")]
    NoWorkers,
    #[error("invalid decode input: {0}")]
    Input(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: u64,
    pub h1: u64,
    pub h2: u64,
    pub heads: u64,
    pub head_dim: u64,
    pub vocab: u64,
    pub batch: u64,
    pub seq: u64,
    pub out_len: u64,
    #[serde(default = "default_bytes_per_scalar")]
    pub bytes_per_scalar: u64,
}

fn default_bytes_per_scalar() -> u64 {
    2
}

impl ModelConfig {
    /// 40 layers, 40 heads of 128, FFN 20480; vocabulary and workload are
    /// caller choices.
    pub fn pangu_38b(vocab: u64, batch: u64, seq: u64, out_len: u64) -> Self {
        Self {
            layers: 40,
            h1: 40 * 128,
            h2: 20480,
            heads: 40,
            head_dim: 128,
            vocab,
            batch,
            seq,
            out_len,
            bytes_per_scalar: 2,
        }
    }

    pub fn with_seq(self, seq: u64) -> Self {
        Self { seq, ..self }
    }

    pub fn validate(&self) -> Result<(), OffloadError> {
        let fields = [
            ("layers", self.layers),
            ("h1", self.h1),
            ("h2", self.h2),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("vocab", self.vocab),
            ("batch", self.batch),
            ("seq", self.seq),
            ("bytes_per_scalar", self.bytes_per_scalar),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(OffloadError::Model(format!("{name} must be positive")));
        }
        if self.h1 != self.heads * self.head_dim {
            return Err(OffloadError::Model(format!(
                "h1={} != heads·head_dim={}",
                self.h1,
                self.heads * self.head_dim
            )));
        }
        Ok(())
    }
}

/// How the vocabulary matrix is counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabBytes {
    /// `V·H1·w`, consistent with every other term.
    WidthAdjusted,
    /// `V·H1`, one byte per scalar.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryPlan {
    pub l_gpu: u64,
    pub l_cpu: u64,
    /// Unclamped floor quotient.
    pub l_gpu_raw: i128,
    /// `L_GPU` when the vocabulary is counted as `V·H1` bytes.
    pub l_gpu_literal_vocab: u64,
    pub vocab_bytes: VocabBytes,
    pub devices: u64,
    pub m_w: u128,
    pub m_kv_per_layer: f64,
    pub m_mid: f64,
    pub m_vocab: u128,
    pub m_vocab_literal: u128,
    pub gpu_bytes_per_device: f64,
    pub cpu_kv_bytes: u128,
    pub feasible: bool,
}

/// Integer terms of the placement formula, scaled by `n` so that they stay
/// exact: `(n·M_GPU, M_w, n·M_mid, n·M_vocab, n·M_kv)`.
fn scaled_terms(
    m: &ModelConfig,
    m_gpu: u64,
    n: u64,
    vocab: VocabBytes,
) -> (i128, i128, i128, i128, i128) {
    let w = m.bytes_per_scalar as i128;
    let (l, h1, h2) = (m.layers as i128, m.h1 as i128, m.h2 as i128);
    let (b, s, o) = (m.batch as i128, m.seq as i128, m.out_len as i128);
    let vocab_w = match vocab {
        VocabBytes::WidthAdjusted => w,
        VocabBytes::Literal => 1,
    };
    (
        n as i128 * m_gpu as i128,
        l * (4 * h1 * h1 + 2 * h1 * h2) * w,
        3 * w * b * s * h1,
        n as i128 * m.vocab as i128 * h1 * vocab_w,
        2 * w * b * h1 * (s + o),
    )
}

fn l_gpu_raw(m: &ModelConfig, m_gpu: u64, n: u64, vocab: VocabBytes) -> i128 {
    let (cap, w, mid, voc, kv) = scaled_terms(m, m_gpu, n, vocab);
    (cap - w - mid - voc).div_euclid(kv)
}

/// Splits layers between device and host KV storage for one device memory
/// `m_gpu`, host memory `m_cpu` and `n` devices.
pub fn plan(
    model: &ModelConfig,
    m_gpu: u64,
    m_cpu: u64,
    n: u64,
) -> Result<MemoryPlan, OffloadError> {
    plan_with(model, m_gpu, m_cpu, n, VocabBytes::WidthAdjusted)
}

pub fn plan_with(
    model: &ModelConfig,
    m_gpu: u64,
    m_cpu: u64,
    n: u64,
    vocab: VocabBytes,
) -> Result<MemoryPlan, OffloadError> {
    model.validate()?;
    if n == 0 {
        return Err(OffloadError::Model("device count must be positive".into()));
    }
    let l = model.layers as i128;
    let raw = l_gpu_raw(model, m_gpu, n, vocab);
    let l_gpu = raw.clamp(0, l) as u64;
    let l_gpu_literal_vocab = l_gpu_raw(model, m_gpu, n, VocabBytes::Literal).clamp(0, l) as u64;
    let l_cpu = model.layers - l_gpu;
    let (_, m_w, mid_n, _, kv_n) = scaled_terms(model, m_gpu, n, vocab);
    let nf = n as f64;
    let m_kv_per_layer = kv_n as f64 / nf;
    let m_mid = mid_n as f64 / nf;
    let m_vocab = (model.vocab * model.h1 * model.bytes_per_scalar) as u128;
    let m_vocab_literal = (model.vocab * model.h1) as u128;
    let vocab_counted = match vocab {
        VocabBytes::WidthAdjusted => m_vocab,
        VocabBytes::Literal => m_vocab_literal,
    };
    let gpu_bytes_per_device =
        m_w as f64 / nf + m_mid + vocab_counted as f64 + l_gpu as f64 * m_kv_per_layer;
    let cpu_kv_bytes = l_cpu as u128 * kv_n as u128;
    Ok(MemoryPlan {
        l_gpu,
        l_cpu,
        l_gpu_raw: raw,
        l_gpu_literal_vocab,
        vocab_bytes: vocab,
        devices: n,
        m_w: m_w as u128,
        m_kv_per_layer,
        m_mid,
        m_vocab,
        m_vocab_literal,
        gpu_bytes_per_device,
        cpu_kv_bytes,
        feasible: raw >= 0 && cpu_kv_bytes <= m_cpu as u128,
    })
}

/// Position block used by the host attention loop.
const CPU_KV_BLOCK: usize = 256;

/// Single-query attention of `q: [B, 1, N, D]` against a `[B, S, N·D]` cache,
/// split over `workers` host threads by (batch, head). Each head runs the
/// same blocked online-softmax loop whatever the worker count, so the result
/// is bitwise independent of `workers`.
pub fn cpu_decode_attention(
    q: &Tensor,
    cache: &KvCache,
    workers: usize,
) -> Result<Tensor, OffloadError> {
    if workers == 0 {
        return Err(OffloadError::NoWorkers);
    }
    let (b, one, n, d) = q.dims4("cpu_decode_attention")?;
    if one != 1 {
        return Err(OffloadError::Input(format!(
            "query must be [B, 1, N, D], got {:?}",
            q.shape()
        )));
    }
    if cache.is_empty() || cache.batch() != b || cache.hidden() != n * d {
        return Err(OffloadError::Input(format!(
            "cache [{}, {}, {}] does not match query {:?}",
            cache.batch(),
            cache.len(),
            cache.hidden(),
            q.shape()
        )));
    }
    let s = cache.len();
    let tasks = b * n;
    let head = |task: usize| -> Vec<f64> {
        let (bi, h) = (task / n, task % n);
        let q_row = &q.data()[task * d..(task + 1) * d];
        let gather = |t: &Tensor, p0: usize, p1: usize| -> Vec<f64> {
            let mut out = Vec::with_capacity((p1 - p0) * d);
            for p in p0..p1 {
                let base = (bi * s + p) * n * d + h * d;
                out.extend_from_slice(&t.data()[base..base + d]);
            }
            out
        };
        let mut state = SoftmaxState::new(1, d);
        for p0 in (0..s).step_by(CPU_KV_BLOCK) {
            let p1 = (p0 + CPU_KV_BLOCK).min(s);
            let scores = block_scores(q_row, &gather(cache.k(), p0, p1), d);
            state.update(&scores, &gather(cache.v(), p0, p1));
        }
        state.finalize()
    };
    let per_worker = tasks.div_ceil(workers);
    let mut out = vec![0.0; tasks * d];
    thread::scope(|scope| {
        let handles: Vec<_> = out
            .chunks_mut((per_worker * d).max(1))
            .enumerate()
            .map(|(w, chunk)| {
                let head = &head;
                scope.spawn(move || {
                    for (i, dst) in chunk.chunks_mut(d).enumerate() {
                        dst.copy_from_slice(&head(w * per_worker + i));
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().expect("decode worker panicked");
        }
    });
    Ok(Tensor::from_vec([b, 1, n, d], out)?)
}

/// Per-layer decode latency of one device, for both strategies.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyRow {
    pub seq: u64,
    pub l_cpu: u64,
    /// `None` when no layer needs offloading.
    pub upload: Option<f64>,
    pub gpu_calc: f64,
    pub classical_total: f64,
    pub cpu_calc: Option<f64>,
    pub off_upload: Option<f64>,
    pub cooperative_total: Option<f64>,
}

impl LatencyRow {
    pub fn speedup(&self) -> Option<f64> {
        self.cooperative_total.map(|c| self.classical_total / c)
    }
}

/// Decode-step attention cost of one layer on one device.
pub fn decode_latency_compare(
    model: &ModelConfig,
    plan: &MemoryPlan,
    hw: &HardwareModel,
) -> LatencyRow {
    let n = plan.devices as f64;
    let (b, s, h1, w) = (
        model.batch as f64,
        model.seq as f64,
        model.h1 as f64,
        model.bytes_per_scalar as f64,
    );
    let kv_bytes = 2.0 * w * b * h1 * s / n;
    let flops = 4.0 * b * s * h1 / n;
    let gpu_calc = hw.launch_latency + (flops / hw.cube_rate).max(kv_bytes / hw.gm_bw);
    if plan.l_cpu == 0 {
        return LatencyRow {
            seq: model.seq,
            l_cpu: 0,
            upload: None,
            gpu_calc,
            classical_total: gpu_calc,
            cpu_calc: None,
            off_upload: None,
            cooperative_total: None,
        };
    }
    let upload = kv_bytes / hw.pcie_bw + hw.pcie_latency;
    let cpu_calc = flops / hw.cpu_rate;
    // Q, K, V down and the attention result up, each B·1·H1/n scalars.
    let off_upload = 4.0 * w * b * h1 / n / hw.pcie_bw + 2.0 * hw.pcie_latency;
    LatencyRow {
        seq: model.seq,
        l_cpu: plan.l_cpu,
        upload: Some(upload),
        gpu_calc,
        classical_total: upload + gpu_calc,
        cpu_calc: Some(cpu_calc),
        off_upload: Some(off_upload),
        cooperative_total: Some(cpu_calc + off_upload),
    }
}

/// Plans and compares every sequence length of a sweep.
pub fn latency_table(
    model: &ModelConfig,
    seqs: &[u64],
    m_gpu: u64,
    m_cpu: u64,
    n: u64,
    hw: &HardwareModel,
) -> Result<Vec<LatencyRow>, OffloadError> {
    seqs.iter()
        .map(|&s| {
            let m = model.with_seq(s);
            let p = plan(&m, m_gpu, m_cpu, n)?;
            Ok(decode_latency_compare(&m, &p, hw))
        })
        .collect()
}

pub const LATENCY_CSV_HEADER: &str =
    "Seq_length,Upload,GPU_Calc,Total,CPU_Calc,Off_Upload,Total,GPU_Calc";

/// Millisecond table; `-` marks strategies that are not needed.
pub fn latency_csv(rows: &[LatencyRow]) -> String {
    let ms = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |v| format!("{:.4}", v * 1e3));
    let mut out = String::from(LATENCY_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.seq,
            ms(r.upload),
            ms(Some(r.gpu_calc)),
            ms(Some(r.classical_total)),
            ms(r.cpu_calc),
            ms(r.off_upload),
            ms(r.cooperative_total),
            ms(Some(r.gpu_calc)),
        ));
    }
    out
}

/// Per-layer prefill durations on one device: K/V projection, the rest of
/// the layer, and the host offload of that layer's K/V.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrefillTimes {
    pub kv_proj: f64,
    pub rest: f64,
    pub offload: f64,
}

pub fn prefill_times(model: &ModelConfig, n: u64, hw: &HardwareModel) -> PrefillTimes {
    let n = n.max(1) as f64;
    let (b, s, h1, h2, w) = (
        model.batch as f64,
        model.seq as f64,
        model.h1 as f64,
        model.h2 as f64,
        model.bytes_per_scalar as f64,
    );
    let kv_flops = 2.0 * 2.0 * b * s * h1 * h1 / n;
    let rest_flops =
        (2.0 * 2.0 * b * s * h1 * h1 + 4.0 * b * s * s * h1 + 4.0 * b * s * h1 * h2) / n;
    let kv_bytes = 2.0 * w * b * s * h1 / n;
    PrefillTimes {
        kv_proj: kv_flops / hw.cube_rate,
        rest: rest_flops / hw.cube_rate,
        offload: kv_bytes / hw.pcie_bw + hw.pcie_latency,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrefillOverlap {
    pub timeline: Timeline,
    /// `Σ max(0, offload_end - layer_end)` over offloaded layers.
    pub added_latency: f64,
    pub compute_only: f64,
}

/// Prefill with asynchronous K/V offload for the first `L_CPU` layers.
/// Each offload starts once its layer's K/V projection ends; the next
/// layer reuses the staging buffer and waits for the offload to finish.
pub fn prefill_offload_overlap(
    model: &ModelConfig,
    plan: &MemoryPlan,
    hw: &HardwareModel,
) -> PrefillOverlap {
    prefill_overlap_from_times(
        prefill_times(model, plan.devices, hw),
        model.layers,
        plan.l_cpu,
    )
}

pub fn prefill_overlap_from_times(t: PrefillTimes, layers: u64, l_cpu: u64) -> PrefillOverlap {
    let mut tl = Timeline::new();
    let mut added = 0.0;
    let mut gate = Vec::new();
    for layer in 0..layers {
        let kv = tl.push(Resource::Compute, "KV_PROJ", t.kv_proj, &gate, Work::None);
        let rest = tl.push(Resource::Compute, "LAYER_REST", t.rest, &[kv], Work::None);
        gate = vec![rest];
        if layer < l_cpu {
            let off = tl.push(Resource::Dma, "KV_OFFLOAD", t.offload, &[kv], Work::None);
            added += (tl.end(off) - tl.end(rest)).max(0.0);
            gate.push(off);
        }
    }
    PrefillOverlap {
        timeline: tl,
        added_latency: added,
        compute_only: layers as f64 * (t.kv_proj + t.rest),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::std_attention;

    const GIB: u64 = 1 << 30;

    #[test]
    fn huge_memory_keeps_everything_on_device() {
        let m = ModelConfig::pangu_38b(100_000, 1, 4096, 128);
        let p = plan(&m, 1 << 50, 0, 8).unwrap();
        assert_eq!((p.l_gpu, p.l_cpu), (40, 0));
        assert!(p.feasible);
    }

    #[test]
    fn tiny_memory_moves_everything_to_host() {
        let m = ModelConfig::pangu_38b(100_000, 1, 4096, 128);
        let p = plan(&m, GIB, 1 << 50, 8).unwrap();
        assert_eq!((p.l_gpu, p.l_cpu), (0, 40));
        assert!(p.l_gpu_raw < 0);
        assert!(!p.feasible);
    }

    #[test]
    fn rejects_bad_models() {
        let mut m = ModelConfig::pangu_38b(100_000, 1, 4096, 128);
        m.h1 = 5000;
        assert!(plan(&m, GIB, GIB, 8).is_err());
        let m = ModelConfig::pangu_38b(100_000, 1, 4096, 128);
        assert!(plan(&m, GIB, GIB, 0).is_err());
    }

    #[test]
    fn literal_vocab_is_reported_alongside() {
        let m = ModelConfig::pangu_38b(100_000, 1, 16384, 128);
        let p = plan(&m, 6 * GIB, 1 << 40, 8).unwrap();
        assert_eq!(p.m_vocab, 2 * p.m_vocab_literal);
        assert!(p.l_gpu_literal_vocab >= p.l_gpu);
    }

    #[test]
    fn off_upload_constant_across_lengths() {
        let hw = HardwareModel::v100_like();
        let m = ModelConfig::pangu_38b(100_000, 1, 16384, 128);
        let rows = latency_table(&m, &[16384, 65536, 262144], 2 * GIB, 1 << 42, 8, &hw).unwrap();
        assert!(rows
            .iter()
            .all(|r| r.off_upload == rows[0].off_upload && r.off_upload.is_some()));
    }

    #[test]
    fn cpu_attention_single_entry_cache() {
        let q = Tensor::random([1, 1, 2, 4], 1);
        let kv = Tensor::random([1, 1, 8], 2);
        let cache = KvCache::from_tensors(Tensor::random([1, 1, 8], 3), kv.clone()).unwrap();
        let o = cpu_decode_attention(&q, &cache, 3).unwrap();
        assert!(
            o.reshape([1, 8])
                .unwrap()
                .max_abs_diff(&kv.reshape([1, 8]).unwrap())
                .unwrap()
                < 1e-15
        );
        assert_eq!(
            cpu_decode_attention(&q, &cache, 0),
            Err(OffloadError::NoWorkers)
        );
    }

    #[test]
    fn cpu_attention_matches_reference_and_is_worker_invariant() {
        let (b, n, d, s) = (2, 4, 32, 512);
        let q = Tensor::random([b, 1, n, d], 10);
        let cache = KvCache::from_tensors(
            Tensor::random([b, s, n * d], 11),
            Tensor::random([b, s, n * d], 12),
        )
        .unwrap();
        let one = cpu_decode_attention(&q, &cache, 1).unwrap();
        for w in [2, 3, 8, 64] {
            assert!(one.bitwise_eq(&cpu_decode_attention(&q, &cache, w).unwrap()));
        }
        let k4 = cache.k().clone().reshape([b, s, n, d]).unwrap();
        let v4 = cache.v().clone().reshape([b, s, n, d]).unwrap();
        let e = std_attention(&q, &k4, &v4, true).unwrap();
        assert!(one.max_abs_diff(&e).unwrap() <= 1e-12);
    }

    #[test]
    fn prefill_overlap_arithmetic() {
        let base = PrefillTimes {
            kv_proj: 1.0,
            rest: 4.0,
            offload: 0.0,
        };
        let free = prefill_overlap_from_times(base, 5, 3);
        assert_eq!(free.added_latency, 0.0);
        assert_eq!(free.timeline.makespan(), free.compute_only);
        let exact = prefill_overlap_from_times(
            PrefillTimes {
                offload: 4.0,
                ..base
            },
            5,
            3,
        );
        assert_eq!(exact.added_latency, 0.0);
        assert_eq!(exact.timeline.makespan(), exact.compute_only);
        let double = prefill_overlap_from_times(
            PrefillTimes {
                offload: 8.0,
                ..base
            },
            5,
            3,
        );
        assert_eq!(double.added_latency, 3.0 * 4.0);
        assert_eq!(double.timeline.makespan(), double.compute_only + 12.0);
        double.timeline.validate().unwrap();
    }

    #[test]
    fn infinite_pcie_hides_offload() {
        let mut hw = HardwareModel::v100_like();
        hw.pcie_bw = f64::INFINITY;
        hw.pcie_latency = 0.0;
        let m = ModelConfig::pangu_38b(100_000, 1, 32768, 128);
        let p = plan(&m, 5 * GIB, 1 << 42, 8).unwrap();
        assert!(p.l_cpu > 0);
        assert_eq!(prefill_offload_overlap(&m, &p, &hw).added_latency, 0.0);
    }
}
