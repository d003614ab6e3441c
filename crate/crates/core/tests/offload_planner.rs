use proptest::prelude::*;
use tiled_attn::offload::{
    latency_csv, prefill_overlap_from_times, PrefillTimes, LATENCY_CSV_HEADER,
};
use tiled_attn::{
    cpu_decode_attention, latency_table, plan, std_attention, HardwareModel, KvCache, ModelConfig,
    Tensor,
};

const GIB: u64 = 1 << 30;

/// Per-device byte ledger built by allocating every tensor by name. Sharded
/// tensors are kept multiplied by `n` so every figure stays an integer.
struct Ledger {
    n: u128,
    used_times_n: u128,
}

impl Ledger {
    fn sharded(&mut self, dims: &[u64], w: u64) {
        self.used_times_n += dims.iter().map(|&x| x as u128).product::<u128>() * w as u128;
    }

    fn replicated(&mut self, dims: &[u64], w: u64) {
        self.used_times_n += self.n * dims.iter().map(|&x| x as u128).product::<u128>() * w as u128;
    }
}

/// Layers whose KV cache fits on the devices, found by allocating one layer
/// at a time; `None` when the fixed allocations alone overflow.
fn simulate_placement(m: &ModelConfig, m_gpu: u64, n: u64) -> Option<u64> {
    let w = m.bytes_per_scalar;
    let mut dev = Ledger {
        n: n as u128,
        used_times_n: 0,
    };
    for _ in 0..m.layers {
        for dims in [
            [m.h1, m.h1],
            [m.h1, m.h1],
            [m.h1, m.h1],
            [m.h1, m.h1],
            [m.h1, m.h2],
            [m.h2, m.h1],
        ] {
            dev.sharded(&dims, w);
        }
    }
    for _ in 0..3 {
        dev.sharded(&[m.batch, m.seq, m.h1], w);
    }
    dev.replicated(&[m.vocab, m.h1], w);
    let cap = n as u128 * m_gpu as u128;
    if dev.used_times_n > cap {
        return None;
    }
    let mut layers = 0;
    while layers < m.layers {
        dev.sharded(&[m.batch, m.seq + m.out_len, m.h1], w);
        dev.sharded(&[m.batch, m.seq + m.out_len, m.h1], w);
        if dev.used_times_n > cap {
            break;
        }
        layers += 1;
    }
    Some(layers)
}

fn model() -> impl Strategy<Value = ModelConfig> {
    (
        1..=96u64,
        1..=64u64,
        prop::sample::select(vec![32u64, 64, 128]),
        1..=4u64,
        1..=200_000u64,
        1..=8u64,
        1..=(1u64 << 18),
        0..=1024u64,
        prop::sample::select(vec![1u64, 2, 4]),
    )
        .prop_map(
            |(layers, heads, head_dim, ffn, vocab, batch, seq, out_len, w)| ModelConfig {
                layers,
                h1: heads * head_dim,
                h2: heads * head_dim * ffn,
                heads,
                head_dim,
                vocab,
                batch,
                seq,
                out_len,
                bytes_per_scalar: w,
            },
        )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn plan_matches_byte_accounting(
        m in model(),
        n in prop::sample::select(vec![1u64, 2, 4, 8]),
        frac in 0.0f64..1.5,
        m_cpu in 0u64..(1 << 44),
    ) {
        // Device memory anywhere from nothing to beyond the whole model.
        let w = m.bytes_per_scalar as f64;
        let whole = (m.layers as f64 * (4.0 * (m.h1 * m.h1) as f64 + 2.0 * (m.h1 * m.h2) as f64) * w
            + 3.0 * w * (m.batch * m.seq * m.h1) as f64
            + m.layers as f64 * 2.0 * w * (m.batch * (m.seq + m.out_len) * m.h1) as f64)
            / n as f64
            + w * (m.vocab * m.h1) as f64;
        let m_gpu = (frac * whole) as u64;
        let p = plan(&m, m_gpu, m_cpu, n).unwrap();
        let sim = simulate_placement(&m, m_gpu, n);
        prop_assert_eq!(p.l_gpu, sim.unwrap_or(0));
        prop_assert_eq!(p.l_gpu + p.l_cpu, m.layers);
        let host_kv = p.l_cpu as u128 * 2 * m.bytes_per_scalar as u128
            * (m.batch * (m.seq + m.out_len) * m.h1) as u128;
        prop_assert_eq!(p.cpu_kv_bytes, host_kv);
        prop_assert_eq!(p.feasible, sim.is_some() && host_kv <= m_cpu as u128);
    }
}

/// Term-by-term accounting for the 38B configuration at 256K tokens.
#[test]
fn pangu_256k_on_eight_32g_devices() {
    let m = ModelConfig::pangu_38b(100_000, 1, 262_144, 128);
    let (l, h1, h2, w, s, o) = (40i128, 5120i128, 20480i128, 2i128, 262_144i128, 128i128);
    let weights = l * (4 * h1 * h1 + 2 * h1 * h2) * w;
    assert_eq!(weights, 25_165_824_000);
    let mid_times_n = 3 * w * s * h1;
    let vocab_times_n = 8 * 100_000 * h1 * w;
    let kv_times_n = 2 * w * h1 * (s + o);
    let cap_times_n = 8 * 32 * (1i128 << 30);
    let raw = (cap_times_n - weights - mid_times_n - vocab_times_n) / kv_times_n;
    assert_eq!(raw, 43);

    let p = plan(&m, 32 * GIB, 1 << 40, 8).unwrap();
    assert_eq!(p.l_gpu_raw, raw);
    assert_eq!((p.l_gpu, p.l_cpu), (40, 0));
    assert!(p.feasible);
}

fn table_model() -> ModelConfig {
    ModelConfig::pangu_38b(100_000, 1, 1024, 128)
}

const SEQS: [u64; 9] = [1024, 2048, 4096, 8192, 16384, 32768, 65536, 131072, 262144];

/// Device budget left for the KV cache in the latency sweep.
const EFFECTIVE_BUDGET: u64 = 5 * GIB + GIB / 2;

#[test]
fn latency_table_direction_and_structure() {
    let hw = HardwareModel::v100_like();
    let rows = latency_table(&table_model(), &SEQS, EFFECTIVE_BUDGET, 1 << 42, 8, &hw).unwrap();
    for r in &rows {
        if r.seq < 16384 {
            assert_eq!(r.l_cpu, 0);
            assert!(r.upload.is_none() && r.cooperative_total.is_none());
            assert_eq!(r.classical_total, r.gpu_calc);
        } else {
            let ratio = r.speedup().unwrap();
            assert!(r.cooperative_total.unwrap() < r.classical_total);
            assert!((1.2..=1.6).contains(&ratio), "seq {} ratio {ratio}", r.seq);
            assert_eq!(r.off_upload, rows[4].off_upload);
        }
    }
    let csv = latency_csv(&rows);
    assert_eq!(csv.lines().next(), Some(LATENCY_CSV_HEADER));
    assert!(csv.lines().nth(1).unwrap().contains(",-,"));
}

#[test]
fn decode_attention_at_4096_tokens() {
    let (b, n, d, s) = (1, 4, 32, 4096);
    let q = Tensor::random([b, 1, n, d], 21);
    let k = Tensor::random([b, s, n * d], 22);
    let v = Tensor::random([b, s, n * d], 23);
    let cache = KvCache::from_tensors(k.clone(), v.clone()).unwrap();
    let one = cpu_decode_attention(&q, &cache, 1).unwrap();
    for workers in [2, 3, 8, 64] {
        assert!(cpu_decode_attention(&q, &cache, workers)
            .unwrap()
            .bitwise_eq(&one));
    }
    let want = std_attention(
        &q,
        &k.reshape([b, s, n, d]).unwrap(),
        &v.reshape([b, s, n, d]).unwrap(),
        true,
    )
    .unwrap();
    assert!(one.max_abs_diff(&want).unwrap() <= 1e-12);
}

#[test]
fn prefill_overlap_arithmetic() {
    let t = |offload| PrefillTimes {
        kv_proj: 1.0,
        rest: 4.0,
        offload,
    };
    let free = prefill_overlap_from_times(t(0.0), 10, 10);
    assert_eq!(free.added_latency, 0.0);
    assert_eq!(free.timeline.makespan(), free.compute_only);

    let edge = prefill_overlap_from_times(t(4.0), 10, 10);
    assert_eq!(edge.added_latency, 0.0);
    assert_eq!(edge.timeline.makespan(), 50.0);

    let slow = prefill_overlap_from_times(t(8.0), 10, 6);
    assert_eq!(slow.added_latency, 6.0 * 4.0);
    assert_eq!(slow.timeline.makespan(), 50.0 + 24.0);
    slow.timeline.validate().unwrap();
}
