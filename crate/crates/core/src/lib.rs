//! Tiled attention kernels, causal tiling masks, and desk-scale cost-model
//! simulators for accelerator pipelines, tensor-parallel communication
//! overlap, KV-cache offloading, and MMA fragment layouts.

pub mod comm;
pub mod flash;
pub mod hardware;
pub mod layout;
pub mod mask;
pub mod offload;
pub mod pipeline;
pub mod reference;
pub mod tensor;
pub mod timeline;

pub use comm::{
    choose_block_rows, compare_allreduce, monolithic_allreduce_schedule, tiled_allreduce_schedule,
    tp_attention_linear, tp_attention_linear_tiled, AllreduceRow, ClusterConfig, CommError,
    OverlapWorkload, TpInputs,
};
pub use flash::{
    flash_attention, flash_attention_with, skip_stats, Execution, FlashError, SkipStats,
    SoftmaxState, TileConfig,
};
pub use hardware::{HardwareError, HardwareModel};
pub use layout::{
    check_b2b_compat, check_b2b_compat_map, convert_layout_acc_aregs, layout_eval, Compat,
    Conversion, FragmentMap, Instr, Layout, LayoutError, Role, RoleMap,
};
pub use mask::{build_mmask, mask_memory_bytes, BlockMaskKind, MMask, MaskError};
pub use offload::{
    cpu_decode_attention, decode_latency_compare, latency_table, plan, plan_with,
    prefill_offload_overlap, LatencyRow, MemoryPlan, ModelConfig, OffloadError, PrefillOverlap,
    VocabBytes,
};
pub use pipeline::{
    compare_tilings, simulate_two_level, simulate_unified, sync_count_formula, AttnShape,
    PipelineError, PipelineRun, TilingRow,
};
pub use reference::{
    attention_rows, decode_step, gelu, prefill_layer, std_attention, AttentionError, KvCache,
    LayerWeights, MASK_FILL,
};
pub use tensor::{matmul, softmax_rows, Element, Precision, Tensor, TensorError};
pub use timeline::{Event, EventId, Resource, Timeline, TimelineError, Work};
