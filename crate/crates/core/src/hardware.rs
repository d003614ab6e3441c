//! Parameterized hardware cost model shared by every simulator.
//!
//! Rates are per second, latencies in seconds, capacities in bytes. Rates
//! and bandwidths may be `inf` to switch a cost off.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const HW_SCHEMA_VERSION: u32 = 1;

const NPU_DEFAULT: &str = include_str!("../profiles/npu_default.toml");
const V100_LIKE: &str = include_str!("../profiles/v100_like.toml");

#[derive(Debug, Error)]
pub enum HardwareError {
    #[error("cannot read hardware profile {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed hardware profile: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("unsupported hardware schema_version {0} (expected {HW_SCHEMA_VERSION})")]
    Schema(u32),
    #[error("invalid hardware parameter {field}: {detail}")]
    Invalid { field: &'static str, detail: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareModel {
    pub schema_version: u32,
    pub name: String,
    #[serde(default)]
    pub note: String,
    /// Matrix unit throughput, FLOP/s.
    pub cube_rate: f64,
    /// Element-wise unit throughput, elements/s.
    pub vector_rate: f64,
    /// Fixed cost of one matrix/element-wise unit handoff.
    pub sync_latency: f64,
    /// Global memory bandwidth seen by block loads and stores.
    pub gm_bw: f64,
    /// Fixed cost of one DMA transfer.
    pub dma_latency: f64,
    /// Shared-buffer bandwidth used by unit handoffs.
    pub l2_bw: f64,
    pub l1_capacity: u64,
    pub l0_capacity: u64,
    /// Per-link bandwidth between devices.
    pub interconnect_bw: f64,
    pub interconnect_latency: f64,
    pub pcie_bw: f64,
    pub pcie_latency: f64,
    /// Host attention throughput, FLOP/s.
    pub cpu_rate: f64,
    /// Independent communication channels that run beside compute.
    pub sdma_channels: usize,
    /// Fixed cost of one device kernel launch.
    pub launch_latency: f64,
}

impl HardwareModel {
    /// Fictional NPU-like profile used by the pipeline and allreduce
    /// experiments.
    pub fn npu_default() -> Self {
        Self::from_toml_str(NPU_DEFAULT).expect("embedded NPU profile is valid")
    }

    /// Fictional eight-GPU host profile used by the offload experiments.
    pub fn v100_like() -> Self {
        Self::from_toml_str(V100_LIKE).expect("embedded V100-like profile is valid")
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "npu_default" => Some(Self::npu_default()),
            "v100_like" => Some(Self::v100_like()),
            _ => None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, HardwareError> {
        let hw: Self = toml::from_str(text)?;
        hw.validate()?;
        Ok(hw)
    }

    pub fn from_path(path: &Path) -> Result<Self, HardwareError> {
        let text = std::fs::read_to_string(path).map_err(|source| HardwareError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), HardwareError> {
        if self.schema_version != HW_SCHEMA_VERSION {
            return Err(HardwareError::Schema(self.schema_version));
        }
        let positive = [
            ("cube_rate", self.cube_rate),
            ("vector_rate", self.vector_rate),
            ("gm_bw", self.gm_bw),
            ("l2_bw", self.l2_bw),
            ("interconnect_bw", self.interconnect_bw),
            ("pcie_bw", self.pcie_bw),
            ("cpu_rate", self.cpu_rate),
        ];
        for (field, x) in positive {
            if x.is_nan() || x <= 0.0 {
                return Err(HardwareError::Invalid {
                    field,
                    detail: format!("must be > 0, got {x}"),
                });
            }
        }
        let latencies = [
            ("sync_latency", self.sync_latency),
            ("dma_latency", self.dma_latency),
            ("interconnect_latency", self.interconnect_latency),
            ("pcie_latency", self.pcie_latency),
            ("launch_latency", self.launch_latency),
        ];
        for (field, x) in latencies {
            if !x.is_finite() || x < 0.0 {
                return Err(HardwareError::Invalid {
                    field,
                    detail: format!("must be finite and >= 0, got {x}"),
                });
            }
        }
        for (field, x) in [
            ("l1_capacity", self.l1_capacity),
            ("l0_capacity", self.l0_capacity),
        ] {
            if x == 0 {
                return Err(HardwareError::Invalid {
                    field,
                    detail: "must be > 0".into(),
                });
            }
        }
        if self.sdma_channels == 0 {
            return Err(HardwareError::Invalid {
                field: "sdma_channels",
                detail: "must be >= 1".into(),
            });
        }
        Ok(())
    }

    pub fn gemm_time(&self, m: usize, n: usize, k: usize) -> f64 {
        2.0 * m as f64 * n as f64 * k as f64 / self.cube_rate
    }

    pub fn vector_time(&self, elements: usize) -> f64 {
        elements as f64 / self.vector_rate
    }

    pub fn dma_time(&self, bytes: u64) -> f64 {
        bytes as f64 / self.gm_bw + self.dma_latency
    }

    pub fn handoff_time(&self, bytes: u64) -> f64 {
        self.sync_latency + bytes as f64 / self.l2_bw
    }

    pub fn pcie_time(&self, bytes: u64) -> f64 {
        bytes as f64 / self.pcie_bw + self.pcie_latency
    }

    /// Ring allreduce over `n` devices: `2(n-1)/n · bytes/bw + 2(n-1)·lat`.
    pub fn ring_allreduce_time(&self, n: usize, bytes: u64) -> f64 {
        if n <= 1 {
            return 0.0;
        }
        let steps = 2.0 * (n - 1) as f64;
        steps / n as f64 * bytes as f64 / self.interconnect_bw + steps * self.interconnect_latency
    }
}
