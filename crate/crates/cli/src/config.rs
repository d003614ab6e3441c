//! Experiment configuration: one versioned TOML file with a section per
//! subcommand. Unknown keys are rejected everywhere.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::Deserialize;
use tiled_attn::{HardwareModel, Instr, ModelConfig};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Shipped defaults, used when no `--config` is given.
pub const DEFAULT_CONFIG: &str = include_str!("../configs/default.toml");

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub attn_check: AttnCheckConfig,
    pub mask_demo: MaskDemoConfig,
    pub pipeline: PipelineConfig,
    pub allreduce: AllreduceConfig,
    pub offload: OffloadConfig,
    pub layout: LayoutConfig,
    /// Directory that relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttnCheckConfig {
    pub cases: usize,
    pub max_batch: usize,
    pub max_seq: usize,
    pub max_heads: usize,
    pub head_dims: Vec<usize>,
    /// Candidate `b_q` and `b_kv2` sizes; `b_kv1` is a multiple of `b_kv2`.
    pub block_sizes: Vec<usize>,
    pub max_level1_factor: usize,
    pub wide_tolerance: f64,
    pub narrow_tolerance: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskDemoConfig {
    /// `M` of the generator printed in the demo.
    pub mask_size: usize,
    pub seq: usize,
    pub block: usize,
    /// Block-count sweep for the skip table: `S = n_b · skip_block`.
    pub skip_blocks: Vec<usize>,
    pub skip_block: usize,
    pub memory_seq: u64,
    pub memory_mask_size: u64,
    pub bytes_per_element: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub profile: String,
    pub batch: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub q_block: usize,
    pub seqs: Vec<usize>,
    pub b_kv: usize,
    pub b_kv1: usize,
    pub b_kv2: usize,
    /// Length of the small run whose event timeline is written out.
    pub timeline_seq: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AllreduceConfig {
    pub profile: String,
    pub batch: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub devices: usize,
    pub n_blocks: usize,
    pub seqs: Vec<usize>,
    /// Small numeric instance that checks tiled against monolithic results.
    pub check: AllreduceCheckConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AllreduceCheckConfig {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub hidden_out: usize,
    pub devices: usize,
    pub n_blocks: usize,
    pub causal: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OffloadConfig {
    pub profile: String,
    pub devices: u64,
    pub host_memory: u64,
    /// Device memory for the standalone plan.
    pub device_memory: u64,
    /// Sequence length of the standalone plan.
    pub plan_seq: u64,
    /// Device memory left for the KV cache in the latency sweep.
    pub sweep_device_memory: u64,
    pub seqs: Vec<u64>,
    pub model: ModelConfig,
    pub decode: DecodeCheckConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeCheckConfig {
    pub batch: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub cache_len: usize,
    pub tolerance: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutConfig {
    pub instrs: Vec<Instr>,
    /// Fragment map files that replace the shipped maps, by instruction.
    #[serde(default)]
    pub maps: BTreeMap<String, PathBuf>,
    /// Expected compatibility verdicts, by instruction.
    #[serde(default)]
    pub expect_compatible: BTreeMap<String, bool>,
}

fn positive(name: &str, v: usize) -> Result<()> {
    ensure!(v > 0, "{name} must be positive");
    Ok(())
}

fn non_empty<T>(name: &str, v: &[T]) -> Result<()> {
    ensure!(!v.is_empty(), "{name} must not be empty");
    Ok(())
}

impl ExperimentConfig {
    pub fn parse(text: &str, base_dir: PathBuf) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).context("malformed config")?;
        cfg.base_dir = base_dir;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Self::parse(DEFAULT_CONFIG, PathBuf::from(".")),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("cannot read config {}", p.display()))?;
                let base = p
                    .parent()
                    .map_or_else(|| PathBuf::from("."), Path::to_path_buf);
                Self::parse(&text, base).with_context(|| format!("in config {}", p.display()))
            }
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// A builtin profile name or a path relative to the config file.
    pub fn hardware(&self, profile: &str) -> Result<HardwareModel> {
        if let Some(hw) = HardwareModel::builtin(profile) {
            return Ok(hw);
        }
        let path = self.resolve(Path::new(profile));
        HardwareModel::from_path(&path).with_context(|| format!("hardware profile {profile}"))
    }

    /// Points every section at the same hardware profile.
    pub fn override_profile(&mut self, profile: &str) -> Result<()> {
        self.pipeline.profile = profile.to_string();
        self.allreduce.profile = profile.to_string();
        self.offload.profile = profile.to_string();
        self.hardware(profile)?;
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        ensure!(
            self.schema_version == CONFIG_SCHEMA_VERSION,
            "unsupported schema_version {} (expected {CONFIG_SCHEMA_VERSION})",
            self.schema_version
        );
        let a = &self.attn_check;
        positive("attn_check.cases", a.cases)?;
        positive("attn_check.max_batch", a.max_batch)?;
        positive("attn_check.max_seq", a.max_seq)?;
        positive("attn_check.max_heads", a.max_heads)?;
        positive("attn_check.max_level1_factor", a.max_level1_factor)?;
        non_empty("attn_check.head_dims", &a.head_dims)?;
        non_empty("attn_check.block_sizes", &a.block_sizes)?;
        ensure!(
            a.head_dims.iter().chain(&a.block_sizes).all(|&x| x > 0),
            "attn_check sizes must be positive"
        );
        ensure!(
            a.wide_tolerance > 0.0 && a.narrow_tolerance > 0.0,
            "tolerances must be positive"
        );

        let m = &self.mask_demo;
        positive("mask_demo.mask_size", m.mask_size)?;
        positive("mask_demo.seq", m.seq)?;
        positive("mask_demo.skip_block", m.skip_block)?;
        ensure!(
            (1..=m.mask_size).contains(&m.block),
            "mask_demo.block must be in 1..=mask_size"
        );
        ensure!(
            m.seq <= 4096,
            "mask_demo.seq is printed in full; keep it <= 4096"
        );
        non_empty("mask_demo.skip_blocks", &m.skip_blocks)?;
        ensure!(
            m.memory_mask_size > 0 && m.bytes_per_element > 0,
            "mask_demo memory sizes must be positive"
        );

        let p = &self.pipeline;
        for (name, v) in [
            ("batch", p.batch),
            ("heads", p.heads),
            ("head_dim", p.head_dim),
            ("q_block", p.q_block),
            ("b_kv", p.b_kv),
            ("b_kv1", p.b_kv1),
            ("b_kv2", p.b_kv2),
            ("timeline_seq", p.timeline_seq),
        ] {
            positive(&format!("pipeline.{name}"), v)?;
        }
        non_empty("pipeline.seqs", &p.seqs)?;
        ensure!(
            p.b_kv1.is_multiple_of(p.b_kv2),
            "pipeline.b_kv2 must divide pipeline.b_kv1"
        );
        self.hardware(&p.profile)?;

        let r = &self.allreduce;
        for (name, v) in [
            ("batch", r.batch),
            ("heads", r.heads),
            ("head_dim", r.head_dim),
            ("devices", r.devices),
            ("n_blocks", r.n_blocks),
        ] {
            positive(&format!("allreduce.{name}"), v)?;
        }
        non_empty("allreduce.seqs", &r.seqs)?;
        ensure!(
            r.heads.is_multiple_of(r.devices),
            "allreduce.devices must divide allreduce.heads"
        );
        let c = &r.check;
        for (name, v) in [
            ("batch", c.batch),
            ("seq", c.seq),
            ("heads", c.heads),
            ("head_dim", c.head_dim),
            ("hidden_out", c.hidden_out),
            ("devices", c.devices),
            ("n_blocks", c.n_blocks),
        ] {
            positive(&format!("allreduce.check.{name}"), v)?;
        }
        ensure!(
            c.heads.is_multiple_of(c.devices),
            "allreduce.check.devices must divide allreduce.check.heads"
        );
        ensure!(
            c.n_blocks <= c.batch * c.seq,
            "allreduce.check.n_blocks exceeds the row count"
        );
        self.hardware(&r.profile)?;

        let o = &self.offload;
        ensure!(o.devices > 0, "offload.devices must be positive");
        ensure!(o.plan_seq > 0, "offload.plan_seq must be positive");
        non_empty("offload.seqs", &o.seqs)?;
        o.model
            .validate()
            .map_err(|e| anyhow::anyhow!("offload.model: {e}"))?;
        let d = &o.decode;
        for (name, v) in [
            ("batch", d.batch),
            ("heads", d.heads),
            ("head_dim", d.head_dim),
            ("cache_len", d.cache_len),
        ] {
            positive(&format!("offload.decode.{name}"), v)?;
        }
        ensure!(
            d.tolerance > 0.0,
            "offload.decode.tolerance must be positive"
        );
        self.hardware(&o.profile)?;

        let l = &self.layout;
        non_empty("layout.instrs", &l.instrs)?;
        for (name, path) in &l.maps {
            let instr: Instr = name
                .parse()
                .with_context(|| format!("layout.maps key {name}"))?;
            let full = self.resolve(path);
            if !full.is_file() {
                bail!(
                    "layout.maps.{instr}: file {} does not exist",
                    full.display()
                );
            }
        }
        for name in l.expect_compatible.keys() {
            name.parse::<Instr>()
                .with_context(|| format!("layout.expect_compatible key {name}"))?;
        }
        Ok(())
    }
}
