//! `layout-check`: fragment partition checks and back-to-back compatibility
//! verdicts per instruction.

use anyhow::{Context, Result};
use serde::Serialize;
use tiled_attn::{check_b2b_compat_map, Compat, FragmentMap, Instr, Role};

use crate::config::ExperimentConfig;
use crate::output::Report;

#[derive(Debug, Clone, Serialize)]
pub struct InstrResult {
    pub instr: Instr,
    pub source: String,
    pub partitions: bool,
    pub compat: Compat,
}

fn partitions(map: &FragmentMap) -> bool {
    [Role::A, Role::B, Role::C].into_iter().all(|role| {
        let rm = map.role(role);
        let mut count = vec![0u32; rm.rows * rm.cols];
        for &(r, c) in rm.threads.iter().flatten() {
            if r >= rm.rows || c >= rm.cols {
                return false;
            }
            count[r * rm.cols + c] += 1;
        }
        count.iter().all(|&k| k == 1)
    })
}

pub fn results(cfg: &ExperimentConfig) -> Result<Vec<InstrResult>> {
    cfg.layout
        .instrs
        .iter()
        .map(|&instr| {
            let (map, source) = match cfg.layout.maps.get(instr.name()) {
                Some(p) => {
                    let path = cfg.resolve(p);
                    let map = FragmentMap::from_path(&path)
                        .with_context(|| format!("fragment map {}", path.display()))?;
                    (map, p.display().to_string())
                }
                None => (FragmentMap::builtin(instr), "builtin".to_string()),
            };
            Ok(InstrResult {
                instr,
                source,
                partitions: partitions(&map),
                compat: check_b2b_compat_map(&map)?,
            })
        })
        .collect()
}

pub fn run(cfg: &ExperimentConfig) -> Result<Report> {
    let res = results(cfg)?;
    let mut report = Report::default();
    for r in &res {
        report.check(
            &format!("{} fragments partition their tiles", r.instr),
            r.partitions,
            r.source.clone(),
        );
        if let Some(&want) = cfg.layout.expect_compatible.get(r.instr.name()) {
            report.check(
                &format!("{} compatibility verdict", r.instr),
                r.compat.compatible == want,
                format!(
                    "compatible={} (expected {want}), exchanges {}",
                    r.compat.compatible, r.compat.exchanges_needed
                ),
            );
        }
    }
    report.json("layout_check.json", &res)?;
    Ok(report)
}
