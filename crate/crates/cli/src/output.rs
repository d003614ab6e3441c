//! Buffered experiment outputs. Nothing touches the output directory until a
//! subcommand has finished computing, and every file is renamed into place
//! whole.

use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Default)]
pub struct Report {
    files: Vec<(String, Vec<u8>)>,
    checks: Vec<Check>,
}

impl Report {
    pub fn check(&mut self, name: &str, pass: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.to_string(),
            pass,
            detail: detail.into(),
        });
    }

    pub fn text(&mut self, name: &str, body: String) {
        self.files.push((name.to_string(), body.into_bytes()));
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut body = serde_json::to_vec_pretty(value)?;
        body.push(b'\n');
        self.files.push((name.to_string(), body));
        Ok(())
    }

    /// Takes `other`'s checks and, renamed, only the files listed in `keep`.
    pub fn absorb(&mut self, other: Report, keep: &[(&str, &str)]) {
        self.checks.extend(other.checks);
        for (name, body) in other.files {
            if let Some((_, to)) = keep.iter().find(|(from, _)| *from == name) {
                self.files.push((to.to_string(), body));
            }
        }
    }

    pub fn file_names(&self) -> impl Iterator<Item = &str> {
        self.files.iter().map(|(n, _)| n.as_str())
    }

    pub fn file(&self, name: &str) -> Option<&[u8]> {
        self.files
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b.as_slice())
    }

    pub fn checks(&self) -> &[Check] {
        &self.checks
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("cannot create output directory {}", dir.display()))?;
        for (name, body) in &self.files {
            let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
            tmp.write_all(body)?;
            tmp.persist(dir.join(name))
                .with_context(|| format!("cannot write {name}"))?;
        }
        Ok(())
    }
}

/// Shortest round-trip float text, so CSV cells are stable across runs.
pub fn num(x: f64) -> String {
    format!("{x:e}")
}
