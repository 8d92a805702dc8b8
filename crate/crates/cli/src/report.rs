//! Report emission: one schema-versioned JSON summary per run plus CSV
//! tables and optional field dumps. Replaying a config reproduces every
//! byte except the `generated_unix` stamp.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde_json::{json, Value};

use crate::config::ExperimentConfig;

pub const SCHEMA: &str = "cablefield-report/1";

pub struct ReportWriter {
    outdir: PathBuf,
    artifacts: BTreeMap<String, String>,
}

impl ReportWriter {
    pub fn new(outdir: &Path) -> Result<Self> {
        std::fs::create_dir_all(outdir)
            .with_context(|| format!("cannot create output directory {}", outdir.display()))?;
        Ok(ReportWriter { outdir: outdir.to_path_buf(), artifacts: BTreeMap::new() })
    }

    pub fn outdir(&self) -> &Path {
        &self.outdir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.outdir.join(name)
    }

    /// Write a CSV table; an empty row set still produces the header.
    pub fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let path = self.path(name);
        let mut w = csv::Writer::from_path(&path)
            .with_context(|| format!("cannot write {}", path.display()))?;
        w.write_record(header)?;
        for row in rows {
            w.write_record(row)?;
        }
        w.flush()?;
        self.artifacts.insert(name.to_string(), name.to_string());
        Ok(())
    }

    pub fn note_artifact(&mut self, label: &str, name: &str) {
        self.artifacts.insert(label.to_string(), name.to_string());
    }

    /// Final summary. `pass` is the conjunction of the experiment's asserted
    /// invariants; the process exit code mirrors it.
    pub fn summary(
        &mut self,
        cfg: &ExperimentConfig,
        pass: bool,
        results: Value,
    ) -> Result<()> {
        let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let doc = json!({
            "schema": SCHEMA,
            "kind": cfg.kind.as_str(),
            "generated_unix": stamp,
            "config_sha256": cfg.sha256(),
            "config": cfg,
            "pass": pass,
            "results": results,
            "artifacts": self.artifacts,
        });
        self.write_json("summary.json", &doc)
    }

    /// Emitted when an experiment dies after producing partial artifacts, so
    /// a directory is never mistaken for a finished run.
    pub fn incomplete(&mut self, cfg: &ExperimentConfig, error: &str) -> Result<()> {
        let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let doc = json!({
            "schema": SCHEMA,
            "kind": cfg.kind.as_str(),
            "generated_unix": stamp,
            "config_sha256": cfg.sha256(),
            "config": cfg,
            "incomplete": true,
            "error": error,
            "artifacts": self.artifacts,
        });
        self.write_json("summary.json", &doc)
    }

    fn write_json(&self, name: &str, doc: &Value) -> Result<()> {
        let path = self.path(name);
        let mut text = serde_json::to_string_pretty(doc)?;
        text.push('\n');
        std::fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))
    }
}

pub fn fmt_f64(x: f64) -> String {
    format!("{x}")
}
