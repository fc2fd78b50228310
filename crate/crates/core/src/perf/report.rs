//! Benchmark report rows and their CSV, Markdown and JSON renderings.
//!
//! CSV column order: `kind, mode, n, x, batch, out_len, measured_s_per_sample,
//! predicted_s_per_sample, flops, bytes, ai, attention_bytes`. Lines starting
//! with `#` before the column header carry the counting conventions.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::model::AttentionMode;

use super::{RooflineSpec, CONVENTIONS};

pub const CSV_COLUMNS: [&str; 12] = [
    "kind",
    "mode",
    "n",
    "x",
    "batch",
    "out_len",
    "measured_s_per_sample",
    "predicted_s_per_sample",
    "flops",
    "bytes",
    "ai",
    "attention_bytes",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowKind {
    /// One attention-layer decode step over a synthetic batch.
    Attention,
    /// Full generation with the model.
    Generation,
}

impl RowKind {
    fn name(self) -> &'static str {
        match self {
            RowKind::Attention => "attention",
            RowKind::Generation => "generation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub kind: RowKind,
    pub mode: AttentionMode,
    pub n: usize,
    pub x: usize,
    pub batch: usize,
    pub out_len: usize,
    pub measured_s_per_sample: f64,
    pub predicted_s_per_sample: f64,
    /// Modeled flops for the whole batch.
    pub flops: u64,
    /// Modeled bytes moved for the whole batch.
    pub bytes: u64,
    pub ai: f64,
    /// Modeled group ③ bytes for the whole batch.
    pub attention_bytes: u64,
}

impl BenchRow {
    fn cells(&self) -> [String; 12] {
        [
            self.kind.name().to_string(),
            self.mode.name().to_string(),
            self.n.to_string(),
            self.x.to_string(),
            self.batch.to_string(),
            self.out_len.to_string(),
            format!("{:.6e}", self.measured_s_per_sample),
            format!("{:.6e}", self.predicted_s_per_sample),
            self.flops.to_string(),
            self.bytes.to_string(),
            format!("{:.6}", self.ai),
            self.attention_bytes.to_string(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub conventions: Vec<String>,
    pub hardware: RooflineSpec,
    /// Free-form run metadata such as seed, precision and dimensions.
    pub provenance: BTreeMap<String, String>,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn new(hardware: RooflineSpec) -> Self {
        let mut conventions: Vec<String> = CONVENTIONS.iter().map(|s| s.to_string()).collect();
        conventions.push(format!(
            "predicted seconds use a roofline with peak {} GFLOP/s and {} GB/s",
            hardware.peak_gflops, hardware.peak_gbs
        ));
        conventions.push(
            "generation rows predict input attention only, summed over layers and output steps"
                .to_string(),
        );
        Self {
            conventions,
            hardware,
            provenance: BTreeMap::new(),
            rows: Vec::new(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for c in &self.conventions {
            let _ = writeln!(out, "# {c}");
        }
        for (k, v) in &self.provenance {
            let _ = writeln!(out, "# {k}: {v}");
        }
        let _ = writeln!(out, "{}", CSV_COLUMNS.join(","));
        for row in &self.rows {
            let _ = writeln!(out, "{}", row.cells().join(","));
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("Conventions:\n\n");
        for c in &self.conventions {
            let _ = writeln!(out, "- {c}");
        }
        for (k, v) in &self.provenance {
            let _ = writeln!(out, "- {k}: {v}");
        }
        let _ = writeln!(out, "\n| {} |", CSV_COLUMNS.join(" | "));
        let _ = writeln!(out, "|{}", "---|".repeat(CSV_COLUMNS.len()));
        for row in &self.rows {
            let _ = writeln!(out, "| {} |", row.cells().join(" | "));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Data cells of a CSV rendering, one vector per row.
pub fn csv_cells(csv: &str) -> Vec<Vec<String>> {
    csv.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

/// Data cells of a Markdown rendering, one vector per row.
pub fn markdown_cells(md: &str) -> Vec<Vec<String>> {
    md.lines()
        .filter(|l| l.starts_with('|'))
        .skip(2)
        .map(|l| {
            l.trim_matches('|')
                .split('|')
                .map(|c| c.trim().to_string())
                .collect()
        })
        .collect()
}
