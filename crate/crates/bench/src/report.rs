//! Machine-readable run reports: line-delimited text plus a CSV of the
//! plotted series.

use std::io::Write;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct RunReport {
    pub label: String,
    pub seed: Option<u64>,
    /// Deterministic planned-operation trace: identical across runs with
    /// the same seed. Measured values live elsewhere.
    pub trace: Vec<String>,
    pub checks: Vec<CheckResult>,
    /// (series label, MiB/s)
    pub throughput: Vec<(String, f64)>,
    /// (step, new metadata nodes written at that step)
    pub node_counts: Vec<(u64, u64)>,
    pub per_provider_pages: Vec<u64>,
    pub ops_ok: u64,
    pub reads_verified: u64,
    pub divergences: Vec<String>,
}

impl RunReport {
    pub fn new(label: &str) -> Self {
        Self {
            label: label.to_string(),
            ..Default::default()
        }
    }

    pub fn check(&mut self, name: &str, pass: bool, detail: String) {
        self.checks.push(CheckResult {
            name: name.to_string(),
            pass,
            detail,
        });
    }

    pub fn passed(&self) -> bool {
        self.divergences.is_empty() && self.checks.iter().all(|c| c.pass)
    }

    pub fn write_text(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "report\t{}", self.label)?;
        if let Some(seed) = self.seed {
            writeln!(w, "seed\t{seed}")?;
        }
        writeln!(w, "ops_ok\t{}", self.ops_ok)?;
        writeln!(w, "reads_verified\t{}", self.reads_verified)?;
        for (label, mibs) in &self.throughput {
            writeln!(w, "throughput\t{label}\t{mibs:.2}")?;
        }
        if !self.per_provider_pages.is_empty() {
            let cells: Vec<String> = self.per_provider_pages.iter().map(u64::to_string).collect();
            writeln!(w, "provider_pages\t{}", cells.join(","))?;
        }
        for c in &self.checks {
            writeln!(
                w,
                "check\t{}\t{}\t{}",
                c.name,
                if c.pass { "pass" } else { "FAIL" },
                c.detail
            )?;
        }
        for d in &self.divergences {
            writeln!(w, "divergence\t{d}")?;
        }
        writeln!(w, "verdict\t{}", if self.passed() { "pass" } else { "FAIL" })?;
        Ok(())
    }

    /// CSV of the plotted series: step, node count, throughput sample.
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "series,step,value")?;
        for (step, count) in &self.node_counts {
            writeln!(w, "nodes,{step},{count}")?;
        }
        for (i, (label, mibs)) in self.throughput.iter().enumerate() {
            writeln!(w, "throughput:{label},{i},{mibs:.3}")?;
        }
        for (i, pages) in self.per_provider_pages.iter().enumerate() {
            writeln!(w, "provider_pages,{i},{pages}")?;
        }
        Ok(())
    }

    pub fn write_trace(&self, w: &mut impl Write) -> std::io::Result<()> {
        for line in &self.trace {
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}
