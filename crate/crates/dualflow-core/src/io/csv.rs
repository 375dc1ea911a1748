//! Deterministic metrics CSV: `\n` line endings, `.` decimal separator,
//! shortest-roundtrip float formatting.

use std::path::Path;

use crate::error::{CoreError, Result};

/// Locale-independent f32 formatting (Rust's shortest roundtrip repr).
pub fn fmt_f32(v: f32) -> String {
    format!("{v}")
}

#[derive(Debug, Clone)]
pub struct MetricsCsv {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl MetricsCsv {
    pub fn new(header: &[&str]) -> Self {
        MetricsCsv { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push_row(&mut self, cells: Vec<String>) -> Result<()> {
        if cells.len() != self.header.len() {
            return Err(CoreError::InvalidArgument(format!(
                "row has {} cells, header has {}",
                cells.len(),
                self.header.len()
            )));
        }
        if let Some(bad) = cells.iter().find(|c| c.contains(',') || c.contains('\n')) {
            return Err(CoreError::InvalidArgument(format!("cell '{bad}' needs quoting")));
        }
        self.rows.push(cells);
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows.len()
    }

    pub fn render(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for row in &self.rows {
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render())?;
        Ok(())
    }
}
