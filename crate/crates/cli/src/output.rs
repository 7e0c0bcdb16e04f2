//! results.csv, summary.json, grid.csv and heatmap.tsv writers.

use std::io::Write;

use crate::run::{GridRow, ResultRow, RunOutput};

pub const RESULT_COLUMNS: [&str; 10] = [
    "config_hash",
    "step",
    "test_loss",
    "gini_hard",
    "gini_soft",
    "min_max_hard",
    "min_max_soft",
    "loads_hard",
    "loads_soft",
    "status",
];

/// Layers separated by `;`, experts by spaces.
fn encode_loads(loads: &[Vec<f64>]) -> String {
    loads
        .iter()
        .map(|l| {
            l.iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect::<Vec<_>>()
        .join(";")
}

/// Writes one row per evaluation. A diverged run gets a trailing
/// diagnostic row with NaN metrics and the reason in `status`.
pub fn write_results_csv<W: Write>(out: W, run: &RunOutput) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RESULT_COLUMNS)?;
    for r in &run.rows {
        write_row(&mut w, r, "ok")?;
    }
    if let Some(reason) = &run.summary.divergence {
        let nan = f64::NAN.to_string();
        w.write_record([
            run.summary.config_hash.clone(),
            run.summary.steps_completed.to_string(),
            nan.clone(),
            nan.clone(),
            nan.clone(),
            nan.clone(),
            nan,
            String::new(),
            String::new(),
            format!("diverged: {reason}"),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_row<W: Write>(w: &mut csv::Writer<W>, r: &ResultRow, status: &str) -> csv::Result<()> {
    w.write_record([
        r.config_hash.clone(),
        r.step.to_string(),
        r.test_loss.to_string(),
        r.gini_hard.to_string(),
        r.gini_soft.to_string(),
        r.min_max_hard.to_string(),
        r.min_max_soft.to_string(),
        encode_loads(&r.loads_hard),
        encode_loads(&r.loads_soft),
        status.to_string(),
    ])
}

pub fn write_grid_csv<W: Write>(out: W, rows: &[GridRow]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Layers × experts matrix of loads, each row normalized to sum to one.
pub fn heatmap(loads: &[Vec<f64>]) -> Vec<Vec<f64>> {
    loads
        .iter()
        .map(|row| {
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                row.iter().map(|v| v / total).collect()
            } else {
                row.clone()
            }
        })
        .collect()
}

/// Tab-separated heatmap of the final hard loads, one line per layer.
pub fn emit_heatmap<W: Write>(mut out: W, run: &RunOutput) -> std::io::Result<()> {
    for row in heatmap(run.final_loads()) {
        let line = row
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join("\t");
        writeln!(out, "{line}")?;
    }
    Ok(())
}
