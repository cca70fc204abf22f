//! Report rendering: aligned text tables for humans, JSON and CSV for tools.

use std::path::Path;

use lasp_core::comm::{CommParams, CrossoverReport, MeasuredVolume, VolumeRow};
use serde_json::{json, Value};

use crate::SimError;

/// Left-aligned columns padded to the widest cell.
pub fn render_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            if i < widths.len() {
                widths[i] = widths[i].max(cell.len());
            }
        }
    }
    let mut out = String::new();
    let fmt_row = |cells: Vec<String>, widths: &[usize]| -> String {
        let mut line = String::new();
        for (i, cell) in cells.iter().enumerate() {
            if i > 0 {
                line.push_str("  ");
            }
            line.push_str(cell);
            if i + 1 < cells.len() {
                line.push_str(&" ".repeat(widths[i].saturating_sub(cell.len())));
            }
        }
        line
    };
    out.push_str(&fmt_row(
        headers.iter().map(|h| h.to_string()).collect(),
        &widths,
    ));
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for row in rows {
        out.push_str(&fmt_row(row.clone(), &widths));
        out.push('\n');
    }
    out
}

pub fn write_json(path: &Path, value: &Value) -> Result<(), SimError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn ensure_dir(path: &Path) -> Result<(), SimError> {
    std::fs::create_dir_all(path)?;
    Ok(())
}

pub fn comm_rows_json(
    params: &CommParams,
    rows: &[VolumeRow],
    crossover: &CrossoverReport,
    measured: Option<&MeasuredVolume>,
) -> Value {
    let methods: Vec<Value> = rows
        .iter()
        .map(|r| {
            json!({
                "method": r.method.name(),
                "full_elements": r.full_elements.to_string(),
                "full_bytes": (r.full_elements * 8).to_string(),
                "simplified_elements": r.simplified_elements.to_string(),
            })
        })
        .collect();
    let ranking: Vec<Value> = crossover
        .ranking
        .iter()
        .map(|(m, v)| json!({"method": m.name(), "simplified_elements": v.to_string()}))
        .collect();
    let measured_json = measured.map(|m| {
        let cells: Vec<Value> = m
            .cells
            .iter()
            .map(|((tag, layer, group), (count, elements))| {
                json!({
                    "direction": tag.as_str(),
                    "layer": layer,
                    "group": group,
                    "messages": count,
                    "elements": elements,
                    "bytes": elements * 8,
                })
            })
            .collect();
        json!({
            "elements_per_message": m.elements_per_message,
            "bytes_per_message": m.elements_per_message * 8,
            "forward_messages": m.forward_messages,
            "backward_messages": m.backward_messages,
            "total_elements": m.total_elements,
            "total_bytes": m.total_bytes(),
            "cells": cells,
        })
    });
    json!({
        "params": {
            "batch": params.batch,
            "seq_len": params.seq_len,
            "model_dim": params.model_dim,
            "heads": params.heads,
            "sp_size": params.sp_size,
        },
        "methods": methods,
        "crossover": {
            "ranking": ranking,
            "lasp_strictly_lowest": crossover.lasp_strictly_lowest,
            "lasp_tied_lowest": crossover.lasp_tied_lowest,
        },
        "measured": measured_json,
    })
}

/// CSV mirror of the volume table: one row per method.
pub fn comm_rows_csv(rows: &[VolumeRow]) -> String {
    let mut out = String::from("method,full_elements,simplified_elements\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{}\n",
            r.method.name(),
            r.full_elements,
            r.simplified_elements
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_alignment() {
        let t = render_table(
            &["name", "value"],
            &[
                vec!["a".into(), "1".into()],
                vec!["long-name".into(), "2".into()],
            ],
        );
        let lines: Vec<&str> = t.lines().collect();
        assert!(lines[0].starts_with("name"));
        assert!(lines[2].starts_with("a        "));
        assert!(lines[3].starts_with("long-name"));
    }

    #[test]
    fn csv_mirrors_rows() {
        let p = CommParams::new(1, 64, 16, 2, 4).unwrap();
        let rows = lasp_core::comm::volume_rows(&p).unwrap();
        let csv = comm_rows_csv(&rows);
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.lines().nth(1).unwrap().starts_with("LASP,"));
    }
}
