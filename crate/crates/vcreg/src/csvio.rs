//! Numeric CSV output: comma-separated, one header line, no quoting. Every
//! float is written in shortest round-trip form, so reading the file back
//! reproduces the exact bits.

use std::path::Path;

use vcreg_core::metrics::BoundaryGrid;

use crate::{fsio, LabError, Result};

/// Shortest decimal form that parses back to the same f64.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        debug_assert_eq!(row.len(), header.len());
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fsio::atomic_write(path, out.as_bytes())
}

/// Split a CSV produced by [`write_csv`] into header and rows.
pub fn parse_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| LabError::Runtime("csv: empty file".into()))?
        .split(',')
        .map(str::to_owned)
        .collect::<Vec<_>>();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let row: Vec<String> = line.split(',').map(str::to_owned).collect();
        if row.len() != header.len() {
            return Err(LabError::Runtime(format!(
                "csv: row {} has {} fields, header has {}",
                i + 1,
                row.len(),
                header.len()
            )));
        }
        rows.push(row);
    }
    Ok((header, rows))
}

/// Decision grid with a margin per lattice point: the distance to the
/// nearest lattice point the model assigns a different class.
pub fn write_boundary_csv(path: &Path, grid: &BoundaryGrid, margins: &[f64]) -> Result<()> {
    let points = vcreg_core::metrics::grid_points(&grid.spec)?;
    let n = points.shape()[0];
    if margins.len() != grid.preds.len() || n != grid.preds.len() {
        return Err(LabError::Runtime(format!(
            "boundary csv: {n} grid points, {} predictions, {} margins",
            grid.preds.len(),
            margins.len()
        )));
    }
    let rows: Vec<Vec<String>> = grid
        .preds
        .iter()
        .enumerate()
        .map(|(i, &pred)| {
            let p = points.row(i);
            vec![
                fmt_f64(p[0]),
                fmt_f64(p[1]),
                pred.to_string(),
                fmt_f64(margins[i]),
            ]
        })
        .collect();
    write_csv(path, &["x", "y", "pred_class", "margin"], &rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use vcreg_core::metrics::GridSpec;

    #[test]
    fn floats_survive_a_round_trip_exactly() {
        let cases = [
            0.1 + 0.2,
            -0.0,
            1.0,
            core::f64::consts::PI,
            1e-308,
            -3.5e17,
            f64::MIN_POSITIVE,
        ];
        for v in cases {
            let parsed: f64 = fmt_f64(v).parse().unwrap();
            assert_eq!(parsed.to_bits(), v.to_bits(), "{v} reprinted as {}", fmt_f64(v));
        }
    }

    #[test]
    fn csv_write_and_parse_invert() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let rows = vec![
            vec![fmt_f64(0.30000000000000004), "3".to_string()],
            vec![fmt_f64(-0.0), "0".to_string()],
        ];
        write_csv(&path, &["value", "count"], &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let (header, parsed) = parse_csv(&text).unwrap();
        assert_eq!(header, ["value", "count"]);
        assert_eq!(parsed, rows);
        let v: f64 = parsed[0][0].parse().unwrap();
        assert_eq!(v.to_bits(), (0.1f64 + 0.2).to_bits());
    }

    #[test]
    fn ragged_row_is_an_error() {
        let err = parse_csv("a,b\n1,2\n3\n").unwrap_err();
        assert!(err.to_string().contains("row 2"), "{err}");
    }

    #[test]
    fn boundary_csv_has_the_documented_header() {
        let spec = GridSpec {
            x_min: 0.0,
            x_max: 1.0,
            y_min: 0.0,
            y_max: 1.0,
            cols: 2,
            rows: 2,
        };
        let grid = BoundaryGrid {
            spec,
            preds: vec![0, 1, 0, 1],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.csv");
        write_boundary_csv(&path, &grid, &[1.0, 1.0, 1.0, 1.0]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("x,y,pred_class,margin\n"), "{text}");
        assert_eq!(text.lines().count(), 5);
    }
}
