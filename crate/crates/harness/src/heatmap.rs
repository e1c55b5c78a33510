//! Raw heatmap artifacts: a CSV grid and an 8-bit binary PGM.

use std::io::Write;
use std::path::{Path, PathBuf};

use priorreg::oracles::Field;

use crate::error::Result;

/// Writes `<stem>.csv` (one row per `x`, one column per `t`) and `<stem>.pgm`
/// (P5, min-max normalized; a constant field renders all zeros).
pub fn emit_heatmap(field: &Field, stem: &Path) -> Result<(PathBuf, PathBuf)> {
    field.grid.validate()?;
    let csv_path = stem.with_extension("csv");
    let pgm_path = stem.with_extension("pgm");
    let (nx, nt) = field.values.dim();

    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&csv_path)?;
    for row in field.values.rows() {
        w.write_record(row.iter().map(|v| format!("{v:e}")))?;
    }
    w.flush()?;

    let (lo, hi) = field
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    let pixels: Vec<u8> = field
        .values
        .iter()
        .map(|&v| {
            if range > 0.0 && range.is_finite() {
                ((v - lo) / range * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect();
    let mut f = std::io::BufWriter::new(std::fs::File::create(&pgm_path)?);
    write!(f, "P5\n{nt} {nx}\n255\n")?;
    f.write_all(&pixels)?;
    f.flush()?;
    Ok((csv_path, pgm_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use priorreg::oracles::{GridSpec, OracleSpec};

    #[test]
    fn reaction_oracle_heatmap_shape() {
        let dir = tempfile::tempdir().unwrap();
        let grid = GridSpec::reaction_default();
        let field = OracleSpec::reaction(10.0).field(&grid).unwrap();
        let (csv_path, pgm_path) = emit_heatmap(&field, &dir.path().join("exact")).unwrap();
        let text = std::fs::read_to_string(csv_path).unwrap();
        let rows: Vec<&str> = text.lines().collect();
        assert_eq!(rows.len(), 256);
        assert!(rows.iter().all(|r| r.split(',').count() == 100));
        let bytes = std::fs::read(pgm_path).unwrap();
        let header = b"P5\n100 256\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 25_600);
    }

    #[test]
    fn constant_field_renders_black() {
        let dir = tempfile::tempdir().unwrap();
        let grid = GridSpec::new(0.5, 4, 3).unwrap();
        let field = Field {
            grid,
            values: Array2::from_elem((4, 3), 0.7),
        };
        let (_, pgm) = emit_heatmap(&field, &dir.path().join("flat")).unwrap();
        let bytes = std::fs::read(pgm).unwrap();
        assert!(bytes[bytes.len() - 12..].iter().all(|&b| b == 0));
    }

    #[test]
    fn same_field_same_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let grid = GridSpec::new(0.5, 16, 5).unwrap();
        let field = OracleSpec::reaction(20.0).field(&grid).unwrap();
        emit_heatmap(&field, &dir.path().join("a")).unwrap();
        emit_heatmap(&field, &dir.path().join("b")).unwrap();
        for ext in ["csv", "pgm"] {
            let a = std::fs::read(dir.path().join(format!("a.{ext}"))).unwrap();
            let b = std::fs::read(dir.path().join(format!("b.{ext}"))).unwrap();
            assert_eq!(a, b);
        }
    }
}
