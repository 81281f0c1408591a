//! Dense matrices as text: comma-separated with an optional header row, or
//! whitespace-separated.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn parse_row(fields: &[&str], line: usize) -> Result<Vec<f64>> {
    fields
        .iter()
        .map(|f| {
            f.trim().parse::<f64>().map_err(|_| Error::Parse {
                line,
                msg: format!("`{}` is not a number", f.trim()),
            })
        })
        .collect()
}

/// Parses matrix text. A first line that does not parse as numbers is
/// treated as a header.
pub fn parse_matrix(text: &str) -> Result<Tensor> {
    let comma = text.contains(',');
    let mut rows: Vec<Vec<f64>> = Vec::new();
    if comma {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        for (k, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Parse {
                line: e.position().map_or(k + 1, |p| p.line() as usize),
                msg: e.to_string(),
            })?;
            let line = rec.position().map_or(k + 1, |p| p.line() as usize);
            let fields: Vec<&str> = rec.iter().collect();
            if fields.iter().all(|f| f.is_empty()) {
                continue;
            }
            match parse_row(&fields, line) {
                Ok(r) => rows.push(r),
                Err(_) if k == 0 => continue,
                Err(e) => return Err(e),
            }
        }
    } else {
        for (k, l) in text.lines().enumerate() {
            let fields: Vec<&str> = l.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            match parse_row(&fields, k + 1) {
                Ok(r) => rows.push(r),
                Err(_) if rows.is_empty() && k == 0 => continue,
                Err(e) => return Err(e),
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            line: 1,
            msg: "no numeric rows".into(),
        });
    }
    let width = rows[0].len();
    if let Some(k) = rows.iter().position(|r| r.len() != width) {
        return Err(Error::invalid(format!(
            "data row {} has {} columns, expected {width}",
            k + 1,
            rows[k].len()
        )));
    }
    Tensor::from_rows(&rows)
}

pub fn read_matrix(path: &Path) -> Result<Tensor> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Data {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    parse_matrix(&text).map_err(|e| Error::Data {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Comma-separated, no header, shortest round-trip float formatting.
pub fn format_matrix(m: &Tensor) -> Result<String> {
    if m.rank() != 2 {
        return Err(Error::shape(format!("expected a matrix, got {:?}", m.shape())));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in 0..m.dim(0) {
        w.write_record(m.row(r).iter().map(|v| v.to_string()))
            .map_err(|e| Error::invalid(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn write_matrix(path: &Path, m: &Tensor) -> Result<()> {
    std::fs::write(path, format_matrix(m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_with_and_without_header() {
        let a = parse_matrix("a,b\n1,2\n3,4.5\n").unwrap();
        let b = parse_matrix("1, 2\n3, 4.5\n").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), [2, 2]);
        assert_eq!(a.data(), &[1.0, 2.0, 3.0, 4.5]);
    }

    #[test]
    fn whitespace_separated() {
        let m = parse_matrix("0.5  1\n\n2\t3\n").unwrap();
        assert_eq!(m.data(), &[0.5, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn errors_carry_lines() {
        let err = parse_matrix("1,2\n3,x\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(parse_matrix("1,2\n3\n").is_err());
        assert!(parse_matrix("").is_err());
    }

    #[test]
    fn round_trip_is_exact() {
        let m = Tensor::from_fn(vec![3, 4], |k| (k as f64 * 0.1).exp() / 7.0);
        assert_eq!(parse_matrix(&format_matrix(&m).unwrap()).unwrap(), m);
    }
}
