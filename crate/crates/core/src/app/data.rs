use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Dataset;

/// Loads a comma-separated file with a header row.
///
/// Numeric columns are identified from the first data row; other columns
/// (such as a species label) are skipped with a warning.
pub fn load_csv(path: impl AsRef<Path>, standardize: bool) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, path, standardize)
}

pub fn parse_csv(text: &str, path: &Path, standardize: bool) -> Result<Dataset> {
    let load_err = |line: u64, msg: String| Error::Load {
        path: path.to_path_buf(),
        line: line as usize,
        msg,
    };
    // The reader's line counter skips blank lines, and a record's byte
    // position can point at the blank lines before it.
    let line_of = |byte: u64| {
        let bytes = text.as_bytes();
        let mut at = (byte as usize).min(bytes.len());
        while at < bytes.len() && (bytes[at] == b'\n' || bytes[at] == b'\r') {
            at += 1;
        }
        bytes[..at].iter().filter(|&&b| b == b'\n').count() as u64 + 1
    };
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let names: Vec<String> = reader
        .headers()
        .map_err(|e| load_err(1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if names.iter().all(|n| n.is_empty()) {
        return Err(load_err(1, "empty file".into()));
    }

    let mut numeric: Option<Vec<usize>> = None;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| load_err(e.position().map_or(0, |p| line_of(p.byte())), e.to_string()))?;
        let line = record.position().map_or(0, |p| line_of(p.byte()));
        if record.len() != names.len() {
            return Err(load_err(line, format!("expected {} fields, found {}", names.len(), record.len())));
        }
        let cols = numeric.get_or_insert_with(|| {
            let cols: Vec<usize> = (0..record.len()).filter(|&j| record[j].parse::<f64>().is_ok()).collect();
            for j in (0..record.len()).filter(|j| !cols.contains(j)) {
                log::warn!("{}: ignoring non-numeric column `{}`", path.display(), names[j]);
            }
            cols
        });
        if cols.is_empty() {
            return Err(load_err(line, "no numeric columns".into()));
        }
        let mut row = Vec::with_capacity(cols.len());
        for &j in cols.iter() {
            let v: f64 = record[j]
                .parse()
                .map_err(|_| load_err(line, format!("column `{}`: `{}` is not a number", names[j], &record[j])))?;
            if !v.is_finite() {
                return Err(load_err(line, format!("column `{}`: non-finite value", names[j])));
            }
            row.push(v);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(load_err(1, "no data rows".into()));
    }
    let data = Dataset::new(rows)?;
    Ok(if standardize { data.standardized() } else { data })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Dataset> {
        parse_csv(text, Path::new("t.csv"), false)
    }

    #[test]
    fn skips_label_columns() {
        let d = parse("a,b,label\n1,2,x\n3,4.5,y\n").unwrap();
        assert_eq!((d.n(), d.dim()), (2, 2));
        assert_eq!(d.point(1), &[3.0, 4.5]);
    }

    #[test]
    fn reports_line_numbers() {
        for (text, want) in [
            ("a,b\n1,2\n3\n", 3),
            ("a,b\n1,2\n\n3,x\n", 4),
            ("a,b\n1,2\n3,inf\n", 3),
            ("a,b\n", 1),
            ("", 1),
        ] {
            match parse(text) {
                Err(Error::Load { line, .. }) => assert_eq!(line, want, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn bundled_iris() {
        let d = load_csv(super::super::config::BUNDLED_IRIS, false).unwrap();
        assert_eq!((d.n(), d.dim()), (150, 4));
        let s = load_csv(super::super::config::BUNDLED_IRIS, true).unwrap();
        assert!(s.mean().iter().all(|m| m.abs() < 1e-12));
    }
}
