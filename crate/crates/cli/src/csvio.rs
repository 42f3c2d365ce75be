//! Minimal CSV reading and writing for the loss command.
//!
//! The accepted dialect is deliberately small: a single header row, comma
//! separators, `.` as the decimal mark, no quoting and no embedded commas.

use std::path::Path;

use convmorph::{Error, Result};

fn data_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Param {
        name: path.display().to_string(),
        message: format!("line {line}: {}", message.into()),
    }
}

fn data_rows(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, line)| (i + 1, line.trim()))
        .skip(1) // header row
        .filter(|(_, line)| !line.is_empty())
}

/// Read a rectangular float table: header row, then one row of
/// comma-separated numbers per record. Returns the values row-major along
/// with the column count.
pub fn read_float_table(path: &Path) -> Result<(Vec<f64>, usize)> {
    let text = std::fs::read_to_string(path)?;
    let mut values = Vec::new();
    let mut columns = None;
    for (line_no, line) in data_rows(&text) {
        let mut row = 0usize;
        for field in line.split(',') {
            let value: f64 = field.trim().parse().map_err(|_| {
                data_error(path, line_no, format!("`{}` is not a number", field.trim()))
            })?;
            values.push(value);
            row += 1;
        }
        match columns {
            None => columns = Some(row),
            Some(c) if c != row => {
                return Err(data_error(
                    path,
                    line_no,
                    format!("expected {c} columns, found {row}"),
                ));
            }
            _ => {}
        }
    }
    match columns {
        Some(columns) => Ok((values, columns)),
        None => Err(data_error(path, 1, "no data rows after the header")),
    }
}

/// Read a single-column table of non-negative integers (class labels).
pub fn read_label_column(path: &Path) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path)?;
    let mut labels = Vec::new();
    for (line_no, line) in data_rows(&text) {
        if line.contains(',') {
            return Err(data_error(path, line_no, "labels must be a single column"));
        }
        let label: usize = line
            .parse()
            .map_err(|_| data_error(path, line_no, format!("`{line}` is not a label index")))?;
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(data_error(path, 1, "no data rows after the header"));
    }
    Ok(labels)
}

/// Write a float table with a generated header `{prefix}_0,...`.
pub fn write_float_table(
    path: &Path,
    prefix: &str,
    values: &[f64],
    columns: usize,
) -> Result<()> {
    assert!(columns > 0, "a table needs at least one column");
    assert!(
        values.len() % columns == 0,
        "value count {} does not fill whole rows of {columns}",
        values.len()
    );
    let mut out = String::new();
    for c in 0..columns {
        if c > 0 {
            out.push(',');
        }
        out.push_str(&format!("{prefix}_{c}"));
    }
    out.push('\n');
    for row in values.chunks(columns) {
        for (c, value) in row.iter().enumerate() {
            if c > 0 {
                out.push(',');
            }
            out.push_str(&format!("{value}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Parse a comma-separated list of positive integers (class counts).
pub fn parse_count_list(raw: &str) -> Result<Vec<u64>> {
    let mut counts = Vec::new();
    for field in raw.split(',') {
        let value: u64 = field.trim().parse().map_err(|_| Error::Param {
            name: "counts".to_string(),
            message: format!("`{}` is not a count", field.trim()),
        })?;
        counts.push(value);
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_table_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let values = vec![1.5, -2.25, 0.1, 1e-17, 3.0, -0.75];
        write_float_table(&path, "v", &values, 3).unwrap();
        let (back, columns) = read_float_table(&path).unwrap();
        assert_eq!(columns, 3);
        assert_eq!(back, values, "shortest-round-trip floats must come back exact");
    }

    #[test]
    fn ragged_rows_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        std::fs::write(&path, "a,b\n1,2\n3\n").unwrap();
        let err = read_float_table(&path).unwrap_err();
        assert!(err.to_string().contains("line 3"), "got: {err}");
    }

    #[test]
    fn labels_reject_multiple_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.csv");
        std::fs::write(&path, "label\n0\n1,2\n").unwrap();
        let err = read_label_column(&path).unwrap_err();
        assert!(err.to_string().contains("single column"), "got: {err}");
    }

    #[test]
    fn blank_lines_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.csv");
        std::fs::write(&path, "label\n0\n\n2\n").unwrap();
        assert_eq!(read_label_column(&path).unwrap(), vec![0, 2]);
    }

    #[test]
    fn count_lists_parse() {
        assert_eq!(parse_count_list("100, 300").unwrap(), vec![100, 300]);
        assert!(parse_count_list("100,many").is_err());
    }
}
