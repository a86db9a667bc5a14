//! Column-oriented tabular data read from delimited text.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub name: String,
    pub raw: Vec<String>,
    /// Present when every cell parses as a finite real.
    pub numeric: Option<Vec<f64>>,
}

/// Immutable table of equal-length named columns.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    columns: Vec<Column>,
    index: HashMap<String, usize>,
    n_rows: usize,
}

impl Dataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.index.get(name).map(|&i| &self.columns[i])
    }

    pub fn numeric(&self, name: &str) -> Result<&[f64]> {
        let col = self
            .column(name)
            .ok_or_else(|| Error::Data(format!("missing column '{name}'")))?;
        col.numeric
            .as_deref()
            .ok_or_else(|| Error::Data(format!("column '{name}' is not numeric")))
    }

    pub fn labels(&self, name: &str) -> Result<&[String]> {
        self.column(name)
            .map(|c| c.raw.as_slice())
            .ok_or_else(|| Error::Data(format!("missing column '{name}'")))
    }

    fn push(&mut self, name: String, raw: Vec<String>, numeric: Option<Vec<f64>>) -> Result<()> {
        if self.index.contains_key(&name) {
            return Err(Error::Data(format!("duplicate column '{name}'")));
        }
        if !self.columns.is_empty() && raw.len() != self.n_rows {
            return Err(Error::Data(format!(
                "column '{name}' has {} rows, expected {}",
                raw.len(),
                self.n_rows
            )));
        }
        self.n_rows = raw.len();
        self.index.insert(name.clone(), self.columns.len());
        self.columns.push(Column { name, raw, numeric });
        Ok(())
    }

    pub fn with_numeric(mut self, name: &str, values: Vec<f64>) -> Result<Self> {
        let raw = values.iter().map(|v| format_real(*v)).collect();
        self.push(name.to_string(), raw, Some(values))?;
        Ok(self)
    }

    pub fn with_labels<S: ToString>(mut self, name: &str, values: &[S]) -> Result<Self> {
        let raw: Vec<String> = values.iter().map(|v| v.to_string()).collect();
        let numeric = parse_all(&raw);
        self.push(name.to_string(), raw, numeric)?;
        Ok(self)
    }

    /// Comma-separated text with a header row.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let mut cells: Vec<Vec<String>> = vec![Vec::new(); headers.len()];
        for record in rdr.records() {
            let record = record?;
            if record.len() != headers.len() {
                return Err(Error::Data(format!(
                    "row {} has {} fields, header has {}",
                    cells[0].len() + 2,
                    record.len(),
                    headers.len()
                )));
            }
            for (j, field) in record.iter().enumerate() {
                cells[j].push(field.to_string());
            }
        }
        let mut ds = Dataset::new();
        for (name, raw) in headers.into_iter().zip(cells) {
            let numeric = parse_all(&raw);
            ds.push(name, raw, numeric)?;
        }
        Ok(ds)
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path.as_ref())?;
        Self::from_csv_reader(std::io::BufReader::new(file))
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(self.columns.iter().map(|c| c.name.as_str()))?;
        for i in 0..self.n_rows {
            w.write_record(self.columns.iter().map(|c| c.raw[i].as_str()))?;
        }
        w.flush()?;
        Ok(())
    }
}

fn parse_all(raw: &[String]) -> Option<Vec<f64>> {
    raw.iter()
        .map(|s| s.parse::<f64>().ok().filter(|v| v.is_finite()))
        .collect()
}

/// Full-precision text form of a real (17 significant digits).
pub fn format_real(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{v:.1}")
    } else {
        format!("{v:.16e}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_numeric_and_label_columns() {
        let text = "y,x,g\n1.5,2,A\n2.5,3,A\n-1,4,B\n";
        let ds = Dataset::from_csv_reader(text.as_bytes()).unwrap();
        assert_eq!(ds.n_rows(), 3);
        assert_eq!(ds.numeric("y").unwrap(), &[1.5, 2.5, -1.0]);
        assert!(ds.numeric("g").is_err());
        assert_eq!(ds.labels("g").unwrap(), &["A", "A", "B"]);
        assert!(ds.numeric("missing").is_err());
    }

    #[test]
    fn ragged_rows_are_rejected() {
        let text = "y,x\n1,2\n3\n";
        assert!(Dataset::from_csv_reader(text.as_bytes()).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let vals = vec![0.1, 1.0 / 3.0, -2.5e-17, 12345.0, std::f64::consts::PI];
        let ds = Dataset::new().with_numeric("v", vals.clone()).unwrap().with_labels("g", &[1, 1, 2, 2, 3]).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let back = Dataset::from_csv_reader(buf.as_slice()).unwrap();
        assert_eq!(back.numeric("v").unwrap(), vals.as_slice());
        assert_eq!(back.labels("g").unwrap(), &["1", "1", "2", "2", "3"]);
    }

    #[test]
    fn seventeen_significant_digits() {
        assert_eq!(format_real(1.0 / 3.0), "3.3333333333333331e-1");
        assert_eq!(format_real(2.0), "2.0");
    }
}
