//! Long-format dataset CSV: one row per observation, columns `id, y, x1..xk`,
//! header required.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use vcboot_core::{Dataset, Individual};

use crate::error::{Error, Result};

/// Which CSV columns hold the individual id, the response and the covariates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ColumnMap {
    pub id: String,
    pub y: String,
    /// Covariate columns in the order the mean function indexes them; empty
    /// means every other column, in header order.
    pub covariates: Vec<String>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            id: "id".to_string(),
            y: "y".to_string(),
            covariates: Vec::new(),
        }
    }
}

pub fn read_dataset(path: &Path, columns: &ColumnMap) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(file, path, columns)
}

/// Individuals appear in order of first occurrence, observations in file order.
pub fn parse_dataset<R: Read>(reader: R, path: &Path, columns: &ColumnMap) -> Result<Dataset> {
    let schema = |message: String| Error::Schema {
        path: path.to_path_buf(),
        message,
    };
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| schema(format!("missing column `{name}` (header: {})", header.join(","))))
    };
    let id_col = find(&columns.id)?;
    let y_col = find(&columns.y)?;
    let cov_cols: Vec<usize> = if columns.covariates.is_empty() {
        (0..header.len()).filter(|&c| c != id_col && c != y_col).collect()
    } else {
        columns.covariates.iter().map(|c| find(c)).collect::<Result<_>>()?
    };

    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, (Vec<f64>, Vec<Vec<f64>>)> = HashMap::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record.map_err(csv_err)?;
        let value = |c: usize| -> Result<f64> {
            let raw = record.get(c).unwrap_or("");
            raw.parse::<f64>().map_err(|_| {
                schema(format!(
                    "row {}: column `{}` is not a number: {raw:?}",
                    line + 2,
                    header[c]
                ))
            })
        };
        let id = record.get(id_col).unwrap_or("").to_string();
        let y = value(y_col)?;
        let x = cov_cols.iter().map(|&c| value(c)).collect::<Result<Vec<_>>>()?;
        let entry = rows.entry(id.clone()).or_insert_with(|| {
            order.push(id);
            (Vec::new(), Vec::new())
        });
        entry.0.push(y);
        entry.1.push(x);
    }
    if order.is_empty() {
        return Err(schema("no observations".to_string()));
    }
    let individuals = order
        .into_iter()
        .map(|id| {
            let (y, x) = rows.remove(&id).expect("id recorded");
            Individual::new(id, y, x)
        })
        .collect::<vcboot_core::Result<Vec<_>>>()?;
    Ok(Dataset::new(individuals)?)
}

/// Writes `id,y,x1..xk`.
pub fn write_dataset<W: Write>(writer: W, data: &Dataset) -> csv::Result<()> {
    let k = data.individuals().first().and_then(|i| i.x.first()).map_or(0, Vec::len);
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_string(), "y".to_string()];
    header.extend((1..=k).map(|c| format!("x{c}")));
    w.write_record(&header)?;
    for ind in data.individuals() {
        for (y, x) in ind.y.iter().zip(&ind.x) {
            let mut rec = vec![ind.id.clone(), y.to_string()];
            rec.extend(x.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str, map: &ColumnMap) -> Result<Dataset> {
        parse_dataset(text.as_bytes(), Path::new("t.csv"), map)
    }

    #[test]
    fn groups_rows_by_first_appearance() {
        let d = parse("id,y,x1\nb,1,1\na,2,1\nb,3,2\n", &ColumnMap::default()).unwrap();
        assert_eq!(d.n(), 2);
        assert_eq!(d.individuals()[0].id, "b");
        assert_eq!(d.individuals()[0].y, vec![1.0, 3.0]);
        assert_eq!(d.individuals()[0].x, vec![vec![1.0], vec![2.0]]);
    }

    #[test]
    fn missing_response_column_is_named() {
        let err = parse("id,resp,x1\n1,2,3\n", &ColumnMap::default()).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("`y`"), "{err}");
    }

    #[test]
    fn explicit_covariate_order() {
        let map = ColumnMap {
            id: "bird".into(),
            y: "mass".into(),
            covariates: vec!["age".into()],
        };
        let d = parse("mass,nest,age,bird\n10,3,4,z\n", &map).unwrap();
        assert_eq!(d.individuals()[0].x, vec![vec![4.0]]);
    }

    #[test]
    fn bad_number_reports_row() {
        let err = parse("id,y,x1\n1,2,3\n1,abc,3\n", &ColumnMap::default()).unwrap_err();
        assert!(err.to_string().contains("row 3"), "{err}");
    }

    #[test]
    fn round_trip() {
        let d = parse("id,y,x1,x2\n1,0.5,1,2\n1,1.5,2,4\n2,-3,1,1\n", &ColumnMap::default()).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &d).unwrap();
        let back = parse(std::str::from_utf8(&buf).unwrap(), &ColumnMap::default()).unwrap();
        assert_eq!(back, d);
    }
}
