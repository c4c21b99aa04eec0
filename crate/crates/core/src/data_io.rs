//! CSV input of observations and CSV output of result tables.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Observations `(Y1, Y2, X)` with `X` an `n x d_x` instrument matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y1: Vec<f64>,
    y2: Vec<f64>,
    x: DMatrix<f64>,
}

impl Dataset {
    pub fn new(y1: Vec<f64>, y2: Vec<f64>, x: DMatrix<f64>) -> Result<Self> {
        let n = y1.len();
        if n == 0 {
            return Err(Error::Config("dataset must have at least one row".into()));
        }
        if y2.len() != n || x.nrows() != n || x.ncols() == 0 {
            return Err(Error::Dimension {
                what: "dataset columns",
                expected: n,
                got: if y2.len() != n { y2.len() } else { x.nrows() },
            });
        }
        let finite = y1.iter().chain(&y2).chain(x.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("dataset contains non-finite values".into()));
        }
        Ok(Self { y1, y2, x })
    }

    /// Single-instrument convenience constructor.
    pub fn from_columns(y1: Vec<f64>, y2: Vec<f64>, x: Vec<f64>) -> Result<Self> {
        let n = x.len();
        Self::new(y1, y2, DMatrix::from_vec(n, 1, x))
    }

    pub fn n(&self) -> usize {
        self.y1.len()
    }

    pub fn y1(&self) -> &[f64] {
        &self.y1
    }

    pub fn y2(&self) -> &[f64] {
        &self.y2
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    /// First instrument column.
    pub fn x1(&self) -> &[f64] {
        &self.x.as_slice()[..self.n()]
    }
}

/// Column names for `y1`, `y2` and the instruments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    pub y1: String,
    pub y2: String,
    pub x: Vec<String>,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            y1: "y1".into(),
            y2: "y2".into(),
            x: vec!["x".into()],
        }
    }
}

pub fn load_dataset(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = rdr.headers()?.clone();
    let index: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h, i)).collect();
    let lookup = |name: &str| {
        index
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let i1 = lookup(&schema.y1)?;
    let i2 = lookup(&schema.y2)?;
    let ix: Vec<usize> = schema.x.iter().map(|c| lookup(c)).collect::<Result<_>>()?;

    let mut y1 = Vec::new();
    let mut y2 = Vec::new();
    let mut xcols: Vec<Vec<f64>> = vec![Vec::new(); ix.len()];
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        // 1-based data row, header excluded
        let row = row + 1;
        let cell = |idx: usize, name: &str| -> Result<f64> {
            let raw = rec.get(idx).unwrap_or("");
            let parse_err = |reason: String| Error::Parse {
                row,
                column: name.to_string(),
                reason,
            };
            if raw.is_empty() {
                return Err(parse_err("missing value".into()));
            }
            let v: f64 = raw.parse().map_err(|_| parse_err(format!("not a number: `{raw}`")))?;
            if !v.is_finite() {
                return Err(parse_err(format!("non-finite value `{raw}`")));
            }
            Ok(v)
        };
        y1.push(cell(i1, &schema.y1)?);
        y2.push(cell(i2, &schema.y2)?);
        for (col, (&idx, name)) in xcols.iter_mut().zip(ix.iter().zip(&schema.x)) {
            col.push(cell(idx, name)?);
        }
    }
    let n = y1.len();
    let x = DMatrix::from_iterator(n, xcols.len(), xcols.into_iter().flatten());
    Dataset::new(y1, y2, x)
}

/// Write a dataset with the default column names.
pub fn write_dataset(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut header = vec!["y1".to_string(), "y2".to_string()];
    let dx = data.x().ncols();
    if dx == 1 {
        header.push("x".into());
    } else {
        header.extend((1..=dx).map(|j| format!("x{j}")));
    }
    let mut table = Table::new(header);
    for i in 0..data.n() {
        let mut row = vec![Cell::Num(data.y1()[i]), Cell::Num(data.y2()[i])];
        row.extend(data.x().row(i).iter().map(|&v| Cell::Num(v)));
        table.push(row)?;
    }
    write_table(&table, path)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Text(String),
}

impl Cell {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Num(v) => Some(*v),
            Cell::Text(s) => s.parse().ok(),
        }
    }

    fn render(&self) -> String {
        match self {
            // shortest representation that round-trips exactly
            Cell::Num(v) => format!("{v}"),
            Cell::Text(s) => s.clone(),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Num(v as f64)
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_string())
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::Text(s)
    }
}

/// Homogeneous records with a header row.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) -> Result<()> {
        if row.len() != self.header.len() {
            return Err(Error::Dimension {
                what: "table row",
                expected: self.header.len(),
                got: row.len(),
            });
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<Vec<&Cell>> {
        let j = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| &r[j]).collect())
    }

    /// Key-value lookup for two-column `key,value` tables.
    pub fn get(&self, key: &str) -> Option<&Cell> {
        self.rows
            .iter()
            .find(|r| matches!(&r[0], Cell::Text(k) if k == key))
            .map(|r| &r[1])
    }
}

pub fn write_table(table: &Table, path: impl AsRef<Path>) -> Result<()> {
    write_table_to(table, std::fs::File::create(path)?)
}

pub fn write_table_to<W: std::io::Write>(table: &Table, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(&table.header)?;
    for row in &table.rows {
        w.write_record(row.iter().map(Cell::render))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a table back; cells that parse as numbers become [`Cell::Num`].
pub fn read_table(path: impl AsRef<Path>) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header = rdr.headers()?.iter().map(str::to_string).collect();
    let mut table = Table {
        header,
        rows: Vec::new(),
    };
    for rec in rdr.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|s| match s.parse::<f64>() {
                Ok(v) => Cell::Num(v),
                Err(_) => Cell::Text(s.to_string()),
            })
            .collect();
        table.rows.push(row);
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn write_file(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        let mut f = std::fs::File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn loads_rows_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(&dir, "d.csv", "y1,y2,x\n1,2,3\n4,5,6\n7.5,-8,9e-1\n");
        let d = load_dataset(&p, &Schema::default()).unwrap();
        assert_eq!(d.n(), 3);
        assert_eq!(d.y1(), &[1.0, 4.0, 7.5]);
        assert_eq!(d.y2(), &[2.0, 5.0, -8.0]);
        assert_eq!(d.x1(), &[3.0, 6.0, 0.9]);
    }

    #[test]
    fn reordered_columns_give_same_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let a = write_file(&dir, "a.csv", "y1,y2,x\n1,2,3\n4,5,6\n");
        let b = write_file(&dir, "b.csv", "x,y1,y2\n3,1,2\n6,4,5\n");
        let s = Schema::default();
        assert_eq!(load_dataset(a, &s).unwrap(), load_dataset(b, &s).unwrap());
    }

    #[test]
    fn blank_cell_names_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(&dir, "d.csv", "y1,y2,x\n1,2,3\n,5,6\n");
        match load_dataset(p, &Schema::default()) {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "y1");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_column_and_non_finite() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_file(&dir, "d.csv", "y1,x\n1,3\n");
        assert!(matches!(
            load_dataset(p, &Schema::default()),
            Err(Error::MissingColumn(c)) if c == "y2"
        ));
        let p = write_file(&dir, "e.csv", "y1,y2,x\n1,inf,3\n");
        assert!(matches!(load_dataset(p, &Schema::default()), Err(Error::Parse { .. })));
    }

    #[test]
    fn table_output_format() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        let mut t = Table::new(["size10"]);
        t.push(vec![Cell::Num(0.099)]).unwrap();
        write_table(&t, &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "size10\n0.099\n");
        let empty = Table::new(["a", "b"]);
        write_table(&empty, &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "a,b\n");
        assert!(write_table(&empty, dir.path().join("no/such/dir.csv")).is_err());
    }

    proptest! {
        #[test]
        fn table_round_trip(vals in proptest::collection::vec(-1e12f64..1e12, 0..20)) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("t.csv");
            let mut t = Table::new(["label", "rate"]);
            for (i, v) in vals.iter().enumerate() {
                t.push(vec![Cell::Text(format!("row{i}")), Cell::Num(*v)]).unwrap();
            }
            write_table(&t, &p).unwrap();
            let back = read_table(&p).unwrap();
            prop_assert_eq!(back.header, t.header);
            for (a, b) in back.rows.iter().zip(&t.rows) {
                let (x, y) = (a[1].as_f64().unwrap(), b[1].as_f64().unwrap());
                prop_assert!((x - y).abs() <= 1e-10 * y.abs().max(f64::MIN_POSITIVE));
            }
        }
    }
}
