//! Tabular datasets with per-column roles, and their CSV form.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Design,
    Calibration,
    Output,
    Time,
    Ignore,
}

pub type RoleMap = BTreeMap<String, Role>;

/// Rows of design inputs x, calibration inputs θ, optional time, and outputs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dataset {
    pub design_names: Vec<String>,
    pub calib_names: Vec<String>,
    pub output_names: Vec<String>,
    pub time_name: Option<String>,
    pub design: Vec<Vec<f64>>,
    pub calib: Vec<Vec<f64>>,
    pub output: Vec<Vec<f64>>,
    pub time: Vec<f64>,
}

fn to_matrix(rows: &[Vec<f64>], ncols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j])
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.output.len()
    }

    pub fn is_empty(&self) -> bool {
        self.output.is_empty()
    }

    pub fn design_matrix(&self) -> DMatrix<f64> {
        to_matrix(&self.design, self.design_names.len())
    }

    pub fn calib_matrix(&self) -> DMatrix<f64> {
        to_matrix(&self.calib, self.calib_names.len())
    }

    /// Design and calibration columns side by side.
    pub fn input_matrix(&self) -> DMatrix<f64> {
        let (p, q) = (self.design_names.len(), self.calib_names.len());
        DMatrix::from_fn(self.len(), p + q, |i, j| if j < p { self.design[i][j] } else { self.calib[i][j - p] })
    }

    /// Dataset restricted to the given rows, in that order.
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        let pick = |v: &Vec<Vec<f64>>| if v.is_empty() { Vec::new() } else { rows.iter().map(|&i| v[i].clone()).collect() };
        Dataset {
            design: pick(&self.design),
            calib: pick(&self.calib),
            output: pick(&self.output),
            time: if self.time.is_empty() { Vec::new() } else { rows.iter().map(|&i| self.time[i]).collect() },
            ..self.clone_names()
        }
    }

    fn clone_names(&self) -> Dataset {
        Dataset {
            design_names: self.design_names.clone(),
            calib_names: self.calib_names.clone(),
            output_names: self.output_names.clone(),
            time_name: self.time_name.clone(),
            ..Dataset::default()
        }
    }

    pub fn output_column(&self, k: usize) -> Vec<f64> {
        self.output.iter().map(|r| r[k]).collect()
    }

    /// Checks row lengths and finiteness.
    pub fn validate(&self) -> Result<()> {
        let n = self.output.len();
        let check = |rows: &Vec<Vec<f64>>, w: usize, what: &str| -> Result<()> {
            if !rows.is_empty() && rows.len() != n {
                return Err(Error::DimensionMismatch(format!("{what} has {} rows, outputs have {n}", rows.len())));
            }
            for (i, r) in rows.iter().enumerate() {
                if r.len() != w {
                    return Err(Error::DimensionMismatch(format!("{what} row {} has {} values, expected {w}", i + 1, r.len())));
                }
                if let Some(j) = r.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("{what} at row {}, column {}", i + 1, j + 1)));
                }
            }
            Ok(())
        };
        check(&self.design, self.design_names.len(), "design")?;
        check(&self.calib, self.calib_names.len(), "calibration")?;
        check(&self.output, self.output_names.len(), "output")?;
        if self.design.is_empty() && !self.design_names.is_empty() && n > 0 {
            return Err(Error::DimensionMismatch("design columns named but empty".into()));
        }
        if self.time_name.is_some() && self.time.len() != n {
            return Err(Error::DimensionMismatch("time column length differs from outputs".into()));
        }
        Ok(())
    }

    /// Column names in file order: design, calibration, time, outputs.
    pub fn header(&self) -> Vec<String> {
        let mut h = self.design_names.clone();
        h.extend(self.calib_names.iter().cloned());
        h.extend(self.time_name.iter().cloned());
        h.extend(self.output_names.iter().cloned());
        h
    }

    pub fn role_map(&self) -> RoleMap {
        let mut m = RoleMap::new();
        for n in &self.design_names {
            m.insert(n.clone(), Role::Design);
        }
        for n in &self.calib_names {
            m.insert(n.clone(), Role::Calibration);
        }
        if let Some(t) = &self.time_name {
            m.insert(t.clone(), Role::Time);
        }
        for n in &self.output_names {
            m.insert(n.clone(), Role::Output);
        }
        m
    }
}

/// Reads a headed CSV, assigning each column by `roles`.
pub fn ingest_dataset(path: &Path, roles: &RoleMap) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    read_dataset(file, roles).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn read_dataset<R: std::io::Read>(reader: R, roles: &RoleMap) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|s| s.to_string()).collect();
    if header.is_empty() || header.iter().all(|h| h.is_empty()) {
        return Err(Error::Data("empty file".into()));
    }
    let mut seen = HashSet::new();
    for h in &header {
        if !seen.insert(h.as_str()) {
            return Err(Error::Data(format!("duplicate column name '{h}'")));
        }
    }
    if let Some(k) = roles.keys().find(|k| !seen.contains(k.as_str())) {
        return Err(Error::Data(format!("role assigned to missing column '{k}'")));
    }
    let mut col_roles = Vec::with_capacity(header.len());
    for h in &header {
        let r = roles.get(h).ok_or_else(|| Error::Data(format!("column '{h}' has no role")))?;
        col_roles.push(*r);
    }
    if col_roles.iter().filter(|r| **r == Role::Time).count() > 1 {
        return Err(Error::Data("more than one time column".into()));
    }
    let mut ds = Dataset::default();
    for (h, r) in header.iter().zip(&col_roles) {
        match r {
            Role::Design => ds.design_names.push(h.clone()),
            Role::Calibration => ds.calib_names.push(h.clone()),
            Role::Output => ds.output_names.push(h.clone()),
            Role::Time => ds.time_name = Some(h.clone()),
            Role::Ignore => {}
        }
    }
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        if rec.len() != header.len() {
            return Err(Error::Data(format!("row {row} has {} fields, header has {}", rec.len(), header.len())));
        }
        let (mut d, mut c, mut o) = (Vec::new(), Vec::new(), Vec::new());
        for (j, (cell, role)) in rec.iter().zip(&col_roles).enumerate() {
            if *role == Role::Ignore {
                continue;
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| Error::Data(format!("unparsable value '{cell}' at row {row}, column {}", j + 1)))?;
            if !v.is_finite() {
                return Err(Error::Data(format!("non-finite value at row {row}, column {}", j + 1)));
            }
            match role {
                Role::Design => d.push(v),
                Role::Calibration => c.push(v),
                Role::Output => o.push(v),
                Role::Time => ds.time.push(v),
                Role::Ignore => {}
            }
        }
        ds.design.push(d);
        ds.calib.push(c);
        ds.output.push(o);
    }
    if ds.output.is_empty() {
        return Err(Error::Data("file has a header but no data rows".into()));
    }
    Ok(ds)
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let f = File::create(path)?;
    write_dataset_to(f, ds)
}

pub fn write_dataset_to<W: std::io::Write>(w: W, ds: &Dataset) -> Result<()> {
    ds.validate()?;
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(ds.header())?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = Vec::new();
        if !ds.design_names.is_empty() {
            rec.extend(ds.design[i].iter().map(|v| v.to_string()));
        }
        if !ds.calib_names.is_empty() {
            rec.extend(ds.calib[i].iter().map(|v| v.to_string()));
        }
        if ds.time_name.is_some() {
            rec.push(ds.time[i].to_string());
        }
        rec.extend(ds.output[i].iter().map(|v| v.to_string()));
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn roles(pairs: &[(&str, Role)]) -> RoleMap {
        pairs.iter().map(|(k, r)| (k.to_string(), *r)).collect()
    }

    #[test]
    fn three_columns_two_designs() {
        let csv = "a,b,y\n0.1,0.2,3\n0.4,0.5,6\n";
        let ds = read_dataset(csv.as_bytes(), &roles(&[("a", Role::Design), ("b", Role::Design), ("y", Role::Output)])).unwrap();
        assert_eq!(ds.design_matrix().shape(), (2, 2));
        assert_eq!(ds.output_column(0), vec![3.0, 6.0]);
    }

    #[test]
    fn nan_cell_reports_coordinates() {
        let csv = "a,b\n1,2\n1,2\n1,2\n1,2\n1,NaN\n";
        let err = read_dataset(csv.as_bytes(), &roles(&[("a", Role::Design), ("b", Role::Output)])).unwrap_err();
        assert!(err.to_string().contains("row 5, column 2"), "{err}");
    }

    #[test]
    fn duplicate_and_empty_are_rejected() {
        let r = roles(&[("a", Role::Design)]);
        assert!(read_dataset("a,a\n1,2\n".as_bytes(), &r).unwrap_err().to_string().contains("duplicate"));
        assert!(read_dataset("".as_bytes(), &r).is_err());
        assert!(read_dataset("a\n".as_bytes(), &r).is_err());
    }

    #[test]
    fn unmapped_column_is_an_error() {
        let err = read_dataset("a,b\n1,2\n".as_bytes(), &roles(&[("a", Role::Design)])).unwrap_err();
        assert!(err.to_string().contains("'b'"));
    }

    proptest! {
        #[test]
        fn write_read_round_trip(vals in proptest::collection::vec(-1e6f64..1e6, 12)) {
            let ds = Dataset {
                design_names: vec!["x".into()],
                calib_names: vec!["t".into()],
                output_names: vec!["y1".into(), "y2".into()],
                time_name: None,
                design: vals.chunks(4).map(|c| vec![c[0]]).collect(),
                calib: vals.chunks(4).map(|c| vec![c[1]]).collect(),
                output: vals.chunks(4).map(|c| vec![c[2], c[3] * 1e-7]).collect(),
                time: vec![],
            };
            let mut buf = Vec::new();
            write_dataset_to(&mut buf, &ds).unwrap();
            let back = read_dataset(buf.as_slice(), &ds.role_map()).unwrap();
            prop_assert_eq!(back, ds);
        }
    }
}
