//! Dataset files: CSV with header `z,s,y,w,x1,...,xp` plus a JSON sidecar
//! declaring the schema. All outputs are UTF-8 with LF line endings.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Dataset, ObservedUnit, Schema};

pub fn write_dataset_csv(d: &Dataset, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let p = d.schema().n_covariates;
    let mut header = String::from("z,s,y,w");
    for j in 1..=p {
        header.push_str(&format!(",x{j}"));
    }
    writeln!(out, "{header}")?;
    for u in d.units() {
        let mut line = format!("{},{},{},{}", u.z, u.s, u.y, u.w);
        for v in &u.x {
            line.push_str(&format!(",{v}"));
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn write_schema_json(schema: &Schema, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, schema)?;
    writeln!(out)?;
    Ok(())
}

pub fn read_schema_json(path: &Path) -> Result<Schema> {
    let file = BufReader::new(File::open(path)?);
    Ok(serde_json::from_reader(file)?)
}

pub fn read_dataset_csv(csv_path: &Path, schema: Schema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(BufReader::new(File::open(csv_path)?));
    let headers = reader.headers()?.clone();
    for (i, expect) in ["z", "s", "y", "w"].iter().enumerate() {
        if headers.get(i) != Some(expect) {
            return Err(Error::SchemaViolation(format!(
                "column {i} must be `{expect}`, found {:?}",
                headers.get(i)
            )));
        }
    }
    let p = headers.len().saturating_sub(4);
    if p != schema.n_covariates {
        return Err(Error::SchemaViolation(format!(
            "csv has {p} covariate columns, schema declares {}",
            schema.n_covariates
        )));
    }
    let mut units = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let field = |i: usize| -> Result<f64> {
            record
                .get(i)
                .ok_or_else(|| Error::SchemaViolation(format!("row {row}: missing column {i}")))?
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::SchemaViolation(format!("row {row}, column {i}: {e}")))
        };
        let z = field(0)?;
        if z != 0.0 && z != 1.0 {
            return Err(Error::SchemaViolation(format!(
                "row {row}: z={z} not in {{0,1}}"
            )));
        }
        let mut x = Vec::with_capacity(p);
        for j in 0..p {
            x.push(field(4 + j)?);
        }
        units.push(ObservedUnit::with_x(
            z as u8,
            field(1)?,
            field(2)?,
            field(3)?,
            x,
        ));
    }
    Dataset::new(units, schema)
}

/// Read a dataset whose schema sidecar sits next to the CSV
/// (`foo.csv` -> `foo.schema.json`) unless an explicit path is given.
pub fn read_dataset(csv_path: &Path, schema_path: Option<&Path>) -> Result<Dataset> {
    let derived;
    let schema_path = match schema_path {
        Some(p) => p,
        None => {
            derived = csv_path.with_extension("schema.json");
            &derived
        }
    };
    let schema = read_schema_json(schema_path)?;
    read_dataset_csv(csv_path, schema)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{VarKind, YKind};

    #[test]
    fn round_trip_with_covariates() {
        let schema = Schema::new(
            VarKind::Continuous,
            VarKind::Continuous,
            YKind::Continuous,
            2,
        );
        let d = Dataset::new(
            vec![
                ObservedUnit::with_x(1, 0.25, -1.5, 3.0, vec![1.0, 2.0]),
                ObservedUnit::with_x(0, 1.5, 0.5, -0.25, vec![0.5, -0.125]),
            ],
            schema.clone(),
        )
        .unwrap();
        let dir = std::env::temp_dir().join("pce_io_test");
        std::fs::create_dir_all(&dir).unwrap();
        let csv = dir.join("d.csv");
        let sj = dir.join("d.schema.json");
        write_dataset_csv(&d, &csv).unwrap();
        write_schema_json(&schema, &sj).unwrap();
        let back = read_dataset(&csv, None).unwrap();
        assert_eq!(d, back);
    }
}
