//! File layouts: a JSON header describing the grid and horizon, plus a CSV
//! body with one row per (slice, node). Reals are written with 17 significant
//! digits so that reading a file back reproduces every value bit for bit.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hjb::ValueFunction;
use crate::policy::PolicyField;
use crate::problem::{ControlBounds, GridSpec, Horizon};
use crate::sde::Path;

/// Round-trip decimal form of `v`.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldHeader {
    pub kind: String,
    pub grid: GridSpec,
    pub horizon: Horizon,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<ControlBounds>,
    pub n_slices: usize,
    pub n_points: usize,
    pub columns: Vec<String>,
    pub body: String,
}

fn write_json<T: Serialize>(path: &FsPath, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn body_name(csv: &FsPath) -> String {
    csv.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn write_rows(
    csv: &FsPath,
    columns: &[String],
    slices: &[Vec<f64>],
    width: usize,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(csv)?);
    writeln!(w, "{}", columns.join(","))?;
    for (k, slice) in slices.iter().enumerate() {
        for (point, row) in slice.chunks_exact(width).enumerate() {
            write!(w, "{k},{point}")?;
            for v in row {
                write!(w, ",{}", fmt_real(*v))?;
            }
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_rows(csv: &FsPath, header: &FieldHeader, width: usize) -> Result<Vec<Vec<f64>>> {
    let reader = BufReader::new(File::open(csv)?);
    let mut lines = reader.lines();
    let head = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty file", csv.display())))??;
    if head != header.columns.join(",") {
        return Err(Error::Format(format!(
            "{}: unexpected header {head:?}",
            csv.display()
        )));
    }
    let mut slices = vec![vec![f64::NAN; header.n_points * width]; header.n_slices];
    let mut seen = 0usize;
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| {
            Error::Format(format!("{} line {}: {what}", csv.display(), lineno + 2))
        };
        let mut cells = line.split(',');
        let mut index = |name: &str| -> Result<usize> {
            cells
                .next()
                .and_then(|c| c.parse().ok())
                .ok_or_else(|| bad(&format!("bad {name}")))
        };
        let k = index("slice")?;
        let point = index("point")?;
        if k >= header.n_slices || point >= header.n_points {
            return Err(bad("index out of range"));
        }
        for c in 0..width {
            let v: f64 = cells
                .next()
                .and_then(|c| c.trim().parse().ok())
                .ok_or_else(|| bad("bad value"))?;
            slices[k][point * width + c] = v;
        }
        if cells.next().is_some() {
            return Err(bad("too many columns"));
        }
        seen += 1;
    }
    if seen != header.n_slices * header.n_points {
        return Err(Error::Format(format!(
            "{}: expected {} rows, found {seen}",
            csv.display(),
            header.n_slices * header.n_points
        )));
    }
    Ok(slices)
}

/// Writes `vf` as `json` header plus `csv` body (`slice,point,value`).
pub fn write_value_function(vf: &ValueFunction, json: &FsPath, csv: &FsPath) -> Result<()> {
    let header = FieldHeader {
        kind: "value_function".into(),
        grid: vf.grid.clone(),
        horizon: vf.horizon,
        bounds: None,
        n_slices: vf.values.len(),
        n_points: vf.grid.len(),
        columns: vec!["slice".into(), "point".into(), "value".into()],
        body: body_name(csv),
    };
    write_json(json, &header)?;
    write_rows(csv, &header.columns, &vf.values, 1)
}

pub fn read_value_function(json: &FsPath, csv: &FsPath) -> Result<ValueFunction> {
    let header: FieldHeader = serde_json::from_reader(BufReader::new(File::open(json)?))?;
    if header.kind != "value_function" {
        return Err(Error::Format(format!("{}: not a value function", json.display())));
    }
    let values = read_rows(csv, &header, 1)?;
    Ok(ValueFunction {
        grid: header.grid,
        horizon: header.horizon,
        values,
    })
}

/// Writes `field` as `json` header plus `csv` body (`slice,point,u_0..`).
pub fn write_policy_field(field: &PolicyField, json: &FsPath, csv: &FsPath) -> Result<()> {
    let mut columns = vec!["slice".to_string(), "point".to_string()];
    columns.extend((0..field.dim()).map(|mu| format!("u_{mu}")));
    let header = FieldHeader {
        kind: "policy_field".into(),
        grid: field.grid.clone(),
        horizon: field.horizon,
        bounds: Some(field.bounds.clone()),
        n_slices: field.controls.len(),
        n_points: field.grid.len(),
        columns,
        body: body_name(csv),
    };
    write_json(json, &header)?;
    write_rows(csv, &header.columns, &field.controls, field.dim())
}

pub fn read_policy_field(json: &FsPath, csv: &FsPath) -> Result<PolicyField> {
    let header: FieldHeader = serde_json::from_reader(BufReader::new(File::open(json)?))?;
    if header.kind != "policy_field" {
        return Err(Error::Format(format!("{}: not a policy field", json.display())));
    }
    let bounds = header
        .bounds
        .clone()
        .ok_or_else(|| Error::Format(format!("{}: missing bounds", json.display())))?;
    let controls = read_rows(csv, &header, header.grid.dim())?;
    Ok(PolicyField {
        grid: header.grid,
        horizon: header.horizon,
        bounds,
        controls,
    })
}

/// Per-path dump with columns
/// `path_id,step,tau,x_0..,u_0..,running_cost`. The final row of each path
/// has empty control cells.
pub fn write_paths_csv<W: Write>(mut w: W, paths: &[Path], dim: usize) -> Result<()> {
    let mut head = vec!["path_id".to_string(), "step".into(), "tau".into()];
    head.extend((0..dim).map(|mu| format!("x_{mu}")));
    head.extend((0..dim).map(|mu| format!("u_{mu}")));
    head.push("running_cost".into());
    writeln!(w, "{}", head.join(","))?;
    for (id, path) in paths.iter().enumerate() {
        let n = path.times.len();
        for k in 0..n {
            write!(w, "{id},{k},{}", fmt_real(path.times[k]))?;
            for v in path.state(k) {
                write!(w, ",{}", fmt_real(*v))?;
            }
            for mu in 0..dim {
                if k + 1 < n {
                    write!(w, ",{}", fmt_real(path.controls[k * dim + mu]))?;
                } else {
                    w.write_all(b",")?;
                }
            }
            writeln!(w, ",{}", fmt_real(path.running_cost[k]))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn write_json_file<T: Serialize>(path: &FsPath, value: &T) -> Result<()> {
    write_json(path, value)
}
