//! Matrix, assignment and result files.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use semforge::ExoAssignment;

use crate::CliError;

/// A numeric table with one header row of variable names.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub names: Vec<String>,
    pub values: DMatrix<f64>,
}

pub fn delimiter_for(path: &Path) -> Result<u8, CliError> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase) {
        Some(e) if e == "csv" => Ok(b','),
        Some(e) if e == "tsv" || e == "tab" || e == "txt" => Ok(b'\t'),
        _ => Err(CliError::Io(format!(
            "{}: cannot infer delimiter (use .csv or .tsv)",
            path.display()
        ))),
    }
}

pub fn read_table(path: &Path) -> Result<Table, CliError> {
    let delim = delimiter_for(path)?;
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delim)
        .has_headers(true)
        .from_path(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let names: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    if names.is_empty() || names.iter().all(String::is_empty) {
        return Err(CliError::Io(format!("{}: missing header row", path.display())));
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for record in rdr.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        for (col, field) in record.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                CliError::Io(format!(
                    "{}:{line}:{}: cannot parse {field:?} as a number",
                    path.display(),
                    col + 1
                ))
            })?;
            data.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(CliError::Io(format!("{}: no data rows", path.display())));
    }
    let values = DMatrix::from_row_slice(rows, names.len(), &data);
    Ok(Table { names, values })
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    let at = e
        .position()
        .map(|p| format!(":{}", p.line()))
        .unwrap_or_default();
    CliError::Io(format!("{}{at}: {e}", path.display()))
}

pub fn write_table(path: &Path, table: &Table) -> Result<(), CliError> {
    let delim = delimiter_for(path)?;
    let mut out = String::new();
    let sep = char::from(delim);
    push_row(&mut out, sep, table.names.iter().map(String::as_str));
    for row in table.values.row_iter() {
        push_row(&mut out, sep, row.iter().map(|v| v.to_string()).collect::<Vec<_>>().iter().map(String::as_str));
    }
    write_file(path, out.as_bytes())
}

fn push_row<'a>(out: &mut String, sep: char, fields: impl Iterator<Item = &'a str>) {
    for (i, f) in fields.enumerate() {
        if i > 0 {
            out.push(sep);
        }
        out.push_str(f);
    }
    out.push('\n');
}

/// Tab-separated lines; every line must carry the header's field count.
pub fn write_tsv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut out = String::new();
    push_row(&mut out, '\t', header.iter().copied());
    for row in rows {
        debug_assert_eq!(row.len(), header.len());
        push_row(&mut out, '\t', row.iter().map(String::as_str));
    }
    write_file(path, out.as_bytes())
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let wrap = |e: csv::Error| CliError::Io(format!("{}: {e}", path.display()));
    wtr.write_record(header).map_err(wrap)?;
    for row in rows {
        wtr.write_record(row).map_err(wrap)?;
    }
    let bytes = wtr
        .into_inner()
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    write_file(path, &bytes)
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let mut f = fs::File::create(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    f.write_all(bytes)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn ensure_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Reads `{"endogenous": ["exogenous", ...], ...}` and maps names to
/// column indices of the two tables.
pub fn read_assignment(
    path: &Path,
    endo: &[String],
    exo: &[String],
) -> Result<ExoAssignment, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let raw: BTreeMap<String, Vec<String>> = serde_json::from_str(&text).map_err(|e| {
        CliError::Io(format!(
            "{}:{}:{}: {e}",
            path.display(),
            e.line(),
            e.column()
        ))
    })?;
    let exo_index: HashMap<&str, usize> = exo.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    if let Some(unknown) = raw.keys().find(|k| !endo.contains(k)) {
        return Err(CliError::Validation(format!(
            "assignment names unknown endogenous variable {unknown:?}"
        )));
    }
    let mut sets = Vec::with_capacity(endo.len());
    for name in endo {
        let members = raw.get(name).ok_or_else(|| {
            CliError::Validation(format!("no instruments assigned to endogenous variable {name:?}"))
        })?;
        let set = members
            .iter()
            .map(|m| {
                exo_index.get(m.as_str()).copied().ok_or_else(|| {
                    CliError::Validation(format!(
                        "assignment for {name:?} names unknown exogenous variable {m:?}"
                    ))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        sets.push(set);
    }
    Ok(ExoAssignment::new(sets))
}

pub fn write_assignment(
    path: &Path,
    ea: &ExoAssignment,
    endo: &[String],
    exo: &[String],
) -> Result<(), CliError> {
    let map: BTreeMap<&str, Vec<&str>> = ea
        .sets()
        .iter()
        .zip(endo)
        .map(|(set, name)| (name.as_str(), set.iter().map(|&i| exo[i].as_str()).collect()))
        .collect();
    write_json(path, &map)
}

pub fn unique_names(names: &[String], what: &str) -> Result<(), CliError> {
    let mut seen = HashMap::new();
    for (i, n) in names.iter().enumerate() {
        if let Some(j) = seen.insert(n.as_str(), i) {
            return Err(CliError::Validation(format!(
                "duplicate {what} name {n:?} (columns {} and {})",
                j + 1,
                i + 1
            )));
        }
    }
    Ok(())
}
