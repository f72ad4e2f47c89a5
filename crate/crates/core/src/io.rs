//! Number formatting and data file input.

use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::ser::Formatter;

use crate::density::Dataset;
use crate::error::{Error, Result};

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{x:.16e}")
    }
}

/// JSON formatter writing floats with 17 significant digits. Non-finite
/// floats become `null`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sig17;

impl Formatter for Sig17 {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        if value.is_finite() {
            write!(writer, "{value:.16e}")
        } else {
            writer.write_all(b"null")
        }
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, value as f64)
    }
}

pub fn to_json_string<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, Sig17);
    value
        .serialize(&mut ser)
        .map_err(|e| Error::invalid(format!("serializing output: {e}")))?;
    Ok(String::from_utf8(out).expect("serde_json writes UTF-8"))
}

/// Whether a CSV starts with a header row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Header {
    /// A first row that does not parse as numbers is a header.
    #[default]
    Auto,
    Present,
    Absent,
}

/// Reads a numeric CSV into row-major values, one point per row. Returns the
/// column count (`dim_hint`, or 0, when there are no data rows) and the
/// values.
pub fn read_matrix_csv<R: Read>(reader: R, dim_hint: Option<usize>, header: Header) -> Result<(usize, Vec<f64>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(reader);
    let mut dim: Option<usize> = None;
    let mut values = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::invalid(format!("CSV row {}: {e}", row + 1)))?;
        if row == 0 && header == Header::Present {
            continue;
        }
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        let parsed: Vec<std::result::Result<f64, _>> = rec.iter().map(str::parse::<f64>).collect();
        if row == 0 && header == Header::Auto && parsed.iter().any(|p| p.is_err()) {
            continue;
        }
        match dim {
            None => dim = Some(rec.len()),
            Some(d) if d != rec.len() => {
                return Err(Error::invalid(format!(
                    "CSV row {}: expected {d} columns, found {}",
                    row + 1,
                    rec.len()
                )))
            }
            _ => {}
        }
        for (col, (p, raw)) in parsed.into_iter().zip(rec.iter()).enumerate() {
            match p {
                Ok(v) if v.is_finite() => values.push(v),
                _ => {
                    return Err(Error::invalid(format!(
                        "CSV row {}, column {}: '{raw}' is not a finite number",
                        row + 1,
                        col + 1
                    )))
                }
            }
        }
    }
    let dim = match (dim, dim_hint) {
        (Some(d), Some(h)) if d != h => {
            return Err(Error::DimensionMismatch { expected: h, found: d })
        }
        (Some(d), _) => d,
        (None, h) => h.unwrap_or(0),
    };
    Ok((dim, values))
}

/// [`read_matrix_csv`] into a non-empty [`Dataset`].
pub fn read_points_csv<R: Read>(reader: R, dim_hint: Option<usize>, header: Header) -> Result<Dataset> {
    let (dim, values) = read_matrix_csv(reader, dim_hint, header)?;
    if values.is_empty() {
        return Err(Error::invalid("data file has no data rows"));
    }
    Dataset::from_flat(dim, values)
}

fn open(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|e| Error::invalid(format!("cannot open {}: {e}", path.display())))
}

pub fn read_points_file(path: &Path, dim_hint: Option<usize>, header: Header) -> Result<Dataset> {
    read_points_csv(open(path)?, dim_hint, header)
}

pub fn read_matrix_file(path: &Path, dim_hint: Option<usize>, header: Header) -> Result<(usize, Vec<f64>)> {
    read_matrix_csv(open(path)?, dim_hint, header)
}
