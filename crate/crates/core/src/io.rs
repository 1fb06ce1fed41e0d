//! CSV windows and masks, and checkpoint files.
//!
//! A matrix file has one row per channel and one column per sample, with an
//! optional first row of channel names (one name per channel, so that row is
//! usually shorter or longer than the data rows). Missing readings are
//! written `NaN`.

use std::fs;
use std::path::Path;

use crate::denoiser::{decode_checkpoint, encode_checkpoint, Denoiser};
use crate::error::{Result, TsdmError};
use crate::matrix::{default_channel_names, MeasurementMatrix, ObservabilityMask};

const MISSING: &str = "NaN";

struct Table {
    names: Option<Vec<String>>,
    rows: Vec<Vec<f64>>,
}

fn parse_error(line: usize, message: impl Into<String>) -> TsdmError {
    TsdmError::Parse {
        line,
        message: message.into(),
    }
}

fn parse_value(token: &str, line: usize) -> Result<f64> {
    if token == MISSING {
        return Ok(f64::NAN);
    }
    match token.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(parse_error(line, format!("unrecognized value {token:?}"))),
    }
}

fn parse_table(text: &str) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut names = None;
    let mut rows = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_error(line, e.to_string())
        })?;
        let line = record.position().map_or(k + 1, |p| p.line() as usize);
        let header_like = record
            .iter()
            .all(|tok| tok != MISSING && tok.parse::<f64>().is_err());
        if k == 0 && header_like {
            names = Some(record.iter().map(str::to_string).collect::<Vec<_>>());
            continue;
        }
        let row = record
            .iter()
            .map(|tok| parse_value(tok, line))
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            let first: &Vec<f64> = first;
            if first.len() != row.len() {
                return Err(parse_error(
                    line,
                    format!("row has {} values, expected {}", row.len(), first.len()),
                ));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() || rows[0].is_empty() {
        return Err(parse_error(0, "no data rows"));
    }
    Ok(Table { names, rows })
}

/// Parses a matrix. The header row, when present, holds one name per
/// channel, so the file is read as channels × samples.
pub fn parse_matrix_csv(text: &str) -> Result<MeasurementMatrix> {
    let table = parse_table(text)?;
    let rows = table.rows.len();
    let cols = table.rows[0].len();
    let names = match table.names {
        Some(names) if names.len() == rows => names,
        Some(names) => {
            return Err(parse_error(
                1,
                format!("{} channel names for {rows} channel rows", names.len()),
            ))
        }
        None => default_channel_names(rows),
    };
    MeasurementMatrix::new(names, cols, table.rows.into_iter().flatten().collect())
}

/// Formats with the shortest decimal that reads back to the same value.
pub fn format_matrix_csv(x: &MeasurementMatrix) -> String {
    let mut out = String::new();
    out.push_str(&x.channels().join(","));
    out.push('\n');
    for m in 0..x.rows() {
        let line: Vec<String> = x
            .row(m)
            .iter()
            .map(|v| {
                if v.is_nan() {
                    MISSING.to_string()
                } else {
                    format!("{v:?}")
                }
            })
            .collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Parses a 0/1 mask (`1` = observed), with an optional header row.
pub fn parse_mask_csv(text: &str) -> Result<ObservabilityMask> {
    let table = parse_table(text)?;
    let rows = table.rows.len();
    let cols = table.rows[0].len();
    if table.rows.iter().any(|r| r.iter().any(|v| v.is_nan())) {
        return Err(parse_error(0, "mask entries must be 0 or 1"));
    }
    ObservabilityMask::from_values(rows, cols, &table.rows.concat())
}

pub fn format_mask_csv(mask: &ObservabilityMask) -> String {
    let mut out = String::new();
    for m in 0..mask.rows() {
        let line: Vec<&str> = (0..mask.cols())
            .map(|t| if mask.get(m, t) { "1" } else { "0" })
            .collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn load_matrix_csv(path: impl AsRef<Path>) -> Result<MeasurementMatrix> {
    parse_matrix_csv(&fs::read_to_string(path)?)
}

pub fn save_matrix_csv(path: impl AsRef<Path>, x: &MeasurementMatrix) -> Result<()> {
    Ok(fs::write(path, format_matrix_csv(x))?)
}

pub fn load_mask_csv(path: impl AsRef<Path>) -> Result<ObservabilityMask> {
    parse_mask_csv(&fs::read_to_string(path)?)
}

pub fn save_mask_csv(path: impl AsRef<Path>, mask: &ObservabilityMask) -> Result<()> {
    Ok(fs::write(path, format_mask_csv(mask))?)
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Denoiser) -> Result<()> {
    Ok(fs::write(path, encode_checkpoint(model))?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Denoiser> {
    decode_checkpoint(&fs::read(path)?)
}

fn split_blocks(text: &str) -> Result<Vec<String>> {
    let mut blocks: Vec<String> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if blocks.last().is_some_and(|b| !b.is_empty()) {
                blocks.push(String::new());
            }
            continue;
        }
        if blocks.is_empty() {
            blocks.push(String::new());
        }
        let block = blocks.last_mut().expect("block present");
        block.push_str(line);
        block.push('\n');
    }
    blocks.retain(|b| !b.is_empty());
    if blocks.is_empty() {
        return Err(parse_error(0, "dataset has no windows"));
    }
    Ok(blocks)
}

/// Windows stored as consecutive blocks in one file, separated by blank
/// lines; each block may carry its own header row.
pub fn parse_dataset_csv(text: &str) -> Result<Vec<MeasurementMatrix>> {
    split_blocks(text)?
        .iter()
        .map(|b| parse_matrix_csv(b))
        .collect()
}

pub fn format_dataset_csv(windows: &[MeasurementMatrix]) -> String {
    windows
        .iter()
        .map(format_matrix_csv)
        .collect::<Vec<_>>()
        .join("\n")
}

/// One mask per window, in the same block layout as [`parse_dataset_csv`].
pub fn parse_mask_dataset_csv(text: &str) -> Result<Vec<ObservabilityMask>> {
    split_blocks(text)?
        .iter()
        .map(|b| parse_mask_csv(b))
        .collect()
}

pub fn format_mask_dataset_csv(masks: &[ObservabilityMask]) -> String {
    masks
        .iter()
        .map(format_mask_csv)
        .collect::<Vec<_>>()
        .join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_round_trip_is_exact() {
        let x = MeasurementMatrix::new(
            vec!["va".into(), "pb".into()],
            3,
            vec![0.1, f64::NAN, -1.0e-300, 1.0 / 3.0, 2.5e17, -0.0],
        )
        .unwrap();
        let back = parse_matrix_csv(&format_matrix_csv(&x)).unwrap();
        assert_eq!(back.channels(), x.channels());
        for (a, b) in back.values().iter().zip(x.values()) {
            assert!(a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan()));
        }
    }

    #[test]
    fn header_is_optional() {
        let x = parse_matrix_csv("1,2\n3,NaN\n").unwrap();
        assert_eq!(x.channels(), &["ch0", "ch1"]);
        assert!(x.get(1, 1).is_nan());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(parse_matrix_csv("1,2\n3\n").is_err(), "ragged");
        assert!(parse_matrix_csv("1,inf\n").is_err());
        assert!(parse_matrix_csv("1,two\n").is_err());
        assert!(parse_matrix_csv("").is_err());
        assert!(parse_matrix_csv("a,b,c\n1,2\n3,4\n").is_err(), "name count");
        assert!(parse_mask_csv("1,0\n2,1\n").is_err());
        assert!(parse_mask_csv("1,NaN\n").is_err());
    }

    #[test]
    fn mask_round_trip() {
        let mask = ObservabilityMask::from_fn(3, 4, |m, t| (m * t) % 3 != 1);
        assert_eq!(parse_mask_csv(&format_mask_csv(&mask)).unwrap(), mask);
    }

    #[test]
    fn dataset_round_trip() {
        let a = MeasurementMatrix::from_values(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = MeasurementMatrix::from_values(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let text = format_dataset_csv(&[a.clone(), b.clone()]);
        assert_eq!(parse_dataset_csv(&text).unwrap(), vec![a, b]);
    }
}
