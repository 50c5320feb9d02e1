use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Interaction;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Tsv,
    Csv,
}

impl Format {
    pub fn delimiter(self) -> u8 {
        match self {
            Format::Tsv => b'\t',
            Format::Csv => b',',
        }
    }
}

/// A column addressed by position or by header name.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Column {
    Index(usize),
    Name(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadOptions {
    pub format: Format,
    /// Overrides the format's default delimiter.
    pub delimiter: Option<u8>,
    pub has_header: bool,
    pub user_col: Column,
    pub item_col: Column,
    /// `None` uses the row's position in the file as the timestamp.
    pub time_col: Option<Column>,
}

impl LoadOptions {
    pub fn new(format: Format) -> Self {
        LoadOptions {
            format,
            delimiter: None,
            has_header: false,
            user_col: Column::Index(0),
            item_col: Column::Index(1),
            time_col: Some(Column::Index(2)),
        }
    }
}

/// Loads `(user, item, timestamp)` rows with the default column layout.
pub fn load_interactions(path: &Path, format: Format) -> Result<Vec<Interaction>> {
    load_interactions_with(path, &LoadOptions::new(format))
}

fn resolve(col: &Column, header: Option<&csv::StringRecord>, path: &Path) -> Result<usize> {
    match col {
        Column::Index(i) => Ok(*i),
        Column::Name(name) => {
            let header = header.ok_or_else(|| Error::Parse {
                path: path.to_owned(),
                line: 1,
                message: format!("column `{name}` referenced by name but the file has no header"),
            })?;
            header.iter().position(|h| h.trim() == name).ok_or_else(|| Error::Parse {
                path: path.to_owned(),
                line: 1,
                message: format!("header has no column `{name}`"),
            })
        }
    }
}

pub fn load_interactions_with(path: &Path, opts: &LoadOptions) -> Result<Vec<Interaction>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(opts.delimiter.unwrap_or(opts.format.delimiter()))
        .has_headers(opts.has_header)
        .flexible(true)
        .from_reader(file);

    let header = if opts.has_header {
        Some(
            reader
                .headers()
                .map_err(|e| Error::Parse {
                    path: path.to_owned(),
                    line: 1,
                    message: e.to_string(),
                })?
                .clone(),
        )
    } else {
        None
    };
    let user_idx = resolve(&opts.user_col, header.as_ref(), path)?;
    let item_idx = resolve(&opts.item_col, header.as_ref(), path)?;
    let time_idx = opts
        .time_col
        .as_ref()
        .map(|c| resolve(c, header.as_ref(), path))
        .transpose()?;

    let mut out = Vec::new();
    for (ordinal, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            path: path.to_owned(),
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let fail = |message: String| Error::Parse {
            path: path.to_owned(),
            line,
            message,
        };
        let field = |idx: usize, what: &str| -> Result<&str> {
            let v = record
                .get(idx)
                .map(str::trim)
                .ok_or_else(|| fail(format!("missing {what} column {idx}")))?;
            if v.is_empty() {
                return Err(fail(format!("empty {what} field")));
            }
            Ok(v)
        };
        let user = field(user_idx, "user")?;
        let item = field(item_idx, "item")?;
        let timestamp = match time_idx {
            Some(t) => {
                let raw = field(t, "timestamp")?;
                parse_timestamp(raw).ok_or_else(|| fail(format!("timestamp `{raw}` is not an integer")))?
            }
            None => ordinal as i64,
        };
        out.push(Interaction::new(user, item, timestamp));
    }
    Ok(out)
}

fn parse_timestamp(raw: &str) -> Option<i64> {
    raw.parse::<i64>().ok().or_else(|| {
        // some dumps write integral seconds as floats ("1389052800.0")
        let f = raw.parse::<f64>().ok()?;
        (f.is_finite() && f.fract() == 0.0).then_some(f as i64)
    })
}
