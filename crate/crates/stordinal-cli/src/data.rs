//! CSV ingestion and emission.
//!
//! Input schemas: `observations.csv` has columns `site_id,x_km,y_km,year,
//! species,score,habitat,access_km`; `controls.csv` has `species,site_id,
//! date` with ISO-8601 dates; the prediction grid has `x_km,y_km,year,
//! habitat,access_km` plus optional `ctrl,d` covariate columns defaulting
//! to zero.  Columns may appear in any order; malformed rows are reported
//! with their line number.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use chrono::NaiveDate;

use stordinal::design::{ControlEvent, Habitat, Observation};
use stordinal::inference::PredictionTarget;
use stordinal::{Error, Result};

use crate::output::{atomic_write, fmt6};

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::invalid(format!("cannot read {}: {e}", path.display())))
}

/// Header-name-to-index map, verifying that every column is recognised and
/// every required column is present.
struct Header {
    file: String,
    index: HashMap<String, usize>,
}

impl Header {
    fn new(
        reader: &mut csv::Reader<&[u8]>,
        file: &str,
        required: &[&str],
        optional: &[&str],
    ) -> Result<Self> {
        let headers = reader
            .headers()
            .map_err(|e| Error::invalid(format!("{file}: {e}")))?;
        let mut index = HashMap::new();
        for (i, name) in headers.iter().enumerate() {
            let name = name.trim();
            if !required.contains(&name) && !optional.contains(&name) {
                return Err(Error::invalid(format!(
                    "{file} line 1: unknown column {name:?}"
                )));
            }
            if index.insert(name.to_string(), i).is_some() {
                return Err(Error::invalid(format!(
                    "{file} line 1: duplicate column {name:?}"
                )));
            }
        }
        for name in required {
            if !index.contains_key(*name) {
                return Err(Error::invalid(format!(
                    "{file} line 1: missing column {name:?}"
                )));
            }
        }
        Ok(Header {
            file: file.to_string(),
            index,
        })
    }

    fn get<'r>(&self, record: &'r csv::StringRecord, name: &str, line: u64) -> Result<&'r str> {
        let idx = self.index[name];
        record.get(idx).map(str::trim).ok_or_else(|| {
            Error::invalid(format!(
                "{} line {line}: row has no {name:?} field",
                self.file
            ))
        })
    }

    fn opt<'r>(&self, record: &'r csv::StringRecord, name: &str) -> Option<&'r str> {
        self.index
            .get(name)
            .and_then(|&idx| record.get(idx))
            .map(str::trim)
    }

    fn parse<T>(&self, record: &csv::StringRecord, name: &str, line: u64) -> Result<T>
    where
        T: std::str::FromStr,
        T::Err: std::fmt::Display,
    {
        let raw = self.get(record, name, line)?;
        raw.parse().map_err(|e| {
            Error::invalid(format!(
                "{} line {line}: bad {name} value {raw:?}: {e}",
                self.file
            ))
        })
    }
}

fn parse_habitat(raw: &str, file: &str, line: u64) -> Result<Habitat> {
    match raw.to_ascii_lowercase().as_str() {
        "forest" => Ok(Habitat::Forest),
        "grassland" => Ok(Habitat::Grassland),
        _ => Err(Error::invalid(format!(
            "{file} line {line}: habitat must be \"forest\" or \"grassland\", got {raw:?}"
        ))),
    }
}

fn records(bytes: &[u8]) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new().from_reader(bytes)
}

fn record_line(record: &csv::StringRecord) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(0)
}

pub fn parse_observations(bytes: &[u8], file: &str) -> Result<Vec<Observation>> {
    let mut reader = records(bytes);
    let header = Header::new(
        &mut reader,
        file,
        &[
            "site_id",
            "x_km",
            "y_km",
            "year",
            "species",
            "score",
            "habitat",
            "access_km",
        ],
        &[],
    )?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::invalid(format!("{file}: {e}")))?;
        let line = record_line(&record);
        out.push(Observation {
            site_id: header.get(&record, "site_id", line)?.to_string(),
            x_km: header.parse(&record, "x_km", line)?,
            y_km: header.parse(&record, "y_km", line)?,
            year: header.parse(&record, "year", line)?,
            species: header.get(&record, "species", line)?.to_string(),
            score: header.parse(&record, "score", line)?,
            habitat: parse_habitat(header.get(&record, "habitat", line)?, file, line)?,
            access_km: header.parse(&record, "access_km", line)?,
        });
    }
    Ok(out)
}

pub fn parse_controls(bytes: &[u8], file: &str) -> Result<Vec<ControlEvent>> {
    let mut reader = records(bytes);
    let header = Header::new(&mut reader, file, &["species", "site_id", "date"], &[])?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::invalid(format!("{file}: {e}")))?;
        let line = record_line(&record);
        let raw_date = header.get(&record, "date", line)?;
        let date: NaiveDate = raw_date.parse().map_err(|e| {
            Error::invalid(format!(
                "{file} line {line}: bad date value {raw_date:?} (expected YYYY-MM-DD): {e}"
            ))
        })?;
        out.push(ControlEvent {
            species: header.get(&record, "species", line)?.to_string(),
            site_id: header.get(&record, "site_id", line)?.to_string(),
            date,
        });
    }
    Ok(out)
}

pub fn parse_grid(bytes: &[u8], file: &str) -> Result<Vec<PredictionTarget>> {
    let mut reader = records(bytes);
    let header = Header::new(
        &mut reader,
        file,
        &["x_km", "y_km", "year", "habitat", "access_km"],
        &["ctrl", "d"],
    )?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::invalid(format!("{file}: {e}")))?;
        let line = record_line(&record);
        let opt_num = |name: &str| -> Result<f64> {
            match header.opt(&record, name) {
                Some(raw) if !raw.is_empty() => raw.parse().map_err(|e| {
                    Error::invalid(format!(
                        "{file} line {line}: bad {name} value {raw:?}: {e}"
                    ))
                }),
                _ => Ok(0.0),
            }
        };
        out.push(PredictionTarget {
            x_km: header.parse(&record, "x_km", line)?,
            y_km: header.parse(&record, "y_km", line)?,
            year: header.parse(&record, "year", line)?,
            ctrl: opt_num("ctrl")?,
            d: opt_num("d")?,
            habitat: parse_habitat(header.get(&record, "habitat", line)?, file, line)?,
            access_km: header.parse(&record, "access_km", line)?,
        });
    }
    if out.is_empty() {
        return Err(Error::invalid(format!("{file}: no prediction targets")));
    }
    Ok(out)
}

fn habitat_label(h: Habitat) -> &'static str {
    match h {
        Habitat::Forest => "forest",
        Habitat::Grassland => "grassland",
    }
}

pub fn write_observations(path: &Path, observations: &[Observation]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record([
            "site_id",
            "x_km",
            "y_km",
            "year",
            "species",
            "score",
            "habitat",
            "access_km",
        ])
        .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    for o in observations {
        writer
            .write_record([
                o.site_id.as_str(),
                &fmt6(o.x_km),
                &fmt6(o.y_km),
                &o.year.to_string(),
                o.species.as_str(),
                &o.score.to_string(),
                habitat_label(o.habitat),
                &fmt6(o.access_km),
            ])
            .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    atomic_write(path, &bytes)
}

pub fn write_controls(path: &Path, events: &[ControlEvent]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record(["species", "site_id", "date"])
        .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    for e in events {
        writer
            .write_record([
                e.species.as_str(),
                e.site_id.as_str(),
                &e.date.format("%Y-%m-%d").to_string(),
            ])
            .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    atomic_write(path, &bytes)
}
