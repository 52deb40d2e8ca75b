//! `filename,temperature_C` CSV manifests.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};

pub const MANIFEST_HEADER: [&str; 2] = ["filename", "temperature_C"];

/// Number of specklegrams in the 0–120 °C, 0.2 °C acquisition grid.
pub const GRID_SAMPLE_COUNT: usize = 601;
pub const GRID_TEMPERATURE_STEP: f64 = 0.2;

/// Temperature label of the `index`-th specklegram in acquisition order.
pub fn temperature_of_index(index: usize) -> Result<f64> {
    if index >= GRID_SAMPLE_COUNT {
        return Err(Error::Range {
            what: "specklegram index",
            value: index.to_string(),
        });
    }
    Ok(GRID_TEMPERATURE_STEP * index as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub filename: String,
    pub temperature: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|m| Error::format(path, m))
    }

    /// Parses manifest text. An empty temperature cell takes its label from
    /// the row position via [`temperature_of_index`].
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(text.as_bytes());
        let header = reader.headers().map_err(|e| e.to_string())?;
        if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
            return Err(format!("expected header {}", MANIFEST_HEADER.join(",")));
        }
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (i, row) in reader.records().enumerate() {
            let row = row.map_err(|e| e.to_string())?;
            let line = i + 2;
            let filename = row.get(0).unwrap_or("").trim().to_string();
            if filename.is_empty() {
                return Err(format!("line {line}: empty filename"));
            }
            if !seen.insert(filename.clone()) {
                return Err(format!("line {line}: duplicate filename {filename}"));
            }
            let cell = row.get(1).unwrap_or("").trim();
            let temperature = if cell.is_empty() {
                temperature_of_index(i).map_err(|e| format!("line {line}: {e}"))?
            } else {
                cell.parse::<f64>()
                    .ok()
                    .filter(|t| t.is_finite())
                    .ok_or_else(|| format!("line {line}: bad temperature {cell:?}"))?
            };
            records.push(ManifestRecord {
                filename,
                temperature,
            });
        }
        Ok(DatasetManifest { records })
    }

    pub fn to_csv(&self) -> String {
        let mut writer = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        writer.write_record(MANIFEST_HEADER).unwrap();
        for r in &self.records {
            writer
                .write_record([r.filename.as_str(), &r.temperature.to_string()])
                .unwrap();
        }
        String::from_utf8(writer.into_inner().unwrap()).unwrap()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}
