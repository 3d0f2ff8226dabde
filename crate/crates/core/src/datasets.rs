//! Fingerprint dataset ingestion, RSSI normalization and radio-image construction.
//!
//! Two CSV layouts are understood: the UJIIndoorLoc layout (`WAP001..WAP520`,
//! `LONGITUDE`, `LATITUDE`, `FLOOR`, `BUILDINGID`) and a generic layout
//! (`rssi_0..rssi_{N-1}`, `x`, `y`, `floor`, optional `building`) described by
//! a JSON [`DatasetManifest`]. Extra columns are ignored.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the per-AP RSSI columns are named: `{prefix}{index}` where the index
/// starts at `start` and is zero-padded to `digits` characters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMapping {
    pub rssi_prefix: String,
    #[serde(default)]
    pub rssi_start: usize,
    #[serde(default)]
    pub rssi_digits: usize,
    pub x: String,
    pub y: String,
    pub floor: String,
    #[serde(default)]
    pub building: Option<String>,
}

impl ColumnMapping {
    pub fn rssi_column(&self, ap: usize) -> String {
        format!(
            "{}{:0width$}",
            self.rssi_prefix,
            ap + self.rssi_start,
            width = self.rssi_digits
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub ap_count: usize,
    /// Weakest measurable signal in dBm; anchors the normalization.
    pub rssi_min: i32,
    /// Raw code for an AP that was not heard.
    pub no_signal_sentinel: f64,
    pub columns: ColumnMapping,
}

impl DatasetManifest {
    pub fn ujiindoorloc() -> Self {
        DatasetManifest {
            name: "UJIIndoorLoc".into(),
            ap_count: 520,
            rssi_min: -104,
            no_signal_sentinel: 100.0,
            columns: ColumnMapping {
                rssi_prefix: "WAP".into(),
                rssi_start: 1,
                rssi_digits: 3,
                x: "LONGITUDE".into(),
                y: "LATITUDE".into(),
                floor: "FLOOR".into(),
                building: Some("BUILDINGID".into()),
            },
        }
    }

    /// Manifest for the generic `rssi_i,x,y,floor[,building]` layout.
    pub fn generic(name: &str, ap_count: usize, rssi_min: i32, with_building: bool) -> Self {
        DatasetManifest {
            name: name.into(),
            ap_count,
            rssi_min,
            no_signal_sentinel: 100.0,
            columns: ColumnMapping {
                rssi_prefix: "rssi_".into(),
                rssi_start: 0,
                rssi_digits: 0,
                x: "x".into(),
                y: "y".into(),
                floor: "floor".into(),
                building: with_building.then(|| "building".into()),
            },
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let manifest: DatasetManifest = serde_json::from_reader(file)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.ap_count == 0 {
            return Err(Error::Config("ap_count must be at least 1".into()));
        }
        if self.rssi_min >= 0 {
            return Err(Error::Config(format!(
                "rssi_min must be negative, got {}",
                self.rssi_min
            )));
        }
        let s = self.no_signal_sentinel;
        if !s.is_finite() || (s >= self.rssi_min as f64 && s <= 0.0) {
            return Err(Error::Config(format!(
                "sentinel {s} must lie outside [{}, 0]",
                self.rssi_min
            )));
        }
        Ok(())
    }

    pub fn is_sentinel(&self, raw: f64) -> bool {
        raw == self.no_signal_sentinel
    }

    pub fn image_side(&self) -> usize {
        image_side(self.ap_count)
    }
}

/// One scan: raw RSSI per AP plus the exact position and labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FingerprintRecord {
    pub rssi: Vec<f64>,
    pub x: f64,
    pub y: f64,
    pub floor: i32,
    pub building: Option<i32>,
}

impl FingerprintRecord {
    pub fn validate(&self, manifest: &DatasetManifest) -> Result<()> {
        if self.rssi.len() != manifest.ap_count {
            return Err(Error::Validation(format!(
                "record has {} RSSI values, manifest expects {}",
                self.rssi.len(),
                manifest.ap_count
            )));
        }
        for (ap, &raw) in self.rssi.iter().enumerate() {
            if !manifest.is_sentinel(raw) && !(raw >= manifest.rssi_min as f64 && raw <= 0.0) {
                return Err(Error::Validation(format!(
                    "AP {ap}: RSSI {raw} outside [{}, 0] and not the sentinel",
                    manifest.rssi_min
                )));
            }
        }
        if !self.x.is_finite() || !self.y.is_finite() {
            return Err(Error::Validation("non-finite position".into()));
        }
        Ok(())
    }
}

/// Maps a raw reading into `[0, 1]`. Positive raw values mean "not heard"
/// and map to 0; `rssi_min` maps to 0 and 0 dBm maps to 1.
pub fn normalize_rssi(raw: f64, rssi_min: i32) -> Result<f64> {
    if rssi_min >= 0 {
        return Err(Error::Config(format!(
            "rssi_min must be negative, got {rssi_min}"
        )));
    }
    if raw.is_nan() {
        return Err(Error::Validation("RSSI is NaN".into()));
    }
    if raw > 0.0 {
        return Ok(0.0);
    }
    let min = rssi_min as f64;
    if raw < min {
        return Err(Error::Validation(format!(
            "RSSI {raw} below rssi_min {rssi_min}"
        )));
    }
    Ok(((raw - min) / -min).clamp(0.0, 1.0))
}

/// Smallest `n` with `n * n >= ap_count`.
pub fn image_side(ap_count: usize) -> usize {
    let mut n = (ap_count as f64).sqrt() as usize;
    while n * n < ap_count {
        n += 1;
    }
    while n > 0 && (n - 1) * (n - 1) >= ap_count {
        n -= 1;
    }
    n
}

/// A fingerprint reshaped (row-major) into a square grayscale image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadioImage {
    pub side: usize,
    pub pixels: Vec<f32>,
    pub pad_count: usize,
}

impl RadioImage {
    pub fn zeros(side: usize) -> Self {
        RadioImage {
            side,
            pixels: vec![0.0; side * side],
            pad_count: 0,
        }
    }

    pub fn pixel(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.side + col]
    }

    /// The normalized AP values, i.e. the pixels without the trailing padding.
    pub fn features(&self) -> &[f32] {
        &self.pixels[..self.pixels.len() - self.pad_count]
    }
}

pub fn to_radio_image(record: &FingerprintRecord, manifest: &DatasetManifest) -> Result<RadioImage> {
    if record.rssi.len() != manifest.ap_count {
        return Err(Error::Validation(format!(
            "record has {} RSSI values, manifest expects {}",
            record.rssi.len(),
            manifest.ap_count
        )));
    }
    let side = image_side(manifest.ap_count);
    let mut pixels = Vec::with_capacity(side * side);
    for &raw in &record.rssi {
        let value = if manifest.is_sentinel(raw) {
            0.0
        } else {
            normalize_rssi(raw, manifest.rssi_min)?
        };
        pixels.push(value as f32);
    }
    let pad_count = side * side - manifest.ap_count;
    pixels.resize(side * side, 0.0);
    Ok(RadioImage {
        side,
        pixels,
        pad_count,
    })
}

pub fn to_radio_images(records: &[FingerprintRecord], manifest: &DatasetManifest) -> Result<Vec<RadioImage>> {
    records.iter().map(|r| to_radio_image(r, manifest)).collect()
}

struct ColumnIndex {
    rssi: Vec<usize>,
    x: usize,
    y: usize,
    floor: usize,
    building: Option<usize>,
}

impl ColumnIndex {
    fn resolve(headers: &csv::StringRecord, manifest: &DatasetManifest) -> Result<Self> {
        let positions: HashMap<&str, usize> = headers
            .iter()
            .enumerate()
            .map(|(i, h)| (h.trim(), i))
            .collect();
        let find = |name: &str| {
            positions
                .get(name)
                .copied()
                .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
        };
        let cols = &manifest.columns;
        let rssi = (0..manifest.ap_count)
            .map(|ap| find(&cols.rssi_column(ap)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ColumnIndex {
            rssi,
            x: find(&cols.x)?,
            y: find(&cols.y)?,
            floor: find(&cols.floor)?,
            building: cols.building.as_deref().map(find).transpose()?,
        })
    }
}

fn cell<'a>(row: &'a csv::StringRecord, idx: usize, line: usize, headers: &csv::StringRecord) -> Result<&'a str> {
    row.get(idx).map(str::trim).ok_or_else(|| Error::Parse {
        row: line,
        column: headers.get(idx).unwrap_or("?").to_string(),
        message: "missing cell".into(),
    })
}

fn parse_f64(text: &str, line: usize, column: &str) -> Result<f64> {
    text.parse::<f64>().map_err(|e| Error::Parse {
        row: line,
        column: column.to_string(),
        message: format!("`{text}`: {e}"),
    })
}

fn parse_label(text: &str, line: usize, column: &str) -> Result<i32> {
    if let Ok(v) = text.parse::<i32>() {
        return Ok(v);
    }
    let v = parse_f64(text, line, column)?;
    if v.fract() != 0.0 || v.abs() > i32::MAX as f64 {
        return Err(Error::Parse {
            row: line,
            column: column.to_string(),
            message: format!("`{text}` is not an integer label"),
        });
    }
    Ok(v as i32)
}

/// Reads records from any CSV source. Row indices in errors are 0-based data
/// rows (the header is not counted).
pub fn read_records<R: Read>(reader: R, manifest: &DatasetManifest) -> Result<Vec<FingerprintRecord>> {
    manifest.validate()?;
    let mut csv = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = csv.headers()?.clone();
    let index = ColumnIndex::resolve(&headers, manifest)?;
    let mut records = Vec::new();
    for (line, row) in csv.records().enumerate() {
        let row = row?;
        let mut rssi = Vec::with_capacity(manifest.ap_count);
        for &c in &index.rssi {
            rssi.push(parse_f64(cell(&row, c, line, &headers)?, line, &headers[c])?);
        }
        let x = parse_f64(cell(&row, index.x, line, &headers)?, line, &headers[index.x])?;
        let y = parse_f64(cell(&row, index.y, line, &headers)?, line, &headers[index.y])?;
        let floor = parse_label(cell(&row, index.floor, line, &headers)?, line, &headers[index.floor])?;
        let building = match index.building {
            Some(c) => Some(parse_label(cell(&row, c, line, &headers)?, line, &headers[c])?),
            None => None,
        };
        let record = FingerprintRecord {
            rssi,
            x,
            y,
            floor,
            building,
        };
        record
            .validate(manifest)
            .map_err(|e| Error::Validation(format!("row {line}: {e}")))?;
        records.push(record);
    }
    Ok(records)
}

pub fn load_dataset(path: impl AsRef<Path>, manifest: &DatasetManifest) -> Result<Vec<FingerprintRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_records(std::io::BufReader::new(file), manifest)
}

/// Writes records using the manifest's column names.
pub fn write_records<W: Write>(writer: W, records: &[FingerprintRecord], manifest: &DatasetManifest) -> Result<()> {
    let cols = &manifest.columns;
    let mut csv = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = (0..manifest.ap_count).map(|ap| cols.rssi_column(ap)).collect();
    header.extend([cols.x.clone(), cols.y.clone(), cols.floor.clone()]);
    if let Some(b) = &cols.building {
        header.push(b.clone());
    }
    csv.write_record(&header)?;
    for r in records {
        let mut row: Vec<String> = r.rssi.iter().map(|v| v.to_string()).collect();
        row.push(r.x.to_string());
        row.push(r.y.to_string());
        row.push(r.floor.to_string());
        if cols.building.is_some() {
            row.push(r.building.unwrap_or(0).to_string());
        }
        csv.write_record(&row)?;
    }
    csv.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

pub fn save_dataset(path: impl AsRef<Path>, records: &[FingerprintRecord], manifest: &DatasetManifest) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_records(std::io::BufWriter::new(file), records, manifest)
}
