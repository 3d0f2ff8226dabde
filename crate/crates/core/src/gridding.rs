//! Region gridding: exact positions become joint (building, floor, cell)
//! classes, each represented by the mean position of its training members.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::FingerprintRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    /// Side of a square cell in meters.
    pub cell_length: f64,
    /// Grid origin; `None` means the minimum x and y of the training set.
    #[serde(default)]
    pub origin: Option<(f64, f64)>,
}

impl GridConfig {
    pub fn new(cell_length: f64) -> Self {
        GridConfig {
            cell_length,
            origin: None,
        }
    }

    pub fn with_origin(cell_length: f64, origin: (f64, f64)) -> Self {
        GridConfig {
            cell_length,
            origin: Some(origin),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cell_length > 0.0 && self.cell_length.is_finite()) {
            return Err(Error::Config(format!(
                "cell length must be positive, got {}",
                self.cell_length
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub building: Option<i32>,
    pub floor: i32,
    pub ix: i64,
    pub iy: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub building: Option<i32>,
    pub floor: i32,
    pub ix: i64,
    pub iy: i64,
    pub centroid: (f64, f64),
    pub class_id: usize,
    pub member_count: usize,
}

impl GridCell {
    pub fn key(&self) -> CellKey {
        CellKey {
            building: self.building,
            floor: self.floor,
            ix: self.ix,
            iy: self.iy,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct GridTable {
    config: GridConfig,
    cells: Vec<GridCell>,
}

/// Occupied cells of a gridded training set. Class ids are contiguous and
/// ordered lexicographically by (building, floor, ix, iy).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridTable", into = "GridTable")]
pub struct GridMap {
    config: GridConfig,
    cells: Vec<GridCell>,
    lookup: HashMap<CellKey, usize>,
}

impl TryFrom<GridTable> for GridMap {
    type Error = Error;

    fn try_from(table: GridTable) -> Result<Self> {
        table.config.validate()?;
        if table.config.origin.is_none() {
            return Err(Error::Format("grid file lacks a resolved origin".into()));
        }
        let mut lookup = HashMap::with_capacity(table.cells.len());
        for (i, cell) in table.cells.iter().enumerate() {
            if cell.class_id != i {
                return Err(Error::Format(format!(
                    "cell {i} carries class id {}",
                    cell.class_id
                )));
            }
            if lookup.insert(cell.key(), i).is_some() {
                return Err(Error::Format(format!("duplicate cell {:?}", cell.key())));
            }
        }
        Ok(GridMap {
            config: table.config,
            cells: table.cells,
            lookup,
        })
    }
}

impl From<GridMap> for GridTable {
    fn from(grid: GridMap) -> Self {
        GridTable {
            config: grid.config,
            cells: grid.cells,
        }
    }
}

fn cell_index(value: f64, origin: f64, length: f64) -> i64 {
    ((value - origin) / length).floor() as i64
}

fn sorted_mean(mut values: Vec<f64>) -> f64 {
    // Summing in sorted order makes the mean independent of record order.
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    values.iter().sum::<f64>() / n
}

pub fn build_grid(records: &[FingerprintRecord], config: GridConfig) -> Result<GridMap> {
    config.validate()?;
    if records.is_empty() {
        return Err(Error::Validation("cannot grid an empty record set".into()));
    }
    if let Some(r) = records.iter().find(|r| !r.x.is_finite() || !r.y.is_finite()) {
        return Err(Error::Validation(format!(
            "non-finite position ({}, {})",
            r.x, r.y
        )));
    }
    let origin = config.origin.unwrap_or_else(|| {
        let x0 = records.iter().map(|r| r.x).fold(f64::INFINITY, f64::min);
        let y0 = records.iter().map(|r| r.y).fold(f64::INFINITY, f64::min);
        (x0, y0)
    });
    let config = GridConfig {
        cell_length: config.cell_length,
        origin: Some(origin),
    };

    let mut members: BTreeMap<CellKey, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in records {
        let key = CellKey {
            building: r.building,
            floor: r.floor,
            ix: cell_index(r.x, origin.0, config.cell_length),
            iy: cell_index(r.y, origin.1, config.cell_length),
        };
        let entry = members.entry(key).or_default();
        entry.0.push(r.x);
        entry.1.push(r.y);
    }

    let mut cells = Vec::with_capacity(members.len());
    let mut lookup = HashMap::with_capacity(members.len());
    for (class_id, (key, (xs, ys))) in members.into_iter().enumerate() {
        let member_count = xs.len();
        cells.push(GridCell {
            building: key.building,
            floor: key.floor,
            ix: key.ix,
            iy: key.iy,
            centroid: (sorted_mean(xs), sorted_mean(ys)),
            class_id,
            member_count,
        });
        lookup.insert(key, class_id);
    }
    Ok(GridMap {
        config,
        cells,
        lookup,
    })
}

impl GridMap {
    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    pub fn origin(&self) -> (f64, f64) {
        self.config.origin.expect("resolved at construction")
    }

    pub fn cell_length(&self) -> f64 {
        self.config.cell_length
    }

    pub fn cells(&self) -> &[GridCell] {
        &self.cells
    }

    pub fn class_count(&self) -> usize {
        self.cells.len()
    }

    pub fn cell(&self, class_id: usize) -> Option<&GridCell> {
        self.cells.get(class_id)
    }

    pub fn key_of(&self, record: &FingerprintRecord) -> CellKey {
        let (x0, y0) = self.origin();
        CellKey {
            building: record.building,
            floor: record.floor,
            ix: cell_index(record.x, x0, self.config.cell_length),
            iy: cell_index(record.y, y0, self.config.cell_length),
        }
    }

    /// Class of the record's cell, or `None` when that cell had no training
    /// members.
    pub fn assign_class(&self, record: &FingerprintRecord) -> Option<usize> {
        self.lookup.get(&self.key_of(record)).copied()
    }

    pub fn unmapped_count(&self, records: &[FingerprintRecord]) -> usize {
        records.iter().filter(|r| self.assign_class(r).is_none()).count()
    }

    pub fn labels(&self, records: &[FingerprintRecord]) -> Result<Vec<usize>> {
        records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                self.assign_class(r).ok_or_else(|| {
                    Error::Validation(format!("record {i} falls in a cell with no class"))
                })
            })
            .collect()
    }

    pub fn has_buildings(&self) -> bool {
        self.cells.iter().any(|c| c.building.is_some())
    }

    /// Stable content hash of the cell table, used to pair models with grids.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("grid serializes");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }
}

/// Indices of each partition. For combined splits they index the union
/// `train ++ test`; for original splits `train`/`val` index the training file
/// and `test` indexes the test file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<FingerprintRecord>,
    pub val: Vec<FingerprintRecord>,
    pub test: Vec<FingerprintRecord>,
    pub indices: SplitIndices,
    pub grid: GridMap,
}

fn check_fractions(fractions: (f64, f64, f64)) -> Result<()> {
    let (a, b, c) = fractions;
    if !(a > 0.0 && b > 0.0 && c > 0.0) {
        return Err(Error::Config(format!(
            "split fractions must be positive, got {fractions:?}"
        )));
    }
    if (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must sum to 1, got {}",
            a + b + c
        )));
    }
    Ok(())
}

fn pick(records: &[FingerprintRecord], idx: &[usize]) -> Vec<FingerprintRecord> {
    idx.iter().map(|&i| records[i].clone()).collect()
}

/// Pools both files, grids the union, then shuffles and partitions it.
pub fn combined_split(
    train: &[FingerprintRecord],
    test: &[FingerprintRecord],
    fractions: (f64, f64, f64),
    seed: u64,
    config: GridConfig,
) -> Result<DatasetSplit> {
    check_fractions(fractions)?;
    let union: Vec<FingerprintRecord> = train.iter().chain(test).cloned().collect();
    let grid = build_grid(&union, config)?;

    let n = union.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (fractions.0 * n as f64).round() as usize;
    let n_val = ((fractions.1 * n as f64).round() as usize).min(n - n_train);
    let indices = SplitIndices {
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    };
    Ok(DatasetSplit {
        train: pick(&union, &indices.train),
        val: pick(&union, &indices.val),
        test: pick(&union, &indices.test),
        indices,
        grid,
    })
}

/// Keeps the published train/test files. The grid comes from the whole
/// training file; a seeded `val_fraction` of it is held out for early stopping.
pub fn original_split(
    train: &[FingerprintRecord],
    test: &[FingerprintRecord],
    val_fraction: f64,
    seed: u64,
    config: GridConfig,
) -> Result<DatasetSplit> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!(
            "validation fraction must be in [0, 1), got {val_fraction}"
        )));
    }
    let grid = build_grid(train, config)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (val_fraction * train.len() as f64).round() as usize;
    let mut val = order[..n_val].to_vec();
    let mut fit = order[n_val..].to_vec();
    val.sort_unstable();
    fit.sort_unstable();
    let indices = SplitIndices {
        train: fit,
        val,
        test: (0..test.len()).collect(),
    };
    Ok(DatasetSplit {
        train: pick(train, &indices.train),
        val: pick(train, &indices.val),
        test: test.to_vec(),
        indices,
        grid,
    })
}
