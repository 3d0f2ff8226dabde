//! Synthetic fingerprint datasets with a UJIIndoorLoc-like layout.
//!
//! Buildings sit side by side along x; each floor of each building carries its
//! own access points. RSSI follows a log-distance path-loss model with
//! per-floor attenuation and Gaussian shadowing, rounded to whole dBm. Signals
//! weaker than the manifest's `rssi_min` become the no-signal sentinel.
//!
//! Training scans are taken on a regular reference-point lattice (several scans
//! per point); test scans are taken at uniformly random positions, so some of
//! them land in cells without any training scan.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datasets::{DatasetManifest, FingerprintRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub buildings: usize,
    pub floors: usize,
    pub ap_count: usize,
    /// Footprint of one building in meters.
    pub width: f64,
    pub depth: f64,
    /// Gap between neighbouring buildings along x.
    pub gap: f64,
    /// Reference-point lattice spacing in meters.
    pub spacing: f64,
    pub scans_per_point: usize,
    pub test_count: usize,
    pub tx_power: f64,
    pub path_loss_exponent: f64,
    pub floor_attenuation: f64,
    pub shadowing_std: f64,
    pub rssi_min: i32,
    pub seed: u64,
}

impl SynthConfig {
    /// Roughly the size and shape of UJIIndoorLoc: 3 buildings, 4 floors,
    /// 520 APs, about 18k training scans.
    pub fn uji_like(seed: u64) -> Self {
        SynthConfig {
            buildings: 3,
            floors: 4,
            ap_count: 520,
            width: 70.0,
            depth: 50.0,
            gap: 20.0,
            spacing: 3.0,
            scans_per_point: 4,
            test_count: 1111,
            tx_power: -30.0,
            path_loss_exponent: 2.8,
            floor_attenuation: 15.0,
            shadowing_std: 4.0,
            rssi_min: -104,
            seed,
        }
    }

    /// A small single-building dataset that trains in seconds.
    pub fn toy(seed: u64) -> Self {
        SynthConfig {
            buildings: 1,
            floors: 2,
            ap_count: 289,
            width: 24.0,
            depth: 24.0,
            gap: 0.0,
            spacing: 6.0,
            scans_per_point: 4,
            test_count: 60,
            tx_power: -30.0,
            path_loss_exponent: 2.5,
            floor_attenuation: 15.0,
            shadowing_std: 2.0,
            rssi_min: -104,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.width, self.depth, self.spacing, self.path_loss_exponent];
        if self.buildings == 0 || self.floors == 0 || self.ap_count == 0 || self.scans_per_point == 0 {
            return Err(Error::Config("building, floor, AP and scan counts must be at least 1".into()));
        }
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) || self.gap < 0.0 || self.shadowing_std < 0.0 {
            return Err(Error::Config("synthetic geometry must be positive and finite".into()));
        }
        if self.rssi_min >= 0 {
            return Err(Error::Config("rssi_min must be negative".into()));
        }
        Ok(())
    }

    fn origin_x(&self, building: usize) -> f64 {
        building as f64 * (self.width + self.gap)
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub manifest: DatasetManifest,
    pub train: Vec<FingerprintRecord>,
    pub test: Vec<FingerprintRecord>,
}

#[derive(Debug, Clone, Copy)]
struct AccessPoint {
    x: f64,
    y: f64,
    building: usize,
    floor: usize,
}

struct Radio<'a> {
    cfg: &'a SynthConfig,
    aps: Vec<AccessPoint>,
    shadow: Normal<f64>,
    sentinel: f64,
}

impl Radio<'_> {
    fn scan(&self, x: f64, y: f64, building: usize, floor: usize, rng: &mut ChaCha8Rng) -> FingerprintRecord {
        let cfg = self.cfg;
        let rssi = self
            .aps
            .iter()
            .map(|ap| {
                let d = ((ap.x - x).powi(2) + (ap.y - y).powi(2)).sqrt().max(1.0);
                let floors = (ap.floor as f64 - floor as f64).abs();
                let mut level = cfg.tx_power - 10.0 * cfg.path_loss_exponent * d.log10() - cfg.floor_attenuation * floors;
                if ap.building != building {
                    level -= 20.0;
                }
                level = (level + self.shadow.sample(rng)).round();
                if level < cfg.rssi_min as f64 {
                    self.sentinel
                } else {
                    level.min(0.0)
                }
            })
            .collect();
        FingerprintRecord {
            rssi,
            x,
            y,
            floor: floor as i32,
            building: Some(building as i32),
        }
    }
}

/// Generates a dataset; identical configs give identical output.
pub fn generate(cfg: &SynthConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let manifest = DatasetManifest::generic("synthetic", cfg.ap_count, cfg.rssi_min, true);

    let groups = cfg.buildings * cfg.floors;
    let aps = (0..cfg.ap_count)
        .map(|i| {
            let group = i % groups;
            let (building, floor) = (group / cfg.floors, group % cfg.floors);
            AccessPoint {
                x: cfg.origin_x(building) + rng.random_range(0.0..cfg.width),
                y: rng.random_range(0.0..cfg.depth),
                building,
                floor,
            }
        })
        .collect();
    let shadow = Normal::new(0.0, cfg.shadowing_std).map_err(|e| Error::Config(e.to_string()))?;
    let radio = Radio {
        cfg,
        aps,
        shadow,
        sentinel: manifest.no_signal_sentinel,
    };

    let nx = (cfg.width / cfg.spacing).floor() as usize;
    let ny = (cfg.depth / cfg.spacing).floor() as usize;
    let mut train = Vec::new();
    for building in 0..cfg.buildings {
        for floor in 0..cfg.floors {
            for i in 0..nx.max(1) {
                for j in 0..ny.max(1) {
                    let x = cfg.origin_x(building) + (i as f64 + 0.5) * cfg.spacing;
                    let y = (j as f64 + 0.5) * cfg.spacing;
                    for _ in 0..cfg.scans_per_point {
                        // Scans at one reference point scatter slightly.
                        let jx = x + rng.random_range(-0.5..0.5);
                        let jy = y + rng.random_range(-0.5..0.5);
                        train.push(radio.scan(jx, jy, building, floor, &mut rng));
                    }
                }
            }
        }
    }

    let test = (0..cfg.test_count)
        .map(|_| {
            let building = rng.random_range(0..cfg.buildings);
            let floor = rng.random_range(0..cfg.floors);
            let x = cfg.origin_x(building) + rng.random_range(0.0..cfg.width);
            let y = rng.random_range(0.0..cfg.depth);
            radio.scan(x, y, building, floor, &mut rng)
        })
        .collect();

    Ok(SyntheticDataset { manifest, train, test })
}
