//! Metrics and experiment harnesses: evaluation reports, noise injection,
//! gridding and noise sweeps, the KNN baseline and latency measurement.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::Precision;
use crate::datasets::{to_radio_images, DatasetManifest, FingerprintRecord, RadioImage};
use crate::error::{Error, Result};
use crate::gridding::{combined_split, original_split, DatasetSplit, GridConfig, GridMap};
use crate::model::{train_cae, train_classifier, CaeCnnLocModel, History, Labeled, Localizer, TrainConfig};
use crate::quant::{quantize_f16, quantize_int8};

/// Localization quality of one configuration. Flat so it maps onto one CSV row.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub precision: Option<Precision>,
    pub sample_count: usize,
    /// Test records whose true cell has no training member.
    pub unmapped_count: usize,
    pub building_hitrate: f64,
    pub floor_hitrate: f64,
    pub mean_error: f64,
    pub p50_error: f64,
    pub p75_error: f64,
    pub p95_error: f64,
    pub size_f32_bytes: Option<usize>,
    pub size_f16_bytes: Option<usize>,
    pub size_i8_bytes: Option<usize>,
    pub latency_median_us: Option<f64>,
    pub latency_p95_us: Option<f64>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn set_size(&mut self, precision: Precision, bytes: usize) {
        match precision {
            Precision::F32 => self.size_f32_bytes = Some(bytes),
            Precision::F16 => self.size_f16_bytes = Some(bytes),
            Precision::I8 => self.size_i8_bytes = Some(bytes),
        }
    }
}

/// Writes serializable rows as CSV with a header.
pub fn write_csv<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv_to(file, rows)
}

pub fn write_csv_to<T: Serialize, W: Write>(writer: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

/// Linear-interpolation percentile of ascending `sorted` values, `q ∈ [0, 100]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn euclidean(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Predicted labels and position for one record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub building: Option<i32>,
    pub floor: i32,
    pub position: (f64, f64),
}

/// Scores estimates against ground truth. Result does not depend on record order.
pub fn score(records: &[FingerprintRecord], estimates: &[Estimate], unmapped_count: usize) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Validation("cannot evaluate an empty test set".into()));
    }
    if records.len() != estimates.len() {
        return Err(Error::Shape(format!("{} records but {} estimates", records.len(), estimates.len())));
    }
    let (mut building_hits, mut floor_hits) = (0usize, 0usize);
    let mut errors = Vec::with_capacity(records.len());
    for (r, e) in records.iter().zip(estimates) {
        building_hits += (r.building == e.building) as usize;
        floor_hits += (r.floor == e.floor) as usize;
        errors.push(euclidean((r.x, r.y), e.position));
    }
    errors.sort_by(f64::total_cmp);
    let n = records.len() as f64;
    Ok(EvalReport {
        sample_count: records.len(),
        unmapped_count,
        building_hitrate: building_hits as f64 / n,
        floor_hitrate: floor_hits as f64 / n,
        mean_error: errors.iter().sum::<f64>() / n,
        p50_error: percentile(&errors, 50.0),
        p75_error: percentile(&errors, 75.0),
        p95_error: percentile(&errors, 95.0),
        ..EvalReport::default()
    })
}

/// Predicts every record (unmapped ones included) and scores the result.
pub fn evaluate(model: &dyn Localizer, records: &[FingerprintRecord], manifest: &DatasetManifest) -> Result<EvalReport> {
    let images = to_radio_images(records, manifest)?;
    evaluate_images(model, records, &images)
}

pub fn evaluate_images(model: &dyn Localizer, records: &[FingerprintRecord], images: &[RadioImage]) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Validation("cannot evaluate an empty test set".into()));
    }
    let estimates: Vec<Estimate> = model
        .predict_batch(images)?
        .into_iter()
        .map(|p| Estimate {
            building: p.building,
            floor: p.floor,
            position: p.centroid,
        })
        .collect();
    let mut report = score(records, &estimates, model.grid().unmapped_count(records))?;
    report.precision = Some(model.precision());
    report.set_size(model.precision(), model.serialized_size()?);
    Ok(report)
}

/// Errors of a classifier that always predicts the true cell, over mapped
/// records only. No model on the same grid can do better on those records.
pub fn oracle_errors(grid: &GridMap, records: &[FingerprintRecord]) -> Vec<f64> {
    records
        .iter()
        .filter_map(|r| {
            let cell = grid.cell(grid.assign_class(r)?)?;
            Some(euclidean((r.x, r.y), cell.centroid))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Noise is uniform on `[-magnitude, magnitude]` dBm.
    pub magnitude: f64,
    pub seed: u64,
}

/// Adds uniform noise to every heard AP and clamps to `[rssi_min, 0]`.
/// Sentinel entries are left alone.
pub fn inject_noise(records: &[FingerprintRecord], spec: NoiseSpec, manifest: &DatasetManifest) -> Result<Vec<FingerprintRecord>> {
    if !(spec.magnitude.is_finite() && spec.magnitude >= 0.0) {
        return Err(Error::Config(format!("noise magnitude must be non-negative, got {}", spec.magnitude)));
    }
    if spec.magnitude == 0.0 {
        return Ok(records.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lo = manifest.rssi_min as f64;
    Ok(records
        .iter()
        .map(|r| {
            let mut out = r.clone();
            for v in out.rssi.iter_mut().filter(|v| !manifest.is_sentinel(**v)) {
                *v = (*v + rng.random_range(-spec.magnitude..=spec.magnitude)).clamp(lo, 0.0);
            }
            out
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub magnitude: f64,
    pub seeds: usize,
    pub mean_error: f64,
    pub building_hitrate: f64,
    pub floor_hitrate: f64,
}

/// Mean metrics over `seeds` noise draws per magnitude.
pub fn noise_sweep(
    model: &dyn Localizer,
    records: &[FingerprintRecord],
    manifest: &DatasetManifest,
    magnitudes: &[f64],
    seeds: &[u64],
) -> Result<Vec<NoiseRow>> {
    if seeds.is_empty() {
        return Err(Error::Config("noise sweep needs at least one seed".into()));
    }
    magnitudes
        .iter()
        .map(|&magnitude| {
            let mut row = NoiseRow {
                magnitude,
                seeds: seeds.len(),
                mean_error: 0.0,
                building_hitrate: 0.0,
                floor_hitrate: 0.0,
            };
            for &seed in seeds {
                let noisy = inject_noise(records, NoiseSpec { magnitude, seed }, manifest)?;
                let r = evaluate(model, &noisy, manifest)?;
                row.mean_error += r.mean_error;
                row.building_hitrate += r.building_hitrate;
                row.floor_hitrate += r.floor_hitrate;
            }
            let n = seeds.len() as f64;
            row.mean_error /= n;
            row.building_hitrate /= n;
            row.floor_hitrate /= n;
            Ok(row)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SplitMode {
    /// Published train/test files; `val_fraction` of train held out.
    Original { val_fraction: f64 },
    /// Union of both files, gridded then shuffled into three parts.
    Combined { train: f64, val: f64, test: f64 },
}

impl Default for SplitMode {
    fn default() -> Self {
        SplitMode::Original { val_fraction: 0.1 }
    }
}

impl SplitMode {
    pub fn split(
        &self,
        train: &[FingerprintRecord],
        test: &[FingerprintRecord],
        seed: u64,
        grid: GridConfig,
    ) -> Result<DatasetSplit> {
        match *self {
            SplitMode::Original { val_fraction } => original_split(train, test, val_fraction, seed, grid),
            SplitMode::Combined { train: a, val: b, test: c } => combined_split(train, test, (a, b, c), seed, grid),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub grid: GridConfig,
    pub split: SplitMode,
    pub train: TrainConfig,
}

pub struct PipelineOutput {
    pub split: DatasetSplit,
    pub model: CaeCnnLocModel,
    pub cae_loss: Vec<f64>,
    pub history: History,
    pub report: EvalReport,
}

/// Split → grid → train both stages → evaluate on the test part.
pub fn run_pipeline(
    train: &[FingerprintRecord],
    test: &[FingerprintRecord],
    manifest: &DatasetManifest,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput> {
    let split = cfg.split.split(train, test, cfg.train.seed, cfg.grid)?;
    let train_images = to_radio_images(&split.train, manifest)?;
    let val_images = to_radio_images(&split.val, manifest)?;
    let train_labels = split.grid.labels(&split.train)?;
    let val_labels = split.grid.labels(&split.val)?;

    let (cae, cae_loss) = train_cae(&train_images, &cfg.train)?;
    let (mut model, history) = train_classifier(
        &cae,
        Labeled::new(&train_images, &train_labels)?,
        Labeled::new(&val_images, &val_labels)?,
        &split.grid,
        &cfg.train,
    )?;
    model.metadata.dataset = manifest.name.clone();
    let report = evaluate(&model, &split.test, manifest)?;
    Ok(PipelineOutput {
        split,
        model,
        cae_loss,
        history,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LSweepRow {
    pub cell_length: f64,
    pub class_count: usize,
    pub parameter_count: usize,
    pub mean_error: f64,
    pub building_hitrate: f64,
    pub floor_hitrate: f64,
    pub unmapped_count: usize,
    pub size_f32_bytes: usize,
    pub size_f16_bytes: usize,
    pub size_i8_bytes: usize,
}

/// One full train + evaluate cycle per cell length.
pub fn l_sweep(
    train: &[FingerprintRecord],
    test: &[FingerprintRecord],
    manifest: &DatasetManifest,
    cell_lengths: &[f64],
    cfg: &PipelineConfig,
) -> Result<Vec<LSweepRow>> {
    cell_lengths
        .iter()
        .map(|&l| {
            let mut c = cfg.clone();
            c.grid.cell_length = l;
            c.grid.validate()?;
            let out = run_pipeline(train, test, manifest, &c)?;
            Ok(LSweepRow {
                cell_length: l,
                class_count: out.model.class_count(),
                parameter_count: out.model.count_parameters(),
                mean_error: out.report.mean_error,
                building_hitrate: out.report.building_hitrate,
                floor_hitrate: out.report.floor_hitrate,
                unmapped_count: out.report.unmapped_count,
                size_f32_bytes: out.model.serialized_size()?,
                size_f16_bytes: quantize_f16(&out.model)?.serialized_size()?,
                size_i8_bytes: quantize_int8(&out.model)?.serialized_size()?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnnWeighting {
    Uniform,
    InverseDistance,
}

/// Nearest-neighbour matching in normalized RSSI space.
#[derive(Debug, Clone)]
pub struct Knn {
    features: Vec<f32>,
    width: usize,
    labels: Vec<(Option<i32>, i32, (f64, f64))>,
    pub k: usize,
    pub weighting: KnnWeighting,
}

impl Knn {
    pub fn fit(train: &[FingerprintRecord], manifest: &DatasetManifest, k: usize, weighting: KnnWeighting) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if k > train.len() {
            return Err(Error::Config(format!("k = {k} exceeds the {} training records", train.len())));
        }
        let images = to_radio_images(train, manifest)?;
        let width = manifest.ap_count;
        let features = images.iter().flat_map(|im| im.features().iter().copied()).collect();
        let labels = train.iter().map(|r| (r.building, r.floor, (r.x, r.y))).collect();
        Ok(Knn {
            features,
            width,
            labels,
            k,
            weighting,
        })
    }

    pub fn estimate(&self, query: &[f32]) -> Estimate {
        let mut dists: Vec<(f64, usize)> = self
            .features
            .chunks_exact(self.width)
            .enumerate()
            .map(|(i, row)| {
                let d: f32 = row.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
                ((d as f64).sqrt(), i)
            })
            .collect();
        let k = self.k;
        dists.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut near = dists[..k].to_vec();
        near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

        let exact: Vec<_> = near.iter().filter(|(d, _)| *d == 0.0).copied().collect();
        let weighted: Vec<(f64, usize)> = match self.weighting {
            _ if !exact.is_empty() && self.weighting == KnnWeighting::InverseDistance => {
                exact.iter().map(|&(_, i)| (1.0, i)).collect()
            }
            KnnWeighting::Uniform => near.iter().map(|&(_, i)| (1.0, i)).collect(),
            KnnWeighting::InverseDistance => near.iter().map(|&(d, i)| (1.0 / d, i)).collect(),
        };
        let total: f64 = weighted.iter().map(|w| w.0).sum();
        let position = weighted.iter().fold((0.0, 0.0), |acc, &(w, i)| {
            let p = self.labels[i].2;
            (acc.0 + w * p.0 / total, acc.1 + w * p.1 / total)
        });
        Estimate {
            building: majority(near.iter().map(|&(_, i)| self.labels[i].0)),
            floor: majority(near.iter().map(|&(_, i)| self.labels[i].1)),
            position,
        }
    }
}

/// Most frequent value; ties go to whichever tied value appears first
/// (callers pass neighbours nearest first).
fn majority<T: PartialEq + Copy>(values: impl Iterator<Item = T>) -> T {
    let values: Vec<T> = values.collect();
    let count = |v: &T| values.iter().filter(|x| *x == v).count();
    let best = values.iter().map(count).max().unwrap_or(0);
    *values.iter().find(|v| count(v) == best).expect("majority of an empty set")
}

pub fn knn_baseline(
    train: &[FingerprintRecord],
    test: &[FingerprintRecord],
    manifest: &DatasetManifest,
    k: usize,
    weighting: KnnWeighting,
) -> Result<EvalReport> {
    let knn = Knn::fit(train, manifest, k, weighting)?;
    let queries = to_radio_images(test, manifest)?;
    let estimates: Vec<Estimate> = queries.iter().map(|q| knn.estimate(q.features())).collect();
    let mut report = score(test, &estimates, 0)?;
    report.label = format!("knn k={k} {weighting:?}").to_lowercase();
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub precision: Precision,
    pub repetitions: usize,
    pub median_us: f64,
    pub p95_us: f64,
    pub mean_us: f64,
}

/// Single-image prediction wall time, cycling through `images`.
pub fn latency_bench(model: &dyn Localizer, images: &[RadioImage], repetitions: usize, warmup: usize) -> Result<LatencyStats> {
    if repetitions < 30 {
        return Err(Error::Config(format!("latency needs at least 30 repetitions, got {repetitions}")));
    }
    if images.is_empty() {
        return Err(Error::Validation("latency benchmark needs at least one image".into()));
    }
    for i in 0..warmup {
        model.probabilities(std::slice::from_ref(&images[i % images.len()]))?;
    }
    let mut times = Vec::with_capacity(repetitions);
    for i in 0..repetitions {
        let im = std::slice::from_ref(&images[i % images.len()]);
        let start = Instant::now();
        let out = model.probabilities(im)?;
        times.push(start.elapsed().as_secs_f64() * 1e6);
        std::hint::black_box(out);
    }
    times.sort_by(f64::total_cmp);
    Ok(LatencyStats {
        precision: model.precision(),
        repetitions,
        median_us: percentile(&times, 50.0),
        p95_us: percentile(&times, 95.0),
        mean_us: times.iter().sum::<f64>() / repetitions as f64,
    })
}
