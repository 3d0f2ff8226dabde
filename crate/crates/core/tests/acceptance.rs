//! One test per acceptance criterion, named `cNN_*`, so the harness prints a
//! pass/fail line for each.
//!
//! Criteria that need UJIIndoorLoc read it from
//! `$CAECNNLOC_DATA_DIR/UJIIndoorLoc/{trainingData,validationData}.csv` and are
//! `#[ignore]`d; run them with `cargo test --release --test acceptance -- --ignored`.
//! Each has a `*_synthetic_proxy` sibling that runs the same harness on
//! generated data. Proxies show the machinery works; they say nothing about
//! the real-data numbers.

mod common;

use std::path::PathBuf;
use std::sync::OnceLock;

use caecnnloc::datasets::{load_dataset, to_radio_images, DatasetManifest, FingerprintRecord};
use caecnnloc::eval::{
    evaluate, knn_baseline, latency_bench, noise_sweep, run_pipeline, KnnWeighting, NoiseRow, PipelineConfig, PipelineOutput,
    SplitMode,
};
use caecnnloc::gridding::{build_grid, GridConfig};
use caecnnloc::model::{classifier_specs, CaeCnnLocModel, Localizer, TrainConfig};
use caecnnloc::nn::Sequential;
use caecnnloc::quant::{quantize_f16, quantize_int8};
use caecnnloc::synth::{generate, SynthConfig, SyntheticDataset};
use common::*;

const SWEEP_L: [f64; 8] = [1.0, 3.0, 5.0, 7.0, 10.0, 20.0, 30.0, 50.0];
const NOISE: [f64; 5] = [0.0, 3.0, 5.0, 7.0, 10.0];
const NOISE_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn line(criterion: u32, ok: bool, detail: String) {
    println!("criterion {criterion}: {} {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {criterion}: {detail}");
}

// ---------------------------------------------------------------- data

struct Uji {
    manifest: DatasetManifest,
    train: Vec<FingerprintRecord>,
    test: Vec<FingerprintRecord>,
}

fn uji() -> &'static Uji {
    static CELL: OnceLock<Uji> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = std::env::var_os("CAECNNLOC_DATA_DIR")
            .map(PathBuf::from)
            .expect("CAECNNLOC_DATA_DIR is not set; UJIIndoorLoc criteria need the dataset")
            .join("UJIIndoorLoc");
        let manifest = DatasetManifest::ujiindoorloc();
        let train = load_dataset(dir.join("trainingData.csv"), &manifest).expect("trainingData.csv");
        let test = load_dataset(dir.join("validationData.csv"), &manifest).expect("validationData.csv");
        Uji { manifest, train, test }
    })
}

fn full_config(split: SplitMode) -> PipelineConfig {
    PipelineConfig {
        grid: GridConfig::new(7.0),
        split,
        train: TrainConfig::default(),
    }
}

fn uji_original() -> &'static PipelineOutput {
    static CELL: OnceLock<PipelineOutput> = OnceLock::new();
    CELL.get_or_init(|| {
        let d = uji();
        run_pipeline(&d.train, &d.test, &d.manifest, &full_config(SplitMode::default())).unwrap()
    })
}

/// UJI-like layout with a coarser reference lattice so the proxy trains in
/// well under a minute.
fn proxy_data() -> &'static SyntheticDataset {
    static CELL: OnceLock<SyntheticDataset> = OnceLock::new();
    CELL.get_or_init(|| {
        generate(&SynthConfig {
            spacing: 5.0,
            test_count: 400,
            ..SynthConfig::uji_like(11)
        })
        .unwrap()
    })
}

fn proxy_config(split: SplitMode) -> PipelineConfig {
    PipelineConfig {
        grid: GridConfig::new(7.0),
        split,
        train: TrainConfig {
            cae_epochs: 3,
            clf_epochs: 12,
            seed: 11,
            ..TrainConfig::default()
        },
    }
}

fn proxy_original() -> &'static PipelineOutput {
    static CELL: OnceLock<PipelineOutput> = OnceLock::new();
    CELL.get_or_init(|| {
        let d = proxy_data();
        run_pipeline(&d.train, &d.test, &d.manifest, &proxy_config(SplitMode::default())).unwrap()
    })
}

// ---------------------------------------------------------------- checks

fn check_reproduction(criterion: u32, out: &PipelineOutput) {
    let r = &out.report;
    line(
        criterion,
        r.building_hitrate >= 0.97 && r.floor_hitrate >= 0.85 && r.mean_error <= 12.0,
        format!(
            "building {:.3} (>= 0.97), floor {:.3} (>= 0.85), mean {:.2} m (<= 12.0)",
            r.building_hitrate, r.floor_hitrate, r.mean_error
        ),
    );
}

fn check_class_counts(criterion: u32, train: &[FingerprintRecord], expect_l7: Option<usize>) {
    let counts: Vec<usize> = SWEEP_L
        .iter()
        .map(|&l| build_grid(train, GridConfig::new(l)).unwrap().class_count())
        .collect();
    let decreasing = counts.windows(2).all(|w| w[0] > w[1]);
    let l7 = counts[3];
    let near = expect_l7.is_none_or(|k| (l7 as f64 - k as f64).abs() <= 0.05 * k as f64);
    line(criterion, decreasing && near, format!("L=7 -> {l7} classes; sweep {counts:?}"));
}

fn check_noise(criterion: u32, out: &PipelineOutput, records: &[FingerprintRecord], manifest: &DatasetManifest) {
    let rows: Vec<NoiseRow> = noise_sweep(&out.model, records, manifest, &NOISE, &NOISE_SEEDS).unwrap();
    let errors: Vec<f64> = rows.iter().map(|r| r.mean_error).collect();
    let delta = errors[4] - errors[0];
    let monotone = errors.windows(2).all(|w| w[1] >= w[0]);
    line(criterion, delta <= 5.0 && monotone, format!("errors {errors:.2?}, delta {delta:.2} m (<= 5.0)"));
}

fn check_quant_accuracy(criterion: u32, out: &PipelineOutput, records: &[FingerprintRecord], manifest: &DatasetManifest) {
    let f32_report = evaluate(&out.model, records, manifest).unwrap();
    let q = quantize_int8(&out.model).unwrap();
    let i8_report = evaluate(&q, records, manifest).unwrap();
    let floor_drop = f32_report.floor_hitrate - i8_report.floor_hitrate;
    let error_rise = i8_report.mean_error - f32_report.mean_error;
    let size = q.serialized_size().unwrap();
    let size_ok = (400_000..=600_000).contains(&size);
    line(
        criterion,
        floor_drop <= 0.02 && error_rise <= 1.0 && size_ok,
        format!("floor drop {floor_drop:.3} (<= 0.02), error rise {error_rise:.2} m (<= 1.0), int8 file {size} B (0.5 MB +-20%)"),
    );
}

fn check_combined(criterion: u32, out: &PipelineOutput, max_error: Option<f64>) {
    let r = &out.report;
    let bound = max_error.map_or("reported only".to_string(), |m| format!("<= {m}"));
    line(
        criterion,
        r.unmapped_count == 0 && r.floor_hitrate >= 0.97 && max_error.is_none_or(|m| r.mean_error <= m),
        format!(
            "unmapped {}, floor {:.3} (>= 0.97), mean {:.2} m ({bound})",
            r.unmapped_count, r.floor_hitrate, r.mean_error
        ),
    );
}

// ---------------------------------------------------------------- 1

#[test]
fn c01_shape_conformance() {
    let k = 823;
    let net = Sequential::<f32>::build(&[23, 23, 1], &classifier_specs(k, 0.3), &mut rng(0)).unwrap();
    let mut trace = net.shape_trace().unwrap();
    trace.dedup();
    let want: Vec<Vec<usize>> = vec![vec![21, 21, 16], vec![7, 7, 16], vec![5, 5, 32], vec![3, 3, 64], vec![576], vec![k]];
    line(1, trace == want, format!("{trace:?}"));
}

// ---------------------------------------------------------------- 2

#[test]
fn c02_gradient_oracle() {
    let mut worst = (0.0f64, "");
    for (name, mut net, x, loss) in gradient_cases() {
        let err = max_gradient_error(&mut net, &x, loss.as_ref());
        if err >= worst.0 {
            worst = (err, name);
        }
    }
    line(2, worst.0 <= 1e-4, format!("worst relative error {:.2e} ({})", worst.0, worst.1));
}

// ---------------------------------------------------------------- 3

#[test]
#[ignore = "needs UJIIndoorLoc under $CAECNNLOC_DATA_DIR; ~20 min release build"]
fn c03_uji_reproduction() {
    check_reproduction(3, uji_original());
}

#[test]
fn c03_uji_reproduction_synthetic_proxy() {
    check_reproduction(3, proxy_original());
}

// ---------------------------------------------------------------- 4

#[test]
#[ignore = "needs UJIIndoorLoc under $CAECNNLOC_DATA_DIR"]
fn c04_grid_class_count() {
    check_class_counts(4, &uji().train, Some(823));
}

#[test]
fn c04_grid_class_count_synthetic_proxy() {
    check_class_counts(4, &proxy_data().train, None);
}

// ---------------------------------------------------------------- 5

#[test]
#[ignore = "needs UJIIndoorLoc under $CAECNNLOC_DATA_DIR; shares the criterion 3 model"]
fn c05_noise_robustness() {
    let d = uji();
    check_noise(5, uji_original(), &d.test, &d.manifest);
}

#[test]
fn c05_noise_robustness_synthetic_proxy() {
    let d = proxy_data();
    check_noise(5, proxy_original(), &d.test, &d.manifest);
}

// ---------------------------------------------------------------- 6

#[test]
fn c06_quantization_payload_ratios() {
    // Payload ratios depend only on the architecture and K, not on data.
    let recs: Vec<FingerprintRecord> = (0..823)
        .map(|i| FingerprintRecord { rssi: vec![], x: i as f64 + 0.5, y: 0.5, floor: 0, building: Some(0) })
        .collect();
    let grid = build_grid(&recs, GridConfig::with_origin(1.0, (0.0, 0.0))).unwrap();
    let model = CaeCnnLocModel::init(23, grid, 0.3, 0).unwrap();
    let f32_bytes = model.to_file(None).payload_bytes() as f64;
    let f16 = quantize_f16(&model).unwrap().file().payload_bytes() as f64 / f32_bytes;
    let i8 = quantize_int8(&model).unwrap().file().payload_bytes() as f64 / f32_bytes;
    line(6, (f16 - 0.5).abs() <= 0.025 && i8 <= 0.29, format!("f16/f32 payload {f16:.3} (0.50 +-5%), i8/f32 payload {i8:.3} (<= 0.29)"));
}

#[test]
#[ignore = "needs UJIIndoorLoc under $CAECNNLOC_DATA_DIR; shares the criterion 3 model"]
fn c06_quantization_accuracy() {
    let d = uji();
    check_quant_accuracy(6, uji_original(), &d.test, &d.manifest);
}

#[test]
fn c06_quantization_accuracy_synthetic_proxy() {
    let d = proxy_data();
    check_quant_accuracy(6, proxy_original(), &d.test, &d.manifest);
}

// ---------------------------------------------------------------- 7

const COMBINED: SplitMode = SplitMode::Combined { train: 0.7, val: 0.1, test: 0.2 };

#[test]
#[ignore = "needs UJIIndoorLoc under $CAECNNLOC_DATA_DIR; ~20 min release build"]
fn c07_combined_split() {
    let d = uji();
    let out = run_pipeline(&d.train, &d.test, &d.manifest, &full_config(COMBINED)).unwrap();
    check_combined(7, &out, Some(4.0));
}

#[test]
fn c07_combined_split_synthetic_proxy() {
    let d = proxy_data();
    // The 4 m bound belongs to the real dataset and full training schedule.
    let out = run_pipeline(&d.train, &d.test, &d.manifest, &proxy_config(COMBINED)).unwrap();
    check_combined(7, &out, None);
}

// ---------------------------------------------------------------- 8

#[test]
#[ignore = "needs UJIIndoorLoc under $CAECNNLOC_DATA_DIR"]
fn c08_knn_baseline() {
    let d = uji();
    let errors: Vec<f64> = [1, 3]
        .iter()
        .map(|&k| knn_baseline(&d.train, &d.test, &d.manifest, k, KnnWeighting::Uniform).unwrap().mean_error)
        .collect();
    line(8, errors.iter().all(|e| (7.0..=12.0).contains(e)), format!("k=1,3 mean errors {errors:.2?} m (7..12)"));
}

#[test]
fn c08_knn_baseline_synthetic_proxy() {
    // The 7..12 m band is specific to the real dataset; the proxy only checks
    // that both baselines run and land in the right building and floor.
    let d = proxy_data();
    let reports: Vec<_> = [1, 3]
        .iter()
        .map(|&k| knn_baseline(&d.train, &d.test, &d.manifest, k, KnnWeighting::Uniform).unwrap())
        .collect();
    let ok = reports.iter().all(|r| r.mean_error.is_finite() && r.floor_hitrate >= 0.9);
    let errors: Vec<f64> = reports.iter().map(|r| r.mean_error).collect();
    line(8, ok, format!("k=1,3 mean errors {errors:.2?} m on synthetic data"));
}

// ---------------------------------------------------------------- 9

#[test]
fn c09_latency_ratios() {
    let d = proxy_data();
    let images = to_radio_images(&d.test[..60], &d.manifest).unwrap();
    let model_for = |l: f64| {
        let grid = build_grid(&d.train, GridConfig::new(l)).unwrap();
        CaeCnnLocModel::init(d.manifest.image_side(), grid, 0.3, 0).unwrap()
    };
    let (fine, coarse) = (model_for(1.0), model_for(50.0));
    let fine_i8 = quantize_int8(&fine).unwrap();
    // Three fresh attempts per ordering.
    let mut detail = String::new();
    let ok = (0..3).any(|_| {
        let f32_us = latency_bench(&fine, &images, 100, 10).unwrap().median_us;
        let i8_us = latency_bench(&fine_i8, &images, 100, 10).unwrap().median_us;
        let coarse_us = latency_bench(&coarse, &images, 100, 10).unwrap().median_us;
        detail = format!(
            "f32 {f32_us:.1} us, i8 {i8_us:.1} us (speedup {:.2}x), L=50 {coarse_us:.1} us vs L=1 {f32_us:.1} us",
            f32_us / i8_us
        );
        i8_us <= f32_us && coarse_us <= f32_us
    });
    line(9, ok, detail);
}

// ---------------------------------------------------------------- 10

#[test]
fn c10_property_suites_without_data() {
    // The full proptest suites live in properties.rs and training.rs; this
    // repeats one concrete instance of each so the criterion has its own line.
    use caecnnloc::datasets::normalize_rssi;
    let norm_ok = (-104..=0)
        .map(|v| normalize_rssi(v as f64, -104).unwrap())
        .collect::<Vec<_>>()
        .windows(2)
        .all(|w| (0.0..=1.0).contains(&w[0]) && w[0] <= w[1]);

    let data = generate(&SynthConfig::toy(2)).unwrap();
    let grid = build_grid(&data.train, GridConfig::new(6.0)).unwrap();
    let mut reversed = data.train.clone();
    reversed.reverse();
    let perm_ok = build_grid(&reversed, GridConfig::new(6.0)).unwrap().digest() == grid.digest();
    let contain_ok = grid.cells().iter().all(|c| {
        let (x0, y0) = (c.ix as f64 * 6.0 + grid.origin().0, c.iy as f64 * 6.0 + grid.origin().1);
        (x0..x0 + 6.0).contains(&c.centroid.0) && (y0..y0 + 6.0).contains(&c.centroid.1)
    });

    let model = CaeCnnLocModel::init(17, grid.clone(), 0.3, 4).unwrap();
    let images = to_radio_images(&data.test[..5], &data.manifest).unwrap();
    let probs = model.probabilities(&images).unwrap();
    let softmax_ok = probs.data().chunks(grid.class_count()).all(|p| (p.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    let bytes = model.to_file(None).to_bytes().unwrap();
    let roundtrip_ok = caecnnloc::container::ModelFile::from_bytes(&bytes).unwrap().to_bytes().unwrap() == bytes;

    let cfg = quick_config(3, 1, 2);
    let run = || run_pipeline(&data.train, &data.test, &data.manifest, &PipelineConfig { grid: GridConfig::new(6.0), split: SplitMode::default(), train: cfg.clone() }).unwrap();
    let determinism_ok = run().model.to_file(None).to_bytes().unwrap() == run().model.to_file(None).to_bytes().unwrap();

    line(
        10,
        norm_ok && perm_ok && contain_ok && softmax_ok && roundtrip_ok && determinism_ok,
        format!("normalization {norm_ok}, permutation {perm_ok}, containment {contain_ok}, softmax {softmax_ok}, round-trip {roundtrip_ok}, determinism {determinism_ok}"),
    );
}
