use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use caecnnloc::container::Precision;
use caecnnloc::datasets::{load_dataset, save_dataset, to_radio_image, to_radio_images, DatasetManifest, FingerprintRecord};
use caecnnloc::eval::{self, l_sweep, latency_bench, noise_sweep, run_pipeline, SplitMode};
use caecnnloc::gridding::{DatasetSplit, SplitIndices};
use caecnnloc::model::{CaeCnnLocModel, History, TrainConfig};
use caecnnloc::quant::{quantize_f16, quantize_int8, AnyModel};
use caecnnloc::synth::{generate, SynthConfig};
use serde::Serialize;

use crate::config::{Data, RunConfig};
use crate::run::RunDir;
use crate::Common;

const GRID_FILE: &str = "grid.json";

fn load_config(c: &Common) -> Result<RunConfig> {
    let path = c.config.as_deref().context("this command needs --config")?;
    RunConfig::load(path, &c.all_overrides())
}

fn open_run(c: &Common, cfg: &RunConfig, command: &str) -> Result<RunDir> {
    let run = RunDir::create(&cfg.output_dir, command, c.run_name.as_deref(), cfg.to_json(), cfg.seed)?;
    run.write_text("run_config.toml", &cfg.to_toml()?)?;
    Ok(run)
}

fn model_file_name(p: Precision) -> String {
    format!("model.{p}.caeloc")
}

fn load_model(path: &Path) -> Result<AnyModel> {
    AnyModel::load(path).with_context(|| format!("loading model {}", path.display()))
}

#[derive(Serialize)]
struct SplitSummary<'a> {
    mode: SplitMode,
    class_count: usize,
    train_count: usize,
    val_count: usize,
    test_count: usize,
    unmapped_test_count: usize,
    indices: &'a SplitIndices,
}

fn write_split(run: &RunDir, cfg: &RunConfig, split: &DatasetSplit) -> Result<()> {
    run.write_json_merged(GRID_FILE, &split.grid)?;
    let unmapped = split.grid.unmapped_count(&split.test);
    let summary = SplitSummary {
        mode: cfg.split,
        class_count: split.grid.class_count(),
        train_count: split.train.len(),
        val_count: split.val.len(),
        test_count: split.test.len(),
        unmapped_test_count: unmapped,
        indices: &split.indices,
    };
    run.write_json_merged("split.json", &summary)?;
    log::info!(
        "{} classes at L={}; train {}, val {}, test {}; {unmapped} unmapped test points",
        summary.class_count,
        cfg.grid.cell_length,
        summary.train_count,
        summary.val_count,
        summary.test_count
    );
    Ok(())
}

pub fn prepare(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let data = Data::load(&cfg)?;
    let split = data.split(&cfg)?;
    let run = open_run(c, &cfg, "prepare")?;
    write_split(&run, &cfg, &split)?;
    println!("{}", run.path().display());
    Ok(())
}

#[derive(Serialize)]
struct CaeRow {
    epoch: usize,
    loss: f64,
}

#[derive(Serialize)]
struct CurveRow {
    epoch: usize,
    train_loss: f64,
    train_accuracy: f64,
    val_loss: Option<f64>,
    val_accuracy: Option<f64>,
}

fn curve_rows(h: &History) -> Vec<CurveRow> {
    (0..h.train_loss.len())
        .map(|i| CurveRow {
            epoch: i + 1,
            train_loss: h.train_loss[i],
            train_accuracy: h.train_accuracy[i],
            val_loss: h.val_loss.get(i).copied(),
            val_accuracy: h.val_accuracy.get(i).copied(),
        })
        .collect()
}

/// Writes the requested precisions of `model` into `run`; returns their paths.
fn write_models(run: &RunDir, model: &CaeCnnLocModel, precisions: &[Precision]) -> Result<Vec<(Precision, PathBuf)>> {
    let mut out = Vec::new();
    for &p in precisions {
        let path = run.file(&model_file_name(p));
        match p {
            Precision::F32 => model.save(&path, Some(GRID_FILE))?,
            Precision::F16 => quantize_f16(model)?.save(&path, Some(GRID_FILE))?,
            Precision::I8 => quantize_int8(model)?.save(&path, Some(GRID_FILE))?,
        }
        log::info!("wrote {} ({} bytes)", path.display(), file_len(&path)?);
        out.push((p, path));
    }
    Ok(out)
}

pub fn train(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let data = Data::load(&cfg)?;
    let run = open_run(c, &cfg, "train")?;
    let out = run_pipeline(&data.train, &data.test, &data.manifest, &cfg.pipeline()).context("training failed")?;
    write_split(&run, &cfg, &out.split)?;

    let mut model = out.model;
    model.metadata.run_config = cfg.to_json();
    let cae: Vec<CaeRow> = out.cae_loss.iter().enumerate().map(|(i, &loss)| CaeRow { epoch: i + 1, loss }).collect();
    run.write_csv("cae_curve.csv", &cae)?;
    run.write_csv("training_curve.csv", &curve_rows(&out.history))?;

    let mut reports = Vec::new();
    for (p, path) in write_models(&run, &model, &cfg.precisions)? {
        let loaded = load_model(&path)?;
        let mut r = eval::evaluate(loaded.as_localizer(), &out.split.test, &data.manifest)?;
        r.label = model_file_name(p);
        r.set_size(p, file_len(&path)?);
        log::info!(
            "{p}: building {:.3}, floor {:.3}, mean error {:.2} m",
            r.building_hitrate,
            r.floor_hitrate,
            r.mean_error
        );
        reports.push(r);
    }
    run.write_json("reports.json", "reports", &reports)?;
    println!("{}", run.path().display());
    Ok(())
}

pub fn quantize(c: &Common, model_path: &Path, precisions: &[Precision]) -> Result<()> {
    let AnyModel::Float(model) = load_model(model_path)? else {
        bail!("{} is already quantized; quantize the float32 model", model_path.display());
    };
    // The audit trail is the one the float model was trained under.
    let (audit, seed) = (model.metadata.run_config.clone(), model.metadata.seed);
    let root = match &c.config {
        Some(_) => load_config(c)?.output_dir,
        None => c.output_dir.clone().unwrap_or_else(|| PathBuf::from("runs")),
    };
    let run = RunDir::create(&root, "quantize", c.run_name.as_deref(), audit, seed)?;
    run.write_json_merged(GRID_FILE, &model.grid)?;
    write_models(&run, &model, precisions)?;
    println!("{}", run.path().display());
    Ok(())
}

#[derive(Serialize)]
struct ModelReport<'a> {
    model: String,
    report: &'a eval::EvalReport,
}

pub fn evaluate(c: &Common, model_path: &Path) -> Result<()> {
    let cfg = load_config(c)?;
    let data = Data::load(&cfg)?;
    let split = data.split(&cfg)?;
    let model = load_model(model_path)?;
    let m = model.as_localizer();
    let mut r = eval::evaluate(m, &split.test, &data.manifest)?;
    r.label = file_name(model_path);
    r.set_size(m.precision(), file_len(model_path)?);
    let run = open_run(c, &cfg, "evaluate")?;
    run.write_json_merged("report.json", &ModelReport { model: model_path.display().to_string(), report: &r })?;
    println!(
        "building {:.4} floor {:.4} mean {:.3} m (p50 {:.3}, p95 {:.3}) over {} samples, {} unmapped",
        r.building_hitrate, r.floor_hitrate, r.mean_error, r.p50_error, r.p95_error, r.sample_count, r.unmapped_count
    );
    println!("{}", run.path().display());
    Ok(())
}

fn file_len(p: &Path) -> Result<usize> {
    Ok(std::fs::metadata(p).with_context(|| format!("reading {}", p.display()))?.len() as usize)
}

fn file_name(p: &Path) -> String {
    p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
}

pub fn sweep_l(c: &Common, lengths: &[f64]) -> Result<()> {
    let cfg = load_config(c)?;
    ensure!(!lengths.is_empty(), "--lengths is empty");
    let data = Data::load(&cfg)?;
    let run = open_run(c, &cfg, "sweep-l")?;
    let rows = l_sweep(&data.train, &data.test, &data.manifest, lengths, &cfg.pipeline())?;
    for r in &rows {
        log::info!("L={} classes {} mean {:.2} m floor {:.3}", r.cell_length, r.class_count, r.mean_error, r.floor_hitrate);
    }
    run.write_csv("l_sweep.csv", &rows)?;
    println!("{}", run.path().display());
    Ok(())
}

pub fn sweep_noise(c: &Common, model_path: &Path, magnitudes: &[f64], seeds: u64) -> Result<()> {
    let cfg = load_config(c)?;
    ensure!(seeds > 0, "--seeds must be at least 1");
    let data = Data::load(&cfg)?;
    let split = data.split(&cfg)?;
    let model = load_model(model_path)?;
    let seed_list: Vec<u64> = (0..seeds).map(|i| cfg.seed.wrapping_add(i)).collect();
    let rows = noise_sweep(model.as_localizer(), &split.test, &data.manifest, magnitudes, &seed_list)?;
    for r in &rows {
        log::info!("noise {} dBm: mean {:.2} m floor {:.3}", r.magnitude, r.mean_error, r.floor_hitrate);
    }
    let run = open_run(c, &cfg, "sweep-noise")?;
    run.write_csv("noise_sweep.csv", &rows)?;
    println!("{}", run.path().display());
    Ok(())
}

#[derive(Serialize)]
struct BenchRow {
    model: String,
    precision: Precision,
    class_count: usize,
    size_bytes: usize,
    repetitions: usize,
    median_us: f64,
    p95_us: f64,
    mean_us: f64,
}

pub fn bench(c: &Common, models: &[PathBuf], repetitions: usize, warmup: usize, samples: usize) -> Result<()> {
    let cfg = load_config(c)?;
    let data = Data::load(&cfg)?;
    let split = data.split(&cfg)?;
    ensure!(samples > 0 && !split.test.is_empty(), "no test records to time");
    let images = to_radio_images(&split.test[..samples.min(split.test.len())], &data.manifest)?;
    let mut rows = Vec::new();
    for path in models {
        let model = load_model(path)?;
        let m = model.as_localizer();
        let s = latency_bench(m, &images, repetitions, warmup)?;
        log::info!("{}: median {:.1} us, p95 {:.1} us", path.display(), s.median_us, s.p95_us);
        rows.push(BenchRow {
            model: path.display().to_string(),
            precision: m.precision(),
            class_count: m.grid().class_count(),
            size_bytes: file_len(path)?,
            repetitions: s.repetitions,
            median_us: s.median_us,
            p95_us: s.p95_us,
            mean_us: s.mean_us,
        });
    }
    let run = open_run(c, &cfg, "bench")?;
    run.write_csv("bench.csv", &rows)?;
    println!("{}", run.path().display());
    Ok(())
}

fn predict_manifest(c: &Common, explicit: Option<&Path>) -> Result<DatasetManifest> {
    if let Some(p) = explicit {
        return Ok(DatasetManifest::load(p)?);
    }
    match &c.config {
        Some(_) => load_config(c)?.manifest(),
        None => Ok(DatasetManifest::ujiindoorloc()),
    }
}

pub fn predict(
    c: &Common,
    model_path: &Path,
    csv: Option<&Path>,
    row: usize,
    rssi: Option<Vec<f64>>,
    manifest: Option<&Path>,
    json: bool,
) -> Result<()> {
    let manifest = predict_manifest(c, manifest)?;
    let record = match (csv, rssi) {
        (Some(path), None) => {
            let records = load_dataset(path, &manifest)?;
            let n = records.len();
            records.into_iter().nth(row).with_context(|| format!("{} has {n} rows, asked for row {row}", path.display()))?
        }
        (None, Some(rssi)) => {
            ensure!(rssi.len() == manifest.ap_count, "expected {} RSSI values, got {}", manifest.ap_count, rssi.len());
            FingerprintRecord { rssi, x: 0.0, y: 0.0, floor: 0, building: None }
        }
        _ => bail!("give either --csv or --rssi"),
    };
    let model = load_model(model_path)?;
    let m = model.as_localizer();
    let image = to_radio_image(&record, &manifest)?;
    ensure!(
        image.side == m.input_side(),
        "model expects {}x{} radio images but the manifest gives {}x{}",
        m.input_side(),
        m.input_side(),
        image.side,
        image.side
    );
    let p = m.predict(&image)?;
    if json {
        println!("{}", serde_json::to_string(&p)?);
    } else {
        let building = p.building.map_or_else(|| "-".to_string(), |b| b.to_string());
        println!(
            "class {} building {building} floor {} x {:.3} y {:.3} probability {:.4}",
            p.class_id, p.floor, p.centroid.0, p.centroid.1, p.probability
        );
    }
    Ok(())
}

pub fn synth(out: &Path, preset: &str, data_seed: u64) -> Result<()> {
    let (sc, cell_length, train) = match preset {
        "toy" => (
            SynthConfig::toy(data_seed),
            12.0,
            TrainConfig { cae_epochs: 5, clf_epochs: 40, batch_size: 16, ..TrainConfig::default() },
        ),
        "uji-like" => (SynthConfig::uji_like(data_seed), 7.0, TrainConfig::default()),
        other => bail!("unknown preset `{other}` (expected toy or uji-like)"),
    };
    let data = generate(&sc)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    save_dataset(out.join("train.csv"), &data.train, &data.manifest)?;
    save_dataset(out.join("test.csv"), &data.test, &data.manifest)?;
    data.manifest.save(out.join("manifest.json"))?;

    let mut table = toml::Table::new();
    table.insert("seed".into(), 0.into());
    table.insert("manifest".into(), "manifest.json".into());
    table.insert("train_csv".into(), "train.csv".into());
    table.insert("test_csv".into(), "test.csv".into());
    table.insert("output_dir".into(), "runs".into());
    table.insert("precisions".into(), toml::Value::Array(vec!["f32".into(), "f16".into(), "i8".into()]));
    let mut grid = toml::Table::new();
    grid.insert("cell_length".into(), cell_length.into());
    table.insert("grid".into(), grid.into());
    table.insert("split".into(), toml::Value::try_from(SplitMode::default())?);
    table.insert("train".into(), toml::Value::try_from(TrainConfig { seed: 0, ..train })?);
    table["train"].as_table_mut().expect("table").remove("seed");
    std::fs::write(out.join("config.toml"), toml::to_string(&table)?)?;
    log::info!("wrote {} training and {} test records to {}", data.train.len(), data.test.len(), out.display());
    println!("{}", out.join("config.toml").display());
    Ok(())
}
