use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use caecnnloc::datasets::{load_dataset, save_dataset, DatasetManifest};
use caecnnloc::quant::AnyModel;
use caecnnloc::synth::{generate, SynthConfig};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_caecnnloc"));
    c.env("RUST_LOG", "warn").env_remove("CAECNNLOC_DATA_DIR");
    c
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    train_secs: Duration,
}

impl Fixture {
    fn config(&self) -> String {
        self.root.join("config.toml").display().to_string()
    }

    fn run_dir(&self, name: &str) -> PathBuf {
        self.root.join("runs").join(name)
    }
}

/// A synthetic toy dataset trained once through the CLI as run `base`.
fn fixture() -> &'static Fixture {
    static CELL: OnceLock<Fixture> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("toy");
        run(&["synth", "--out", root.to_str().unwrap()]);
        let cfg = root.join("config.toml");
        let start = Instant::now();
        run(&["-c", cfg.to_str().unwrap(), "train", "--run-name", "base"]);
        Fixture { train_secs: start.elapsed(), _dir: dir, root }
    })
}

/// TOML has no null, so absent keys and JSON nulls compare equal.
fn strip_nulls(v: serde_json::Value) -> serde_json::Value {
    match v {
        serde_json::Value::Object(m) => m.into_iter().filter(|(_, v)| !v.is_null()).map(|(k, v)| (k, strip_nulls(v))).collect(),
        serde_json::Value::Array(a) => a.into_iter().map(strip_nulls).collect(),
        other => other,
    }
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn toy_training_is_fast_and_writes_requested_files() {
    let f = fixture();
    assert!(f.train_secs < Duration::from_secs(60), "took {:?}", f.train_secs);
    let mut names: Vec<String> = std::fs::read_dir(f.run_dir("base"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    let want = [
        "cae_curve.csv",
        "grid.json",
        "model.f16.caeloc",
        "model.f32.caeloc",
        "model.i8.caeloc",
        "reports.json",
        "run_config.toml",
        "split.json",
        "training_curve.csv",
    ];
    assert_eq!(names, want);

    run(&["-c", &f.config(), "--set", "precisions=[\"i8\"]", "--clf-epochs", "2", "train", "--run-name", "only_i8"]);
    let models: Vec<String> = std::fs::read_dir(f.run_dir("only_i8"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".caeloc"))
        .collect();
    assert_eq!(models, ["model.i8.caeloc"]);
}

#[test]
fn every_artifact_embeds_config_and_seed() {
    let f = fixture();
    let dir = f.run_dir("base");
    let cfg: toml::Value = toml::from_str(&String::from_utf8(read(dir.join("run_config.toml"))).unwrap()).unwrap();
    let cfg_json = serde_json::to_value(&cfg).unwrap();
    for name in ["grid.json", "split.json", "reports.json"] {
        let v: serde_json::Value = serde_json::from_slice(&read(dir.join(name))).unwrap();
        assert_eq!(strip_nulls(v["run_config"].clone()), cfg_json, "{name}");
        assert_eq!(v["seed"], 0, "{name}");
    }
    for name in ["cae_curve.csv", "training_curve.csv"] {
        let text = String::from_utf8(read(dir.join(name))).unwrap();
        let first = text.lines().next().unwrap();
        let json = first.strip_prefix("# seed=0 run_config=").unwrap();
        assert_eq!(strip_nulls(serde_json::from_str(json).unwrap()), cfg_json, "{name}");
    }
    for p in ["f32", "f16", "i8"] {
        let model = AnyModel::load(dir.join(format!("model.{p}.caeloc"))).unwrap();
        assert_eq!(strip_nulls(model.metadata().run_config.clone()), cfg_json);
        assert_eq!(model.metadata().seed, 0);
        assert_eq!(model.metadata().cell_length, cfg["grid"]["cell_length"].as_float().unwrap());
    }
}

#[test]
fn reruns_are_byte_identical() {
    let f = fixture();
    run(&["-c", &f.config(), "prepare", "--run-name", "prep_a"]);
    run(&["-c", &f.config(), "prepare", "--run-name", "prep_b"]);
    for name in ["grid.json", "split.json"] {
        assert_eq!(read(f.run_dir("prep_a").join(name)), read(f.run_dir("prep_b").join(name)), "{name}");
    }
    // Same grid as training produced.
    assert_eq!(read(f.run_dir("prep_a").join("grid.json")), read(f.run_dir("base").join("grid.json")));

    run(&["-c", &f.config(), "train", "--run-name", "base_again"]);
    for name in ["model.f32.caeloc", "model.i8.caeloc", "training_curve.csv", "reports.json"] {
        assert_eq!(read(f.run_dir("base").join(name)), read(f.run_dir("base_again").join(name)), "{name}");
    }
}

#[test]
fn original_split_reports_unmapped_and_combined_has_none() {
    let f = fixture();
    run(&["-c", &f.config(), "prepare", "--run-name", "orig"]);
    run(&["-c", &f.config(), "--split", "combined", "prepare", "--run-name", "comb"]);
    let unmapped = |name: &str| -> u64 {
        let v: serde_json::Value = serde_json::from_slice(&read(f.run_dir(name).join("split.json"))).unwrap();
        v["unmapped_test_count"].as_u64().unwrap()
    };
    assert!(unmapped("orig") > 0);
    assert_eq!(unmapped("comb"), 0);
}

#[test]
fn evaluate_twice_gives_identical_reports() {
    let f = fixture();
    let model = f.run_dir("base").join("model.i8.caeloc");
    for name in ["ev_a", "ev_b"] {
        run(&["-c", &f.config(), "evaluate", "--model", model.to_str().unwrap(), "--run-name", name]);
    }
    let a = read(f.run_dir("ev_a").join("report.json"));
    assert_eq!(a, read(f.run_dir("ev_b").join("report.json")));
    let v: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(v["report"]["size_i8_bytes"].as_u64().unwrap(), std::fs::metadata(&model).unwrap().len());
}

#[test]
fn noise_sweep_has_one_row_per_magnitude() {
    let f = fixture();
    let model = f.run_dir("base").join("model.f32.caeloc");
    run(&["-c", &f.config(), "sweep-noise", "--model", model.to_str().unwrap(), "--run-name", "noise"]);
    let text = String::from_utf8(read(f.run_dir("noise").join("noise_sweep.csv"))).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    let mags: Vec<&str> = rows.iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(mags, ["0.0", "3.0", "5.0", "7.0", "10.0"]);
}

#[test]
fn predict_recovers_training_rows() {
    let f = fixture();
    let model = f.run_dir("base").join("model.f32.caeloc");
    let manifest = DatasetManifest::load(f.root.join("manifest.json")).unwrap();
    let records = load_dataset(f.root.join("train.csv"), &manifest).unwrap();
    let grid = AnyModel::load(&model).unwrap().as_localizer().grid().clone();
    let split: serde_json::Value = serde_json::from_slice(&read(f.run_dir("base").join("split.json"))).unwrap();
    let fit_rows: Vec<usize> = split["indices"]["train"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap() as usize).collect();
    for &row in fit_rows.iter().step_by(9) {
        let out = run(&["-c", &f.config(), "predict", "--model", model.to_str().unwrap(), "--csv", f.root.join("train.csv").to_str().unwrap(), "--row", &row.to_string(), "--json"]);
        let p: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
        assert_eq!(p["class_id"].as_u64().unwrap() as usize, grid.assign_class(&records[row]).unwrap(), "row {row}");
    }
    let text = stdout(&run(&["-c", &f.config(), "predict", "--model", model.to_str().unwrap(), "--csv", f.root.join("train.csv").to_str().unwrap()]));
    assert!(text.starts_with("class ") && text.contains(" building ") && text.contains(" floor ") && text.contains(" probability "), "{text}");
    assert_eq!(text.lines().count(), 1);
}

#[test]
fn model_grid_mismatch_fails() {
    let f = fixture();
    let dir = f.root.join("mismatch");
    std::fs::create_dir_all(&dir).unwrap();
    std::fs::copy(f.run_dir("base").join("model.f32.caeloc"), dir.join("model.f32.caeloc")).unwrap();
    run(&["-c", &f.config(), "--cell-length", "6", "prepare", "--run-name", "other_grid"]);
    std::fs::copy(f.run_dir("other_grid").join("grid.json"), dir.join("grid.json")).unwrap();
    let out = bin().args(["-c", &f.config(), "evaluate", "--model", dir.join("model.f32.caeloc").to_str().unwrap()]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("grid"));
}

#[test]
fn bad_configs_exit_nonzero() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let no_seed = dir.path().join("no_seed.toml");
    std::fs::write(&no_seed, format!("train_csv = {:?}\ntest_csv = {:?}\n", f.root.join("train.csv"), f.root.join("test.csv"))).unwrap();
    let out = bin().args(["-c", no_seed.to_str().unwrap(), "prepare"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));

    let out = bin().args(["-c", &f.config(), "--set", "grid.cell_length=-1", "prepare"]).output().unwrap();
    assert!(!out.status.success());
    let out = bin().arg("prepare").output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn stamped_run_directories() {
    let f = fixture();
    let out = stdout(&run(&["-c", &f.config(), "prepare"]));
    let dir = PathBuf::from(out.trim());
    let name = dir.file_name().unwrap().to_str().unwrap();
    // YYYYmmdd-HHMMSS-prepare
    assert_eq!(name.len(), "20260101-000000-prepare".len(), "{name}");
    assert!(name.ends_with("-prepare") && name[..8].chars().all(|c| c.is_ascii_digit()));
    assert!(dir.join("grid.json").exists());
}

#[test]
fn data_dir_env_supplies_ujiindoorloc_files() {
    let data = tempfile::tempdir().unwrap();
    let uji = data.path().join("UJIIndoorLoc");
    std::fs::create_dir_all(&uji).unwrap();
    let d = generate(&SynthConfig { ap_count: 520, ..SynthConfig::toy(3) }).unwrap();
    let manifest = DatasetManifest::ujiindoorloc();
    save_dataset(uji.join("trainingData.csv"), &d.train, &manifest).unwrap();
    save_dataset(uji.join("validationData.csv"), &d.test, &manifest).unwrap();

    let work = tempfile::tempdir().unwrap();
    let cfg = work.path().join("run.toml");
    std::fs::write(&cfg, "seed = 1\n[grid]\ncell_length = 12.0\n").unwrap();
    let missing = bin().args(["-c", cfg.to_str().unwrap(), "prepare"]).env("HOME", work.path()).output().unwrap();
    assert!(!missing.status.success());

    let out = bin().args(["-c", cfg.to_str().unwrap(), "prepare", "--run-name", "r"]).env("CAECNNLOC_DATA_DIR", data.path()).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(work.path().join("runs/r/grid.json").exists());
}
