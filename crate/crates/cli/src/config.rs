//! `RunConfig`: the TOML file every command reads, plus `--set` overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use caecnnloc::container::Precision;
use caecnnloc::datasets::{load_dataset, DatasetManifest, FingerprintRecord};
use caecnnloc::eval::{PipelineConfig, SplitMode};
use caecnnloc::gridding::{DatasetSplit, GridConfig};
use caecnnloc::model::TrainConfig;
use serde::{Deserialize, Serialize};

pub const DATA_DIR_ENV: &str = "CAECNNLOC_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Dataset manifest JSON; absent means the built-in UJIIndoorLoc layout.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_csv: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_csv: Option<PathBuf>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_precisions")]
    pub precisions: Vec<Precision>,
    #[serde(default = "default_grid")]
    pub grid: GridConfig,
    #[serde(default)]
    pub split: SplitMode,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_precisions() -> Vec<Precision> {
    vec![Precision::F32]
}

fn default_grid() -> GridConfig {
    GridConfig::new(7.0)
}

/// Where datasets live: `$CAECNNLOC_DATA_DIR`, else `~/.cache/caecnnloc`.
pub fn data_dir() -> PathBuf {
    if let Some(dir) = std::env::var_os(DATA_DIR_ENV) {
        return PathBuf::from(dir);
    }
    let home = std::env::var_os("HOME").map_or_else(|| PathBuf::from("."), PathBuf::from);
    home.join(".cache").join("caecnnloc")
}

/// Parses `key=value`, reading the value as a TOML literal when it is one and
/// as a bare string otherwise.
fn parse_override(raw: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, value) = raw.split_once('=').with_context(|| format!("override `{raw}` is not key=value"))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_owned).collect();
    ensure!(path.iter().all(|p| !p.is_empty()), "override key `{key}` has an empty segment");
    let value = value.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_owned()));
    Ok((path, parsed))
}

fn apply_override(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty key");
    let mut node = table;
    for p in parents {
        let entry = node.entry(p.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry.as_table_mut().with_context(|| format!("`{p}` is not a table"))?;
    }
    // Switching split mode brings that mode's default fractions along.
    if path == ["split", "mode"] && node.get("mode") != Some(&value) {
        node.clear();
        match value.as_str() {
            Some("original") => {
                node.insert("val_fraction".into(), 0.1.into());
            }
            Some("combined") => {
                node.insert("train".into(), 0.7.into());
                node.insert("val".into(), 0.1.into());
                node.insert("test".into(), 0.2.into());
            }
            _ => bail!("split.mode must be `original` or `combined`"),
        }
    }
    node.insert(last.clone(), value);
    Ok(())
}

impl RunConfig {
    /// Reads `path`, applies overrides in order, then resolves and checks paths.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut table: toml::Table = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        for raw in overrides {
            let (key, value) = parse_override(raw)?;
            apply_override(&mut table, &key, value)?;
        }
        ensure!(table.contains_key("seed"), "config must set `seed`");
        let train_has_seed = table.get("train").and_then(|t| t.get("seed")).is_some();
        ensure!(!train_has_seed, "set the seed at top level, not under [train]");

        let mut cfg: RunConfig = toml::Value::Table(table).try_into().context("invalid config")?;
        cfg.train.seed = cfg.seed;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve(&base);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Relative data paths are taken relative to the config file. Without
    /// explicit CSVs the UJIIndoorLoc files under the data directory are used.
    fn resolve(&mut self, base: &Path) {
        let abs = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        self.manifest = self.manifest.as_deref().map(abs);
        let uji = data_dir().join("UJIIndoorLoc");
        self.train_csv = Some(self.train_csv.as_deref().map_or_else(|| uji.join("trainingData.csv"), abs));
        self.test_csv = Some(self.test_csv.as_deref().map_or_else(|| uji.join("validationData.csv"), abs));
        if self.output_dir.is_relative() {
            self.output_dir = base.join(&self.output_dir);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.train.validate()?;
        ensure!(!self.precisions.is_empty(), "precisions must name at least one of f32, f16, i8");
        for p in [&self.manifest, &self.train_csv, &self.test_csv].into_iter().flatten() {
            ensure!(p.exists(), "{} does not exist (dataset directory: {})", p.display(), data_dir().display());
        }
        Ok(())
    }

    pub fn manifest(&self) -> Result<DatasetManifest> {
        match &self.manifest {
            Some(p) => Ok(DatasetManifest::load(p)?),
            None => Ok(DatasetManifest::ujiindoorloc()),
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            grid: self.grid,
            split: self.split,
            train: self.train.clone(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

pub struct Data {
    pub manifest: DatasetManifest,
    pub train: Vec<FingerprintRecord>,
    pub test: Vec<FingerprintRecord>,
}

impl Data {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let manifest = cfg.manifest()?;
        let train_path = cfg.train_csv.as_ref().expect("resolved");
        let test_path = cfg.test_csv.as_ref().expect("resolved");
        let train = load_dataset(train_path, &manifest).with_context(|| format!("loading {}", train_path.display()))?;
        let test = load_dataset(test_path, &manifest).with_context(|| format!("loading {}", test_path.display()))?;
        log::info!("loaded {} training and {} test records ({})", train.len(), test.len(), manifest.name);
        Ok(Data { manifest, train, test })
    }

    pub fn split(&self, cfg: &RunConfig) -> Result<DatasetSplit> {
        Ok(cfg.split.split(&self.train, &self.test, cfg.seed, cfg.grid)?)
    }
}
