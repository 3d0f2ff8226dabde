//! WebAssembly bindings for the static demo page in `www/`.
//!
//! A synthetic single-building survey is generated once; the page then asks
//! for grids at different cell lengths, radio images of individual scans
//! under RSSI noise, and int8 round trips of arbitrary weight vectors.
//! Structured results cross the boundary as JSON strings.

use caecnnloc::datasets::{to_radio_image, FingerprintRecord};
use caecnnloc::eval::{inject_noise, NoiseSpec};
use caecnnloc::gridding::{build_grid, GridConfig};
use caecnnloc::quant::QuantizedTensor;
use caecnnloc::synth::{generate, SynthConfig, SyntheticDataset};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize, PartialEq)]
pub struct CellView {
    pub ix: i64,
    pub iy: i64,
    pub class_id: usize,
    pub members: usize,
    pub centroid: (f64, f64),
}

#[derive(Debug, Serialize, PartialEq)]
pub struct GridView {
    pub cell_length: f64,
    pub origin: (f64, f64),
    /// Classes over all floors.
    pub class_count: usize,
    /// Cells and scans of the requested floor only.
    pub cells: Vec<CellView>,
    pub points: Vec<(f64, f64, usize)>,
}

#[derive(Debug, Serialize, PartialEq)]
pub struct QuantView {
    pub scale: f32,
    pub zero_point: i32,
    pub codes: Vec<i8>,
    pub dequantized: Vec<f32>,
    pub max_abs_error: f32,
}

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Survey {
    config: SynthConfig,
    data: SyntheticDataset,
}

impl Survey {
    pub fn generate(seed: u64) -> caecnnloc::Result<Survey> {
        let config = SynthConfig {
            buildings: 1,
            floors: 3,
            ap_count: 256,
            width: 60.0,
            depth: 40.0,
            spacing: 3.0,
            scans_per_point: 1,
            test_count: 0,
            ..SynthConfig::uji_like(seed)
        };
        let data = generate(&config)?;
        Ok(Survey { config, data })
    }

    pub fn grid_view(&self, cell_length: f64, floor: i32) -> caecnnloc::Result<GridView> {
        let grid = build_grid(&self.data.train, GridConfig::with_origin(cell_length, (0.0, 0.0)))?;
        let cells = grid
            .cells()
            .iter()
            .filter(|c| c.floor == floor)
            .map(|c| CellView {
                ix: c.ix,
                iy: c.iy,
                class_id: c.class_id,
                members: c.member_count,
                centroid: c.centroid,
            })
            .collect();
        let points = self
            .data
            .train
            .iter()
            .filter(|r| r.floor == floor)
            .map(|r| (r.x, r.y, grid.assign_class(r).expect("training scans are mapped")))
            .collect();
        Ok(GridView {
            cell_length,
            origin: grid.origin(),
            class_count: grid.class_count(),
            cells,
            points,
        })
    }

    pub fn data_side(&self) -> usize {
        self.data.manifest.image_side()
    }

    /// The surveyed scan nearest to `(x, y)` on `floor`.
    pub fn nearest_scan(&self, x: f64, y: f64, floor: i32) -> Option<&FingerprintRecord> {
        self.data
            .train
            .iter()
            .filter(|r| r.floor == floor)
            .min_by(|a, b| {
                let da = (a.x - x).powi(2) + (a.y - y).powi(2);
                let db = (b.x - x).powi(2) + (b.y - y).powi(2);
                da.total_cmp(&db)
            })
    }

    /// Normalized radio image of the nearest scan after uniform noise.
    pub fn noisy_image(&self, x: f64, y: f64, floor: i32, noise_dbm: f64, seed: u64) -> caecnnloc::Result<Vec<f32>> {
        let scan = self
            .nearest_scan(x, y, floor)
            .ok_or_else(|| caecnnloc::Error::Validation(format!("no scans on floor {floor}")))?;
        let manifest = &self.data.manifest;
        let noisy = inject_noise(std::slice::from_ref(scan), NoiseSpec { magnitude: noise_dbm, seed }, manifest)?;
        Ok(to_radio_image(&noisy[0], manifest)?.features().to_vec())
    }
}

#[wasm_bindgen]
impl Survey {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Survey, JsError> {
        Survey::generate(seed as u64).map_err(js_err)
    }

    pub fn width(&self) -> f64 {
        self.config.width
    }

    pub fn depth(&self) -> f64 {
        self.config.depth
    }

    pub fn floors(&self) -> u32 {
        self.config.floors as u32
    }

    #[wasm_bindgen(js_name = imageSide)]
    pub fn image_side(&self) -> u32 {
        self.data_side() as u32
    }

    /// JSON [`GridView`].
    pub fn grid(&self, cell_length: f64, floor: i32) -> Result<String, JsError> {
        let view = self.grid_view(cell_length, floor).map_err(js_err)?;
        serde_json::to_string(&view).map_err(js_err)
    }

    #[wasm_bindgen(js_name = radioImage)]
    pub fn radio_image(&self, x: f64, y: f64, floor: i32, noise_dbm: f64, seed: u32) -> Result<Vec<f32>, JsError> {
        self.noisy_image(x, y, floor, noise_dbm, seed as u64).map_err(js_err)
    }
}

pub fn quantize_view(values: &[f32]) -> caecnnloc::Result<QuantView> {
    let t = QuantizedTensor::to_i8(vec![values.len()], values, "input")?;
    let QuantizedTensor::I8 { codes, scale, zero_point, .. } = &t else {
        unreachable!("to_i8 yields an I8 tensor")
    };
    let dequantized = t.dequantize();
    let max_abs_error = values.iter().zip(&dequantized).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
    Ok(QuantView {
        scale: *scale,
        zero_point: *zero_point,
        codes: codes.clone(),
        dequantized,
        max_abs_error,
    })
}

/// JSON [`QuantView`] for an int8 affine round trip of `values`.
#[wasm_bindgen(js_name = quantizeInt8)]
pub fn quantize_int8(values: &[f32]) -> Result<String, JsError> {
    let view = quantize_view(values).map_err(js_err)?;
    serde_json::to_string(&view).map_err(js_err)
}
