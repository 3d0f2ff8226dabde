//! Single-sample latency of float32, float16 and int8 variants of an
//! untrained classifier at a given class count.
//!
//! `cargo run --release --example latency -- [classes]`

use caecnnloc::datasets::{to_radio_images, FingerprintRecord};
use caecnnloc::eval::latency_bench;
use caecnnloc::gridding::{build_grid, GridConfig};
use caecnnloc::model::{CaeCnnLocModel, Localizer};
use caecnnloc::quant::{quantize_f16, quantize_int8};
use caecnnloc::synth::{generate, SynthConfig};

fn main() -> caecnnloc::Result<()> {
    let classes: usize = std::env::args().nth(1).map_or(896, |s| s.parse().expect("class count"));
    let recs: Vec<FingerprintRecord> = (0..classes)
        .map(|i| FingerprintRecord { rssi: vec![], x: i as f64 + 0.5, y: 0.5, floor: 0, building: Some(0) })
        .collect();
    let grid = build_grid(&recs, GridConfig::with_origin(1.0, (0.0, 0.0)))?;
    let model = CaeCnnLocModel::init(23, grid, 0.3, 0)?;
    let data = generate(&SynthConfig { test_count: 200, ..SynthConfig::uji_like(0) })?;
    let images = to_radio_images(&data.test, &data.manifest)?;

    let f16 = quantize_f16(&model)?;
    let i8 = quantize_int8(&model)?;
    let models: [(&str, &dyn Localizer); 3] = [("f32", &model), ("f16", &f16), ("i8", &i8)];
    let mut f32_median = 0.0;
    for (name, m) in models {
        let s = latency_bench(m, &images, 1000, 100)?;
        if name == "f32" {
            f32_median = s.median_us;
        }
        println!(
            "{name}: median {:.1} us, p95 {:.1} us, size {} B, speedup {:.2}x",
            s.median_us,
            s.p95_us,
            m.serialized_size()?,
            f32_median / s.median_us
        );
    }
    Ok(())
}
