//! End-to-end run on a generated UJIIndoorLoc-sized dataset.
//!
//! `cargo run --release -p caecnnloc --example synthetic_run -- [cae_epochs] [clf_epochs] [cell_length]`

use std::time::Instant;

use caecnnloc::datasets::to_radio_images;
use caecnnloc::eval::{knn_baseline, latency_bench, run_pipeline, KnnWeighting, PipelineConfig, SplitMode};
use caecnnloc::gridding::GridConfig;
use caecnnloc::model::{Localizer, TrainConfig};
use caecnnloc::quant::{quantize_f16, quantize_int8};
use caecnnloc::synth::{generate, SynthConfig};

fn main() -> caecnnloc::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, default: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(default);

    let t = Instant::now();
    let data = generate(&SynthConfig::uji_like(42))?;
    println!("generated {} train / {} test in {:.1?}", data.train.len(), data.test.len(), t.elapsed());

    let cfg = PipelineConfig {
        grid: GridConfig::new(arg(2, 7.0)),
        split: SplitMode::Original { val_fraction: 0.1 },
        train: TrainConfig {
            cae_epochs: arg(0, 2.0) as usize,
            clf_epochs: arg(1, 5.0) as usize,
            seed: 7,
            ..TrainConfig::default()
        },
    };
    let t = Instant::now();
    let out = run_pipeline(&data.train, &data.test, &data.manifest, &cfg)?;
    println!("trained in {:.1?}; classes {}; params {}", t.elapsed(), out.model.class_count(), out.model.count_parameters());
    println!("cae loss {:?}", out.cae_loss);
    println!("val acc {:?}", out.history.val_accuracy);
    let r = &out.report;
    println!(
        "f32: building {:.3} floor {:.3} mean {:.2} m (unmapped {})",
        r.building_hitrate, r.floor_hitrate, r.mean_error, r.unmapped_count
    );

    let images = to_radio_images(&out.split.test, &data.manifest)?;
    let f16 = quantize_f16(&out.model)?;
    let i8 = quantize_int8(&out.model)?;
    for m in [&out.model as &dyn Localizer, &f16, &i8] {
        let rep = caecnnloc::eval::evaluate(m, &out.split.test, &data.manifest)?;
        let lat = latency_bench(m, &images, 200, 20)?;
        println!(
            "{}: size {} B, floor {:.3}, mean {:.2} m, median {:.1} us",
            m.precision(),
            m.serialized_size()?,
            rep.floor_hitrate,
            rep.mean_error,
            lat.median_us
        );
    }

    for k in [1, 3] {
        let t = Instant::now();
        let r = knn_baseline(&data.train, &data.test, &data.manifest, k, KnnWeighting::Uniform)?;
        println!("knn k={k}: floor {:.3} mean {:.2} m ({:.1?})", r.floor_hitrate, r.mean_error, t.elapsed());
    }
    Ok(())
}
