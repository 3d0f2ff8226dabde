mod common;

use caecnnloc::container::ModelFile;
use caecnnloc::datasets::{normalize_rssi, read_records, to_radio_image, write_records, DatasetManifest, FingerprintRecord};
use caecnnloc::gridding::{build_grid, GridConfig};
use caecnnloc::model::CaeCnnLocModel;
use caecnnloc::nn::layers::softmax_in_place;
use caecnnloc::quant::{quantize_f16, quantize_int8};
use proptest::prelude::*;

fn rssi_value(rssi_min: i32) -> impl Strategy<Value = f64> {
    prop_oneof![Just(100.0), (rssi_min..=0).prop_map(f64::from)]
}

fn record(aps: usize) -> impl Strategy<Value = FingerprintRecord> {
    (
        prop::collection::vec(rssi_value(-104), aps),
        -50.0f64..50.0,
        -50.0f64..50.0,
        0i32..3,
        0i32..2,
    )
        .prop_map(|(rssi, x, y, floor, b)| FingerprintRecord {
            rssi,
            x,
            y,
            floor,
            building: Some(b),
        })
}

proptest! {
    #[test]
    fn normalization_is_bounded_and_monotone(min in -200i32..-1, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let raw = |t: f64| min as f64 * (1.0 - t);
        let (x, y) = (normalize_rssi(raw(lo), min).unwrap(), normalize_rssi(raw(hi), min).unwrap());
        prop_assert!((0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y));
        prop_assert!(x <= y);
        prop_assert_eq!(normalize_rssi(min as f64, min).unwrap(), 0.0);
        prop_assert_eq!(normalize_rssi(0.0, min).unwrap(), 1.0);
        prop_assert_eq!(normalize_rssi(100.0, min).unwrap(), 0.0);
    }

    #[test]
    fn radio_image_round_trips_to_normalized_vector(rec in (1usize..60).prop_flat_map(record)) {
        let aps = rec.rssi.len();
        let manifest = DatasetManifest::generic("p", aps, -104, true);
        let image = to_radio_image(&rec, &manifest).unwrap();
        prop_assert_eq!(image.side * image.side, aps + image.pad_count);
        prop_assert!((image.side - 1) * (image.side - 1) < aps);
        prop_assert!(image.pixels[aps..].iter().all(|&p| p == 0.0));
        for (p, raw) in image.features().iter().zip(&rec.rssi) {
            prop_assert_eq!(*p, normalize_rssi(*raw, -104).unwrap() as f32);
        }
    }

    #[test]
    fn csv_round_trip_and_repeatable_load(records in prop::collection::vec(record(5), 0..12)) {
        let manifest = DatasetManifest::generic("p", 5, -104, true);
        let mut buf = Vec::new();
        write_records(&mut buf, &records, &manifest).unwrap();
        let a = read_records(&buf[..], &manifest).unwrap();
        let b = read_records(&buf[..], &manifest).unwrap();
        prop_assert_eq!(&a, &records);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn grid_is_permutation_invariant(records in prop::collection::vec(record(0), 1..40), length in 0.5f64..20.0, shift in any::<prop::sample::Index>()) {
        let config = GridConfig::new(length);
        let a = build_grid(&records, config).unwrap();
        let mut rotated = records.clone();
        rotated.rotate_left(shift.index(records.len()));
        rotated.reverse();
        let b = build_grid(&rotated, config).unwrap();
        prop_assert_eq!(a.cells(), b.cells());
        prop_assert_eq!(a.digest(), b.digest());
    }

    #[test]
    fn centroids_lie_in_their_cells(records in prop::collection::vec(record(0), 1..40), length in 0.5f64..20.0) {
        let grid = build_grid(&records, GridConfig::new(length)).unwrap();
        let (x0, y0) = grid.origin();
        let members: usize = grid.cells().iter().map(|c| c.member_count).sum();
        prop_assert_eq!(members, records.len());
        for (id, c) in grid.cells().iter().enumerate() {
            prop_assert_eq!(c.class_id, id);
            let (lx, ly) = (x0 + c.ix as f64 * length, y0 + c.iy as f64 * length);
            let eps = 1e-9 * (1.0 + lx.abs().max(ly.abs()));
            prop_assert!(c.centroid.0 >= lx - eps && c.centroid.0 <= lx + length + eps);
            prop_assert!(c.centroid.1 >= ly - eps && c.centroid.1 <= ly + length + eps);
        }
        for r in &records {
            prop_assert!(grid.assign_class(r).is_some());
        }
    }

    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-80.0f64..80.0, 1..30)) {
        let mut row = logits.clone();
        softmax_in_place(&mut row);
        prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        prop_assert!(row.iter().all(|&p| p > 0.0));
        let mut row32: Vec<f32> = logits.iter().map(|&v| v as f32 / 4.0).collect();
        softmax_in_place(&mut row32);
        prop_assert!((row32.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn model_files_round_trip_bit_exactly(seed in any::<u64>(), classes in 1usize..6, dropout in 0.0f64..0.9) {
        let recs: Vec<FingerprintRecord> = (0..classes)
            .map(|i| FingerprintRecord { rssi: vec![], x: i as f64 * 3.0 + 0.5, y: 0.5, floor: 0, building: None })
            .collect();
        let grid = build_grid(&recs, GridConfig::with_origin(3.0, (0.0, 0.0))).unwrap();
        let model = CaeCnnLocModel::init(17, grid.clone(), dropout, seed).unwrap();
        let files = [
            model.to_file(Some("g.json")),
            quantize_f16(&model).unwrap().file().clone(),
            quantize_int8(&model).unwrap().file().clone(),
        ];
        for file in files {
            let bytes = file.to_bytes().unwrap();
            let back = ModelFile::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &file);
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }
}
