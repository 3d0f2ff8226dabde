use caecnnloc_web::{quantize_view, Survey};

#[test]
fn grid_view_partitions_the_floor() {
    let s = Survey::generate(1).unwrap();
    let coarse = s.grid_view(20.0, 1).unwrap();
    let fine = s.grid_view(5.0, 1).unwrap();
    assert!(fine.class_count > coarse.class_count);
    let members: usize = fine.cells.iter().map(|c| c.members).sum();
    assert_eq!(members, fine.points.len());
    for (x, y, class) in &fine.points {
        let cell = fine.cells.iter().find(|c| c.class_id == *class).unwrap();
        assert_eq!(((x / 5.0).floor() as i64, (y / 5.0).floor() as i64), (cell.ix, cell.iy));
    }
    assert!(s.grid_view(0.0, 1).is_err());
}

#[test]
fn radio_image_is_normalized_and_noise_changes_it() {
    let s = Survey::generate(2).unwrap();
    let side = s.data_side();
    let clean = s.noisy_image(10.0, 10.0, 0, 0.0, 0).unwrap();
    assert_eq!(clean.len(), side * side);
    assert!(clean.iter().all(|v| (0.0..=1.0).contains(v)));
    let noisy = s.noisy_image(10.0, 10.0, 0, 10.0, 0).unwrap();
    assert_ne!(clean, noisy);
    // Unheard APs stay unheard.
    let raw = s.nearest_scan(10.0, 10.0, 0).unwrap();
    for (ap, &v) in raw.rssi.iter().enumerate() {
        if v == 100.0 {
            assert_eq!(noisy[ap], 0.0);
        }
    }
    assert!(s.noisy_image(10.0, 10.0, 9, 0.0, 0).is_err());
}

#[test]
fn int8_round_trip_error_is_within_half_a_step() {
    let values: Vec<f32> = (0..50).map(|i| (i as f32 * 0.37).sin() * 3.0).collect();
    let q = quantize_view(&values).unwrap();
    assert_eq!(q.codes.len(), values.len());
    assert!(q.max_abs_error <= q.scale / 2.0 * 1.0001);
}
