#![allow(dead_code)]

use caecnnloc::nn::{loss, Activation, Layer, LayerSpec, Mode, Sequential, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// `|a - n| / max(|a|, |n|, 1e-4)`; the floor keeps near-zero gradients from
/// turning finite-difference round-off into huge ratios.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

pub type LossFn = dyn Fn(&Tensor<f64>) -> (f64, Tensor<f64>);

/// Linear probe loss `sum(r * out)` whose output gradient is `r`.
pub fn probe_loss(shape: &[usize], seed: u64) -> Box<LossFn> {
    let r = random_tensor(shape.to_vec(), &mut rng(seed));
    Box::new(move |out: &Tensor<f64>| {
        let v = out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
        (v, r.clone())
    })
}

pub fn mse_loss(target: Tensor<f64>) -> Box<LossFn> {
    Box::new(move |out: &Tensor<f64>| loss::mse(out, &target).unwrap())
}

pub fn cce_probs_loss(labels: Vec<usize>) -> Box<LossFn> {
    Box::new(move |out: &Tensor<f64>| loss::sparse_cce_probs(out, &labels).unwrap())
}

pub fn cce_logits_loss(labels: Vec<usize>) -> Box<LossFn> {
    Box::new(move |out: &Tensor<f64>| loss::sparse_cce_with_logits(out, &labels).unwrap())
}

fn loss_at(net: &mut Sequential<f64>, x: &Tensor<f64>, loss: &LossFn) -> f64 {
    let out = net.forward(x, Mode::Train, None).unwrap();
    loss(&out).0
}

/// Largest relative error between backprop and central differences over
/// every parameter element and every input element.
pub fn max_gradient_error(net: &mut Sequential<f64>, x: &Tensor<f64>, loss: &LossFn) -> f64 {
    const H: f64 = 1e-5;
    let out = net.forward(x, Mode::Train, None).unwrap();
    let (_, grad_out) = loss(&out);
    let grad_in = net.backward(&grad_out).unwrap();
    let analytic: Vec<Vec<f64>> = net.params().iter().map(|p| p.grad.clone()).collect();

    let mut worst: f64 = 0.0;
    for (pi, grads) in analytic.iter().enumerate() {
        #[allow(clippy::needless_range_loop)]
        for i in 0..grads.len() {
            let orig = net.params()[pi].value[i];
            net.params_mut()[pi].value[i] = orig + H;
            let up = loss_at(net, x, loss);
            net.params_mut()[pi].value[i] = orig - H;
            let down = loss_at(net, x, loss);
            net.params_mut()[pi].value[i] = orig;
            worst = worst.max(relative_error(grads[i], (up - down) / (2.0 * H)));
        }
    }
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        xp.data_mut()[i] = orig + H;
        let up = loss_at(net, &xp, loss);
        xp.data_mut()[i] = orig - H;
        let down = loss_at(net, &xp, loss);
        xp.data_mut()[i] = orig;
        worst = worst.max(relative_error(grad_in.data()[i], (up - down) / (2.0 * H)));
    }
    worst
}

/// Gradient-check cases: (name, network, input, loss).
pub type GradientCase = (&'static str, Sequential<f64>, Tensor<f64>, Box<LossFn>);

pub fn gradient_cases() -> Vec<GradientCase> {
    let mut r = rng(2024);
    let mut cases: Vec<GradientCase> = Vec::new();
    let net = |input: &[usize], specs: &[LayerSpec], r: &mut ChaCha8Rng| Sequential::<f64>::build(input, specs, r).unwrap();

    let n = net(&[6, 6, 2], &[LayerSpec::conv(3, 3)], &mut r);
    cases.push(("conv2d", n, random_tensor(vec![2, 6, 6, 2], &mut r), probe_loss(&[2, 4, 4, 3], 1)));

    let n = net(&[7, 7, 2], &[LayerSpec::Conv2d { filters: 2, kernel: 3, stride: 2 }], &mut r);
    cases.push(("conv2d_stride2", n, random_tensor(vec![2, 7, 7, 2], &mut r), probe_loss(&[2, 3, 3, 2], 2)));

    let n = net(&[6, 6, 2], &[LayerSpec::MaxPool { pool: 3, stride: 3 }], &mut r);
    cases.push(("maxpool", n, random_tensor(vec![2, 6, 6, 2], &mut r), probe_loss(&[2, 2, 2, 2], 3)));

    // BN gradients vanish against a constant probe summed over the batch, so
    // follow it with a nonlinearity.
    let n = net(&[3, 3, 2], &[LayerSpec::batch_norm(), LayerSpec::activation(Activation::Sigmoid)], &mut r);
    cases.push(("batchnorm_train", n, random_tensor(vec![4, 3, 3, 2], &mut r), probe_loss(&[4, 3, 3, 2], 4)));

    let mut n = net(&[10], &[LayerSpec::Dropout { rate: 0.4 }], &mut r);
    if let Layer::Dropout(d) = &mut n.layers_mut()[0] {
        let keep = 1.0 / 0.6;
        d.fixed_mask = Some((0..30).map(|i| if i % 3 == 0 { 0.0 } else { keep }).collect());
    }
    cases.push(("dropout_fixed_mask", n, random_tensor(vec![3, 10], &mut r), probe_loss(&[3, 10], 5)));

    let n = net(&[6], &[LayerSpec::Dense { units: 4 }], &mut r);
    cases.push(("dense", n, random_tensor(vec![3, 6], &mut r), probe_loss(&[3, 4], 6)));

    let n = net(&[4, 4, 3], &[LayerSpec::TransposedConv2d { filters: 2, kernel: 3 }], &mut r);
    cases.push(("transposed_conv2d", n, random_tensor(vec![2, 4, 4, 3], &mut r), probe_loss(&[2, 6, 6, 2], 7)));

    let n = net(&[2, 2, 3], &[LayerSpec::Upsample { factor: 3 }], &mut r);
    cases.push(("upsample", n, random_tensor(vec![2, 2, 2, 3], &mut r), probe_loss(&[2, 6, 6, 3], 8)));

    let n = net(&[5], &[LayerSpec::Dense { units: 4 }, LayerSpec::activation(Activation::Softmax)], &mut r);
    cases.push(("softmax_cce", n, random_tensor(vec![3, 5], &mut r), cce_probs_loss(vec![0, 3, 1])));

    let n = net(&[5], &[LayerSpec::Dense { units: 4 }], &mut r);
    cases.push(("logits_cce", n, random_tensor(vec![3, 5], &mut r), cce_logits_loss(vec![2, 0, 3])));

    let target = random_tensor(vec![2, 4, 4, 1], &mut r).map(|v| 0.5 + 0.4 * v);
    let n = net(&[4, 4, 2], &[LayerSpec::conv(1, 1), LayerSpec::activation(Activation::Sigmoid)], &mut r);
    cases.push(("sigmoid_mse", n, random_tensor(vec![2, 4, 4, 2], &mut r), mse_loss(target)));

    let n = net(&[4, 4, 2], &[LayerSpec::conv(3, 3), LayerSpec::activation(Activation::Relu)], &mut r);
    cases.push(("relu", n, random_tensor(vec![2, 4, 4, 2], &mut r), probe_loss(&[2, 2, 2, 3], 9)));

    // Miniature of the full model: encoder, decoder and classifier head.
    let specs = [
        LayerSpec::conv(3, 3),
        LayerSpec::batch_norm(),
        LayerSpec::activation(Activation::Relu),
        LayerSpec::MaxPool { pool: 2, stride: 2 },
        LayerSpec::Upsample { factor: 2 },
        LayerSpec::TransposedConv2d { filters: 1, kernel: 3 },
        LayerSpec::activation(Activation::Sigmoid),
    ];
    let target = random_tensor(vec![3, 6, 6, 1], &mut r).map(|v| 0.5 + 0.5 * v);
    let n = net(&[6, 6, 1], &specs, &mut r);
    cases.push(("cae_stack", n, random_tensor(vec![3, 6, 6, 1], &mut r), mse_loss(target)));

    let specs = [
        LayerSpec::conv(2, 2),
        LayerSpec::batch_norm(),
        LayerSpec::activation(Activation::Relu),
        LayerSpec::Flatten,
        LayerSpec::Dense { units: 3 },
        LayerSpec::activation(Activation::Softmax),
    ];
    let n = net(&[4, 4, 1], &specs, &mut r);
    cases.push(("classifier_stack", n, random_tensor(vec![3, 4, 4, 1], &mut r), cce_probs_loss(vec![1, 2, 0])));

    cases
}

use caecnnloc::datasets::{to_radio_images, DatasetManifest, FingerprintRecord, RadioImage};
use caecnnloc::gridding::{build_grid, GridConfig, GridMap};
use caecnnloc::model::TrainConfig;

/// Two well-separated RSSI patterns on a 17×17 image: class A hears the first
/// half of the APs, class B the second half. Positions fall in two different
/// 10 m cells.
pub struct TwoClassToy {
    pub manifest: DatasetManifest,
    pub records: Vec<FingerprintRecord>,
    pub images: Vec<RadioImage>,
    pub grid: GridMap,
    pub labels: Vec<usize>,
}

pub fn two_class_toy(per_class: usize, seed: u64) -> TwoClassToy {
    let manifest = DatasetManifest::generic("toy", 289, -104, true);
    let mut r = rng(seed);
    let mut records = Vec::new();
    for i in 0..2 * per_class {
        let class = i % 2;
        let rssi = (0..289)
            .map(|ap| {
                if (ap < 144) == (class == 0) {
                    (-45.0 + r.random_range(-3.0..3.0f64)).round()
                } else {
                    100.0
                }
            })
            .collect();
        records.push(FingerprintRecord {
            rssi,
            x: if class == 0 { 2.0 } else { 25.0 } + r.random_range(0.0..1.0),
            y: 3.0 + r.random_range(0.0..1.0),
            floor: class as i32,
            building: Some(0),
        });
    }
    let grid = build_grid(&records, GridConfig::with_origin(10.0, (0.0, 0.0))).unwrap();
    let images = to_radio_images(&records, &manifest).unwrap();
    let labels = grid.labels(&records).unwrap();
    TwoClassToy {
        manifest,
        records,
        images,
        grid,
        labels,
    }
}

pub fn quick_config(seed: u64, cae_epochs: usize, clf_epochs: usize) -> TrainConfig {
    TrainConfig {
        cae_epochs,
        clf_epochs,
        batch_size: 16,
        seed,
        patience: clf_epochs.max(1),
        ..TrainConfig::default()
    }
}
