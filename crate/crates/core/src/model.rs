//! The auto-encoder and classifier networks and their two training stages.
//!
//! Stage one trains a convolutional auto-encoder to reconstruct radio images.
//! Stage two keeps the encoder, attaches the classifier head and fine-tunes
//! everything end to end on joint (building, floor, cell) classes. The
//! decoder is discarded afterwards; the deployed model is encoder + head.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{ModelFile, ModelMetadata, Precision, StoredLayer};
use crate::datasets::RadioImage;
use crate::error::{Error, Result};
use crate::gridding::GridMap;
use crate::nn::{loss, Activation, Layer, LayerSpec, Mode, Nadam, NadamConfig, Sequential, Tensor};
use crate::quant::QuantizedTensor;

/// Images per inference chunk.
const INFER_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub cae_epochs: usize,
    pub clf_epochs: usize,
    pub batch_size: usize,
    pub dropout_rate: f64,
    pub seed: u64,
    /// Classifier epochs without validation-loss improvement before stopping.
    pub patience: usize,
    pub learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            cae_epochs: 30,
            clf_epochs: 100,
            batch_size: 128,
            dropout_rate: 0.3,
            seed: 0,
            patience: 10,
            learning_rate: 1e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config("learning_rate must be finite and non-negative".into()));
        }
        Ok(())
    }

    fn optimizer(&self) -> Nadam<f32> {
        Nadam::new(NadamConfig {
            learning_rate: self.learning_rate,
            ..NadamConfig::default()
        })
    }
}

pub fn encoder_specs() -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv(16, 3),
        LayerSpec::batch_norm(),
        LayerSpec::activation(Activation::Relu),
        LayerSpec::MaxPool { pool: 3, stride: 3 },
    ]
}

/// Mirror of the encoder. The transposed-conv kernel is chosen so the output
/// side equals `side`; for 23×23 inputs it is 3.
pub fn decoder_specs(side: usize) -> Result<Vec<LayerSpec>> {
    if side < 5 {
        return Err(Error::Shape(format!("radio images must be at least 5×5, got {side}×{side}")));
    }
    let pooled = (side - 2) / 3;
    Ok(vec![
        LayerSpec::Upsample { factor: 3 },
        LayerSpec::TransposedConv2d {
            filters: 1,
            kernel: side - 3 * pooled + 1,
        },
        LayerSpec::activation(Activation::Sigmoid),
    ])
}

pub fn head_specs(class_count: usize, dropout_rate: f64) -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv(32, 3),
        LayerSpec::batch_norm(),
        LayerSpec::activation(Activation::Relu),
        LayerSpec::conv(64, 3),
        LayerSpec::batch_norm(),
        LayerSpec::activation(Activation::Relu),
        LayerSpec::Flatten,
        LayerSpec::Dropout { rate: dropout_rate },
        LayerSpec::Dense { units: class_count },
        LayerSpec::activation(Activation::Softmax),
    ]
}

/// Deployed classifier: encoder followed by the head.
pub fn classifier_specs(class_count: usize, dropout_rate: f64) -> Vec<LayerSpec> {
    let mut specs = encoder_specs();
    specs.extend(head_specs(class_count, dropout_rate));
    specs
}

/// Stacks images into a `[n, side, side, 1]` tensor.
pub fn images_tensor(images: &[&RadioImage]) -> Result<Tensor<f32>> {
    let side = images.first().map_or(0, |im| im.side);
    let mut data = Vec::with_capacity(images.len() * side * side);
    for im in images {
        if im.side != side {
            return Err(Error::Shape(format!("mixed image sides {side} and {}", im.side)));
        }
        data.extend_from_slice(&im.pixels);
    }
    Tensor::new(vec![images.len(), side, side, 1], data)
}

fn check_side(images: &[RadioImage], side: usize) -> Result<()> {
    match images.iter().find(|im| im.side != side) {
        Some(im) => Err(Error::Shape(format!(
            "model expects {side}×{side} images, got {}×{}",
            im.side, im.side
        ))),
        None => Ok(()),
    }
}

fn batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Encoder + decoder trained to reconstruct its input.
#[derive(Debug, Clone)]
pub struct Autoencoder {
    pub network: Sequential<f32>,
    pub encoder_len: usize,
}

impl Autoencoder {
    pub fn new(side: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut specs = encoder_specs();
        let encoder_len = specs.len();
        specs.extend(decoder_specs(side)?);
        Ok(Autoencoder {
            network: Sequential::build(&[side, side, 1], &specs, rng)?,
            encoder_len,
        })
    }

    pub fn side(&self) -> usize {
        self.network.input_shape()[0]
    }

    pub fn encoder_layers(&self) -> Vec<Layer<f32>> {
        let mut layers = self.network.layers()[..self.encoder_len].to_vec();
        layers.iter_mut().for_each(Layer::clear_cache);
        layers
    }

    pub fn encode(&self, images: &[RadioImage]) -> Result<Tensor<f32>> {
        check_side(images, self.side())?;
        self.network.infer_to(&images_tensor(&images.iter().collect::<Vec<_>>())?, self.encoder_len)
    }

    pub fn reconstruct(&self, images: &[RadioImage]) -> Result<Tensor<f32>> {
        check_side(images, self.side())?;
        self.network.infer(&images_tensor(&images.iter().collect::<Vec<_>>())?)
    }

    /// Mean squared reconstruction error over `images` (inference mode).
    pub fn reconstruction_loss(&self, images: &[RadioImage]) -> Result<f64> {
        let mut total = 0.0;
        for chunk in images.chunks(INFER_CHUNK) {
            let x = images_tensor(&chunk.iter().collect::<Vec<_>>())?;
            let y = self.network.infer(&x)?;
            let (l, _) = loss::mse(&y, &x)?;
            total += l as f64 * chunk.len() as f64;
        }
        Ok(total / images.len().max(1) as f64)
    }
}

/// Stage one. Returns the trained auto-encoder and the mean training MSE of
/// every epoch.
pub fn train_cae(images: &[RadioImage], cfg: &TrainConfig) -> Result<(Autoencoder, Vec<f64>)> {
    cfg.validate()?;
    let side = images
        .first()
        .ok_or_else(|| Error::Validation("auto-encoder training needs at least one image".into()))?
        .side;
    check_side(images, side)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cae = Autoencoder::new(side, &mut rng)?;
    let mut opt = cfg.optimizer();
    let mut curve = Vec::with_capacity(cfg.cae_epochs);

    for epoch in 0..cfg.cae_epochs {
        let mut total = 0.0;
        for batch in batches(images.len(), cfg.batch_size, &mut rng) {
            let x = images_tensor(&batch.iter().map(|&i| &images[i]).collect::<Vec<_>>())?;
            let y = cae.network.forward(&x, Mode::Train, Some(&mut rng))?;
            let (l, grad) = loss::mse(&y, &x)?;
            if !l.is_finite() {
                return Err(Error::NonFinite(format!("auto-encoder loss diverged in epoch {}", epoch + 1)));
            }
            cae.network.backward(&grad)?;
            opt.step(&mut cae.network.params_mut())?;
            total += l as f64 * batch.len() as f64;
        }
        curve.push(total / images.len() as f64);
    }
    cae.network.clear_caches();
    Ok((cae, curve))
}

/// Per-epoch classifier metrics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub train_loss: Vec<f64>,
    pub train_accuracy: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    /// 1-based epoch of the returned checkpoint; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

/// Labelled images for one partition.
#[derive(Debug, Clone, Copy)]
pub struct Labeled<'a> {
    pub images: &'a [RadioImage],
    pub labels: &'a [usize],
}

impl<'a> Labeled<'a> {
    pub fn new(images: &'a [RadioImage], labels: &'a [usize]) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        Ok(Labeled { images, labels })
    }

    fn check_labels(&self, class_count: usize) -> Result<()> {
        match self.labels.iter().find(|&&c| c >= class_count) {
            Some(c) => Err(Error::Validation(format!("label {c} is not below class count {class_count}"))),
            None => Ok(()),
        }
    }
}

/// Mean cross-entropy and accuracy of `net`'s logits (all but the final
/// softmax layer) in inference mode.
fn score(net: &Sequential<f32>, data: Labeled<'_>) -> Result<(f64, f64)> {
    let end = net.layers().len() - 1;
    let (mut total, mut hits) = (0.0, 0usize);
    for (imgs, labels) in data.images.chunks(INFER_CHUNK).zip(data.labels.chunks(INFER_CHUNK)) {
        let x = images_tensor(&imgs.iter().collect::<Vec<_>>())?;
        let logits = net.infer_to(&x, end)?;
        let (l, _) = loss::sparse_cce_with_logits(&logits, labels)?;
        total += l as f64 * labels.len() as f64;
        hits += argmax_rows(&logits).iter().zip(labels).filter(|(a, b)| a == b).count();
    }
    let n = data.labels.len().max(1) as f64;
    Ok((total / n, hits as f64 / n))
}

fn argmax_rows(t: &Tensor<f32>) -> Vec<usize> {
    let width = t.sample_len();
    t.data()
        .chunks_exact(width)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Stage two. Builds the classifier on top of `encoder`'s trained layers and
/// fine-tunes all weights. The checkpoint with the lowest validation loss is
/// returned (training loss when `val` is empty).
pub fn train_classifier(
    cae: &Autoencoder,
    train: Labeled<'_>,
    val: Labeled<'_>,
    grid: &GridMap,
    cfg: &TrainConfig,
) -> Result<(CaeCnnLocModel, History)> {
    cfg.validate()?;
    let class_count = grid.class_count();
    let side = cae.side();
    if train.images.is_empty() {
        return Err(Error::Validation("classifier training needs at least one image".into()));
    }
    check_side(train.images, side)?;
    check_side(val.images, side)?;
    train.check_labels(class_count)?;
    val.check_labels(class_count)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut layers = cae.encoder_layers();
    let encoded = Sequential::from_layers(&[side, side, 1], layers.clone())?.output_shape()?;
    let head = Sequential::<f32>::build(&encoded, &head_specs(class_count, cfg.dropout_rate), &mut rng)?;
    layers.extend(head.layers().iter().cloned());
    let mut net = Sequential::from_layers(&[side, side, 1], layers)?;
    let logits_end = net.layers().len() - 1;

    let mut opt = cfg.optimizer();
    let mut history = History::default();
    let mut best: Option<(f64, Sequential<f32>)> = None;
    let mut since_best = 0;

    for epoch in 1..=cfg.clf_epochs {
        let (mut total, mut hits) = (0.0, 0usize);
        for batch in batches(train.images.len(), cfg.batch_size, &mut rng) {
            let x = images_tensor(&batch.iter().map(|&i| &train.images[i]).collect::<Vec<_>>())?;
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let logits = net.forward_to(&x, Mode::Train, Some(&mut rng), logits_end)?;
            let (l, grad) = loss::sparse_cce_with_logits(&logits, &labels)?;
            if !l.is_finite() {
                return Err(Error::NonFinite(format!("classifier loss diverged in epoch {epoch}")));
            }
            net.backward_from(&grad, logits_end)?;
            opt.step(&mut net.params_mut())?;
            total += l as f64 * batch.len() as f64;
            hits += argmax_rows(&logits).iter().zip(&labels).filter(|(a, b)| a == b).count();
        }
        net.clear_caches();
        let n = train.images.len() as f64;
        history.train_loss.push(total / n);
        history.train_accuracy.push(hits as f64 / n);

        let monitored = if val.images.is_empty() {
            total / n
        } else {
            let (vl, va) = score(&net, val)?;
            history.val_loss.push(vl);
            history.val_accuracy.push(va);
            vl
        };
        if best.as_ref().is_none_or(|(b, _)| monitored < *b) {
            best = Some((monitored, net.clone()));
            history.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                history.stopped_early = epoch < cfg.clf_epochs;
                break;
            }
        }
    }

    let epochs_run = history.train_loss.len();
    let network = best.map_or(net, |(_, n)| n);
    let metadata = ModelMetadata {
        seed: cfg.seed,
        cell_length: grid.cell_length(),
        cae_epochs: cfg.cae_epochs,
        clf_epochs: cfg.clf_epochs,
        epochs_run,
        ..ModelMetadata::default()
    };
    Ok((CaeCnnLocModel::new(network, grid.clone(), metadata)?, history))
}

/// Output of one prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class_id: usize,
    /// Probability of `class_id`.
    pub probability: f32,
    pub building: Option<i32>,
    pub floor: i32,
    pub centroid: (f64, f64),
}

/// Anything that maps radio images to grid-cell predictions.
pub trait Localizer {
    fn grid(&self) -> &GridMap;

    fn precision(&self) -> Precision;

    fn input_side(&self) -> usize;

    /// Class probabilities, one row per image.
    fn probabilities(&self, images: &[RadioImage]) -> Result<Tensor<f32>>;

    /// Total bytes of the serialized model file.
    fn serialized_size(&self) -> Result<usize>;

    fn predict_batch(&self, images: &[RadioImage]) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFER_CHUNK) {
            let probs = self.probabilities(chunk)?;
            for row in probs.data().chunks_exact(probs.sample_len().max(1)) {
                let (class_id, &probability) = row
                    .iter()
                    .enumerate()
                    .fold((0, &f32::NEG_INFINITY), |b, (i, v)| if *v > *b.1 { (i, v) } else { b });
                let cell = self
                    .grid()
                    .cell(class_id)
                    .ok_or_else(|| Error::State(format!("class {class_id} missing from grid")))?;
                out.push(Prediction {
                    class_id,
                    probability,
                    building: cell.building,
                    floor: cell.floor,
                    centroid: cell.centroid,
                });
            }
        }
        Ok(out)
    }

    fn predict(&self, image: &RadioImage) -> Result<Prediction> {
        Ok(self.predict_batch(std::slice::from_ref(image))?.remove(0))
    }
}

/// Trained float32 classifier plus the grid that gives its classes meaning.
#[derive(Debug, Clone)]
pub struct CaeCnnLocModel {
    pub network: Sequential<f32>,
    pub grid: GridMap,
    pub metadata: ModelMetadata,
}

impl CaeCnnLocModel {
    pub fn new(network: Sequential<f32>, grid: GridMap, metadata: ModelMetadata) -> Result<Self> {
        let out = network.output_shape()?;
        if out != [grid.class_count()] {
            return Err(Error::Shape(format!(
                "network outputs {out:?} but the grid has {} classes",
                grid.class_count()
            )));
        }
        if !matches!(
            network.layers().last(),
            Some(Layer::Activation {
                function: Activation::Softmax,
                ..
            })
        ) {
            return Err(Error::Shape("classifier must end in a softmax layer".into()));
        }
        Ok(CaeCnnLocModel { network, grid, metadata })
    }

    /// Untrained classifier with freshly initialized weights.
    pub fn init(side: usize, grid: GridMap, dropout_rate: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs = classifier_specs(grid.class_count(), dropout_rate);
        let network = Sequential::build(&[side, side, 1], &specs, &mut rng)?;
        Self::new(network, grid, ModelMetadata { seed, ..ModelMetadata::default() })
    }

    pub fn class_count(&self) -> usize {
        self.grid.class_count()
    }

    pub fn count_parameters(&self) -> usize {
        self.network.parameter_count()
    }

    /// Logits (pre-softmax) in inference mode.
    pub fn logits(&self, images: &[RadioImage]) -> Result<Tensor<f32>> {
        check_side(images, self.input_side())?;
        let x = images_tensor(&images.iter().collect::<Vec<_>>())?;
        self.network.infer_to(&x, self.network.layers().len() - 1)
    }

    pub fn to_file(&self, grid_file: Option<&str>) -> ModelFile {
        let layers = self
            .network
            .layers()
            .iter()
            .map(|layer| StoredLayer {
                spec: layer.spec(),
                tensors: layer
                    .state()
                    .into_iter()
                    .map(|(name, shape, values)| {
                        (
                            name.to_string(),
                            QuantizedTensor::F32 {
                                shape,
                                values: values.to_vec(),
                            },
                        )
                    })
                    .collect(),
            })
            .collect();
        ModelFile {
            precision: Precision::F32,
            input_shape: self.network.input_shape().to_vec(),
            layers,
            class_count: self.class_count(),
            grid_file: grid_file.map(str::to_string),
            grid_digest: self.grid.digest(),
            metadata: self.metadata.clone(),
        }
    }

    /// Rebuilds a model from a float file (`f32` or `f16`; `f16` tensors are
    /// widened).
    pub fn from_file(file: &ModelFile, grid: GridMap) -> Result<Self> {
        check_digest(file, &grid)?;
        if file.precision == Precision::I8 {
            return Err(Error::Format("int8 files load as quantized models".into()));
        }
        let network = float_network(file)?;
        Self::new(network, grid, file.metadata.clone())
    }

    pub fn save(&self, path: impl AsRef<Path>, grid_file: Option<&str>) -> Result<()> {
        self.to_file(grid_file).save(path)
    }

    /// Loads a model whose header references its grid file by a path relative
    /// to the model file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = ModelFile::load(path)?;
        let grid = referenced_grid(&file, path)?;
        Self::from_file(&file, grid)
    }

    pub fn load_with_grid(path: impl AsRef<Path>, grid: GridMap) -> Result<Self> {
        Self::from_file(&ModelFile::load(path)?, grid)
    }
}

impl Localizer for CaeCnnLocModel {
    fn grid(&self) -> &GridMap {
        &self.grid
    }

    fn precision(&self) -> Precision {
        Precision::F32
    }

    fn input_side(&self) -> usize {
        self.network.input_shape()[0]
    }

    fn probabilities(&self, images: &[RadioImage]) -> Result<Tensor<f32>> {
        check_side(images, self.input_side())?;
        self.network.infer(&images_tensor(&images.iter().collect::<Vec<_>>())?)
    }

    fn serialized_size(&self) -> Result<usize> {
        Ok(self.to_file(None).to_bytes()?.len())
    }
}

pub(crate) fn check_digest(file: &ModelFile, grid: &GridMap) -> Result<()> {
    let digest = grid.digest();
    if file.grid_digest != digest {
        return Err(Error::Validation(format!(
            "model was trained on grid {} but grid {} was supplied",
            short(&file.grid_digest),
            short(&digest)
        )));
    }
    if file.class_count != grid.class_count() {
        return Err(Error::Validation("model and grid disagree on class count".into()));
    }
    Ok(())
}

fn short(digest: &str) -> &str {
    &digest[..digest.len().min(12)]
}

pub(crate) fn referenced_grid(file: &ModelFile, model_path: &Path) -> Result<GridMap> {
    let name = file
        .grid_file
        .as_deref()
        .ok_or_else(|| Error::Format("model file does not reference a grid; load it with an explicit grid".into()))?;
    let dir = model_path.parent().unwrap_or_else(|| Path::new("."));
    GridMap::load(dir.join(name))
}

/// Instantiates a float network from stored tensors, dequantizing as needed.
pub(crate) fn float_network(file: &ModelFile) -> Result<Sequential<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let specs: Vec<LayerSpec> = file.layers.iter().map(|l| l.spec.clone()).collect();
    let mut net = Sequential::<f32>::build(&file.input_shape, &specs, &mut rng)?;
    for (i, (layer, stored)) in net.layers_mut().iter_mut().zip(&file.layers).enumerate() {
        let shapes: Vec<Vec<usize>> = layer.state().into_iter().map(|(_, s, _)| s).collect();
        let slots = layer.state_mut();
        if slots.len() != stored.tensors.len() {
            return Err(Error::Format(format!(
                "layer {i} ({:?}) expects {} tensors, file has {}",
                stored.spec,
                slots.len(),
                stored.tensors.len()
            )));
        }
        for ((slot, shape), (name, tensor)) in slots.into_iter().zip(shapes).zip(&stored.tensors) {
            if tensor.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "layer {i} tensor `{name}` has shape {:?}, expected {shape:?}",
                    tensor.shape()
                )));
            }
            *slot = tensor.dequantize();
        }
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::FingerprintRecord;
    use crate::gridding::{build_grid, GridConfig};

    fn grid(k: usize) -> GridMap {
        let recs: Vec<FingerprintRecord> = (0..k)
            .map(|i| FingerprintRecord {
                rssi: vec![],
                x: i as f64 * 10.0 + 1.0,
                y: 1.0,
                floor: 0,
                building: Some(0),
            })
            .collect();
        build_grid(&recs, GridConfig::with_origin(10.0, (0.0, 0.0))).unwrap()
    }

    #[test]
    fn table_shapes() {
        let model = CaeCnnLocModel::init(23, grid(5), 0.3, 1).unwrap();
        let trace = model.network.shape_trace().unwrap();
        assert_eq!(trace[0], [21, 21, 16]);
        assert_eq!(trace[3], [7, 7, 16]);
        assert_eq!(trace[4], [5, 5, 32]);
        assert_eq!(trace[7], [3, 3, 64]);
        assert_eq!(trace[10], [576]);
        assert_eq!(trace[12], [5]);
    }

    #[test]
    fn parameter_count_matches_layer_arithmetic() {
        let model = CaeCnnLocModel::init(23, grid(7), 0.3, 1).unwrap();
        let dense = 576 * 7 + 7;
        assert_eq!(model.count_parameters(), 160 + 4_640 + 18_496 + 2 * (16 + 32 + 64) + dense);
    }

    #[test]
    fn decoder_restores_input_side() {
        for side in [17, 23, 25, 32] {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let cae = Autoencoder::new(side, &mut rng).unwrap();
            assert_eq!(cae.network.output_shape().unwrap(), [side, side, 1], "side {side}");
        }
    }

    #[test]
    fn predictions_are_deterministic_and_normalized() {
        let model = CaeCnnLocModel::init(23, grid(4), 0.3, 3).unwrap();
        let mut im = RadioImage::zeros(23);
        im.pixels.iter_mut().enumerate().for_each(|(i, p)| *p = (i % 7) as f32 / 7.0);
        let a = model.predict(&im).unwrap();
        let b = model.predict(&im).unwrap();
        assert_eq!(a, b);
        let probs = model.probabilities(std::slice::from_ref(&im)).unwrap();
        let sum: f32 = probs.data().iter().sum();
        assert!((sum - 1.0).abs() <= 1e-6);
        assert!(model.predict(&RadioImage::zeros(24)).is_err());
    }

    #[test]
    fn zero_epoch_classifier_equals_initialization() {
        let g = grid(2);
        let images = vec![RadioImage::zeros(23); 4];
        let labels = vec![0, 1, 0, 1];
        let cfg = TrainConfig {
            cae_epochs: 0,
            clf_epochs: 0,
            ..TrainConfig::default()
        };
        let (cae, curve) = train_cae(&images, &cfg).unwrap();
        assert!(curve.is_empty());
        let data = Labeled::new(&images, &labels).unwrap();
        let (a, h) = train_classifier(&cae, data, Labeled::new(&[], &[]).unwrap(), &g, &cfg).unwrap();
        let (b, _) = train_classifier(&cae, data, Labeled::new(&[], &[]).unwrap(), &g, &cfg).unwrap();
        assert_eq!(h.best_epoch, None);
        assert_eq!(a.to_file(None), b.to_file(None));
        // Encoder weights come straight from the auto-encoder.
        assert_eq!(a.network.layers()[0].state()[0].2, cae.network.layers()[0].state()[0].2);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let images = vec![RadioImage::zeros(23); 2];
        let labels = vec![0, 5];
        let cfg = TrainConfig {
            cae_epochs: 0,
            clf_epochs: 1,
            ..TrainConfig::default()
        };
        let (cae, _) = train_cae(&images, &cfg).unwrap();
        let err = train_classifier(&cae, Labeled::new(&images, &labels).unwrap(), Labeled::new(&[], &[]).unwrap(), &grid(2), &cfg);
        assert!(matches!(err, Err(Error::Validation(_))));
    }

    #[test]
    fn untrained_reconstruction_is_in_unit_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cae = Autoencoder::new(23, &mut rng).unwrap();
        let mut im = RadioImage::zeros(23);
        im.pixels[100] = 1.0;
        let out = cae.reconstruct(&[im, RadioImage::zeros(23)]).unwrap();
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let enc = cae.encode(&[RadioImage::zeros(23)]).unwrap();
        assert_eq!(enc.shape(), [1, 7, 7, 16]);
        assert!(enc.all_finite());
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let model = CaeCnnLocModel::init(23, grid(3), 0.3, 9).unwrap();
        let bytes = model.to_file(Some("grid.json")).to_bytes().unwrap();
        let back = CaeCnnLocModel::from_file(&ModelFile::from_bytes(&bytes).unwrap(), grid(3)).unwrap();
        assert_eq!(back.to_file(Some("grid.json")).to_bytes().unwrap(), bytes);
        assert!(CaeCnnLocModel::from_file(&ModelFile::from_bytes(&bytes).unwrap(), grid(4)).is_err());
    }
}
