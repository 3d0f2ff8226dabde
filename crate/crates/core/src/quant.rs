//! Post-training quantization to float16 and int8, and the int8 inference path.
//!
//! float16 keeps the graph unchanged and widens weights back to float32 at
//! load time. int8 first folds every batch norm that follows a convolution
//! into that convolution, then stores conv/dense weights as per-tensor affine
//! int8 codes; biases stay float32. At inference, activations entering a
//! conv/dense layer are quantized per sample with a symmetric int8 scale, dot
//! products accumulate in `i32`, and the result is rescaled to float32. The
//! first convolution, whose patches are only a few values long, runs in float32
//! on the dequantized weights.

use std::path::Path;

use half::f16;

use crate::container::{DType, ModelFile, ModelMetadata, Precision, StoredLayer, TensorEntry};
use crate::datasets::RadioImage;
use crate::error::{Error, Result};
use crate::gridding::GridMap;
use crate::model::{check_digest, float_network, images_tensor, referenced_grid, CaeCnnLocModel, Localizer};
use crate::nn::{Layer, LayerSpec, Sequential, Tensor};

/// A stored tensor at one of the supported precisions.
#[derive(Debug, Clone, PartialEq)]
pub enum QuantizedTensor {
    F32 {
        shape: Vec<usize>,
        values: Vec<f32>,
    },
    F16 {
        shape: Vec<usize>,
        values: Vec<f16>,
    },
    /// Real value = `scale * (code - zero_point)`.
    I8 {
        shape: Vec<usize>,
        codes: Vec<i8>,
        scale: f32,
        zero_point: i32,
    },
}

/// Affine int8 parameters for values spanning `[min, max]`. The range is
/// widened to contain 0, and 0 always gets an exact code.
pub fn affine_params(min: f32, max: f32) -> (f32, i32) {
    let lo = min.min(0.0) as f64;
    let hi = max.max(0.0) as f64;
    let scale = if hi == lo { lo.abs().max(1.0) * 2.0 / 255.0 } else { (hi - lo) / 255.0 };
    let zero_point = ((-lo / scale).round() as i32 - 128).clamp(-128, 127);
    (scale as f32, zero_point)
}

impl QuantizedTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            QuantizedTensor::F32 { shape, .. } | QuantizedTensor::F16 { shape, .. } | QuantizedTensor::I8 { shape, .. } => shape,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            QuantizedTensor::F32 { values, .. } => values.len(),
            QuantizedTensor::F16 { values, .. } => values.len(),
            QuantizedTensor::I8 { codes, .. } => codes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            QuantizedTensor::F32 { .. } => DType::F32,
            QuantizedTensor::F16 { .. } => DType::F16,
            QuantizedTensor::I8 { .. } => DType::I8,
        }
    }

    pub fn byte_len(&self) -> usize {
        self.len() * self.dtype().size()
    }

    pub fn dequantize(&self) -> Vec<f32> {
        match self {
            QuantizedTensor::F32 { values, .. } => values.clone(),
            QuantizedTensor::F16 { values, .. } => values.iter().map(|v| v.to_f32()).collect(),
            QuantizedTensor::I8 {
                codes,
                scale,
                zero_point,
                ..
            } => codes.iter().map(|&q| (q as i32 - zero_point) as f32 * scale).collect(),
        }
    }

    /// Rounds to the nearest float16. `what` names the tensor in errors.
    pub fn to_f16(shape: Vec<usize>, values: &[f32], what: &str) -> Result<Self> {
        let mut out = Vec::with_capacity(values.len());
        for &v in values {
            let h = f16::from_f32(v);
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("{what} holds {v}")));
            }
            if h.is_infinite() {
                return Err(Error::Validation(format!("{what}: value {v} overflows float16")));
            }
            out.push(h);
        }
        Ok(QuantizedTensor::F16 { shape, values: out })
    }

    pub fn to_i8(shape: Vec<usize>, values: &[f32], what: &str) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{what} holds {v}")));
        }
        let min = values.iter().copied().fold(f32::INFINITY, f32::min);
        let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let (scale, zero_point) = if values.is_empty() { affine_params(0.0, 0.0) } else { affine_params(min, max) };
        let codes = values
            .iter()
            .map(|&w| ((w as f64 / scale as f64).round() as i32 + zero_point).clamp(-128, 127) as i8)
            .collect();
        Ok(QuantizedTensor::I8 {
            shape,
            codes,
            scale,
            zero_point,
        })
    }

    pub(crate) fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            QuantizedTensor::F32 { values, .. } => values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            QuantizedTensor::F16 { values, .. } => values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            QuantizedTensor::I8 { codes, .. } => out.extend(codes.iter().map(|&c| c as u8)),
        }
    }

    pub(crate) fn read_le(entry: &TensorEntry, bytes: &[u8]) -> Result<Self> {
        if entry.shape.iter().product::<usize>() != entry.count {
            return Err(Error::Format(format!(
                "tensor `{}` shape {:?} does not hold {} values",
                entry.name, entry.shape, entry.count
            )));
        }
        let shape = entry.shape.clone();
        Ok(match entry.dtype {
            DType::F32 => QuantizedTensor::F32 {
                shape,
                values: bytes
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            },
            DType::F16 => QuantizedTensor::F16 {
                shape,
                values: bytes
                    .chunks_exact(2)
                    .map(|b| f16::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            },
            DType::I8 => QuantizedTensor::I8 {
                shape,
                codes: bytes.iter().map(|&b| b as i8).collect(),
                scale: entry
                    .scale
                    .ok_or_else(|| Error::Format(format!("int8 tensor `{}` has no scale", entry.name)))?,
                zero_point: entry
                    .zero_point
                    .ok_or_else(|| Error::Format(format!("int8 tensor `{}` has no zero point", entry.name)))?,
            },
        })
    }
}

/// Merges every conv → batch-norm pair into a single conv with rescaled
/// weights and bias, using the running statistics.
pub fn fold_batch_norm(net: &Sequential<f32>) -> Result<Sequential<f32>> {
    let mut out: Vec<Layer<f32>> = Vec::with_capacity(net.layers().len());
    for layer in net.layers() {
        if let (Layer::BatchNorm(bn), Some(Layer::Conv2d(conv))) = (layer, out.last_mut()) {
            let per_filter = conv.weight.len() / conv.filters;
            for f in 0..conv.filters {
                let k = bn.gamma.value[f] as f64 / (bn.running_var[f] as f64 + bn.epsilon).sqrt();
                for w in &mut conv.weight.value[f * per_filter..(f + 1) * per_filter] {
                    *w = (*w as f64 * k) as f32;
                }
                let b = &mut conv.bias.value[f];
                *b = ((*b as f64 - bn.running_mean[f] as f64) * k + bn.beta.value[f] as f64) as f32;
            }
            continue;
        }
        let mut l = layer.clone();
        l.clear_cache();
        out.push(l);
    }
    Sequential::from_layers(net.input_shape(), out)
}

fn layer_name(i: usize, spec: &LayerSpec, tensor: &str) -> String {
    let kind = serde_json::to_value(spec)
        .ok()
        .and_then(|v| v.get("kind").and_then(|k| k.as_str().map(str::to_string)))
        .unwrap_or_default();
    format!("layer {i} ({kind}) `{tensor}`")
}

/// Rounds every stored tensor to float16.
pub fn quantize_f16(model: &CaeCnnLocModel) -> Result<QuantizedModel> {
    let mut file = model.to_file(None);
    file.precision = Precision::F16;
    for (i, layer) in file.layers.iter_mut().enumerate() {
        for (name, t) in &mut layer.tensors {
            let what = layer_name(i, &layer.spec, name);
            *t = QuantizedTensor::to_f16(t.shape().to_vec(), &t.dequantize(), &what)?;
        }
    }
    QuantizedModel::from_file(file, model.grid.clone())
}

/// Folds batch norm, then stores conv and dense weights as int8.
pub fn quantize_int8(model: &CaeCnnLocModel) -> Result<QuantizedModel> {
    let folded = fold_batch_norm(&model.network)?;
    let folded = CaeCnnLocModel::new(folded, model.grid.clone(), model.metadata.clone())?;
    let mut file = folded.to_file(None);
    file.precision = Precision::I8;
    for (i, layer) in file.layers.iter_mut().enumerate() {
        if !matches!(layer.spec, LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. }) {
            continue;
        }
        let spec = layer.spec.clone();
        let (name, weight) = layer
            .tensors
            .iter_mut()
            .find(|(n, _)| n == "weight")
            .ok_or_else(|| Error::State(format!("layer {i} has no weight")))?;
        *weight = QuantizedTensor::to_i8(weight.shape().to_vec(), &weight.dequantize(), &layer_name(i, &spec, name))?;
    }
    QuantizedModel::from_file(file, model.grid.clone())
}

/// Symmetric per-sample activation quantization: `x ≈ scale * q`, `|q| ≤ 127`,
/// rounding half to even.
fn quantize_activations(x: &[f32], out: &mut Vec<i16>) -> f32 {
    // Adding 1.5 * 2^23 pushes the fraction out of the mantissa.
    const SHIFT: f32 = 12_582_912.0;
    let max = x.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let scale = if max > 0.0 { max / 127.0 } else { 1.0 };
    let inv = 1.0 / scale;
    out.clear();
    out.extend(x.iter().map(|&v| ((v * inv).clamp(-127.0, 127.0) + SHIFT - SHIFT) as i16));
    scale
}

#[cfg(not(target_arch = "x86_64"))]
#[inline]
fn dot_i16_i8(a: &[i16], b: &[i8]) -> i32 {
    a.iter().zip(b).map(|(&x, &y)| x as i32 * y as i32).sum()
}

/// SSE2 is part of the x86_64 baseline, so no runtime detection is needed.
#[cfg(target_arch = "x86_64")]
#[inline]
fn dot_i16_i8(a: &[i16], b: &[i8]) -> i32 {
    use std::arch::x86_64::*;
    let n = a.len().min(b.len());
    let blocks = n / 16;
    // SAFETY: every load reads 16 bytes of `b` or 8 lanes of `a` inside
    // `0..blocks * 16`, which is within both slices.
    let mut total = unsafe {
        let mut acc = _mm_setzero_si128();
        for i in 0..blocks {
            let w = _mm_loadu_si128(b.as_ptr().add(i * 16) as *const __m128i);
            // Sign-extend bytes to words by placing them in the high byte.
            let lo = _mm_srai_epi16(_mm_unpacklo_epi8(w, w), 8);
            let hi = _mm_srai_epi16(_mm_unpackhi_epi8(w, w), 8);
            let x0 = _mm_loadu_si128(a.as_ptr().add(i * 16) as *const __m128i);
            let x1 = _mm_loadu_si128(a.as_ptr().add(i * 16 + 8) as *const __m128i);
            acc = _mm_add_epi32(acc, _mm_madd_epi16(x0, lo));
            acc = _mm_add_epi32(acc, _mm_madd_epi16(x1, hi));
        }
        let mut lanes = [0i32; 4];
        _mm_storeu_si128(lanes.as_mut_ptr() as *mut __m128i, acc);
        lanes.iter().sum::<i32>()
    };
    for i in blocks * 16..n {
        total += a[i] as i32 * b[i] as i32;
    }
    total
}

/// Integer matrix product against rows of int8 weights.
#[derive(Debug, Clone)]
struct Int8Linear {
    /// `[outputs][inputs]`.
    codes: Vec<i8>,
    inputs: usize,
    outputs: usize,
    scale: f32,
    zero_point: i32,
    bias: Vec<f32>,
}

impl Int8Linear {
    /// `rows` is `[n][inputs]` quantized with `x_scale`; writes `[n][outputs]`.
    fn apply(&self, rows: &[i16], x_scale: f32, out: &mut Vec<f32>) {
        let k = x_scale * self.scale;
        for row in rows.chunks_exact(self.inputs) {
            let row_sum: i32 = row.iter().map(|&v| v as i32).sum();
            let correction = self.zero_point * row_sum;
            for (o, w) in self.codes.chunks_exact(self.inputs).enumerate() {
                out.push(k * (dot_i16_i8(row, w) - correction) as f32 + self.bias[o]);
            }
        }
    }
}

const MIN_INT8_PATCH: usize = 32;

#[derive(Debug, Clone)]
enum Int8Op {
    Conv { linear: Int8Linear, kernel: usize, stride: usize },
    Dense(Int8Linear),
    Float(Box<Layer<f32>>),
}

fn int8_ops(file: &ModelFile, float: &Sequential<f32>) -> Result<Vec<Int8Op>> {
    let mut ops = Vec::with_capacity(file.layers.len());
    for (stored, layer) in file.layers.iter().zip(float.layers()) {
        let weight = stored.tensors.iter().find(|(n, _)| n == "weight").map(|(_, t)| t);
        let linear = |inputs: usize, outputs: usize, transpose: bool| -> Result<Option<Int8Linear>> {
            let Some(QuantizedTensor::I8 {
                codes, scale, zero_point, ..
            }) = weight
            else {
                return Ok(None);
            };
            let codes = if transpose {
                (0..outputs)
                    .flat_map(|o| (0..inputs).map(move |i| codes[i * outputs + o]))
                    .collect()
            } else {
                codes.clone()
            };
            let bias = layer.state().get(1).map(|(_, _, b)| b.to_vec()).unwrap_or_default();
            Ok(Some(Int8Linear {
                codes,
                inputs,
                outputs,
                scale: *scale,
                zero_point: *zero_point,
                bias,
            }))
        };
        let op = match layer {
            // Very short patches gain nothing from integer arithmetic.
            Layer::Conv2d(c) if c.kernel * c.kernel * c.in_channels < MIN_INT8_PATCH => {
                Int8Op::Float(Box::new(layer.clone()))
            }
            Layer::Conv2d(c) => match linear(c.kernel * c.kernel * c.in_channels, c.filters, false)? {
                Some(linear) => Int8Op::Conv {
                    linear,
                    kernel: c.kernel,
                    stride: c.stride,
                },
                None => Int8Op::Float(Box::new(layer.clone())),
            },
            // Dense weights are stored `[inputs][units]`; rows per output are faster.
            Layer::Dense(d) => match linear(d.inputs, d.units, true)? {
                Some(linear) => Int8Op::Dense(linear),
                None => Int8Op::Float(Box::new(layer.clone())),
            },
            other => Int8Op::Float(Box::new(other.clone())),
        };
        ops.push(op);
    }
    Ok(ops)
}

/// Per-sample patches of a `[h, w, c]` image in `(di, dj, c)` order.
fn patches<T: Copy>(x: &[T], h: usize, w: usize, c: usize, k: usize, stride: usize, out: &mut Vec<T>) -> (usize, usize) {
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    out.clear();
    for i in 0..oh {
        for j in 0..ow {
            for di in 0..k {
                let start = ((i * stride + di) * w + j * stride) * c;
                out.extend_from_slice(&x[start..start + k * c]);
            }
        }
    }
    (oh, ow)
}

fn run_int8(ops: &[Int8Op], x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut h = x.clone();
    let mut cols = Vec::new();
    let mut q = Vec::new();
    for op in ops {
        h = match op {
            Int8Op::Float(layer) => layer.infer(&h)?,
            Int8Op::Conv { linear, kernel, stride } => {
                let [n, hh, ww, c] = match *h.shape() {
                    [n, a, b, c] => [n, a, b, c],
                    _ => return Err(Error::Shape(format!("conv expects a 4-d input, got {:?}", h.shape()))),
                };
                if c * kernel * kernel != linear.inputs || *kernel > hh || *kernel > ww {
                    return Err(Error::Shape(format!("int8 conv cannot take input {:?}", h.shape())));
                }
                let mut out = Vec::new();
                let mut dims = (0, 0);
                for s in 0..n {
                    let sample = h.sample(s);
                    let scale = quantize_activations(sample, &mut q);
                    dims = patches(&q, hh, ww, c, *kernel, *stride, &mut cols);
                    linear.apply(&cols, scale, &mut out);
                }
                Tensor::new(vec![n, dims.0, dims.1, linear.outputs], out)?
            }
            Int8Op::Dense(linear) => {
                if h.shape().len() != 2 || h.sample_len() != linear.inputs {
                    return Err(Error::Shape(format!("int8 dense cannot take input {:?}", h.shape())));
                }
                let mut out = Vec::with_capacity(h.batch() * linear.outputs);
                for s in 0..h.batch() {
                    let scale = quantize_activations(h.sample(s), &mut q);
                    linear.apply(&q, scale, &mut out);
                }
                Tensor::new(vec![h.batch(), linear.outputs], out)?
            }
        };
    }
    Ok(h)
}

#[derive(Debug, Clone)]
enum Runtime {
    Float(Sequential<f32>),
    Int8(Vec<Int8Op>),
}

/// A float16 or int8 model ready for inference.
#[derive(Debug, Clone)]
pub struct QuantizedModel {
    file: ModelFile,
    runtime: Runtime,
    grid: GridMap,
}

impl QuantizedModel {
    pub fn from_file(file: ModelFile, grid: GridMap) -> Result<Self> {
        check_digest(&file, &grid)?;
        let float = float_network(&file)?;
        if float.output_shape()? != [grid.class_count()] {
            return Err(Error::Format("network output does not match the grid".into()));
        }
        let runtime = match file.precision {
            Precision::I8 => Runtime::Int8(int8_ops(&file, &float)?),
            _ => Runtime::Float(float),
        };
        Ok(QuantizedModel { file, runtime, grid })
    }

    pub fn file(&self) -> &ModelFile {
        &self.file
    }

    pub fn layers(&self) -> &[StoredLayer] {
        &self.file.layers
    }

    /// The stored graph with every tensor dequantized, run in float32. For
    /// int8 models this is the reference the integer path approximates.
    pub fn dequantized_network(&self) -> Result<Sequential<f32>> {
        float_network(&self.file)
    }

    /// Pre-softmax outputs.
    pub fn logits(&self, images: &[RadioImage]) -> Result<Tensor<f32>> {
        let x = self.input(images)?;
        match &self.runtime {
            Runtime::Float(net) => net.infer_to(&x, net.layers().len() - 1),
            Runtime::Int8(ops) => run_int8(&ops[..ops.len() - 1], &x),
        }
    }

    fn input(&self, images: &[RadioImage]) -> Result<Tensor<f32>> {
        let side = self.input_side();
        if let Some(im) = images.iter().find(|im| im.side != side) {
            return Err(Error::Shape(format!("model expects {side}×{side} images, got {}×{}", im.side, im.side)));
        }
        images_tensor(&images.iter().collect::<Vec<_>>())
    }

    pub fn save(&self, path: impl AsRef<Path>, grid_file: Option<&str>) -> Result<()> {
        let mut file = self.file.clone();
        file.grid_file = grid_file.map(str::to_string);
        file.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = ModelFile::load(path)?;
        let grid = referenced_grid(&file, path)?;
        Self::from_file(file, grid)
    }

    pub fn load_with_grid(path: impl AsRef<Path>, grid: GridMap) -> Result<Self> {
        Self::from_file(ModelFile::load(path)?, grid)
    }
}

impl Localizer for QuantizedModel {
    fn grid(&self) -> &GridMap {
        &self.grid
    }

    fn precision(&self) -> Precision {
        self.file.precision
    }

    fn input_side(&self) -> usize {
        self.file.input_shape[0]
    }

    fn probabilities(&self, images: &[RadioImage]) -> Result<Tensor<f32>> {
        let x = self.input(images)?;
        match &self.runtime {
            Runtime::Float(net) => net.infer(&x),
            Runtime::Int8(ops) => run_int8(ops, &x),
        }
    }

    fn serialized_size(&self) -> Result<usize> {
        Ok(self.file.to_bytes()?.len())
    }
}

/// Any model file, loaded at its stored precision.
pub enum AnyModel {
    Float(CaeCnnLocModel),
    Quantized(QuantizedModel),
}

impl AnyModel {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = ModelFile::load(path)?;
        let grid = referenced_grid(&file, path)?;
        Self::from_file(file, grid)
    }

    pub fn from_file(file: ModelFile, grid: GridMap) -> Result<Self> {
        match file.precision {
            Precision::F32 => Ok(AnyModel::Float(CaeCnnLocModel::from_file(&file, grid)?)),
            _ => Ok(AnyModel::Quantized(QuantizedModel::from_file(file, grid)?)),
        }
    }

    pub fn as_localizer(&self) -> &dyn Localizer {
        match self {
            AnyModel::Float(m) => m,
            AnyModel::Quantized(m) => m,
        }
    }

    pub fn metadata(&self) -> &ModelMetadata {
        match self {
            AnyModel::Float(m) => &m.metadata,
            AnyModel::Quantized(m) => &m.file().metadata,
        }
    }
}
