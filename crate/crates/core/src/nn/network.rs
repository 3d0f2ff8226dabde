use rand_chacha::ChaCha8Rng;

use super::layers::{Layer, LayerSpec, Param};
use super::{Mode, Scalar, Tensor};
use crate::error::{Error, Result};

/// A chain of layers with a fixed per-sample input shape.
#[derive(Debug, Clone)]
pub struct Sequential<T> {
    input_shape: Vec<usize>,
    layers: Vec<Layer<T>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn build(input_shape: &[usize], specs: &[LayerSpec], rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            layers.push(Layer::from_spec(spec, &shape, rng)?);
            shape = spec.output_shape(&shape)?;
        }
        Ok(Sequential {
            input_shape: input_shape.to_vec(),
            layers,
        })
    }

    pub fn from_layers(input_shape: &[usize], layers: Vec<Layer<T>>) -> Result<Self> {
        let net = Sequential {
            input_shape: input_shape.to_vec(),
            layers,
        };
        net.output_shape()?;
        Ok(net)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    /// Per-sample shape after every layer.
    pub fn shape_trace(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.clone();
        let mut trace = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            shape = layer.spec().output_shape(&shape)?;
            trace.push(shape.clone());
        }
        Ok(trace)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.shape_trace()?.pop().unwrap_or_else(|| self.input_shape.clone()))
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().get(1..) != Some(&self.input_shape[..]) {
            return Err(Error::Shape(format!(
                "network expects samples of shape {:?}, got {:?}",
                self.input_shape,
                x.shape()
            )));
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor<T>> {
        self.forward_to(x, mode, rng, self.layers.len())
    }

    /// Forward through the first `end` layers only.
    pub fn forward_to(
        &mut self,
        x: &Tensor<T>,
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
        end: usize,
    ) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &mut self.layers[..end] {
            h = layer.forward(&h, mode, rng.as_deref_mut())?;
        }
        Ok(h)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.infer_to(x, self.layers.len())
    }

    pub fn infer_to(&self, x: &Tensor<T>, end: usize) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers[..end] {
            h = layer.infer(&h)?;
        }
        Ok(h)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        self.backward_from(grad, self.layers.len())
    }

    /// Backward through the first `end` layers, pairing with [`Sequential::forward_to`].
    pub fn backward_from(&mut self, grad: &Tensor<T>, end: usize) -> Result<Tensor<T>> {
        let mut g = grad.clone();
        for layer in self.layers[..end].iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn clear_caches(&mut self) {
        self.layers.iter_mut().for_each(Layer::clear_cache);
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .flat_map(|l| l.state())
            .all(|(_, _, v)| v.iter().all(|x| x.is_finite()))
    }
}
