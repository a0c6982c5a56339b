use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::Scalar;

/// Fully connected layer, weights stored `inputs × outputs` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: DeserializeOwned"))]
pub struct Dense<T> {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { inputs, outputs, weights: vec![T::zero(); inputs * outputs], bias: vec![T::zero(); outputs] }
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let weights = (0..inputs * outputs).map(|_| T::of(rng.random_range(-limit..=limit))).collect();
        Self { inputs, outputs, weights, bias: vec![T::zero(); outputs] }
    }
}

/// What the last layer's raw output means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Logits of a categorical distribution.
    Softmax,
    /// A single unbounded estimate.
    Linear,
}

/// Feed-forward network: ReLU on every hidden layer, raw output on the last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: DeserializeOwned"))]
pub struct Network<T> {
    layers: Vec<Dense<T>>,
    head: Head,
    /// Fixed per-feature multiplier applied to every input.
    input_scale: Vec<T>,
}

/// Per-layer activations kept from a batched forward pass for back-propagation.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache<T> {
    batch: usize,
    /// `acts[0]` is the scaled input, `acts[l + 1]` the output of layer `l`.
    acts: Vec<Vec<T>>,
    delta: Vec<T>,
    delta_prev: Vec<T>,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn new() -> Self {
        Self { batch: 0, acts: Vec::new(), delta: Vec::new(), delta_prev: Vec::new() }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Raw network output of the last forward pass, `batch × outputs`.
    pub fn output(&self) -> &[T] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Parameter gradients laid out like the network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub weights: Vec<Vec<T>>,
    pub bias: Vec<Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(net: &Network<T>) -> Self {
        Self {
            weights: net.layers.iter().map(|l| vec![T::zero(); l.weights.len()]).collect(),
            bias: net.layers.iter().map(|l| vec![T::zero(); l.bias.len()]).collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for v in self.weights.iter_mut().chain(self.bias.iter_mut()) {
            v.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    /// Weight and bias slices in optimizer order (layer by layer, weights first).
    pub fn slices(&self) -> impl Iterator<Item = &[T]> {
        self.weights.iter().zip(&self.bias).flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
    }

    pub fn is_finite(&self) -> bool {
        self.slices().all(|s| s.iter().all(|x| x.is_finite()))
    }

    pub fn max_abs(&self) -> T {
        self.slices().flat_map(|s| s.iter()).fold(T::zero(), |m, x| m.max(x.abs()))
    }

    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for (a, b) in self.weights.iter_mut().chain(self.bias.iter_mut()).zip(other.weights.iter().chain(other.bias.iter())) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += *y);
        }
    }
}

fn check_finite<T: Scalar>(xs: &[T], layer: usize) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical { layer })
    }
}

impl<T: Scalar> Network<T> {
    /// Randomly initialized network with the given layer widths
    /// (`sizes[0]` inputs, `sizes.last()` outputs).
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], head: Head, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "a network needs at least an input and an output size");
        let layers = sizes.windows(2).map(|w| Dense::glorot(w[0], w[1], rng)).collect();
        Self { layers, head, input_scale: vec![T::one(); sizes[0]] }
    }

    pub fn zeros(sizes: &[usize], head: Head) -> Self {
        assert!(sizes.len() >= 2, "a network needs at least an input and an output size");
        let layers = sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Self { layers, head, input_scale: vec![T::one(); sizes[0]] }
    }

    pub fn from_layers(layers: Vec<Dense<T>>, head: Head, input_scale: Option<Vec<T>>) -> Result<Self> {
        let first = layers.first().ok_or(Error::Empty("layer list"))?;
        let input_scale = input_scale.unwrap_or_else(|| vec![T::one(); first.inputs]);
        let net = Self { layers, head, input_scale };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self.layers.first().ok_or(Error::Empty("layer list"))?;
        if self.input_scale.len() != first.inputs {
            return Err(Error::Shape(format!("input scale has {} entries, expected {}", self.input_scale.len(), first.inputs)));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(Error::Shape(format!("layer {i} buffers do not match {}×{}", l.inputs, l.outputs)));
            }
            if i > 0 && self.layers[i - 1].outputs != l.inputs {
                return Err(Error::Shape(format!("layer {i} expects {} inputs, previous emits {}", l.inputs, self.layers[i - 1].outputs)));
            }
            check_finite(&l.weights, i)?;
            check_finite(&l.bias, i)?;
        }
        if self.head == Head::Linear && self.output_dim() != 1 {
            return Err(Error::Shape("linear head must have one output".into()));
        }
        Ok(())
    }

    pub fn with_input_scale(mut self, scale: Vec<T>) -> Self {
        assert_eq!(scale.len(), self.input_dim(), "input scale length");
        self.input_scale = scale;
        self
    }

    pub fn input_scale(&self) -> &[T] {
        &self.input_scale
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn layers(&self) -> &[Dense<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense<T>] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").outputs
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Mutable parameter slices in optimizer order (layer by layer, weights first).
    pub fn param_slices_mut(&mut self) -> impl Iterator<Item = &mut [T]> {
        self.layers.iter_mut().flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
    }

    /// Batched forward pass over `batch` row-major inputs; returns raw outputs.
    pub fn forward_batch<'c>(&self, input: &[T], batch: usize, cache: &'c mut ForwardCache<T>) -> Result<&'c [T]> {
        let d_in = self.input_dim();
        if input.len() != batch * d_in {
            return Err(Error::Shape(format!("input has {} values, expected {}×{}", input.len(), batch, d_in)));
        }
        cache.batch = batch;
        cache.acts.resize_with(self.layers.len() + 1, Vec::new);
        let a0 = &mut cache.acts[0];
        a0.clear();
        a0.extend(input.chunks(d_in).flat_map(|row| row.iter().zip(&self.input_scale).map(|(x, s)| *x * *s)));
        check_finite(a0, 0)?;

        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (prev, rest) = cache.acts.split_at_mut(l + 1);
            let x = &prev[l];
            let out = &mut rest[0];
            out.clear();
            for _ in 0..batch {
                out.extend_from_slice(&layer.bias);
            }
            T::gemm(
                batch,
                layer.inputs,
                layer.outputs,
                T::one(),
                x,
                (layer.inputs as isize, 1),
                &layer.weights,
                (layer.outputs as isize, 1),
                T::one(),
                out,
                (layer.outputs as isize, 1),
            );
            if l < last {
                out.iter_mut().for_each(|v| *v = v.max(T::zero()));
            }
            check_finite(out, l)?;
        }
        Ok(cache.output())
    }

    /// Raw output for a single input.
    pub fn forward(&self, input: &[T]) -> Result<Vec<T>> {
        let mut cache = ForwardCache::new();
        Ok(self.forward_batch(input, 1, &mut cache)?.to_vec())
    }

    /// Back-propagates `d_output` (gradient of the loss w.r.t. the raw outputs
    /// of the cached forward pass) and overwrites `grads`.
    pub fn backward_batch(&self, cache: &mut ForwardCache<T>, d_output: &[T], grads: &mut Gradients<T>) -> Result<()> {
        let batch = cache.batch;
        if d_output.len() != batch * self.output_dim() {
            return Err(Error::Shape(format!("upstream gradient has {} values, expected {}", d_output.len(), batch * self.output_dim())));
        }
        if cache.acts.len() != self.layers.len() + 1 {
            return Err(Error::Shape("forward cache does not belong to this network".into()));
        }
        cache.delta.clear();
        cache.delta.extend_from_slice(d_output);
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let x = &cache.acts[l];
            let delta = &cache.delta;
            // dW = xᵀ · δ
            T::gemm(
                layer.inputs,
                batch,
                layer.outputs,
                T::one(),
                x,
                (1, layer.inputs as isize),
                delta,
                (layer.outputs as isize, 1),
                T::zero(),
                &mut grads.weights[l],
                (layer.outputs as isize, 1),
            );
            let db = &mut grads.bias[l];
            db.iter_mut().for_each(|v| *v = T::zero());
            for row in delta.chunks(layer.outputs) {
                db.iter_mut().zip(row).for_each(|(b, d)| *b += *d);
            }
            if l == 0 {
                break;
            }
            // δ_prev = δ · Wᵀ, masked by the ReLU of the previous layer
            cache.delta_prev.clear();
            cache.delta_prev.resize(batch * layer.inputs, T::zero());
            T::gemm(
                batch,
                layer.outputs,
                layer.inputs,
                T::one(),
                delta,
                (layer.outputs as isize, 1),
                &layer.weights,
                (1, layer.outputs as isize),
                T::zero(),
                &mut cache.delta_prev,
                (layer.inputs as isize, 1),
            );
            cache.delta_prev.iter_mut().zip(x).for_each(|(d, a)| {
                if *a <= T::zero() {
                    *d = T::zero();
                }
            });
            std::mem::swap(&mut cache.delta, &mut cache.delta_prev);
        }
        for (l, g) in grads.weights.iter().enumerate() {
            check_finite(g, l)?;
        }
        Ok(())
    }

    /// Parameter gradients for a batch and an upstream output gradient.
    pub fn gradient(&self, input: &[T], batch: usize, d_output: &[T]) -> Result<Gradients<T>> {
        let mut cache = ForwardCache::new();
        self.forward_batch(input, batch, &mut cache)?;
        let mut grads = Gradients::zeros_like(self);
        self.backward_batch(&mut cache, d_output, &mut grads)?;
        Ok(grads)
    }
}
