//! Small ReLU multilayer perceptrons with hand-written backpropagation and
//! SGD with classical momentum.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

static NEXT_NET_ID: AtomicU64 = AtomicU64::new(1);

fn next_net_id() -> u64 {
    NEXT_NET_ID.fetch_add(1, Ordering::Relaxed)
}

/// One affine layer: `weight` is `d_out x d_in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Layer<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Layer<T> {
    fn zeros_like(&self) -> Self {
        Self { weight: Matrix::zeros(self.weight.rows(), self.weight.cols()), bias: vec![T::zero(); self.bias.len()] }
    }

    fn param_count(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.len()
    }
}

/// Multilayer perceptron: ReLU on hidden layers, identity on the output.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Mlp<T> {
    layers: Vec<Layer<T>>,
    #[serde(skip, default = "next_net_id")]
    id: u64,
    #[serde(skip)]
    revision: u64,
}

impl<T: Scalar> PartialEq for Mlp<T> {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Parameter gradients, shaped like the network.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGradients<T> {
    pub layers: Vec<Layer<T>>,
}

/// Activations recorded by [`Mlp::forward`] for the matching backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    net_id: u64,
    revision: u64,
    /// Input to each layer.
    inputs: Vec<Matrix<T>>,
    /// Pre-activations of the hidden layers.
    hidden_pre: Vec<Matrix<T>>,
}

impl<T: Scalar> Mlp<T> {
    /// Weights uniform on `±√(6/(d_in+d_out))`, zero biases.
    pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::invalid("an MLP needs at least an input and an output size"));
        }
        if layer_sizes.iter().any(|&d| d == 0) {
            return Err(Error::invalid("layer sizes must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layer_sizes
            .windows(2)
            .map(|w| {
                let (d_in, d_out) = (w[0], w[1]);
                let a = (6.0 / (d_in + d_out) as f64).sqrt();
                let weight = Matrix::from_fn(d_out, d_in, |_, _| T::lit(rng.random_range(-a..a)));
                Layer { weight, bias: vec![T::zero(); d_out] }
            })
            .collect();
        Ok(Self { layers, id: next_net_id(), revision: 0 })
    }

    /// Builds a network from explicit layers, checking shape compatibility.
    pub fn from_layers(layers: Vec<Layer<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("network needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weight.rows() {
                return Err(Error::invalid(format!("layer {i}: bias length != output size")));
            }
            if i > 0 && layers[i - 1].weight.rows() != l.weight.cols() {
                return Err(Error::invalid(format!("layer {i}: input size does not match previous output")));
            }
            if !l.weight.all_finite() || l.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::invalid(format!("layer {i}: non-finite parameter")));
            }
        }
        Ok(Self { layers, id: next_net_id(), revision: 0 })
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    /// Mutable access to the parameters; invalidates outstanding caches.
    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        self.revision += 1;
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.rows())
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.weight.rows()));
        s
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.all_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    fn check_input(&self, batch: &Matrix<T>) -> Result<()> {
        if batch.cols() != self.input_dim() {
            return Err(Error::invalid(format!(
                "batch has {} columns, network expects {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Applies the network to every row of `batch`.
    pub fn predict(&self, batch: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_input(batch)?;
        let last = self.layers.len() - 1;
        let mut h = batch.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = affine(layer, &h);
            if i < last {
                relu_in_place(&mut h);
            }
        }
        Ok(h)
    }

    /// Forward pass that records what [`Mlp::backward`] needs.
    pub fn forward(&self, batch: &Matrix<T>) -> Result<(Matrix<T>, ForwardCache<T>)> {
        self.check_input(batch)?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut hidden_pre = Vec::with_capacity(last);
        let mut h = batch.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = affine(layer, &h);
            inputs.push(h);
            if i < last {
                let mut a = z.clone();
                relu_in_place(&mut a);
                hidden_pre.push(z);
                h = a;
            } else {
                h = z;
            }
        }
        let cache = ForwardCache { net_id: self.id, revision: self.revision, inputs, hidden_pre };
        Ok((h, cache))
    }

    /// Gradient of `Σ_rows ⟨output_grad_row, output_row⟩` with respect to every
    /// parameter.
    pub fn backward(&self, cache: &ForwardCache<T>, output_grad: &Matrix<T>) -> Result<MlpGradients<T>> {
        if cache.net_id != self.id || cache.revision != self.revision || cache.inputs.len() != self.layers.len() {
            return Err(Error::invalid("forward cache does not belong to this network state"));
        }
        let n = cache.inputs[0].rows();
        if output_grad.shape() != (n, self.output_dim()) {
            return Err(Error::invalid(format!(
                "output gradient is {}x{}, expected {}x{}",
                output_grad.rows(),
                output_grad.cols(),
                n,
                self.output_dim()
            )));
        }
        let mut grads: Vec<Layer<T>> = Vec::with_capacity(self.layers.len());
        let mut g = output_grad.clone();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let input = &cache.inputs[i];
            let weight = g.tr_matmul(input);
            let mut bias = vec![T::zero(); layer.bias.len()];
            for r in 0..g.rows() {
                for (b, &v) in bias.iter_mut().zip(g.row(r)) {
                    *b += v;
                }
            }
            grads.push(Layer { weight, bias });
            if i > 0 {
                let mut back = g.matmul(&layer.weight);
                let pre = &cache.hidden_pre[i - 1];
                for (b, &z) in back.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                    if z <= T::zero() {
                        *b = T::zero();
                    }
                }
                g = back;
            }
        }
        grads.reverse();
        Ok(MlpGradients { layers: grads })
    }

    /// Flattened parameter vector (weights row-major, then bias, per layer).
    pub fn flat_params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Overwrites parameters from [`Mlp::flat_params`] order.
    pub fn set_flat_params(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::invalid("flat parameter vector has the wrong length"));
        }
        let mut off = 0;
        for l in self.layers_mut() {
            let w = l.weight.as_mut_slice();
            w.copy_from_slice(&flat[off..off + w.len()]);
            off += w.len();
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }
}

impl<T: Scalar> MlpGradients<T> {
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.flatten().iter().all(|&v| v == T::zero())
    }
}

fn affine<T: Scalar>(layer: &Layer<T>, h: &Matrix<T>) -> Matrix<T> {
    let mut z = h.matmul_tr(&layer.weight);
    for i in 0..z.rows() {
        for (v, &b) in z.row_mut(i).iter_mut().zip(&layer.bias) {
            *v += b;
        }
    }
    z
}

fn relu_in_place<T: Scalar>(m: &mut Matrix<T>) {
    for v in m.as_mut_slice() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// SGD with classical momentum: `buf ← μ·buf + g`, `θ ← θ − η·buf`.
#[derive(Clone, Debug)]
pub struct SgdMomentum<T> {
    pub lr: T,
    pub momentum: T,
    buffers: Vec<Layer<T>>,
}

impl<T: Scalar> SgdMomentum<T> {
    pub fn new(params: &Mlp<T>, lr: T, momentum: T) -> Result<Self> {
        if !(lr > T::zero()) || !lr.is_finite() {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(momentum >= T::zero() && momentum < T::one()) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        Ok(Self { lr, momentum, buffers: params.layers.iter().map(Layer::zeros_like).collect() })
    }

    pub fn buffers(&self) -> &[Layer<T>] {
        &self.buffers
    }

    pub fn step(&mut self, params: &mut Mlp<T>, grads: &MlpGradients<T>) -> Result<()> {
        let shapes_match = grads.layers.len() == params.layers.len()
            && grads.layers.iter().zip(&params.layers).all(|(g, p)| {
                g.weight.shape() == p.weight.shape() && g.bias.len() == p.bias.len()
            })
            && self.buffers.len() == params.layers.len();
        if !shapes_match {
            return Err(Error::invalid("gradient shapes do not match the network"));
        }
        let (lr, mu) = (self.lr, self.momentum);
        for ((buf, g), p) in self.buffers.iter_mut().zip(&grads.layers).zip(params.layers_mut()) {
            momentum_update(buf.weight.as_mut_slice(), g.weight.as_slice(), p.weight.as_mut_slice(), lr, mu);
            momentum_update(&mut buf.bias, &g.bias, &mut p.bias, lr, mu);
        }
        Ok(())
    }
}

fn momentum_update<T: Scalar>(buf: &mut [T], grad: &[T], param: &mut [T], lr: T, mu: T) {
    for ((b, &g), p) in buf.iter_mut().zip(grad).zip(param.iter_mut()) {
        *b = mu * *b + g;
        *p -= lr * *b;
    }
}

/// Optimizer schedule for one network fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    /// `None` means full batch.
    pub batch_size: Option<usize>,
    pub seed: u64,
}

/// Loss callback: receives the network outputs on a batch plus the batch's row
/// indices and returns `(loss, ∂loss/∂outputs)`.
pub trait BatchLoss<T> {
    fn loss_and_grad(&mut self, outputs: &Matrix<T>, rows: &[usize]) -> Result<(T, Matrix<T>)>;
}

impl<T, F> BatchLoss<T> for F
where
    F: FnMut(&Matrix<T>, &[usize]) -> Result<(T, Matrix<T>)>,
{
    fn loss_and_grad(&mut self, outputs: &Matrix<T>, rows: &[usize]) -> Result<(T, Matrix<T>)> {
        self(outputs, rows)
    }
}

/// Trains `net` on `inputs` and returns the loss recorded at every epoch
/// (the loss of the last batch of that epoch).
pub fn train<T: Scalar>(
    net: &mut Mlp<T>,
    inputs: &Matrix<T>,
    config: &TrainConfig,
    stage: &'static str,
    loss: &mut impl BatchLoss<T>,
) -> Result<Vec<T>> {
    let mut opt = SgdMomentum::new(net, T::lit(config.lr), T::lit(config.momentum))?;
    let n = inputs.rows();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let batch = config.batch_size.filter(|&b| b > 0 && b < n);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut last = T::zero();
        match batch {
            None => {
                let (out, cache) = net.forward(inputs)?;
                let (l, g) = loss.loss_and_grad(&out, &order)?;
                if !l.is_finite() || !g.all_finite() {
                    return Err(Error::NonFiniteLoss { stage, epoch });
                }
                let grads = net.backward(&cache, &g)?;
                opt.step(net, &grads)?;
                last = l;
            }
            Some(b) => {
                order.shuffle(&mut rng);
                for chunk in order.chunks(b) {
                    let xb = inputs.select_rows(chunk);
                    let (out, cache) = net.forward(&xb)?;
                    let (l, g) = loss.loss_and_grad(&out, chunk)?;
                    if !l.is_finite() || !g.all_finite() {
                        return Err(Error::NonFiniteLoss { stage, epoch });
                    }
                    let grads = net.backward(&cache, &g)?;
                    opt.step(net, &grads)?;
                    last = l;
                }
            }
        }
        history.push(last);
    }
    if !net.is_finite() {
        return Err(Error::NonFiniteLoss { stage, epoch: config.epochs });
    }
    Ok(history)
}
