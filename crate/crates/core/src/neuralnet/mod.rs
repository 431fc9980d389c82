//! Dense feed-forward networks with exact reverse-mode gradients.
//!
//! Batches are `features × batch` matrices (one sample per column). Each
//! layer is `Dense → [BatchNorm] → activation`. The flat parameter vector
//! orders, per layer: weights (column-major), bias, BatchNorm γ, BatchNorm β.

mod checkpoint;
mod optim;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::scalar::{lit, Real};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use optim::{
    write_history_csv, Algorithm, LossRecord, OptimizerConfig, OptimizerState, Schedule,
};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("forward cache is stale (parameters changed since the forward pass)")]
    StaleCache,
    #[error("invalid network spec: {0}")]
    Spec(String),
    #[error("invalid optimizer config: {0}")]
    Optimizer(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Relu,
    /// ELU with α = 1.
    Elu,
    Tanh,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Linear => x,
            Activation::Relu => x.max(T::zero()),
            Activation::Elu => {
                if x > T::zero() {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => T::one() / (T::one() + (-x).exp()),
        }
    }

    /// Derivative given the pre-activation `x` and output `y`.
    #[inline]
    pub fn derivative<T: Real>(self, x: T, y: T) -> T {
        match self {
            Activation::Linear => T::one(),
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Elu => {
                if x > T::zero() {
                    T::one()
                } else {
                    y + T::one()
                }
            }
            Activation::Tanh => T::one() - y * y,
            Activation::Sigmoid => y * (T::one() - y),
        }
    }

    /// Closed output range of bounded activations.
    pub fn output_range(self) -> Option<(f64, f64)> {
        match self {
            Activation::Tanh => Some((-1.0, 1.0)),
            Activation::Sigmoid => Some((0.0, 1.0)),
            _ => None,
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub units: usize,
    pub activation: Activation,
    #[serde(default)]
    pub batchnorm: bool,
    #[serde(default = "default_true")]
    pub bias: bool,
}

impl LayerSpec {
    pub fn new(units: usize, activation: Activation) -> Self {
        Self {
            units,
            activation,
            batchnorm: false,
            bias: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input: usize,
    pub layers: Vec<LayerSpec>,
}

impl MlpSpec {
    pub fn output(&self) -> usize {
        self.layers.last().map_or(self.input, |l| l.units)
    }
}

/// BatchNorm running-statistics momentum.
pub const BN_MOMENTUM: f64 = 0.99;
/// BatchNorm variance epsilon.
pub const BN_EPSILON: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer<T> {
    /// `out × in`.
    pub weights: Matrix<T>,
    pub bias: Option<Vec<T>>,
    pub batchnorm: Option<BatchNorm<T>>,
    pub activation: Activation,
}

impl<T: Real> Layer<T> {
    fn n_params(&self) -> usize {
        self.weights.as_slice().len()
            + self.bias.as_ref().map_or(0, Vec::len)
            + self.batchnorm.as_ref().map_or(0, |b| 2 * b.gamma.len())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// BatchNorm uses batch statistics and updates its running averages.
    Train,
    /// BatchNorm uses running statistics; nothing is mutated.
    Infer,
}

/// Multilayer perceptron.
#[derive(Clone, Debug)]
pub struct Mlp<T> {
    spec: MlpSpec,
    layers: Vec<Layer<T>>,
    version: u64,
}

impl<T: PartialEq> PartialEq for Mlp<T> {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.layers == other.layers
    }
}

#[derive(Clone, Debug)]
struct LayerCache<T> {
    input: Matrix<T>,
    /// Normalized pre-activations (BatchNorm only).
    xhat: Option<Matrix<T>>,
    inv_std: Vec<T>,
    pre: Matrix<T>,
    out: Matrix<T>,
}

/// Activations recorded by a forward pass, consumed by [`Mlp::backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    layers: Vec<LayerCache<T>>,
    mode: Mode,
    version: u64,
}

impl<T: Real> ForwardCache<T> {
    pub fn output(&self) -> &Matrix<T> {
        &self.layers.last().expect("at least one layer").out
    }
}

/// Gradient of a scalar loss with respect to parameters and inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub params: Vec<T>,
    pub input: Matrix<T>,
}

impl<T: Real> Mlp<T> {
    /// Glorot-uniform weights, zero biases, identity BatchNorm.
    pub fn new<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Result<Self, NetError> {
        if spec.input == 0 || spec.layers.is_empty() {
            return Err(NetError::Spec("need a positive input size and at least one layer".into()));
        }
        if let Some(i) = spec.layers.iter().position(|l| l.units == 0) {
            return Err(NetError::Spec(format!("layer {i} has zero units")));
        }
        let mut fan_in = spec.input;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for ls in &spec.layers {
            let limit = (6.0 / (fan_in + ls.units) as f64).sqrt();
            let weights = Matrix::from_fn(ls.units, fan_in, |_, _| {
                lit::<T>(rng.random_range(-limit..limit))
            });
            layers.push(Layer {
                weights,
                bias: ls.bias.then(|| vec![T::zero(); ls.units]),
                batchnorm: ls.batchnorm.then(|| BatchNorm {
                    gamma: vec![T::one(); ls.units],
                    beta: vec![T::zero(); ls.units],
                    running_mean: vec![T::zero(); ls.units],
                    running_var: vec![T::one(); ls.units],
                }),
                activation: ls.activation,
            });
            fan_in = ls.units;
        }
        Ok(Self {
            spec,
            layers,
            version: 0,
        })
    }

    /// Builds a network from explicit layers (dimensions are checked).
    pub fn from_layers(input: usize, layers: Vec<Layer<T>>) -> Result<Self, NetError> {
        let mut fan_in = input;
        let mut specs = Vec::with_capacity(layers.len());
        for (i, l) in layers.iter().enumerate() {
            let (out, inp) = l.weights.shape();
            let bias_ok = l.bias.as_ref().is_none_or(|b| b.len() == out);
            let bn_ok = l.batchnorm.as_ref().is_none_or(|b| {
                b.gamma.len() == out
                    && b.beta.len() == out
                    && b.running_mean.len() == out
                    && b.running_var.len() == out
            });
            if inp != fan_in || !bias_ok || !bn_ok || out == 0 {
                return Err(NetError::Spec(format!("layer {i} dimensions are inconsistent")));
            }
            specs.push(LayerSpec {
                units: out,
                activation: l.activation,
                batchnorm: l.batchnorm.is_some(),
                bias: l.bias.is_some(),
            });
            fan_in = out;
        }
        if specs.is_empty() {
            return Err(NetError::Spec("no layers".into()));
        }
        Ok(Self {
            spec: MlpSpec {
                input,
                layers: specs,
            },
            layers,
            version: 0,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output()
    }

    pub fn has_batchnorm(&self) -> bool {
        self.layers.iter().any(|l| l.batchnorm.is_some())
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Layer::n_params).sum()
    }

    pub fn params(&self) -> Vec<T> {
        let mut p = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            p.extend_from_slice(l.weights.as_slice());
            if let Some(b) = &l.bias {
                p.extend_from_slice(b);
            }
            if let Some(bn) = &l.batchnorm {
                p.extend_from_slice(&bn.gamma);
                p.extend_from_slice(&bn.beta);
            }
        }
        p
    }

    pub fn set_params(&mut self, p: &[T]) -> Result<(), NetError> {
        if p.len() != self.n_params() {
            return Err(NetError::Dimension(format!(
                "{} parameters supplied, network has {}",
                p.len(),
                self.n_params()
            )));
        }
        if p.iter().any(|x| !x.is_finite()) {
            return Err(NetError::NonFinite("parameter update".into()));
        }
        let mut k = 0;
        let mut take = |dst: &mut [T]| {
            dst.copy_from_slice(&p[k..k + dst.len()]);
            k += dst.len();
        };
        for l in &mut self.layers {
            take(l.weights.as_mut_slice());
            if let Some(b) = &mut l.bias {
                take(b);
            }
            if let Some(bn) = &mut l.batchnorm {
                take(&mut bn.gamma);
                take(&mut bn.beta);
            }
        }
        self.version += 1;
        Ok(())
    }

    /// Running BatchNorm statistics, layer by layer (mean then variance).
    pub fn running_stats(&self) -> Vec<T> {
        let mut s = Vec::new();
        for bn in self.layers.iter().filter_map(|l| l.batchnorm.as_ref()) {
            s.extend_from_slice(&bn.running_mean);
            s.extend_from_slice(&bn.running_var);
        }
        s
    }

    pub fn set_running_stats(&mut self, s: &[T]) -> Result<(), NetError> {
        let need: usize = self
            .layers
            .iter()
            .filter_map(|l| l.batchnorm.as_ref())
            .map(|b| 2 * b.gamma.len())
            .sum();
        if s.len() != need {
            return Err(NetError::Dimension(format!(
                "{} running statistics supplied, network has {need}",
                s.len()
            )));
        }
        let mut k = 0;
        for bn in self.layers.iter_mut().filter_map(|l| l.batchnorm.as_mut()) {
            let n = bn.gamma.len();
            bn.running_mean.copy_from_slice(&s[k..k + n]);
            bn.running_var.copy_from_slice(&s[k + n..k + 2 * n]);
            k += 2 * n;
        }
        self.version += 1;
        Ok(())
    }

    /// Forward pass. Train mode updates BatchNorm running statistics.
    pub fn forward(
        &mut self,
        batch: &Matrix<T>,
        mode: Mode,
    ) -> Result<(Matrix<T>, ForwardCache<T>), NetError> {
        let (cache, stats) = self.run(batch, mode)?;
        if mode == Mode::Train && !stats.is_empty() {
            let mom = lit::<T>(BN_MOMENTUM);
            let mut it = stats.into_iter();
            for bn in self.layers.iter_mut().filter_map(|l| l.batchnorm.as_mut()) {
                let (mean, var) = it.next().expect("one entry per BatchNorm layer");
                for i in 0..mean.len() {
                    bn.running_mean[i] = mom * bn.running_mean[i] + (T::one() - mom) * mean[i];
                    bn.running_var[i] = mom * bn.running_var[i] + (T::one() - mom) * var[i];
                }
            }
        }
        Ok((cache.output().clone(), cache))
    }

    /// Inference-mode forward pass on a shared network.
    pub fn forward_infer(&self, batch: &Matrix<T>) -> Result<(Matrix<T>, ForwardCache<T>), NetError> {
        let (cache, _) = self.run(batch, Mode::Infer)?;
        Ok((cache.output().clone(), cache))
    }

    /// Inference-mode output only.
    pub fn predict(&self, batch: &Matrix<T>) -> Result<Matrix<T>, NetError> {
        Ok(self.forward_infer(batch)?.0)
    }

    #[allow(clippy::type_complexity)]
    fn run(
        &self,
        batch: &Matrix<T>,
        mode: Mode,
    ) -> Result<(ForwardCache<T>, Vec<(Vec<T>, Vec<T>)>), NetError> {
        if batch.nrows() != self.spec.input {
            return Err(NetError::Dimension(format!(
                "batch has {} rows, network expects {}",
                batch.nrows(),
                self.spec.input
            )));
        }
        let b = batch.ncols();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut stats = Vec::new();
        let mut x = batch.clone();
        for l in &self.layers {
            let mut z = l.weights.matmul(&x);
            if let Some(bias) = &l.bias {
                for j in 0..b {
                    for (zi, &bi) in z.col_mut(j).iter_mut().zip(bias) {
                        *zi += bi;
                    }
                }
            }
            let (xhat, inv_std) = match &l.batchnorm {
                None => (None, Vec::new()),
                Some(bn) => {
                    let units = z.nrows();
                    let eps = lit::<T>(BN_EPSILON);
                    let (mean, var) = match mode {
                        Mode::Train => {
                            let inv_b = T::one() / T::from_usize_lossy(b);
                            let mean: Vec<T> =
                                (0..units).map(|i| (0..b).map(|j| z[(i, j)]).sum::<T>() * inv_b).collect();
                            let var: Vec<T> = (0..units)
                                .map(|i| {
                                    (0..b).map(|j| (z[(i, j)] - mean[i]).powi(2)).sum::<T>() * inv_b
                                })
                                .collect();
                            stats.push((mean.clone(), var.clone()));
                            (mean, var)
                        }
                        Mode::Infer => (bn.running_mean.clone(), bn.running_var.clone()),
                    };
                    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                    let xhat = Matrix::from_fn(units, b, |i, j| (z[(i, j)] - mean[i]) * inv_std[i]);
                    z = Matrix::from_fn(units, b, |i, j| bn.gamma[i] * xhat[(i, j)] + bn.beta[i]);
                    (Some(xhat), inv_std)
                }
            };
            let out = z.map(|v| l.activation.apply(v));
            if !out.is_finite() {
                return Err(NetError::NonFinite("forward output".into()));
            }
            caches.push(LayerCache {
                input: x,
                xhat,
                inv_std,
                pre: z,
                out: out.clone(),
            });
            x = out;
        }
        Ok((
            ForwardCache {
                layers: caches,
                mode,
                version: self.version,
            },
            stats,
        ))
    }

    /// Reverse-mode gradient of a scalar loss whose gradient with respect to
    /// the network output is `grad_out`.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        grad_out: &Matrix<T>,
    ) -> Result<Gradients<T>, NetError> {
        let mut params = vec![T::zero(); self.n_params()];
        let input = self.backward_into(cache, grad_out, &mut params)?;
        if params.iter().any(|x| !x.is_finite()) {
            return Err(NetError::NonFinite("parameter gradient".into()));
        }
        Ok(Gradients { params, input })
    }

    /// Like [`Mlp::backward`] but adds the parameter gradient into `acc`
    /// (length [`Mlp::n_params`]) and skips the finiteness check.
    pub fn backward_into(
        &self,
        cache: &ForwardCache<T>,
        grad_out: &Matrix<T>,
        acc: &mut [T],
    ) -> Result<Matrix<T>, NetError> {
        if cache.version != self.version || cache.layers.len() != self.layers.len() {
            return Err(NetError::StaleCache);
        }
        if grad_out.shape() != cache.output().shape() {
            return Err(NetError::Dimension(format!(
                "output gradient is {:?}, output is {:?}",
                grad_out.shape(),
                cache.output().shape()
            )));
        }
        if acc.len() != self.n_params() {
            return Err(NetError::Dimension(format!(
                "accumulator has {} entries, net has {} parameters",
                acc.len(),
                self.n_params()
            )));
        }
        let mut end = acc.len();
        let mut g = grad_out.clone();
        for (l, c) in self.layers.iter().zip(&cache.layers).rev() {
            let (units, b) = c.pre.shape();
            let fan_in = c.input.nrows();
            let n_layer = l.n_params();
            let block = &mut acc[end - n_layer..end];
            end -= n_layer;
            // Through the activation.
            let mut gz = Matrix::from_fn(units, b, |i, j| {
                g[(i, j)] * l.activation.derivative(c.pre[(i, j)], c.out[(i, j)])
            });
            let (wblock, rest) = block.split_at_mut(units * fan_in);
            if let (Some(bn), Some(xhat)) = (&l.batchnorm, &c.xhat) {
                let g_gamma: Vec<T> =
                    (0..units).map(|i| (0..b).map(|j| gz[(i, j)] * xhat[(i, j)]).sum()).collect();
                let g_beta: Vec<T> = (0..units).map(|i| (0..b).map(|j| gz[(i, j)]).sum()).collect();
                let off = if l.bias.is_some() { units } else { 0 };
                for i in 0..units {
                    rest[off + i] += g_gamma[i];
                    rest[off + units + i] += g_beta[i];
                }
                gz = match cache.mode {
                    Mode::Infer => {
                        Matrix::from_fn(units, b, |i, j| gz[(i, j)] * bn.gamma[i] * c.inv_std[i])
                    }
                    Mode::Train => {
                        let bb = T::from_usize_lossy(b);
                        Matrix::from_fn(units, b, |i, j| {
                            let gx = gz[(i, j)] * bn.gamma[i];
                            let sum_gx = g_beta[i] * bn.gamma[i];
                            let sum_gx_xhat = g_gamma[i] * bn.gamma[i];
                            c.inv_std[i] / bb * (bb * gx - sum_gx - xhat[(i, j)] * sum_gx_xhat)
                        })
                    }
                };
            }
            // dW += gz · inputᵀ, column-major.
            for j in 0..b {
                let gcol = gz.col(j);
                let xcol = c.input.col(j);
                for (k, &x) in xcol.iter().enumerate() {
                    if x == T::zero() {
                        continue;
                    }
                    let w = &mut wblock[k * units..(k + 1) * units];
                    for (wi, &gi) in w.iter_mut().zip(gcol) {
                        *wi += gi * x;
                    }
                }
            }
            if l.bias.is_some() {
                for j in 0..b {
                    for (r, &gi) in rest[..units].iter_mut().zip(gz.col(j)) {
                        *r += gi;
                    }
                }
            }
            g = l.weights.tr_matmul(&gz);
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_layer(n: usize) -> Layer<f64> {
        Layer {
            weights: Matrix::identity(n),
            bias: Some(vec![0.0; n]),
            batchnorm: None,
            activation: Activation::Linear,
        }
    }

    #[test]
    fn identity_network_is_identity() {
        let mut net = Mlp::from_layers(3, vec![identity_layer(3)]).unwrap();
        let x = Matrix::from_fn(3, 4, |i, j| (i * 4 + j) as f64 - 5.0);
        let (y, _) = net.forward(&x, Mode::Infer).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn tanh_of_zero_is_zero() {
        let layer = Layer {
            weights: Matrix::from_rows(&[vec![1.0]]),
            bias: Some(vec![0.0]),
            batchnorm: None,
            activation: Activation::Tanh,
        };
        let net = Mlp::from_layers(1, vec![layer]).unwrap();
        assert_eq!(net.predict(&Matrix::zeros(1, 1)).unwrap()[(0, 0)], 0.0);
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = MlpSpec {
            input: 3,
            layers: vec![
                LayerSpec {
                    batchnorm: true,
                    ..LayerSpec::new(4, Activation::Elu)
                },
                LayerSpec::new(2, Activation::Sigmoid),
            ],
        };
        let mut net = Mlp::<f64>::new(spec, &mut rng).unwrap();
        let x = Matrix::from_fn(3, 5, |i, j| ((i + 2 * j) as f64).sin());
        let (y, cache) = net.forward(&x, Mode::Train).unwrap();
        let g = net.backward(&cache, &Matrix::zeros(y.nrows(), y.ncols())).unwrap();
        assert!(g.params.iter().all(|&v| v == 0.0));
        assert_eq!(g.params.len(), net.n_params());
        assert!(g.input.max_abs() == 0.0);
    }

    #[test]
    fn single_linear_neuron_mse_gradient() {
        // loss = (w x + b - y)², dL/dw = 2(wx+b-y)x, dL/db = 2(wx+b-y)
        let (w, b, x, y): (f64, f64, f64, f64) = (0.7, -0.2, 1.5, 0.3);
        let layer = Layer {
            weights: Matrix::from_rows(&[vec![w]]),
            bias: Some(vec![b]),
            batchnorm: None,
            activation: Activation::Linear,
        };
        let net = Mlp::from_layers(1, vec![layer]).unwrap();
        let (out, cache) = net.forward_infer(&Matrix::from_rows(&[vec![x]])).unwrap();
        let r = out[(0, 0)] - y;
        let g = net.backward(&cache, &Matrix::from_rows(&[vec![2.0 * r]])).unwrap();
        let resid = w * x + b - y;
        assert!((g.params[0] - 2.0 * resid * x).abs() < 1e-15);
        assert!((g.params[1] - 2.0 * resid).abs() < 1e-15);
    }

    #[test]
    fn stale_cache_and_bad_dims_are_rejected() {
        let mut net = Mlp::from_layers(2, vec![identity_layer(2)]).unwrap();
        let (_, cache) = net.forward(&Matrix::zeros(2, 1), Mode::Infer).unwrap();
        let p = net.params();
        net.set_params(&p).unwrap();
        assert!(matches!(
            net.backward(&cache, &Matrix::zeros(2, 1)),
            Err(NetError::StaleCache)
        ));
        assert!(matches!(
            net.forward(&Matrix::zeros(3, 1), Mode::Infer),
            Err(NetError::Dimension(_))
        ));
        assert!(matches!(net.set_params(&[1.0]), Err(NetError::Dimension(_))));
    }

    #[test]
    fn train_mode_updates_running_stats_only_in_train() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = MlpSpec {
            input: 2,
            layers: vec![LayerSpec {
                batchnorm: true,
                ..LayerSpec::new(3, Activation::Relu)
            }],
        };
        let mut net = Mlp::<f64>::new(spec, &mut rng).unwrap();
        let x = Matrix::from_fn(2, 6, |i, j| (i as f64 + 1.0) * j as f64);
        let before = net.running_stats();
        net.forward(&x, Mode::Infer).unwrap();
        assert_eq!(net.running_stats(), before);
        net.forward(&x, Mode::Train).unwrap();
        assert_ne!(net.running_stats(), before);
    }
}
