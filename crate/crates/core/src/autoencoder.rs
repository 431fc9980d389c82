//! Per-field dense autoencoders.
//!
//! The encoder maps a scaled snapshot column `v ∈ R^N` to `z ∈ R^m`, the
//! decoder maps back. Training minimizes the mean squared reconstruction
//! error over all entries of the training matrix.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::neuralnet::{
    decode_checkpoint, encode_checkpoint, Activation, Algorithm, LayerSpec, LossRecord, Mlp,
    MlpSpec, Mode, NetError, OptimizerConfig, OptimizerState, Schedule,
};
use crate::pod::{LatentTrajectory, TimeNormalization};
use crate::scalar::Real;
use crate::snapstore::TargetInterval;

#[derive(Debug, Error)]
pub enum AeError {
    #[error("invalid autoencoder spec: {0}")]
    Spec(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("training data outside [{lo}, {hi}] required by the {activation:?} decoder output (found {value})")]
    OutOfRange {
        activation: Activation,
        lo: f64,
        hi: f64,
        value: f64,
    },
    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    Diverged {
        epoch: usize,
        history: Vec<LossRecord>,
    },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

fn d_hidden_act() -> Activation {
    Activation::Relu
}
fn d_enc_out() -> Activation {
    Activation::Linear
}
fn d_dec_out() -> Activation {
    Activation::Sigmoid
}
fn d_depth() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AeSpec {
    /// Rows of the field this autoencoder compresses.
    pub input: usize,
    pub latent: usize,
    /// Encoder hidden widths; the decoder mirrors them. `None` picks
    /// `depth` widths interpolated geometrically between `input` and `latent`.
    #[serde(default)]
    pub hidden: Option<Vec<usize>>,
    #[serde(default = "d_depth")]
    pub depth: usize,
    #[serde(default = "d_hidden_act")]
    pub hidden_activation: Activation,
    #[serde(default = "d_enc_out")]
    pub encoder_output: Activation,
    #[serde(default = "d_dec_out")]
    pub decoder_output: Activation,
    #[serde(default)]
    pub batchnorm: bool,
    #[serde(default = "d_true")]
    pub bias: bool,
}

fn d_true() -> bool {
    true
}

impl AeSpec {
    pub fn new(input: usize, latent: usize) -> Self {
        Self {
            input,
            latent,
            hidden: None,
            depth: d_depth(),
            hidden_activation: d_hidden_act(),
            encoder_output: d_enc_out(),
            decoder_output: d_dec_out(),
            batchnorm: false,
            bias: true,
        }
    }

    /// Preset "AE1": linear code, sigmoid reconstruction.
    pub fn ae1(input: usize, latent: usize) -> Self {
        Self::new(input, latent)
    }

    /// Preset "AE3": linear code, tanh reconstruction.
    pub fn ae3(input: usize, latent: usize) -> Self {
        Self {
            decoder_output: Activation::Tanh,
            ..Self::new(input, latent)
        }
    }

    /// Bias-free single-layer linear encoder and decoder.
    pub fn linear(input: usize, latent: usize) -> Self {
        Self {
            hidden: Some(Vec::new()),
            hidden_activation: Activation::Linear,
            encoder_output: Activation::Linear,
            decoder_output: Activation::Linear,
            bias: false,
            ..Self::new(input, latent)
        }
    }

    /// Latent sizes per field for the AE1 and AE3 presets.
    pub const AE1_LATENT: [usize; 3] = [5, 8, 7];
    pub const AE3_LATENT: [usize; 3] = [2, 2, 2];

    /// Scaling interval the training data must be mapped to, if any.
    pub fn scaling_interval(&self) -> Option<TargetInterval> {
        match self.decoder_output {
            Activation::Sigmoid => Some(TargetInterval::Unit),
            Activation::Tanh => Some(TargetInterval::Symmetric),
            _ => None,
        }
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        if let Some(h) = &self.hidden {
            return h.clone();
        }
        let (n, m) = (self.input as f64, self.latent as f64);
        (1..=self.depth)
            .map(|i| {
                let w = n * (m / n).powf(i as f64 / (self.depth + 1) as f64);
                (w.round() as usize).clamp(self.latent, self.input)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), AeError> {
        if self.latent == 0 || self.latent >= self.input {
            return Err(AeError::Spec(format!(
                "latent size {} must be in 1..{}",
                self.latent, self.input
            )));
        }
        if self.hidden_widths().contains(&0) {
            return Err(AeError::Spec("hidden widths must be positive".into()));
        }
        Ok(())
    }

    fn nets(&self) -> (MlpSpec, MlpSpec) {
        let hidden = self.hidden_widths();
        let layer = |units, act| LayerSpec {
            units,
            activation: act,
            batchnorm: self.batchnorm,
            bias: self.bias,
        };
        let mut enc: Vec<LayerSpec> = hidden.iter().map(|&w| layer(w, self.hidden_activation)).collect();
        enc.push(LayerSpec {
            batchnorm: false,
            ..layer(self.latent, self.encoder_output)
        });
        let mut dec: Vec<LayerSpec> =
            hidden.iter().rev().map(|&w| layer(w, self.hidden_activation)).collect();
        dec.push(LayerSpec {
            batchnorm: false,
            ..layer(self.input, self.decoder_output)
        });
        (
            MlpSpec {
                input: self.input,
                layers: enc,
            },
            MlpSpec {
                input: self.latent,
                layers: dec,
            },
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AeModel<T> {
    pub spec: AeSpec,
    pub encoder: Mlp<T>,
    pub decoder: Mlp<T>,
    pub history: Vec<LossRecord>,
    /// Inference-mode reconstruction MSE on the training data after the
    /// last epoch.
    pub final_loss: Option<f64>,
}

/// Seeded construction.
pub fn build<T: Real>(spec: AeSpec, seed: u64) -> Result<AeModel<T>, AeError> {
    spec.validate()?;
    let (es, ds) = spec.nets();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let encoder = Mlp::new(es, &mut rng)?;
    let decoder = Mlp::new(ds, &mut rng)?;
    Ok(AeModel {
        spec,
        encoder,
        decoder,
        history: Vec::new(),
        final_loss: None,
    })
}

fn default_optimizer() -> OptimizerConfig {
    OptimizerConfig {
        algorithm: Algorithm::adam(),
        lr: 1e-3,
        schedule: Schedule::Plateau {
            patience: 200,
            factor: 0.5,
            min_delta: 1e-8,
        },
    }
}

/// Columns above which training switches to mini-batches.
pub const FULL_BATCH_LIMIT: usize = 4096;
pub const MINI_BATCH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeTrainConfig {
    pub epochs: usize,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerConfig,
    /// `None`: full batch up to 4096 columns, else 64.
    #[serde(default)]
    pub batch_size: Option<usize>,
    /// Seed of the mini-batch shuffling.
    #[serde(default)]
    pub seed: u64,
}

impl AeTrainConfig {
    pub fn new(epochs: usize) -> Self {
        Self {
            epochs,
            optimizer: default_optimizer(),
            batch_size: None,
            seed: 0,
        }
    }
}

fn check_range<T: Real>(spec: &AeSpec, data: &Matrix<T>) -> Result<(), AeError> {
    if data.nrows() != spec.input {
        return Err(AeError::Dimension(format!(
            "data has {} rows, autoencoder expects {}",
            data.nrows(),
            spec.input
        )));
    }
    if let Some((lo, hi)) = spec.decoder_output.output_range() {
        let slack = 1e-12;
        if let Some(&v) = data
            .as_slice()
            .iter()
            .find(|v| !(v.to_f64_lossless() >= lo - slack && v.to_f64_lossless() <= hi + slack))
        {
            return Err(AeError::OutOfRange {
                activation: spec.decoder_output,
                lo,
                hi,
                value: v.to_f64_lossless(),
            });
        }
    }
    Ok(())
}

fn mse<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> T {
    let n = T::from_usize_lossy(a.as_slice().len());
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| (x - y).powi(2))
        .sum::<T>()
        / n
}

impl<T: Real> AeModel<T> {
    /// Inference-mode reconstruction.
    pub fn reconstruct(&self, data: &Matrix<T>) -> Result<Matrix<T>, AeError> {
        Ok(self.decoder.predict(&self.encoder.predict(data)?)?)
    }

    /// Inference-mode reconstruction MSE.
    pub fn reconstruction_mse(&self, data: &Matrix<T>) -> Result<T, AeError> {
        Ok(mse(&self.reconstruct(data)?, data))
    }

    /// `m × M` codes of the columns of `data`.
    pub fn encode(&self, data: &Matrix<T>, times: &[T]) -> Result<LatentTrajectory<T>, AeError> {
        if data.nrows() != self.spec.input {
            return Err(AeError::Dimension(format!(
                "data has {} rows, encoder expects {}",
                data.nrows(),
                self.spec.input
            )));
        }
        if times.len() != data.ncols() {
            return Err(AeError::Dimension(format!(
                "{} times for {} columns",
                times.len(),
                data.ncols()
            )));
        }
        Ok(LatentTrajectory {
            z: self.encoder.predict(data)?,
            times: times.to_vec(),
            normalization: TimeNormalization::None,
        })
    }

    /// Scaled-space reconstruction of latent codes.
    pub fn decode(&self, latent: &Matrix<T>) -> Result<Matrix<T>, AeError> {
        if latent.nrows() != self.spec.latent {
            return Err(AeError::Dimension(format!(
                "latent has {} rows, decoder expects {}",
                latent.nrows(),
                self.spec.latent
            )));
        }
        Ok(self.decoder.predict(latent)?)
    }

    /// Trains on scaled `N × M` data; appends to and returns the history.
    pub fn train(&mut self, data: &Matrix<T>, cfg: &AeTrainConfig) -> Result<&[LossRecord], AeError> {
        check_range(&self.spec, data)?;
        if cfg.epochs == 0 {
            return Ok(&self.history);
        }
        let cols = data.ncols();
        let batch = cfg
            .batch_size
            .unwrap_or(if cols <= FULL_BATCH_LIMIT { cols } else { MINI_BATCH })
            .clamp(1, cols.max(1));
        let ne = self.encoder.n_params();
        let mut opt = OptimizerState::<T>::new(cfg.optimizer, ne + self.decoder.n_params())?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..cols).collect();
        let start = self.history.len();
        for e in 0..cfg.epochs {
            let epoch = start + e;
            if batch < cols {
                order.shuffle(&mut rng);
            }
            let mut sum = T::zero();
            let lr = opt.lr(epoch);
            for chunk in order.chunks(batch) {
                let x = if batch == cols {
                    data.clone()
                } else {
                    data.select_columns(chunk)
                };
                let (code, ec) = self.encoder.forward(&x, Mode::Train)?;
                let (y, dc) = self.decoder.forward(&code, Mode::Train)?;
                let loss = mse(&y, &x);
                if !loss.is_finite() {
                    return Err(AeError::Diverged {
                        epoch,
                        history: self.history.clone(),
                    });
                }
                sum += loss * T::from_usize_lossy(chunk.len());
                let scale = T::from_usize_lossy(2) / T::from_usize_lossy(x.as_slice().len());
                let gy = y.sub(&x).scale(scale);
                let gd = self.decoder.backward(&dc, &gy)?;
                let ge = self.encoder.backward(&ec, &gd.input)?;
                let mut p = self.encoder.params();
                p.extend(self.decoder.params());
                let mut g = ge.params;
                g.extend(gd.params);
                opt.step(&mut p, &g, epoch)?;
                self.encoder.set_params(&p[..ne])?;
                self.decoder.set_params(&p[ne..])?;
            }
            let loss = (sum / T::from_usize_lossy(cols)).to_f64_lossless();
            self.history.push(LossRecord { epoch, loss, lr });
            opt.observe(loss);
        }
        self.final_loss = Some(self.reconstruction_mse(data)?.to_f64_lossless());
        Ok(&self.history)
    }
}

#[derive(Serialize, Deserialize)]
struct AeMeta {
    kind: String,
    spec: AeSpec,
    part: String,
    #[serde(default)]
    final_loss: Option<f64>,
}

/// Encoder and decoder as two network checkpoints (`<stem>.enc`, `<stem>.dec`).
pub fn save_ae<T: Real>(model: &AeModel<T>, stem: impl AsRef<Path>) -> Result<(), AeError> {
    let stem = stem.as_ref();
    for (part, net) in [("enc", &model.encoder), ("dec", &model.decoder)] {
        let meta = AeMeta {
            kind: "autoencoder".into(),
            spec: model.spec.clone(),
            part: part.into(),
            final_loss: model.final_loss,
        };
        let bytes = encode_checkpoint(net, serde_json::to_value(meta).expect("meta serializes"));
        std::fs::write(stem.with_extension(part), bytes)
            .map_err(|e| AeError::Checkpoint(e.to_string()))?;
    }
    Ok(())
}

pub fn load_ae<T: Real>(stem: impl AsRef<Path>) -> Result<AeModel<T>, AeError> {
    let stem = stem.as_ref();
    let read = |part: &str| -> Result<(Mlp<T>, AeMeta), AeError> {
        let bytes = std::fs::read(stem.with_extension(part))
            .map_err(|e| AeError::Checkpoint(e.to_string()))?;
        let (net, meta) = decode_checkpoint(&bytes)?;
        let meta: AeMeta =
            serde_json::from_value(meta).map_err(|e| AeError::Checkpoint(e.to_string()))?;
        if meta.kind != "autoencoder" || meta.part != part {
            return Err(AeError::Checkpoint(format!("{part}: not an autoencoder {part} checkpoint")));
        }
        Ok((net, meta))
    };
    let (encoder, meta) = read("enc")?;
    let (decoder, _) = read("dec")?;
    Ok(AeModel {
        spec: meta.spec,
        encoder,
        decoder,
        history: Vec::new(),
        final_loss: meta.final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::Layer;

    #[test]
    fn preset_shapes_and_intervals() {
        let s = AeSpec::ae1(300, 5);
        assert_eq!(s.scaling_interval(), Some(TargetInterval::Unit));
        let w = s.hidden_widths();
        assert_eq!(w.len(), 4);
        assert!(w.windows(2).all(|p| p[0] >= p[1]) && w[0] < 300 && w[3] > 5);
        assert_eq!(AeSpec::ae3(300, 2).scaling_interval(), Some(TargetInterval::Symmetric));
        assert!(build::<f64>(AeSpec::new(10, 10), 0).is_err());
        let m = build::<f64>(AeSpec::ae1(40, 8), 3).unwrap();
        assert_eq!(m.encoder.output_dim(), 8);
        assert_eq!(m.decoder.input_dim(), 8);
        assert_eq!(m.decoder.output_dim(), 40);
    }

    #[test]
    fn constructed_projection_autoencoder() {
        // Encoder selects the first two coordinates; decoder is its transpose.
        let sel = Matrix::from_fn(2, 4, |i, j| if i == j { 1.0 } else { 0.0 });
        let lin = |w: Matrix<f64>| Layer {
            weights: w,
            bias: None,
            batchnorm: None,
            activation: Activation::Linear,
        };
        let model = AeModel {
            spec: AeSpec::linear(4, 2),
            encoder: Mlp::from_layers(4, vec![lin(sel.clone())]).unwrap(),
            decoder: Mlp::from_layers(2, vec![lin(sel.transpose())]).unwrap(),
            history: Vec::new(),
            final_loss: None,
        };
        let v = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]]);
        let r = model.reconstruct(&v).unwrap();
        assert_eq!(r.as_slice(), &[1.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_epochs_and_range_checks() {
        let mut m = build::<f64>(AeSpec::ae1(6, 2), 1).unwrap();
        let before = m.clone();
        let data = Matrix::from_fn(6, 5, |i, j| ((i + j) % 3) as f64 / 2.0);
        m.train(&data, &AeTrainConfig::new(0)).unwrap();
        assert_eq!(m, before);
        let bad = data.map(|v| v + 0.8);
        assert!(matches!(
            m.train(&bad, &AeTrainConfig::new(1)),
            Err(AeError::OutOfRange { .. })
        ));
    }

    #[test]
    fn training_reduces_loss_and_final_loss_matches_reevaluation() {
        let mut m = build::<f64>(AeSpec::ae1(8, 2), 2).unwrap();
        let data = Matrix::from_fn(8, 12, |i, j| {
            0.5 + 0.4 * ((i as f64 * 0.7 + j as f64 * 0.3).sin())
        });
        m.train(&data, &AeTrainConfig::new(300)).unwrap();
        let h = &m.history;
        assert_eq!(h.len(), 300);
        assert!(h.iter().enumerate().all(|(k, r)| r.epoch == k));
        assert!(h[299].loss < h[0].loss);
        let re = m.reconstruction_mse(&data).unwrap();
        assert!((re - m.final_loss.unwrap()).abs() <= 1e-10);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = build::<f64>(AeSpec { batchnorm: true, ..AeSpec::ae3(12, 3) }, 4).unwrap();
        save_ae(&m, dir.path().join("field")).unwrap();
        let back = load_ae::<f64>(dir.path().join("field")).unwrap();
        assert_eq!(back.encoder, m.encoder);
        assert_eq!(back.decoder, m.decoder);
        assert_eq!(back.spec, m.spec);
    }
}
