//! Neural-ODE latent propagator.
//!
//! The dynamics net maps `[z; (t)] ↦ dz/dt` on the (possibly augmented)
//! state of size `m + p`. Training minimizes the mean squared mismatch over
//! all observation times and the first `m` components, with gradients from
//! either backprop through the rk4 stages or the continuous adjoint.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::neuralnet::{
    decode_checkpoint, encode_checkpoint, Activation, ForwardCache, LayerSpec, LossRecord, Mlp,
    MlpSpec, NetError, OptimizerConfig, OptimizerState,
};
use crate::ode::{self, OdeError, SolverSpec};
use crate::pod::{LatentTrajectory, TimeNormalization};
use crate::scalar::{lit, Real};

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("invalid NODE spec: {0}")]
    Spec(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("discrete gradients need the rk4 solver")]
    ModeSolver,
    #[error("observation time {0} is not on the rk4 grid")]
    OffGrid(f64),
    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    Diverged {
        epoch: usize,
        history: Vec<LossRecord>,
    },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

/// Augmentation width used when augmentation is switched on without a size.
pub const DEFAULT_AUGMENT: usize = 5;

fn de_augment<'de, D: Deserializer<'de>>(d: D) -> Result<usize, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Aug {
        Flag(bool),
        Width(usize),
    }
    Ok(match Aug::deserialize(d)? {
        Aug::Flag(true) => DEFAULT_AUGMENT,
        Aug::Flag(false) => 0,
        Aug::Width(p) => p,
    })
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HiddenLayer {
    pub units: usize,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeArch {
    pub hidden: Vec<HiddenLayer>,
    /// Extra zero-initialized state components (`true` means 5).
    #[serde(default, deserialize_with = "de_augment")]
    pub augment: usize,
    /// Feed normalized time to the net as an extra input.
    #[serde(default)]
    pub time_input: bool,
    #[serde(default = "default_true")]
    pub bias: bool,
}

impl NodeArch {
    /// One hidden layer of 512 elu units.
    pub fn node3() -> Self {
        Self {
            hidden: vec![HiddenLayer {
                units: 512,
                activation: Activation::Elu,
            }],
            augment: 0,
            time_input: false,
            bias: true,
        }
    }

    /// Four hidden layers of 64 tanh units.
    pub fn node5() -> Self {
        Self {
            hidden: vec![
                HiddenLayer {
                    units: 64,
                    activation: Activation::Tanh,
                };
                4
            ],
            augment: 0,
            time_input: false,
            bias: true,
        }
    }

    /// `dz/dt = Wz` (no hidden layers, no bias).
    pub fn linear() -> Self {
        Self {
            hidden: Vec::new(),
            augment: 0,
            time_input: false,
            bias: false,
        }
    }

    fn mlp_spec(&self, m: usize) -> MlpSpec {
        let n = m + self.augment;
        let mut layers: Vec<LayerSpec> = self
            .hidden
            .iter()
            .map(|h| LayerSpec {
                bias: self.bias,
                ..LayerSpec::new(h.units, h.activation)
            })
            .collect();
        layers.push(LayerSpec {
            bias: self.bias,
            ..LayerSpec::new(n, Activation::Linear)
        });
        MlpSpec {
            input: n + usize::from(self.time_input),
            layers,
        }
    }
}

/// Affine time map `s = (t - origin) / scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeMap {
    pub origin: f64,
    pub scale: f64,
}

impl TimeMap {
    pub fn identity() -> Self {
        Self {
            origin: 0.0,
            scale: 1.0,
        }
    }

    pub fn forward<T: Real>(&self, t: T) -> T {
        if *self == Self::identity() {
            return t;
        }
        (t - lit(self.origin)) / lit(self.scale)
    }

    pub fn inverse<T: Real>(&self, s: T) -> T {
        if *self == Self::identity() {
            return s;
        }
        lit::<T>(self.origin) + s * lit(self.scale)
    }
}

/// Maps increasing times affinely onto `[0, 1]`.
pub fn normalize_times<T: Real>(times: &[T]) -> Result<(Vec<T>, TimeMap), NodeError> {
    if times.len() < 2 {
        return Err(NodeError::Data("need at least two times".into()));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(NodeError::Data("times must be strictly increasing".into()));
    }
    let t0 = times[0].to_f64_lossless();
    let t1 = times[times.len() - 1].to_f64_lossless();
    let map = if t0 == 0.0 && t1 == 1.0 {
        TimeMap::identity()
    } else {
        TimeMap {
            origin: t0,
            scale: t1 - t0,
        }
    };
    Ok((times.iter().map(|&t| map.forward(t)).collect(), map))
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeModel<T> {
    pub net: Mlp<T>,
    pub arch: NodeArch,
    /// Latent (unaugmented) dimension.
    pub m: usize,
    /// Solver used by [`NodeModel::predict`].
    pub solver: SolverSpec,
    pub time_map: TimeMap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    #[default]
    Discrete,
    Adjoint,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeGradient<T> {
    pub loss: T,
    pub params: Vec<T>,
    /// `∂L/∂t0` (adjoint mode only).
    pub dt0: Option<T>,
}

impl<T: Real> NodeModel<T> {
    pub fn new(arch: NodeArch, m: usize, solver: SolverSpec, seed: u64) -> Result<Self, NodeError> {
        if m == 0 {
            return Err(NodeError::Spec("latent dimension must be positive".into()));
        }
        solver.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Mlp::new(arch.mlp_spec(m), &mut rng)?;
        Ok(Self {
            net,
            arch,
            m,
            solver,
            time_map: TimeMap::identity(),
        })
    }

    /// Wraps an existing net (its input/output sizes must match `m + p`).
    pub fn from_net(net: Mlp<T>, arch: NodeArch, m: usize, solver: SolverSpec) -> Result<Self, NodeError> {
        let n = m + arch.augment;
        if net.input_dim() != n + usize::from(arch.time_input) || net.output_dim() != n {
            return Err(NodeError::Spec(format!(
                "net is {}→{}, state needs {}→{n}",
                net.input_dim(),
                net.output_dim(),
                n + usize::from(arch.time_input)
            )));
        }
        Ok(Self {
            net,
            arch,
            m,
            solver,
            time_map: TimeMap::identity(),
        })
    }

    /// Full state size `m + p`.
    pub fn state_dim(&self) -> usize {
        self.m + self.arch.augment
    }

    fn net_input(&self, t: T, z: &[T]) -> Matrix<T> {
        let mut col = z.to_vec();
        if self.arch.time_input {
            col.push(t);
        }
        Matrix::from_col_major(col.len(), 1, col)
    }

    /// `F̂(t, z)` on the full state.
    pub fn rhs(&self, t: T, z: &[T], out: &mut [T]) -> Result<(), OdeError> {
        let y = self
            .net
            .predict(&self.net_input(t, z))
            .map_err(|e| OdeError::Rhs(e.to_string()))?;
        out.copy_from_slice(y.as_slice());
        Ok(())
    }

    fn augmented(&self, z0: &[T]) -> Result<Vec<T>, NodeError> {
        if z0.len() != self.m {
            return Err(NodeError::Data(format!(
                "initial state has {} entries, model latent dimension is {}",
                z0.len(),
                self.m
            )));
        }
        let mut z = z0.to_vec();
        z.resize(self.state_dim(), T::zero());
        Ok(z)
    }

    /// Solves from `z0` at `t0` (normalized units); full augmented states.
    pub fn ode_solve(
        &self,
        z0: &[T],
        t0: T,
        queries: &[T],
        solver: &SolverSpec,
    ) -> Result<Vec<Vec<T>>, NodeError> {
        let z = self.augmented(z0)?;
        Ok(ode::solve(|t, z, o| self.rhs(t, z, o), solver, t0, &z, queries)?.states)
    }

    /// Latent trajectory (first `m` components) on `data.times`, starting from
    /// `data`'s first column. Times are in normalized units.
    pub fn solve_like(
        &self,
        data: &LatentTrajectory<T>,
        solver: &SolverSpec,
    ) -> Result<Matrix<T>, NodeError> {
        self.check_data(data)?;
        let solver = solver.with_default_step(grid_step(&data.times));
        let states = self.ode_solve(data.z.col(0), data.times[0], &data.times, &solver)?;
        Ok(Matrix::from_fn(self.m, states.len(), |i, j| states[j][i]))
    }

    fn check_data(&self, data: &LatentTrajectory<T>) -> Result<(), NodeError> {
        if data.dim() != self.m {
            return Err(NodeError::Data(format!(
                "data has {} rows, model latent dimension is {}",
                data.dim(),
                self.m
            )));
        }
        if data.len() < 2 {
            return Err(NodeError::Data("need at least two observations".into()));
        }
        Ok(())
    }

    /// Predicts from `z0`, the latent state at `times[0]`, in original time units.
    pub fn predict(&self, z0: &[T], times: &[T]) -> Result<LatentTrajectory<T>, NodeError> {
        if times.is_empty() {
            return Err(NodeError::Data("no query times".into()));
        }
        let s: Vec<T> = times.iter().map(|&t| self.time_map.forward(t)).collect();
        let solver = self.solver.with_default_step(grid_step(&s));
        let states = self.ode_solve(z0, s[0], &s, &solver)?;
        let z = Matrix::from_fn(self.m, states.len(), |i, j| states[j][i]);
        Ok(LatentTrajectory {
            z,
            times: times.to_vec(),
            normalization: TimeNormalization::None,
        })
    }
}

/// Smallest spacing of a time grid.
fn grid_step<T: Real>(times: &[T]) -> f64 {
    times
        .windows(2)
        .map(|w| (w[1] - w[0]).abs().to_f64_lossless())
        .fold(f64::INFINITY, f64::min)
        .min(1.0)
}

fn mse_first_m<T: Real>(pred: &Matrix<T>, data: &Matrix<T>) -> T {
    let n = T::from_usize_lossy(pred.as_slice().len());
    pred.as_slice()
        .iter()
        .zip(data.as_slice())
        .map(|(&a, &b)| (a - b).powi(2))
        .sum::<T>()
        / n
}

/// Mean squared mismatch over all observation times and latent components.
pub fn trajectory_loss<T: Real>(
    model: &NodeModel<T>,
    data: &LatentTrajectory<T>,
    solver: &SolverSpec,
) -> Result<T, NodeError> {
    let pred = model.solve_like(data, solver)?;
    Ok(mse_first_m(&pred, &data.z))
}

/// Loss and parameter gradient.
pub fn gradient<T: Real>(
    model: &NodeModel<T>,
    data: &LatentTrajectory<T>,
    solver: &SolverSpec,
    mode: GradMode,
) -> Result<NodeGradient<T>, NodeError> {
    model.check_data(data)?;
    let solver = solver.with_default_step(grid_step(&data.times));
    match mode {
        GradMode::Discrete => discrete_gradient(model, data, &solver),
        GradMode::Adjoint => adjoint_gradient(model, data, &solver),
    }
}

fn jump<T: Real>(pred: &[T], obs: &[T], count: T) -> Vec<T> {
    let two = lit::<T>(2.0);
    obs.iter().zip(pred).map(|(&d, &p)| two * (p - d) / count).collect()
}

struct StepTape<T> {
    caches: [ForwardCache<T>; 4],
}

fn discrete_gradient<T: Real>(
    model: &NodeModel<T>,
    data: &LatentTrajectory<T>,
    solver: &SolverSpec,
) -> Result<NodeGradient<T>, NodeError> {
    let SolverSpec::Rk4 { h: Some(h) } = *solver else {
        return Err(NodeError::ModeSolver);
    };
    let h = lit::<T>(h);
    let t0 = data.times[0];
    let mut obs_step = Vec::with_capacity(data.len());
    for &t in &data.times {
        let p = (t - t0) / h;
        let r = p.round();
        if (p - r).abs() > lit::<T>(1e-9) * T::one().max(p.abs()) {
            return Err(NodeError::OffGrid(t.to_f64_lossless()));
        }
        obs_step.push(r.to_usize().unwrap_or(0));
    }
    let n = model.state_dim();
    let m = model.m;
    let net = &model.net;
    let half = lit::<T>(0.5);
    let steps = *obs_step.last().expect("non-empty");

    // Forward with a tape of stage caches.
    let mut z = model.augmented(data.z.col(0))?;
    let mut tapes: Vec<StepTape<T>> = Vec::with_capacity(steps);
    let mut states_at_step: Vec<Vec<T>> = vec![z.clone()];
    let stage = |t: T, u: &[T]| -> Result<(Vec<T>, ForwardCache<T>), NodeError> {
        let (y, c) = net.forward_infer(&model.net_input(t, u))?;
        Ok((y.into_vec(), c))
    };
    for j in 0..steps {
        let t = t0 + h * T::from_usize_lossy(j);
        let (k1, c1) = stage(t, &z)?;
        let u2: Vec<T> = (0..n).map(|i| z[i] + half * h * k1[i]).collect();
        let (k2, c2) = stage(t + half * h, &u2)?;
        let u3: Vec<T> = (0..n).map(|i| z[i] + half * h * k2[i]).collect();
        let (k3, c3) = stage(t + half * h, &u3)?;
        let u4: Vec<T> = (0..n).map(|i| z[i] + h * k3[i]).collect();
        let (k4, c4) = stage(t + h, &u4)?;
        let sixth = h / lit::<T>(6.0);
        let two = lit::<T>(2.0);
        for i in 0..n {
            z[i] += sixth * (k1[i] + two * k2[i] + two * k3[i] + k4[i]);
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(OdeError::NonFinite((t + h).to_f64_lossless()).into());
        }
        tapes.push(StepTape {
            caches: [c1, c2, c3, c4],
        });
        states_at_step.push(z.clone());
    }

    let count = T::from_usize_lossy(m * data.len());
    let mut loss = T::zero();
    // Per-step output gradients from the observations.
    let mut obs_grad: Vec<Option<Vec<T>>> = vec![None; steps + 1];
    for (k, &s) in obs_step.iter().enumerate() {
        let pred = &states_at_step[s][..m];
        let obs = data.z.col(k);
        loss += pred
            .iter()
            .zip(obs)
            .map(|(&a, &b)| (a - b).powi(2))
            .sum::<T>();
        let g = jump(pred, obs, count);
        match &mut obs_grad[s] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
            slot => *slot = Some(g),
        }
    }
    loss /= count;

    let mut gp = vec![T::zero(); net.n_params()];
    let mut gz = vec![T::zero(); n];
    let back = |c: &ForwardCache<T>, g: &[T], gp: &mut [T]| -> Result<Vec<T>, NodeError> {
        let gi = net.backward_into(c, &Matrix::from_col_major(n, 1, g.to_vec()), gp)?;
        Ok(gi.as_slice()[..n].to_vec())
    };
    for j in (0..steps).rev() {
        if let Some(g) = &obs_grad[j + 1] {
            for i in 0..m {
                gz[i] += g[i];
            }
        }
        let c = &tapes[j].caches;
        let h6 = h / lit::<T>(6.0);
        let h3 = h / lit::<T>(3.0);
        let mut dk1: Vec<T> = gz.iter().map(|&g| h6 * g).collect();
        let mut dk2: Vec<T> = gz.iter().map(|&g| h3 * g).collect();
        let mut dk3: Vec<T> = gz.iter().map(|&g| h3 * g).collect();
        let dk4: Vec<T> = gz.iter().map(|&g| h6 * g).collect();
        let mut nz = gz.clone();
        let gu = back(&c[3], &dk4, &mut gp)?;
        for i in 0..n {
            nz[i] += gu[i];
            dk3[i] += h * gu[i];
        }
        let gu = back(&c[2], &dk3, &mut gp)?;
        for i in 0..n {
            nz[i] += gu[i];
            dk2[i] += half * h * gu[i];
        }
        let gu = back(&c[1], &dk2, &mut gp)?;
        for i in 0..n {
            nz[i] += gu[i];
            dk1[i] += half * h * gu[i];
        }
        let gu = back(&c[0], &dk1, &mut gp)?;
        for i in 0..n {
            nz[i] += gu[i];
        }
        gz = nz;
    }
    if gp.iter().any(|v| !v.is_finite()) {
        return Err(NetError::NonFinite("parameter gradient".into()).into());
    }
    Ok(NodeGradient {
        loss,
        params: gp,
        dt0: None,
    })
}

fn adjoint_gradient<T: Real>(
    model: &NodeModel<T>,
    data: &LatentTrajectory<T>,
    solver: &SolverSpec,
) -> Result<NodeGradient<T>, NodeError> {
    let n = model.state_dim();
    let m = model.m;
    let np = model.net.n_params();
    let mm = data.len();
    let states = model.ode_solve(data.z.col(0), data.times[0], &data.times, solver)?;
    let count = T::from_usize_lossy(m * mm);
    let mut loss = T::zero();
    for (k, s) in states.iter().enumerate() {
        loss += s[..m]
            .iter()
            .zip(data.z.col(k))
            .map(|(&a, &b)| (a - b).powi(2))
            .sum::<T>();
    }
    loss /= count;

    let aug_rhs = |t: T, s: &[T], out: &mut [T]| -> Result<(), OdeError> {
        let err = |e: NetError| OdeError::Rhs(e.to_string());
        let (y, cache) = model.net.forward_infer(&model.net_input(t, &s[..n])).map_err(err)?;
        let a = Matrix::from_col_major(n, 1, s[n..2 * n].to_vec());
        let tail = &mut out[2 * n..];
        tail.iter_mut().for_each(|o| *o = T::zero());
        let gi = model.net.backward_into(&cache, &a, tail).map_err(err)?;
        tail.iter_mut().for_each(|o| *o = -*o);
        out[..n].copy_from_slice(y.as_slice());
        for i in 0..n {
            out[n + i] = -gi.as_slice()[i];
        }
        Ok(())
    };

    let mut s = vec![T::zero(); 2 * n + np];
    let last = mm - 1;
    s[..n].copy_from_slice(&states[last]);
    for (i, v) in jump(&states[last][..m], data.z.col(last), count).into_iter().enumerate() {
        s[n + i] = v;
    }
    for k in (0..last).rev() {
        let sol = ode::solve(aug_rhs, solver, data.times[k + 1], &s, &[data.times[k]])?;
        s = sol.states.into_iter().next().expect("one query");
        s[..n].copy_from_slice(&states[k]);
        for (i, v) in jump(&states[k][..m], data.z.col(k), count).into_iter().enumerate() {
            s[n + i] += v;
        }
    }
    let mut f0 = vec![T::zero(); n];
    model.rhs(data.times[0], &states[0], &mut f0)?;
    let dt0 = -(0..n).map(|i| s[n + i] * f0[i]).sum::<T>();
    Ok(NodeGradient {
        loss,
        params: s[2 * n..].to_vec(),
        dt0: Some(dt0),
    })
}

fn default_train_solver() -> SolverSpec {
    SolverSpec::Rk4 { h: None }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeTrainConfig {
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub grad_mode: GradMode,
    /// Solver used inside the training loss (rk4 on the data grid by default).
    #[serde(default = "default_train_solver")]
    pub solver: SolverSpec,
    /// Map training times onto `[0, 1]` before fitting.
    #[serde(default = "default_true")]
    pub normalize_times: bool,
}

/// Trains in place on `data` (original time units). The loss in each
/// history row is evaluated before that epoch's update.
pub fn train_node<T: Real>(
    model: &mut NodeModel<T>,
    data: &LatentTrajectory<T>,
    cfg: &NodeTrainConfig,
) -> Result<Vec<LossRecord>, NodeError> {
    model.check_data(data)?;
    let (times, map) = if cfg.normalize_times {
        normalize_times(&data.times)?
    } else {
        (data.times.clone(), TimeMap::identity())
    };
    model.time_map = map;
    let data = LatentTrajectory {
        z: data.z.clone(),
        times,
        normalization: if cfg.normalize_times {
            TimeNormalization::UnitInterval
        } else {
            data.normalization
        },
    };
    let mut opt = OptimizerState::new(cfg.optimizer, model.net.n_params())?;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let g = match gradient(model, &data, &cfg.solver, cfg.grad_mode) {
            Ok(g) => g,
            Err(NodeError::Ode(OdeError::NonFinite(_))) => {
                return Err(NodeError::Diverged { epoch, history })
            }
            Err(e) => return Err(e),
        };
        if !g.loss.is_finite() {
            return Err(NodeError::Diverged { epoch, history });
        }
        let loss = g.loss.to_f64_lossless();
        history.push(LossRecord {
            epoch,
            loss,
            lr: opt.lr(epoch),
        });
        let mut p = model.net.params();
        opt.step(&mut p, &g.params, epoch)?;
        if p.iter().any(|v| !v.is_finite()) {
            return Err(NodeError::Diverged {
                epoch: epoch + 1,
                history,
            });
        }
        model.net.set_params(&p)?;
        opt.observe(loss);
    }
    Ok(history)
}

#[derive(Serialize, Deserialize)]
struct NodeMeta {
    kind: String,
    arch: NodeArch,
    m: usize,
    solver: SolverSpec,
    time_map: TimeMap,
}

pub fn encode_node<T: Real>(model: &NodeModel<T>) -> Vec<u8> {
    let meta = NodeMeta {
        kind: "node".into(),
        arch: model.arch.clone(),
        m: model.m,
        solver: model.solver,
        time_map: model.time_map,
    };
    encode_checkpoint(&model.net, serde_json::to_value(meta).expect("meta serializes"))
}

pub fn decode_node<T: Real>(bytes: &[u8]) -> Result<NodeModel<T>, NodeError> {
    let (net, meta) = decode_checkpoint(bytes)?;
    let meta: NodeMeta =
        serde_json::from_value(meta).map_err(|e| NodeError::Checkpoint(e.to_string()))?;
    if meta.kind != "node" {
        return Err(NodeError::Checkpoint(format!("expected a node checkpoint, got {}", meta.kind)));
    }
    let mut model = NodeModel::from_net(net, meta.arch, meta.m, meta.solver)?;
    model.time_map = meta.time_map;
    Ok(model)
}

pub fn save_node<T: Real>(model: &NodeModel<T>, path: impl AsRef<Path>) -> Result<(), NodeError> {
    std::fs::write(path, encode_node(model)).map_err(|e| NodeError::Checkpoint(e.to_string()))
}

pub fn load_node<T: Real>(path: impl AsRef<Path>) -> Result<NodeModel<T>, NodeError> {
    decode_node(&std::fs::read(path).map_err(|e| NodeError::Checkpoint(e.to_string()))?)
}
