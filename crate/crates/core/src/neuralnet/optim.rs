//! First-order optimizers and learning-rate schedules.

use serde::{Deserialize, Serialize};

use super::NetError;
use crate::scalar::{lit, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Algorithm {
    Adam {
        #[serde(default = "d_beta1")]
        beta1: f64,
        #[serde(default = "d_beta2")]
        beta2: f64,
        #[serde(default = "d_eps")]
        eps: f64,
    },
    /// RMSProp with classical momentum on the scaled step.
    RmsProp {
        #[serde(default = "d_rho")]
        rho: f64,
        #[serde(default = "d_mu")]
        momentum: f64,
        #[serde(default = "d_eps")]
        eps: f64,
    },
}

fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-7
}
fn d_rho() -> f64 {
    0.9
}
fn d_mu() -> f64 {
    0.9
}

impl Algorithm {
    pub fn adam() -> Self {
        Algorithm::Adam {
            beta1: d_beta1(),
            beta2: d_beta2(),
            eps: d_eps(),
        }
    }

    pub fn rmsprop() -> Self {
        Algorithm::RmsProp {
            rho: d_rho(),
            momentum: d_mu(),
            eps: d_eps(),
        }
    }
}

fn d_min_delta() -> f64 {
    1e-8
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// `lr0 · rate^floor(epoch / interval)`.
    Staircase { interval: usize, rate: f64 },
    /// Multiply by `factor` after `patience` epochs without improvement.
    Plateau {
        patience: usize,
        factor: f64,
        #[serde(default = "d_min_delta")]
        min_delta: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub algorithm: Algorithm,
    pub lr: f64,
    pub schedule: Schedule,
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: &str| Err(NetError::Optimizer(m.to_string()));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        match self.algorithm {
            Algorithm::Adam { beta1, beta2, eps } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
                    return bad("adam needs 0 <= beta < 1 and eps > 0");
                }
            }
            Algorithm::RmsProp { rho, momentum, eps } => {
                if !(0.0..1.0).contains(&rho) || !(0.0..1.0).contains(&momentum) || eps <= 0.0 {
                    return bad("rmsprop needs 0 <= rho, momentum < 1 and eps > 0");
                }
            }
        }
        match self.schedule {
            Schedule::Constant => {}
            Schedule::Staircase { interval, rate } => {
                if interval == 0 || !(rate > 0.0 && rate.is_finite()) {
                    return bad("staircase needs interval >= 1 and rate > 0");
                }
            }
            Schedule::Plateau {
                patience,
                factor,
                min_delta,
            } => {
                if patience == 0 || !(factor > 0.0 && factor < 1.0) || min_delta < 0.0 {
                    return bad("plateau needs patience >= 1, 0 < factor < 1, min_delta >= 0");
                }
            }
        }
        Ok(())
    }
}

/// One row of a training history.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Writes `epoch,loss,lr` rows.
pub fn write_history_csv(history: &[LossRecord], path: &std::path::Path) -> Result<(), NetError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| NetError::Io(e.into()))?;
    for r in history {
        w.serialize(r).map_err(|e| NetError::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

/// Mutable optimizer state for a fixed parameter count.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    config: OptimizerConfig,
    t: u64,
    m: Vec<T>,
    v: Vec<T>,
    plateau_lr: f64,
    best: Option<f64>,
    wait: usize,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(config: OptimizerConfig, n_params: usize) -> Result<Self, NetError> {
        config.validate()?;
        Ok(Self {
            config,
            t: 0,
            m: vec![T::zero(); n_params],
            v: vec![T::zero(); n_params],
            plateau_lr: config.lr,
            best: None,
            wait: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Learning rate in effect for `epoch`.
    pub fn lr(&self, epoch: usize) -> f64 {
        match self.config.schedule {
            Schedule::Constant => self.config.lr,
            Schedule::Staircase { interval, rate } => {
                self.config.lr * rate.powi((epoch / interval) as i32)
            }
            Schedule::Plateau { .. } => self.plateau_lr,
        }
    }

    /// Applies one update in place.
    pub fn step(&mut self, params: &mut [T], grad: &[T], epoch: usize) -> Result<(), NetError> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(NetError::Dimension(format!(
                "optimizer sized for {} parameters, got {} / {}",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(NetError::NonFinite("gradient".into()));
        }
        let lr = lit::<T>(self.lr(epoch));
        self.t += 1;
        match self.config.algorithm {
            Algorithm::Adam { beta1, beta2, eps } => {
                let (b1, b2, e) = (lit::<T>(beta1), lit::<T>(beta2), lit::<T>(eps));
                let c1 = T::one() - b1.powi(self.t.min(i32::MAX as u64) as i32);
                let c2 = T::one() - b2.powi(self.t.min(i32::MAX as u64) as i32);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
                    self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    params[i] -= lr * mh / (vh.sqrt() + e);
                }
            }
            Algorithm::RmsProp { rho, momentum, eps } => {
                let (r, mu, e) = (lit::<T>(rho), lit::<T>(momentum), lit::<T>(eps));
                for i in 0..params.len() {
                    let g = grad[i];
                    self.v[i] = r * self.v[i] + (T::one() - r) * g * g;
                    self.m[i] = mu * self.m[i] + lr * g / (self.v[i] + e).sqrt();
                    params[i] -= self.m[i];
                }
            }
        }
        Ok(())
    }

    /// Reports the loss at the end of an epoch (drives the plateau schedule).
    pub fn observe(&mut self, loss: f64) {
        if let Schedule::Plateau {
            patience,
            factor,
            min_delta,
        } = self.config.schedule
        {
            match self.best {
                Some(b) if loss >= b - min_delta => {
                    self.wait += 1;
                    if self.wait >= patience {
                        self.plateau_lr *= factor;
                        self.wait = 0;
                    }
                }
                _ => {
                    self.best = Some(loss);
                    self.wait = 0;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(schedule: Schedule) -> OptimizerConfig {
        OptimizerConfig {
            algorithm: Algorithm::adam(),
            lr: 1e-3,
            schedule,
        }
    }

    #[test]
    fn staircase_quarter_after_two_drops() {
        let s = OptimizerState::<f64>::new(
            cfg(Schedule::Staircase {
                interval: 5000,
                rate: 0.5,
            }),
            1,
        )
        .unwrap();
        assert_eq!(s.lr(0), 1e-3);
        assert_eq!(s.lr(4999), 1e-3);
        assert_eq!(s.lr(5000), 5e-4);
        assert!((s.lr(10000) - 2.5e-4).abs() < 1e-18);
    }

    #[test]
    fn plateau_halves_every_patience_epochs_on_flat_loss() {
        let mut s = OptimizerState::<f64>::new(
            cfg(Schedule::Plateau {
                patience: 200,
                factor: 0.5,
                min_delta: 1e-8,
            }),
            1,
        )
        .unwrap();
        let mut lrs = Vec::new();
        for e in 0..=600 {
            lrs.push(s.lr(e));
            s.observe(1.0);
        }
        assert_eq!(lrs[200], 1e-3);
        assert_eq!(lrs[201], 5e-4);
        assert_eq!(lrs[400], 5e-4);
        assert_eq!(lrs[401], 2.5e-4);
        assert_eq!(lrs[600], 2.5e-4);
    }

    #[test]
    fn adam_first_step_is_lr_sign() {
        let mut s = OptimizerState::<f64>::new(cfg(Schedule::Constant), 2).unwrap();
        let mut p = vec![1.0, 1.0];
        s.step(&mut p, &[3.0, -0.5], 0).unwrap();
        assert!((p[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((p[1] - (1.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn both_minimize_a_quadratic() {
        for alg in [Algorithm::adam(), Algorithm::rmsprop()] {
            let c = OptimizerConfig {
                algorithm: alg,
                lr: 1e-2,
                schedule: Schedule::Constant,
            };
            let mut s = OptimizerState::<f64>::new(c, 1).unwrap();
            let mut p = vec![3.0];
            for e in 0..3000 {
                let g = [2.0 * (p[0] - 1.0)];
                s.step(&mut p, &g, e).unwrap();
            }
            assert!((p[0] - 1.0).abs() < 1e-2, "{alg:?} ended at {}", p[0]);
        }
    }

    #[test]
    fn rejects_bad_configs_and_gradients() {
        let mut c = cfg(Schedule::Constant);
        c.lr = 0.0;
        assert!(OptimizerState::<f64>::new(c, 1).is_err());
        let mut s = OptimizerState::<f64>::new(cfg(Schedule::Constant), 1).unwrap();
        assert!(s.step(&mut [0.0], &[f64::NAN], 0).is_err());
        assert!(s.step(&mut [0.0, 1.0], &[0.0, 1.0], 0).is_err());
    }
}
