//! Oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::DMatrix;
use nirom_core::neuralnet::{Activation, LayerSpec, Mlp, MlpSpec, Mode};
use nirom_core::node::{gradient, trajectory_loss, GradMode, HiddenLayer, NodeArch, NodeModel};
use nirom_core::ode::SolverSpec;
use nirom_core::{LatentTrajectory, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn to_na(m: &Matrix<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(m.nrows(), m.ncols(), m.as_slice())
}

/// Singular values from nalgebra's dense SVD, descending.
pub fn svd_oracle(m: &Matrix<f64>) -> Vec<f64> {
    let mut s: Vec<f64> = to_na(m).svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    s
}

pub fn random_matrix(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Matrix<f64> {
    Matrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0))
}

/// Max relative error of the analytic MLP gradient (parameters and inputs)
/// against central differences with step `eps`, on `L = Σ c ⊙ y`.
pub fn mlp_fd_error(act: Activation, batchnorm: bool, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = MlpSpec {
        input: 3,
        layers: vec![
            LayerSpec {
                batchnorm,
                ..LayerSpec::new(5, act)
            },
            LayerSpec {
                batchnorm,
                ..LayerSpec::new(4, act)
            },
            LayerSpec::new(2, act),
        ],
    };
    let mut net = Mlp::<f64>::new(spec, &mut rng).unwrap();
    // Non-zero biases keep relu pre-activations away from the kink.
    let p: Vec<f64> = (0..net.n_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
    net.set_params(&p).unwrap();
    let mode = if batchnorm { Mode::Train } else { Mode::Infer };
    let x = random_matrix(&mut rng, 3, 6);
    let c = random_matrix(&mut rng, 2, 6);
    let loss = |net: &Mlp<f64>, x: &Matrix<f64>| {
        let mut n = net.clone();
        let (y, _) = n.forward(x, mode).unwrap();
        y.as_slice().iter().zip(c.as_slice()).map(|(a, b)| a * b).sum::<f64>()
    };
    let mut work = net.clone();
    let (_, cache) = work.forward(&x, mode).unwrap();
    let g = work.backward(&cache, &c).unwrap();

    let eps = 1e-5;
    let mut worst = 0.0f64;
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-8);
    let p0 = net.params();
    for k in 0..p0.len() {
        if g.params[k].abs() <= 1e-8 {
            continue;
        }
        let mut n = net.clone();
        let mut p = p0.clone();
        p[k] += eps;
        n.set_params(&p).unwrap();
        let lp = loss(&n, &x);
        p[k] -= 2.0 * eps;
        n.set_params(&p).unwrap();
        let lm = loss(&n, &x);
        worst = worst.max(rel(g.params[k], (lp - lm) / (2.0 * eps)));
    }
    for k in 0..x.as_slice().len() {
        if g.input.as_slice()[k].abs() <= 1e-8 {
            continue;
        }
        let mut xp = x.clone();
        xp.as_mut_slice()[k] += eps;
        let lp = loss(&net, &xp);
        xp.as_mut_slice()[k] -= 2.0 * eps;
        let lm = loss(&net, &xp);
        worst = worst.max(rel(g.input.as_slice()[k], (lp - lm) / (2.0 * eps)));
    }
    worst
}

/// The tiny NODE of the gradient suite: m = 1, one tanh hidden unit.
pub fn tiny_node(seed: u64) -> (NodeModel<f64>, LatentTrajectory<f64>) {
    let arch = NodeArch {
        hidden: vec![HiddenLayer {
            units: 1,
            activation: Activation::Tanh,
        }],
        augment: 0,
        time_input: false,
        bias: true,
    };
    let model = NodeModel::new(arch, 1, SolverSpec::rk4(0.01), seed).unwrap();
    let times: Vec<f64> = (0..=10).map(|k| k as f64 * 0.1).collect();
    let z = Matrix::from_fn(1, times.len(), |_, j| (1.3 * times[j]).cos() + 0.2 * times[j]);
    (model, LatentTrajectory::new(z, times).unwrap())
}

/// Max relative error of the discrete-mode gradient against central
/// differences of the rk4 loss.
pub fn node_discrete_fd_error(seed: u64) -> f64 {
    let (model, data) = tiny_node(seed);
    let solver = SolverSpec::rk4(0.01);
    let g = gradient(&model, &data, &solver, GradMode::Discrete).unwrap();
    let p0 = model.net.params();
    let eps = 1e-5;
    let mut worst = 0.0f64;
    for k in 0..p0.len() {
        let mut m2 = model.clone();
        let mut p = p0.clone();
        p[k] += eps;
        m2.net.set_params(&p).unwrap();
        let lp = trajectory_loss(&m2, &data, &solver).unwrap();
        p[k] -= 2.0 * eps;
        m2.net.set_params(&p).unwrap();
        let lm = trajectory_loss(&m2, &data, &solver).unwrap();
        let fd = (lp - lm) / (2.0 * eps);
        worst = worst.max((g.params[k] - fd).abs() / g.params[k].abs().max(fd.abs()).max(1e-12));
    }
    worst
}

/// Relative difference `‖g_adj − g_disc‖ / ‖g_disc‖` at rtol = atol = 1e-8.
pub fn node_adjoint_vs_discrete(seed: u64) -> f64 {
    let (model, data) = tiny_node(seed);
    let gd = gradient(&model, &data, &SolverSpec::rk4(0.01), GradMode::Discrete).unwrap();
    let ga = gradient(&model, &data, &SolverSpec::dopri5(1e-8, 1e-8), GradMode::Adjoint).unwrap();
    let num: f64 = gd.params.iter().zip(&ga.params).map(|(a, b)| (a - b).powi(2)).sum();
    let den: f64 = gd.params.iter().map(|a| a * a).sum();
    (num / den).sqrt()
}

/// Observed order of rk4 on dz/dt = -z over [0, 1] under 4 step-halvings.
pub fn rk4_observed_orders() -> Vec<f64> {
    let exact = (-1.0f64).exp();
    let errs: Vec<f64> = (0..5)
        .map(|k| {
            let h = 0.1 / 2f64.powi(k);
            let s = nirom_core::ode::solve(
                |_t, z: &[f64], o: &mut [f64]| {
                    o[0] = -z[0];
                    Ok(())
                },
                &SolverSpec::rk4(h),
                0.0,
                &[1.0],
                &[1.0],
            )
            .unwrap();
            (s.states[0][0] - exact).abs()
        })
        .collect();
    errs.windows(2).map(|w| (w[0] / w[1]).log2()).collect()
}
