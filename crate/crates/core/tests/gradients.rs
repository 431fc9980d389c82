mod common;

use nirom_core::neuralnet::Activation;
use nirom_core::node::{gradient, GradMode};
use nirom_core::ode::SolverSpec;

const ACTIVATIONS: [Activation; 5] = [
    Activation::Linear,
    Activation::Relu,
    Activation::Elu,
    Activation::Tanh,
    Activation::Sigmoid,
];

#[test]
fn mlp_gradients_match_finite_differences() {
    for act in ACTIVATIONS {
        for bn in [false, true] {
            for seed in 0..3 {
                let e = common::mlp_fd_error(act, bn, seed);
                assert!(e < 1e-5, "{act:?} bn={bn} seed={seed}: {e:e}");
            }
        }
    }
}

#[test]
fn node_discrete_gradient_matches_finite_differences() {
    for seed in 0..3 {
        let e = common::node_discrete_fd_error(seed);
        assert!(e < 1e-6, "seed {seed}: {e:e}");
    }
}

#[test]
fn node_adjoint_agrees_with_discrete() {
    for seed in 0..3 {
        let e = common::node_adjoint_vs_discrete(seed);
        assert!(e < 1e-4, "seed {seed}: {e:e}");
    }
}

#[test]
fn adjoint_with_rk4_backward_also_agrees() {
    let (model, data) = common::tiny_node(5);
    let s = SolverSpec::rk4(0.01);
    let gd = gradient(&model, &data, &s, GradMode::Discrete).unwrap();
    let ga = gradient(&model, &data, &s, GradMode::Adjoint).unwrap();
    for (a, b) in gd.params.iter().zip(&ga.params) {
        assert!((a - b).abs() <= 1e-4 * a.abs().max(1e-6), "{a} vs {b}");
    }
    assert!(ga.dt0.unwrap().is_finite());
}
