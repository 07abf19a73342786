mod common;

use common::*;
use contdepth::adjoint::{adjoint_backward, integrate_with_adjoint, retained};
use contdepth::field::ControlSignal;
use contdepth::model::{Arch, GradMode, Model, ModelConfig, TokenBatch};
use contdepth::solvers::SolverConfig;
use contdepth::Tensor;
use proptest::prelude::*;

fn tiny() -> ModelConfig {
    ModelConfig {
        arch: Arch::Hybrid,
        n_layers: 4,
        d_model: 8,
        n_heads: 2,
        vocab_size: 11,
        max_seq_len: 6,
        ode_replaces: (1, 3),
        control_dim: 1,
        solver: SolverConfig::euler(4),
    }
}

fn batch() -> (TokenBatch, Vec<Option<usize>>) {
    let b = TokenBatch::new(vec![1, 4, 2, 9, 0, 3, 3, 7, 10, 5], 2, 5).unwrap();
    let t = vec![Some(4), Some(2), Some(9), Some(0), None, Some(3), Some(7), Some(10), Some(5), Some(1)];
    (b, t)
}

#[test]
fn adjoint_matches_unrolled_euler_backprop() {
    for seed in [1, 2, 3] {
        let (field, h0, cot) = small_instance(seed);
        for n in [1, 4, 16] {
            let a = adjoint_grads(&field, &h0, &cot, &SolverConfig::euler(n));
            let b = unrolled_euler_grads(&field, &h0, &cot, n);
            let err = worst_rel_err(&a, &b);
            assert!(err < 1e-6, "seed {seed} n {n}: {err:e}");
        }
    }
}

#[test]
fn adjoint_matches_finite_differences() {
    let (field, h0, cot) = small_instance(5);
    let solver = SolverConfig::euler(4);
    let a = adjoint_grads(&field, &h0, &cot, &solver);
    let fd = finite_difference_grads(&field, &h0, &cot, &solver, 1e-6);
    assert!(worst_rel_err(&a, &fd) < 1e-4, "{:e}", worst_rel_err(&a, &fd));
}

#[test]
fn continuous_adjoint_matches_finite_differences_at_tight_tolerance() {
    let (field, h0, cot) = small_instance(9);
    let solver = SolverConfig::dopri5(1e-10, 1e-12);
    let a = adjoint_grads(&field, &h0, &cot, &solver);
    let fd = finite_difference_grads(&field, &h0, &cot, &solver, 1e-5);
    assert!(worst_rel_err(&a, &fd) < 1e-4, "{:e}", worst_rel_err(&a, &fd));
}

#[test]
fn hybrid_model_gradients_match_finite_differences() {
    let (b, t) = batch();
    let u = ControlSignal::new(vec![0.6]);
    let solver = SolverConfig::euler(4);
    for mode in [GradMode::Adjoint, GradMode::Unrolled] {
        let mut m = Model::<f64>::new(tiny(), 3).unwrap();
        m.set_alpha(0.5).unwrap();
        m.loss_and_grads(&b, &t, Some(&u), &solver, mode).unwrap();
        let grads: Vec<(String, Tensor<f64>)> = m.params.iter().map(|p| (p.name.clone(), p.grad.clone())).collect();
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        for (name, g) in &grads {
            let n = g.len();
            for j in [0, n / 2, n - 1] {
                let orig = m.params.value(name).unwrap().clone();
                let shifted = |d: f64| {
                    let mut v = orig.clone();
                    v.data_mut()[j] += d;
                    let mut p = m.clone();
                    p.params.set_value(name, v).unwrap();
                    p.loss(&b, &t, Some(&u), &solver).unwrap()
                };
                let eps = 1e-5;
                analytic.push(g.data()[j]);
                numeric.push((shifted(eps) - shifted(-eps)) / (2.0 * eps));
            }
        }
        let err = rel_err(&analytic, &numeric);
        assert!(err < 1e-3, "{mode:?}: {err:e}");
    }
}

#[test]
fn retained_states_do_not_grow_with_steps() {
    let (b, t) = batch();
    let u = ControlSignal::new(vec![1.0f32]);
    let mut peaks = Vec::new();
    let mut lens = Vec::new();
    for n in [1, 4, 64] {
        let mut m = Model::<f32>::new(tiny(), 7).unwrap();
        retained::reset_peak();
        let base = retained::live();
        let out = m.loss_and_grads(&b, &t, Some(&u), &SolverConfig::euler(n), GradMode::Adjoint).unwrap();
        peaks.push(retained::peak() - base);
        lens.push(out.tape_len);
        assert_eq!(retained::live(), base);
    }
    assert!(peaks.windows(2).all(|w| w[0] == w[1]), "{peaks:?}");
    assert!(lens.windows(2).all(|w| w[0] == w[1]), "{lens:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn adjoint_is_linear_in_the_cotangent(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let (field, h0, c1) = small_instance(seed);
        let (_, _, c2) = small_instance(seed + 17);
        let solver = SolverConfig::euler(3);
        let mut combo = c1.scale(a);
        combo.axpy(b, &c2).unwrap();
        let g1 = adjoint_grads(&field, &h0, &c1, &solver);
        let g2 = adjoint_grads(&field, &h0, &c2, &solver);
        let g = adjoint_grads(&field, &h0, &combo, &solver);
        let expect: Vec<f64> = g1.theta.iter().zip(&g2.theta).map(|(x, y)| a * x + b * y).collect();
        let scale = expect.iter().map(|x| x.abs()).fold(1.0, f64::max);
        for (x, y) in g.theta.iter().zip(&expect) {
            prop_assert!((x - y).abs() < 1e-10 * scale);
        }
    }

    #[test]
    fn zero_alpha_field_passes_everything_through(seed in 0u64..1000, n in 1usize..9) {
        let (mut field, h0, cot) = small_instance(seed);
        field.field.alpha = 0.0;
        let (res, handle) = integrate_with_adjoint(field.clone(), &h0, &SolverConfig::euler(n)).unwrap();
        prop_assert_eq!(&res.final_state, &h0);
        let g = adjoint_backward(handle, &cot).unwrap();
        prop_assert_eq!(&g.h0, &cot);
        prop_assert!(g.u.iter().all(|&x| x == 0.0));
        let slot = g.theta.len() - 1;
        prop_assert!(g.theta[..slot].iter().all(|&x| x == 0.0));
    }
}
