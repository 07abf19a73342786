#![allow(dead_code)]

use contdepth::adjoint::{adjoint_backward, integrate_with_adjoint, AdjointField};
use contdepth::autodiff::Tape;
use contdepth::field::{eval_on_tape, BoundField, ControlSignal, ControlledVectorField};
use contdepth::solvers::{integrate, SolverConfig};
use contdepth::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Gradients of `L = <cotangent, H(1)>` split by input.
#[derive(Debug, Clone)]
pub struct Grads {
    pub h0: Vec<f64>,
    /// `w1, b1, w2, b2` flattened, without alpha.
    pub theta: Vec<f64>,
    pub alpha: f64,
    pub u: Vec<f64>,
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| scale * rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Field with `hidden` units, alpha and control set explicitly.
pub fn random_field(seed: u64, d: usize, hidden: usize, alpha: f64, u: &[f64]) -> BoundField<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = ControlledVectorField::<f64>::new(d, u.len(), hidden, &mut rng);
    f.alpha = alpha;
    f.b1 = random_tensor(&mut rng, f.b1.shape(), 0.1);
    f.b2 = random_tensor(&mut rng, f.b2.shape(), 0.1);
    f.bind(ControlSignal::new(u.to_vec())).unwrap()
}

pub fn adjoint_grads(field: &BoundField<f64>, h0: &Tensor<f64>, cot: &Tensor<f64>, solver: &SolverConfig) -> Grads {
    let (_, handle) = integrate_with_adjoint(field.clone(), h0, solver).unwrap();
    let g = adjoint_backward(handle, cot).unwrap();
    let slot = field.alpha_slot().unwrap();
    Grads {
        h0: g.h0.to_f64_vec(),
        theta: g.theta[..slot].to_vec(),
        alpha: g.alpha.unwrap(),
        u: g.u,
    }
}

/// Backpropagation through an explicit Euler graph on the tape.
pub fn unrolled_euler_grads(field: &BoundField<f64>, h0: &Tensor<f64>, cot: &Tensor<f64>, n: usize) -> Grads {
    let mut tape = Tape::new();
    let vars = field.field.leaves(&mut tape);
    let u = tape.leaf(field.u.tensor().clone());
    let start = tape.leaf(h0.clone());
    let dt = 1.0 / n as f64;
    let mut h = start;
    for k in 0..n {
        let f = eval_on_tape(&mut tape, vars, h, k as f64 * dt, u).unwrap();
        let step = tape.scale(f, dt);
        h = tape.add(h, step).unwrap();
    }
    let c = tape.leaf(cot.clone());
    let prod = tape.mul(h, c).unwrap();
    let loss = tape.sum(prod);
    let grads = tape.backward(loss, Tensor::scalar(1.0)).unwrap();
    let flat = |v| grads.get(v).map(|t: &Tensor<f64>| t.to_f64_vec()).unwrap();
    let mut theta = flat(vars.w1);
    theta.extend(flat(vars.b1));
    theta.extend(flat(vars.w2));
    theta.extend(flat(vars.b2));
    Grads {
        h0: flat(start),
        theta,
        alpha: flat(vars.alpha)[0],
        u: flat(u),
    }
}

fn loss(field: &BoundField<f64>, h0: &Tensor<f64>, cot: &Tensor<f64>, solver: &SolverConfig) -> f64 {
    let r = integrate(|h: &Tensor<f64>, t| field.eval(h, t), h0, (0.0, 1.0), solver).unwrap();
    r.final_state.dot(cot).unwrap()
}

fn with_flat(field: &BoundField<f64>, i: usize, delta: f64) -> BoundField<f64> {
    let mut flat: Vec<f64> = field
        .field
        .param_tensors()
        .iter()
        .flat_map(|t| t.to_f64_vec())
        .collect();
    flat[i] += delta;
    let parts = field.unflatten(&flat).unwrap();
    let f = ControlledVectorField::from_tensors(parts, field.field.control_dim).unwrap();
    f.bind(field.u.clone()).unwrap()
}

/// Central differences of the same loss through `solver`.
pub fn finite_difference_grads(
    field: &BoundField<f64>,
    h0: &Tensor<f64>,
    cot: &Tensor<f64>,
    solver: &SolverConfig,
    eps: f64,
) -> Grads {
    let central = |plus: f64, minus: f64| (plus - minus) / (2.0 * eps);
    let h0_grad = (0..h0.len())
        .map(|i| {
            let mut p = h0.clone();
            p.data_mut()[i] += eps;
            let mut m = h0.clone();
            m.data_mut()[i] -= eps;
            central(loss(field, &p, cot, solver), loss(field, &m, cot, solver))
        })
        .collect();
    let n = field.field.n_params();
    let mut theta: Vec<f64> = (0..n)
        .map(|i| {
            central(
                loss(&with_flat(field, i, eps), h0, cot, solver),
                loss(&with_flat(field, i, -eps), h0, cot, solver),
            )
        })
        .collect();
    let alpha = theta.pop().unwrap();
    let u0 = field.u.tensor().to_f64_vec();
    let u = (0..u0.len())
        .map(|i| {
            let shifted = |d: f64| {
                let mut v = u0.clone();
                v[i] += d;
                let f = field.field.clone().bind(ControlSignal::new(v)).unwrap();
                loss(&f, h0, cot, solver)
            };
            central(shifted(eps), shifted(-eps))
        })
        .collect();
    Grads {
        h0: h0_grad,
        theta,
        alpha,
        u,
    }
}

/// `|a - b| / |b|` in the Euclidean norm.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

/// Worst relative error over the four gradient groups.
pub fn worst_rel_err(a: &Grads, b: &Grads) -> f64 {
    [
        rel_err(&a.h0, &b.h0),
        rel_err(&a.theta, &b.theta),
        rel_err(&[a.alpha], &[b.alpha]),
        rel_err(&a.u, &b.u),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

/// The small instance used for gradient agreement checks.
pub fn small_instance(seed: u64) -> (BoundField<f64>, Tensor<f64>, Tensor<f64>) {
    let field = random_field(seed, 4, 16, 0.7, &[0.8]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let h0 = random_tensor(&mut rng, &[1, 2, 4], 1.0);
    let cot = random_tensor(&mut rng, &[1, 2, 4], 1.0);
    (field, h0, cot)
}
