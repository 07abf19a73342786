//! The control-conditioned vector field `alpha * MLP([H, u, tau])`.
//!
//! The control vector and the depth are appended as extra channels to every
//! position of the hidden state before a two-layer GELU MLP, so the
//! derivative is conditioned on `u` at every depth. The learned scalar
//! `alpha` multiplies the whole output.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::adjoint::{AdjointField, FieldVjp};
use crate::autodiff::{vjp, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const ALPHA_INIT: f64 = 0.1;

/// Low-dimensional steering input, broadcast over batch and sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSignal<T>(Tensor<T>);

impl<T: Scalar> ControlSignal<T> {
    pub fn new(values: Vec<T>) -> Self {
        ControlSignal(Tensor::vector(values))
    }

    /// One-dimensional control.
    pub fn scalar(u: f64) -> Self {
        Self::new(vec![T::of(u)])
    }

    pub fn zeros(dim: usize) -> Self {
        Self::new(vec![T::zero(); dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }
}

/// Tape handles for the field parameters.
#[derive(Debug, Clone, Copy)]
pub struct FieldVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub alpha: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlledVectorField<T> {
    pub alpha: T,
    /// `[(D + c + 1), D_hidden]`
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    /// `[D_hidden, D]`
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
    pub d_model: usize,
    pub control_dim: usize,
    pub hidden_dim: usize,
}

/// Fan-in scaled Gaussian matrix.
pub(crate) fn gaussian<T: Scalar>(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    let data = (0..rows * cols).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::new(&[rows, cols], data).expect("consistent shape")
}

impl<T: Scalar> ControlledVectorField<T> {
    pub fn new(d_model: usize, control_dim: usize, hidden_dim: usize, rng: &mut impl Rng) -> Self {
        let fan_in = d_model + control_dim + 1;
        ControlledVectorField {
            alpha: T::of(ALPHA_INIT),
            w1: gaussian(rng, fan_in, hidden_dim, 1.0 / (fan_in as f64).sqrt()),
            b1: Tensor::zeros(&[hidden_dim]),
            w2: gaussian(rng, hidden_dim, d_model, 1.0 / (hidden_dim as f64).sqrt()),
            b2: Tensor::zeros(&[d_model]),
            d_model,
            control_dim,
            hidden_dim,
        }
    }

    /// Width of the MLP input: state, control, depth.
    pub fn input_dim(&self) -> usize {
        self.d_model + self.control_dim + 1
    }

    /// Parameter tensors in flat order `w1, b1, w2, b2, alpha`.
    pub fn param_tensors(&self) -> [Tensor<T>; 5] {
        [
            self.w1.clone(),
            self.b1.clone(),
            self.w2.clone(),
            self.b2.clone(),
            Tensor::scalar(self.alpha),
        ]
    }

    pub fn n_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len() + 1
    }

    pub fn from_tensors(parts: [Tensor<T>; 5], control_dim: usize) -> Result<Self> {
        let [w1, b1, w2, b2, alpha] = parts;
        let (hidden_dim, d_model) = match (w2.shape(), w1.shape()) {
            ([h, d], [i, h2]) if h == h2 && *i == d + control_dim + 1 => (*h, *d),
            _ => {
                return Err(Error::contract(format!(
                    "inconsistent field weights w1 {:?} w2 {:?} for control_dim {control_dim}",
                    w1.shape(),
                    w2.shape()
                )))
            }
        };
        if b1.shape() != [hidden_dim] || b2.shape() != [d_model] || alpha.len() != 1 {
            return Err(Error::contract("inconsistent field bias or alpha shapes"));
        }
        Ok(ControlledVectorField {
            alpha: alpha.item(),
            w1,
            b1,
            w2,
            b2,
            d_model,
            control_dim,
            hidden_dim,
        })
    }

    /// Put the parameters on `tape` as leaves.
    pub fn leaves(&self, tape: &mut Tape<T>) -> FieldVars {
        let [w1, b1, w2, b2, alpha] = self.param_tensors().map(|t| tape.leaf(t));
        FieldVars {
            w1,
            b1,
            w2,
            b2,
            alpha,
        }
    }

    pub fn check_inputs(&self, h: &[usize], u: &ControlSignal<T>) -> Result<()> {
        if u.dim() != self.control_dim {
            return Err(Error::contract(format!(
                "control signal has {} components, field expects {}",
                u.dim(),
                self.control_dim
            )));
        }
        if h.last() != Some(&self.d_model) {
            return Err(Error::ShapeMismatch {
                op: "eval_field",
                lhs: h.to_vec(),
                rhs: vec![self.d_model],
            });
        }
        Ok(())
    }

    /// Evaluate `alpha * F(H, tau, u)`.
    pub fn eval(&self, h: &Tensor<T>, tau: f64, u: &ControlSignal<T>) -> Result<Tensor<T>> {
        self.check_inputs(h.shape(), u)?;
        let mut tape = Tape::new();
        let vars = self.leaves(&mut tape);
        let hv = tape.leaf(h.clone());
        let uv = tape.leaf(u.tensor().clone());
        let out = eval_on_tape(&mut tape, vars, hv, tau, uv)?;
        Ok(tape.value(out).clone())
    }

    pub fn bind(self, u: ControlSignal<T>) -> Result<BoundField<T>> {
        if u.dim() != self.control_dim {
            return Err(Error::contract(format!(
                "control signal has {} components, field expects {}",
                u.dim(),
                self.control_dim
            )));
        }
        Ok(BoundField { field: self, u })
    }
}

/// `alpha * (gelu([h, u, tau] · W1 + b1) · W2 + b2)` recorded on `tape`.
pub fn eval_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    vars: FieldVars,
    h: Var,
    tau: f64,
    u: Var,
) -> Result<Var> {
    let tau_channel = tape.leaf(Tensor::vector(vec![T::of(tau)]));
    let x = tape.concat_broadcast(h, &[u, tau_channel])?;
    let a = tape.matmul(x, vars.w1)?;
    let a = tape.add_broadcast(a, vars.b1)?;
    let a = tape.gelu(a);
    let o = tape.matmul(a, vars.w2)?;
    let o = tape.add_broadcast(o, vars.b2)?;
    tape.mul_scalar(o, vars.alpha)
}

/// Free-function form of [`ControlledVectorField::eval`].
pub fn eval_field<T: Scalar>(
    field: &ControlledVectorField<T>,
    h: &Tensor<T>,
    tau: f64,
    u: &ControlSignal<T>,
) -> Result<Tensor<T>> {
    field.eval(h, tau, u)
}

/// A field with its control signal fixed for one integration.
#[derive(Debug, Clone)]
pub struct BoundField<T> {
    pub field: ControlledVectorField<T>,
    pub u: ControlSignal<T>,
}

impl<T: Scalar> AdjointField<T> for BoundField<T> {
    fn eval(&self, h: &Tensor<T>, tau: f64) -> Result<Tensor<T>> {
        self.field.eval(h, tau, &self.u)
    }

    fn vjp(&self, h: &Tensor<T>, tau: f64, cotangent: &Tensor<T>) -> Result<FieldVjp<T>> {
        let f = &self.field;
        let mut inputs: Vec<Tensor<T>> = f.param_tensors().into();
        inputs.push(self.u.tensor().clone());
        inputs.push(h.clone());
        let mut value = None;
        let grads = vjp(
            |tape, v| {
                let vars = FieldVars {
                    w1: v[0],
                    b1: v[1],
                    w2: v[2],
                    b2: v[3],
                    alpha: v[4],
                };
                let out = eval_on_tape(tape, vars, v[6], tau, v[5])?;
                value = Some(tape.value(out).clone());
                Ok(out)
            },
            &inputs,
            cotangent,
        )?;
        let params: Vec<T> = grads[..5]
            .iter()
            .flat_map(|g| g.data().iter().copied())
            .collect();
        Ok(FieldVjp {
            value: value.expect("forward ran"),
            state: grads[6].clone(),
            params,
            control: grads[5].data().to_vec(),
        })
    }

    fn n_params(&self) -> usize {
        self.field.n_params()
    }

    fn control_dim(&self) -> usize {
        self.field.control_dim
    }

    fn alpha_slot(&self) -> Option<usize> {
        Some(self.field.n_params() - 1)
    }
}

impl<T: Scalar> BoundField<T> {
    /// Split a flat parameter gradient into `w1, b1, w2, b2, alpha` tensors.
    pub fn unflatten(&self, flat: &[T]) -> Result<[Tensor<T>; 5]> {
        if flat.len() != self.field.n_params() {
            return Err(Error::contract("flat gradient length does not match field"));
        }
        let f = &self.field;
        let shapes = [
            f.w1.shape().to_vec(),
            f.b1.shape().to_vec(),
            f.w2.shape().to_vec(),
            f.b2.shape().to_vec(),
            Vec::new(),
        ];
        let mut offset = 0;
        let mut out = Vec::with_capacity(5);
        for s in shapes {
            let n: usize = s.iter().product();
            out.push(Tensor::new(&s, flat[offset..offset + n].to_vec())?);
            offset += n;
        }
        Ok(out.try_into().expect("five tensors"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solvers::{integrate, SolverConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn field(seed: u64) -> ControlledVectorField<f64> {
        ControlledVectorField::new(4, 1, 16, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn state(seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[2, 3, 4], (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn alpha_starts_at_one_tenth() {
        assert_eq!(field(0).alpha, 0.1);
        assert_eq!(field(0).input_dim(), 6);
    }

    #[test]
    fn zero_alpha_gives_zero_field() {
        let mut f = field(1);
        f.alpha = 0.0;
        let out = f.eval(&state(2), 0.3, &ControlSignal::scalar(1.0)).unwrap();
        assert_eq!(out.shape(), &[2, 3, 4]);
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn wrong_control_dim_is_rejected() {
        let f = field(1);
        let u = ControlSignal::new(vec![1.0, 2.0]);
        assert!(matches!(f.eval(&state(2), 0.0, &u), Err(Error::Contract(_))));
    }

    #[test]
    fn constant_field_integrates_exactly() {
        let mut f = field(3);
        f.w2 = Tensor::zeros(f.w2.shape());
        f.b2 = Tensor::full(&[4], 1.0);
        let u = ControlSignal::scalar(-1.0);
        let h0 = state(4);
        let expected = h0.map(|x| x + 0.1);
        for cfg in [
            SolverConfig::euler(4),
            SolverConfig::rk4(4),
            SolverConfig::dopri5(1e-6, 1e-9),
            SolverConfig::adaptive_heun(1e-6, 1e-9),
        ] {
            let r = integrate(|h: &Tensor<f64>, t| f.eval(h, t, &u), &h0, (0.0, 1.0), &cfg).unwrap();
            for (a, b) in r.final_state.data().iter().zip(expected.data()) {
                assert!((a - b).abs() < 1e-14, "{}: {a} vs {b}", cfg.method);
            }
        }
    }

    #[test]
    fn control_path_carries_gradient() {
        let bound = field(5).bind(ControlSignal::scalar(0.5)).unwrap();
        let h = state(6);
        let v = bound.vjp(&h, 0.5, &Tensor::full(h.shape(), 1.0)).unwrap();
        assert!(v.control[0].abs() > 1e-8);
    }

    #[test]
    fn state_vjp_scales_linearly_with_alpha() {
        let f = field(7);
        let mut f2 = f.clone();
        f2.alpha = 2.0 * f.alpha;
        let h = state(8);
        let cot = state(9);
        let u = ControlSignal::scalar(1.0);
        let g1 = f.bind(u.clone()).unwrap().vjp(&h, 0.25, &cot).unwrap();
        let g2 = f2.bind(u).unwrap().vjp(&h, 0.25, &cot).unwrap();
        for (a, b) in g1.state.data().iter().zip(g2.state.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn effective_euler_step_with_initial_alpha() {
        let f = field(0);
        let dt = 1.0 / 4.0;
        assert!((f.alpha * dt - 0.025).abs() < 1e-15);
    }

    #[test]
    fn unflatten_round_trips() {
        let b = field(10).bind(ControlSignal::scalar(0.0)).unwrap();
        let flat: Vec<f64> = b
            .field
            .param_tensors()
            .iter()
            .flat_map(|t| t.data().to_vec())
            .collect();
        let parts = b.unflatten(&flat).unwrap();
        let again = ControlledVectorField::from_tensors(parts, 1).unwrap();
        assert_eq!(again, b.field);
    }
}
