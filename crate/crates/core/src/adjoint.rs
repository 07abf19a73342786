//! Constant-memory gradients through an ODE block.
//!
//! The forward pass keeps only the final state. The backward pass
//! re-integrates the state from `tau = 1` to `0` together with the adjoint
//! `a(tau) = dL/dH(tau)` and the parameter/control accumulators.
//!
//! * Euler grids use the exact discrete adjoint of the forward scheme. Each
//!   earlier grid state is recovered by solving `H_n + dt * f(H_n, t_n) = H_{n+1}`
//!   with a fixed-point iteration, so the gradients match backpropagation
//!   through the unrolled Euler graph to rounding.
//! * Other schemes integrate the continuous augmented system
//!   `dH/dtau = f`, `da/dtau = -a^T df/dH`, `dg/dtau = -a^T df/dtheta`
//!   backward with the forward method and tolerances.

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::solvers::{grid, integrate, Method, SolverConfig, SolverResult};
use crate::tensor::{Scalar, Tensor};

/// A field that can report vector-Jacobian products w.r.t. its state,
/// its flat parameter vector, and its control input.
pub trait AdjointField<T: Scalar> {
    fn eval(&self, h: &Tensor<T>, tau: f64) -> Result<Tensor<T>>;

    /// One reverse pass: the field value and `cotangent^T · ∂f/∂(h, θ, u)`.
    fn vjp(&self, h: &Tensor<T>, tau: f64, cotangent: &Tensor<T>) -> Result<FieldVjp<T>>;

    fn n_params(&self) -> usize;

    fn control_dim(&self) -> usize;

    /// Position of the learned output scale in the flat parameter vector.
    fn alpha_slot(&self) -> Option<usize> {
        None
    }
}

#[derive(Debug, Clone)]
pub struct FieldVjp<T> {
    pub value: Tensor<T>,
    pub state: Tensor<T>,
    pub params: Vec<T>,
    pub control: Vec<T>,
}

thread_local! {
    static LIVE_STATES: Cell<usize> = const { Cell::new(0) };
    static PEAK_STATES: Cell<usize> = const { Cell::new(0) };
}

/// Counters for hidden states retained by the adjoint machinery on this thread.
pub mod retained {
    use super::{LIVE_STATES, PEAK_STATES};

    /// Reset the peak to the current live count.
    pub fn reset_peak() {
        PEAK_STATES.with(|p| p.set(LIVE_STATES.with(|l| l.get())));
    }

    pub fn peak() -> usize {
        PEAK_STATES.with(|p| p.get())
    }

    pub fn live() -> usize {
        LIVE_STATES.with(|l| l.get())
    }
}

/// A hidden state whose lifetime is counted in [`retained`].
#[derive(Debug)]
struct Tracked<T> {
    state: Tensor<T>,
}

impl<T> Tracked<T> {
    fn new(state: Tensor<T>) -> Self {
        LIVE_STATES.with(|l| {
            let n = l.get() + 1;
            l.set(n);
            PEAK_STATES.with(|p| p.set(p.get().max(n)));
        });
        Tracked { state }
    }
}

impl<T> Drop for Tracked<T> {
    fn drop(&mut self) {
        LIVE_STATES.with(|l| l.set(l.get() - 1));
    }
}

/// Everything the backward pass needs: the field, the final state, and the
/// solver configuration. Independent of the number of solver steps.
pub struct AdjointHandle<T, F> {
    field: F,
    h1: Tracked<T>,
    span: (f64, f64),
    config: SolverConfig,
}

impl<T: Scalar, F: AdjointField<T>> AdjointHandle<T, F> {
    /// Number of hidden states held by the handle.
    pub fn stored_states(&self) -> usize {
        1
    }

    pub fn field(&self) -> &F {
        &self.field
    }

    pub fn final_state(&self) -> &Tensor<T> {
        &self.h1.state
    }
}

/// Gradients returned by [`adjoint_backward`].
#[derive(Debug, Clone)]
pub struct AdjointGrads<T> {
    pub h0: Tensor<T>,
    /// One slot per field parameter, including `alpha` when present.
    pub theta: Vec<T>,
    pub u: Vec<T>,
    pub alpha: Option<T>,
}

/// Forward integration over `tau ∈ [0, 1]` that retains only the final state.
pub fn integrate_with_adjoint<T, F>(
    field: F,
    h0: &Tensor<T>,
    solver: &SolverConfig,
) -> Result<(SolverResult<T>, AdjointHandle<T, F>)>
where
    T: Scalar,
    F: AdjointField<T>,
{
    let span = (0.0, 1.0);
    let result = integrate(|h: &Tensor<T>, t| field.eval(h, t), h0, span, solver)?;
    let handle = AdjointHandle {
        h1: Tracked::new(result.final_state.clone()),
        field,
        span,
        config: solver.clone(),
    };
    Ok((result, handle))
}

/// Pull `dL/dH(1)` back to `dL/dH(0)`, `dL/dθ`, `dL/du` (and `dL/dα`).
pub fn adjoint_backward<T, F>(handle: AdjointHandle<T, F>, dl_dh1: &Tensor<T>) -> Result<AdjointGrads<T>>
where
    T: Scalar,
    F: AdjointField<T>,
{
    if dl_dh1.shape() != handle.h1.state.shape() {
        return Err(Error::ShapeMismatch {
            op: "adjoint_backward",
            lhs: dl_dh1.shape().to_vec(),
            rhs: handle.h1.state.shape().to_vec(),
        });
    }
    let (h0, theta, u) = match handle.config.method {
        Method::Euler => euler_discrete_adjoint(&handle, dl_dh1)?,
        _ => continuous_adjoint(&handle, dl_dh1)?,
    };
    let alpha = handle.field.alpha_slot().map(|i| theta[i]);
    Ok(AdjointGrads { h0, theta, u, alpha })
}

fn axpy_slice<T: Scalar>(acc: &mut [T], a: T, x: &[T]) {
    for (y, &v) in acc.iter_mut().zip(x) {
        *y = *y + a * v;
    }
}

const MAX_FIXED_POINT_ITERS: usize = 200;

/// Solve `x + dt * f(x, t) = target` for `x` by fixed-point iteration.
fn invert_euler_step<T, F>(field: &F, target: &Tensor<T>, t: f64, dt: f64) -> Result<Tensor<T>>
where
    T: Scalar,
    F: AdjointField<T>,
{
    let scale = 1.0 + target.max_abs();
    let tol = 16.0 * T::epsilon().as_f64() * scale;
    let step = |x: &Tensor<T>| -> Result<Tensor<T>> {
        let mut next = target.clone();
        next.axpy(T::of(-dt), &field.eval(x, t)?)?;
        Ok(next)
    };
    let mut x = step(target)?;
    let mut best = f64::INFINITY;
    for _ in 0..MAX_FIXED_POINT_ITERS {
        let next = step(&x)?;
        let delta = next.sub(&x)?.max_abs();
        x = next;
        if !x.is_finite() {
            return Err(Error::NonFiniteState { tau: t });
        }
        if delta <= tol {
            return Ok(x);
        }
        // Stalled at rounding level: further iterations only oscillate.
        if delta >= best && delta <= 1e3 * tol {
            return Ok(x);
        }
        best = best.min(delta);
    }
    let mut check = x.clone();
    check.axpy(T::of(dt), &field.eval(&x, t)?)?;
    Err(Error::Reconstruction {
        tau: t,
        residual: check.sub(target)?.max_abs(),
    })
}

type Pulled<T> = (Tensor<T>, Vec<T>, Vec<T>);

fn euler_discrete_adjoint<T, F>(handle: &AdjointHandle<T, F>, dl_dh1: &Tensor<T>) -> Result<Pulled<T>>
where
    T: Scalar,
    F: AdjointField<T>,
{
    let field = &handle.field;
    let n = handle.config.n_steps;
    let span = handle.span;
    let dt = (span.1 - span.0) / n as f64;
    let mut a = dl_dh1.clone();
    let mut g = vec![T::zero(); field.n_params()];
    let mut gu = vec![T::zero(); field.control_dim()];
    let mut h = Tracked::new(handle.h1.state.clone());
    for i in (0..n).rev() {
        let t = grid(span, n, i);
        let prev = Tracked::new(invert_euler_step(field, &h.state, t, dt)?);
        let v = field.vjp(&prev.state, t, &a)?;
        a.axpy(T::of(dt), &v.state)?;
        axpy_slice(&mut g, T::of(dt), &v.params);
        axpy_slice(&mut gu, T::of(dt), &v.control);
        if !a.is_finite() {
            return Err(Error::NonFiniteState { tau: t });
        }
        h = prev;
    }
    Ok((a, g, gu))
}

fn continuous_adjoint<T, F>(handle: &AdjointHandle<T, F>, dl_dh1: &Tensor<T>) -> Result<Pulled<T>>
where
    T: Scalar,
    F: AdjointField<T>,
{
    let field = &handle.field;
    let shape = handle.h1.state.shape().to_vec();
    let n = handle.h1.state.len();
    let p = field.n_params();
    let c = field.control_dim();
    let (t0, t1) = handle.span;

    let z0 = Tracked::new(Tensor::concat_flat(&[
        &handle.h1.state,
        dl_dh1,
        &Tensor::zeros(&[p + c]),
    ]));
    // Reversed time s = t1 - tau, so the augmented system runs forward in s.
    let rhs = |z: &Tensor<T>, s: f64| -> Result<Tensor<T>> {
        let tau = t1 - s;
        let zd = z.data();
        let h = Tensor::new(&shape, zd[..n].to_vec())?;
        let a = Tensor::new(&shape, zd[n..2 * n].to_vec())?;
        let v = field.vjp(&h, tau, &a)?;
        let mut out = Vec::with_capacity(z.len());
        out.extend(v.value.data().iter().map(|&x| -x));
        out.extend_from_slice(v.state.data());
        out.extend_from_slice(&v.params);
        out.extend_from_slice(&v.control);
        Ok(Tensor::vector(out))
    };
    let mut cfg = handle.config.clone();
    cfg.record_trajectory = false;
    cfg.checkpoint_taus.clear();
    let res = integrate(rhs, &z0.state, (0.0, t1 - t0), &cfg).map_err(|e| match e {
        Error::NonFiniteState { tau } => Error::NonFiniteState { tau: t1 - tau },
        other => other,
    })?;
    let zd = res.final_state.data();
    Ok((
        Tensor::new(&shape, zd[n..2 * n].to_vec())?,
        zd[2 * n..2 * n + p].to_vec(),
        zd[2 * n + p..].to_vec(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `dH/dτ = k·H`, with `k` as the single parameter.
    struct Linear {
        k: f64,
    }

    impl AdjointField<f64> for Linear {
        fn eval(&self, h: &Tensor<f64>, _: f64) -> Result<Tensor<f64>> {
            Ok(h.scale(self.k))
        }
        fn vjp(&self, h: &Tensor<f64>, _: f64, cot: &Tensor<f64>) -> Result<FieldVjp<f64>> {
            Ok(FieldVjp {
                value: h.scale(self.k),
                state: cot.scale(self.k),
                params: vec![cot.dot(h)?],
                control: vec![],
            })
        }
        fn n_params(&self) -> usize {
            1
        }
        fn control_dim(&self) -> usize {
            0
        }
    }

    struct Zero;

    impl AdjointField<f64> for Zero {
        fn eval(&self, h: &Tensor<f64>, _: f64) -> Result<Tensor<f64>> {
            Ok(Tensor::zeros(h.shape()))
        }
        fn vjp(&self, h: &Tensor<f64>, _: f64, _: &Tensor<f64>) -> Result<FieldVjp<f64>> {
            Ok(FieldVjp {
                value: Tensor::zeros(h.shape()),
                state: Tensor::zeros(h.shape()),
                params: vec![0.0; 3],
                control: vec![0.0],
            })
        }
        fn n_params(&self) -> usize {
            3
        }
        fn control_dim(&self) -> usize {
            1
        }
    }

    #[test]
    fn zero_field_passes_cotangent_through() {
        let h0 = Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
        let cot = Tensor::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap();
        for cfg in [SolverConfig::euler(4), SolverConfig::rk4(2), SolverConfig::dopri5(1e-6, 1e-9)] {
            let (res, handle) = integrate_with_adjoint(Zero, &h0, &cfg).unwrap();
            assert_eq!(res.final_state, h0);
            let g = adjoint_backward(handle, &cot).unwrap();
            assert_eq!(g.h0, cot);
            assert!(g.theta.iter().chain(&g.u).all(|&x| x == 0.0));
        }
    }

    #[test]
    fn linear_sensitivity_matches_exponential() {
        let h0 = Tensor::vector(vec![1.0]);
        let cot = Tensor::vector(vec![1.0]);
        let (_, handle) =
            integrate_with_adjoint(Linear { k: 0.5 }, &h0, &SolverConfig::dopri5(1e-8, 1e-10)).unwrap();
        let g = adjoint_backward(handle, &cot).unwrap();
        let exact = 0.5f64.exp();
        assert!((g.h0.item() - exact).abs() < 1e-6 * exact, "{}", g.h0.item());
        // dL/dk = ∫ a h dτ = ∫ e^{k(1-τ)} e^{kτ} dτ = e^k
        assert!((g.theta[0] - exact).abs() < 1e-6 * exact);
    }

    #[test]
    fn euler_adjoint_is_the_discrete_gradient() {
        // Unrolled: h1 = (1 + k/n)^n h0, dh1/dh0 = (1 + k/n)^n.
        let k = 0.5;
        for n in [1, 4, 64] {
            let (_, handle) =
                integrate_with_adjoint(Linear { k }, &Tensor::vector(vec![2.0]), &SolverConfig::euler(n)).unwrap();
            let g = adjoint_backward(handle, &Tensor::vector(vec![1.0])).unwrap();
            let expected = (1.0 + k / n as f64).powi(n as i32);
            assert!((g.h0.item() - expected).abs() < 1e-12 * expected);
            // dh1/dk = n (1 + k/n)^(n-1) h0 / n
            let dk = (1.0 + k / n as f64).powi(n as i32 - 1) * 2.0;
            assert!((g.theta[0] - dk).abs() < 1e-12 * dk);
        }
    }

    #[test]
    fn handle_holds_one_state_regardless_of_steps() {
        for n in [1, 4, 64] {
            retained::reset_peak();
            let base = retained::live();
            let (_, handle) =
                integrate_with_adjoint(Linear { k: 0.3 }, &Tensor::vector(vec![1.0]), &SolverConfig::euler(n)).unwrap();
            assert_eq!(handle.stored_states(), 1);
            assert_eq!(retained::live(), base + 1);
            adjoint_backward(handle, &Tensor::vector(vec![1.0])).unwrap();
            assert_eq!(retained::peak(), base + 3);
            assert_eq!(retained::live(), base);
        }
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let (_, handle) =
            integrate_with_adjoint(Linear { k: 0.7 }, &Tensor::vector(vec![1.5]), &SolverConfig::rk4(8)).unwrap();
        let g = adjoint_backward(handle, &Tensor::vector(vec![0.0])).unwrap();
        assert_eq!(g.h0.item(), 0.0);
        assert_eq!(g.theta[0], 0.0);
    }

    #[test]
    fn cotangent_shape_is_checked() {
        let (_, handle) =
            integrate_with_adjoint(Linear { k: 0.7 }, &Tensor::vector(vec![1.5]), &SolverConfig::euler(2)).unwrap();
        assert!(adjoint_backward(handle, &Tensor::vector(vec![0.0, 1.0])).is_err());
    }
}
