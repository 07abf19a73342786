//! Explicit Runge–Kutta integrators with exact evaluation accounting.
//!
//! Fixed-step: `euler`, `rk4`. Adaptive: `dopri5` (Dormand–Prince 5(4) with
//! FSAL) and `adaptive_heun` (Heun 2 with an embedded Euler estimate).
//!
//! Adaptive error norm is the RMS over components of
//! `e_i / (atol + rtol * max(|y0_i|, |y1_i|))`; a step is accepted iff the
//! norm is at most 1. Both adaptive methods share the step controller
//! `h * clamp(0.9 * err^(-1/5), 0.2, 10)`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Euler,
    Rk4,
    Dopri5,
    AdaptiveHeun,
}

impl Method {
    pub fn is_adaptive(self) -> bool {
        matches!(self, Method::Dopri5 | Method::AdaptiveHeun)
    }

    fn order(self) -> f64 {
        match self {
            Method::Euler => 1.0,
            Method::AdaptiveHeun => 2.0,
            Method::Rk4 => 4.0,
            Method::Dopri5 => 5.0,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Euler => "euler",
            Method::Rk4 => "rk4",
            Method::Dopri5 => "dopri5",
            Method::AdaptiveHeun => "adaptive_heun",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Method::Euler),
            "rk4" => Ok(Method::Rk4),
            "dopri5" => Ok(Method::Dopri5),
            "adaptive_heun" => Ok(Method::AdaptiveHeun),
            other => Err(Error::Config(format!("unknown solver `{other}`"))),
        }
    }
}

/// How the first adaptive step is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitialStep {
    /// `(t1 - t0) / 10`.
    TenthOfSpan,
    /// Hairer–Wanner starting-step estimate; costs one extra evaluation.
    Heuristic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub method: Method,
    /// Fixed-step methods only.
    pub n_steps: usize,
    pub rtol: f64,
    pub atol: f64,
    /// Cap on attempted adaptive steps.
    pub max_steps: usize,
    pub record_trajectory: bool,
    /// Absolute depths at which the trajectory is sampled.
    pub checkpoint_taus: Vec<f64>,
    pub initial_step: InitialStep,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            method: Method::Euler,
            n_steps: 4,
            rtol: 1e-3,
            atol: 1e-6,
            max_steps: 10_000,
            record_trajectory: false,
            checkpoint_taus: Vec::new(),
            initial_step: InitialStep::TenthOfSpan,
        }
    }
}

impl SolverConfig {
    pub fn fixed(method: Method, n_steps: usize) -> Self {
        SolverConfig {
            method,
            n_steps,
            ..Default::default()
        }
    }

    pub fn euler(n_steps: usize) -> Self {
        Self::fixed(Method::Euler, n_steps)
    }

    pub fn rk4(n_steps: usize) -> Self {
        Self::fixed(Method::Rk4, n_steps)
    }

    pub fn adaptive(method: Method, rtol: f64, atol: f64) -> Self {
        SolverConfig {
            method,
            rtol,
            atol,
            ..Default::default()
        }
    }

    pub fn dopri5(rtol: f64, atol: f64) -> Self {
        Self::adaptive(Method::Dopri5, rtol, atol)
    }

    pub fn adaptive_heun(rtol: f64, atol: f64) -> Self {
        Self::adaptive(Method::AdaptiveHeun, rtol, atol)
    }

    pub fn with_checkpoints(mut self, taus: &[f64]) -> Self {
        self.record_trajectory = true;
        self.checkpoint_taus = taus.to_vec();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 || self.max_steps == 0 {
            return Err(Error::contract("n_steps and max_steps must be at least 1"));
        }
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::contract(format!(
                "rtol and atol must be positive (got {}, {})",
                self.rtol, self.atol
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SolverResult<T> {
    pub final_state: Tensor<T>,
    /// Field evaluations actually performed.
    pub nfe: usize,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    /// `(tau, state)` at each requested checkpoint, in ascending `tau`.
    pub trajectory: Option<Vec<(f64, Tensor<T>)>>,
}

/// Right-hand side wrapper that counts calls and checks output shapes.
pub struct FieldEval<F> {
    f: F,
    count: usize,
}

impl<F> FieldEval<F> {
    pub fn new(f: F) -> Self {
        FieldEval { f, count: 0 }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn eval<T: Scalar>(&mut self, state: &Tensor<T>, tau: f64) -> Result<Tensor<T>>
    where
        F: FnMut(&Tensor<T>, f64) -> Result<Tensor<T>>,
    {
        self.count += 1;
        let out = (self.f)(state, tau)?;
        if out.shape() != state.shape() {
            return Err(Error::ShapeMismatch {
                op: "field evaluation",
                lhs: out.shape().to_vec(),
                rhs: state.shape().to_vec(),
            });
        }
        Ok(out)
    }
}

/// `y + h * sum(coef_i * k_i)`.
fn combine<T: Scalar>(y: &Tensor<T>, h: f64, terms: &[(f64, &Tensor<T>)]) -> Result<Tensor<T>> {
    let mut out = y.clone();
    for &(c, k) in terms {
        if c != 0.0 {
            out.axpy(T::of(h * c), k)?;
        }
    }
    Ok(out)
}

fn ensure_finite<T: Scalar>(y: &Tensor<T>, tau: f64) -> Result<()> {
    if y.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteState { tau })
    }
}

/// Samples the piecewise-linear trajectory through accepted step endpoints.
struct Recorder<T> {
    taus: Vec<f64>,
    next: usize,
    points: Vec<(f64, Tensor<T>)>,
}

impl<T: Scalar> Recorder<T> {
    fn new(cfg: &SolverConfig, span: (f64, f64)) -> Result<Option<Self>> {
        if !cfg.record_trajectory {
            return Ok(None);
        }
        let mut taus = cfg.checkpoint_taus.clone();
        if let Some(bad) = taus.iter().find(|t| !(span.0..=span.1).contains(*t)) {
            return Err(Error::contract(format!(
                "checkpoint tau {bad} outside integration span {span:?}"
            )));
        }
        taus.sort_by(f64::total_cmp);
        taus.dedup();
        Ok(Some(Recorder {
            taus,
            next: 0,
            points: Vec::new(),
        }))
    }

    fn start(&mut self, t0: f64, y0: &Tensor<T>) {
        while self.next < self.taus.len() && self.taus[self.next] <= t0 {
            self.points.push((self.taus[self.next], y0.clone()));
            self.next += 1;
        }
    }

    fn step(&mut self, ta: f64, ya: &Tensor<T>, tb: f64, yb: &Tensor<T>) -> Result<()> {
        while self.next < self.taus.len() && self.taus[self.next] <= tb {
            let tau = self.taus[self.next];
            let w = (tau - ta) / (tb - ta);
            let y = if w >= 1.0 {
                yb.clone()
            } else if w <= 0.0 {
                ya.clone()
            } else {
                let mut y = ya.clone();
                y.axpy(T::of(w), &yb.sub(ya)?)?;
                y
            };
            self.points.push((tau, y));
            self.next += 1;
        }
        Ok(())
    }
}

/// Integrate `dy/dt = field(y, t)` from `span.0` to `span.1`.
pub fn integrate<T, F>(
    field: F,
    h0: &Tensor<T>,
    span: (f64, f64),
    cfg: &SolverConfig,
) -> Result<SolverResult<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>, f64) -> Result<Tensor<T>>,
{
    cfg.validate()?;
    let (t0, t1) = span;
    if !(t0 < t1) {
        return Err(Error::contract(format!("integration span must satisfy t0 < t1, got {span:?}")));
    }
    ensure_finite(h0, t0)?;
    let mut field = FieldEval::new(field);
    let mut recorder = Recorder::new(cfg, span)?;
    if let Some(r) = recorder.as_mut() {
        r.start(t0, h0);
    }
    let (final_state, accepted, rejected) = if cfg.method.is_adaptive() {
        adaptive(&mut field, h0, span, cfg, recorder.as_mut())?
    } else {
        fixed(&mut field, h0, span, cfg, recorder.as_mut())?
    };
    Ok(SolverResult {
        final_state,
        nfe: field.count(),
        accepted_steps: accepted,
        rejected_steps: rejected,
        trajectory: recorder.map(|r| r.points),
    })
}

/// One fixed step of `method` from `(t, y)` with size `dt`.
pub(crate) fn fixed_step<T, F>(
    field: &mut FieldEval<F>,
    method: Method,
    t: f64,
    y: &Tensor<T>,
    dt: f64,
) -> Result<Tensor<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>, f64) -> Result<Tensor<T>>,
{
    match method {
        Method::Euler => {
            let k1 = field.eval(y, t)?;
            let mut next = y.clone();
            next.axpy(T::of(dt), &k1)?;
            Ok(next)
        }
        Method::Rk4 => {
            let k1 = field.eval(y, t)?;
            let k2 = field.eval(&combine(y, dt, &[(0.5, &k1)])?, t + 0.5 * dt)?;
            let k3 = field.eval(&combine(y, dt, &[(0.5, &k2)])?, t + 0.5 * dt)?;
            let k4 = field.eval(&combine(y, dt, &[(1.0, &k3)])?, t + dt)?;
            combine(
                y,
                dt,
                &[(1.0 / 6.0, &k1), (1.0 / 3.0, &k2), (1.0 / 3.0, &k3), (1.0 / 6.0, &k4)],
            )
        }
        other => Err(Error::contract(format!("{other} is not a fixed-step method"))),
    }
}

/// Grid point `i` of an `n`-step uniform grid; endpoints are exact.
pub(crate) fn grid(span: (f64, f64), n: usize, i: usize) -> f64 {
    if i == n {
        span.1
    } else {
        span.0 + (span.1 - span.0) * i as f64 / n as f64
    }
}

fn fixed<T, F>(
    field: &mut FieldEval<F>,
    h0: &Tensor<T>,
    span: (f64, f64),
    cfg: &SolverConfig,
    mut recorder: Option<&mut Recorder<T>>,
) -> Result<(Tensor<T>, usize, usize)>
where
    T: Scalar,
    F: FnMut(&Tensor<T>, f64) -> Result<Tensor<T>>,
{
    let n = cfg.n_steps;
    let dt = (span.1 - span.0) / n as f64;
    let mut y = h0.clone();
    for i in 0..n {
        let (ta, tb) = (grid(span, n, i), grid(span, n, i + 1));
        let next = fixed_step(field, cfg.method, ta, &y, dt)?;
        ensure_finite(&next, tb)?;
        if let Some(r) = recorder.as_deref_mut() {
            r.step(ta, &y, tb, &next)?;
        }
        y = next;
    }
    Ok((y, n, 0))
}

// Dormand–Prince 5(4) tableau.
const DP_C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [&[f64]; 7] = [
    &[],
    &[1.0 / 5.0],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
    &[9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0],
    &[35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
// Fifth-order weights minus the embedded fourth-order weights.
const DP_E: [f64; 7] = [
    35.0 / 384.0 - 5179.0 / 57600.0,
    0.0,
    500.0 / 1113.0 - 7571.0 / 16695.0,
    125.0 / 192.0 - 393.0 / 640.0,
    -2187.0 / 6784.0 + 92097.0 / 339200.0,
    11.0 / 84.0 - 187.0 / 2100.0,
    -1.0 / 40.0,
];

struct Attempt<T> {
    y_new: Tensor<T>,
    err: Tensor<T>,
    /// Derivative at `(t + h, y_new)` when the method provides it (FSAL).
    k_last: Option<Tensor<T>>,
}

fn dopri5_attempt<T, F>(
    field: &mut FieldEval<F>,
    t: f64,
    y: &Tensor<T>,
    k1: &Tensor<T>,
    h: f64,
) -> Result<Attempt<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>, f64) -> Result<Tensor<T>>,
{
    let mut ks: Vec<Tensor<T>> = Vec::with_capacity(7);
    ks.push(k1.clone());
    for s in 1..7 {
        let terms: Vec<(f64, &Tensor<T>)> = DP_A[s].iter().copied().zip(ks.iter()).collect();
        let ys = combine(y, h, &terms)?;
        let k = field.eval(&ys, t + DP_C[s] * h)?;
        ks.push(k);
    }
    let terms: Vec<(f64, &Tensor<T>)> = DP_A[6].iter().copied().zip(ks.iter()).collect();
    let y_new = combine(y, h, &terms)?;
    let zero = Tensor::zeros(y.shape());
    let eterms: Vec<(f64, &Tensor<T>)> = DP_E.iter().copied().zip(ks.iter()).collect();
    let err = combine(&zero, h, &eterms)?;
    Ok(Attempt {
        y_new,
        err,
        k_last: ks.pop(),
    })
}

fn heun_attempt<T, F>(field: &mut FieldEval<F>, t: f64, y: &Tensor<T>, h: f64) -> Result<Attempt<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>, f64) -> Result<Tensor<T>>,
{
    let k1 = field.eval(y, t)?;
    let k2 = field.eval(&combine(y, h, &[(1.0, &k1)])?, t + h)?;
    let y_new = combine(y, h, &[(0.5, &k1), (0.5, &k2)])?;
    let zero = Tensor::zeros(y.shape());
    let err = combine(&zero, h, &[(0.5, &k2), (-0.5, &k1)])?;
    Ok(Attempt {
        y_new,
        err,
        k_last: None,
    })
}

/// Scaled RMS error norm.
pub fn error_norm<T: Scalar>(
    err: &Tensor<T>,
    y0: &Tensor<T>,
    y1: &Tensor<T>,
    rtol: f64,
    atol: f64,
) -> f64 {
    let n = err.len().max(1) as f64;
    let sum: f64 = err
        .data()
        .iter()
        .zip(y0.data())
        .zip(y1.data())
        .map(|((&e, &a), &b)| {
            let scale = atol + rtol * a.as_f64().abs().max(b.as_f64().abs());
            let r = e.as_f64() / scale;
            r * r
        })
        .sum();
    (sum / n).sqrt()
}

fn rms_scaled<T: Scalar>(v: &Tensor<T>, y: &Tensor<T>, rtol: f64, atol: f64) -> f64 {
    error_norm(v, y, y, rtol, atol)
}

fn initial_step<T, F>(
    field: &mut FieldEval<F>,
    cfg: &SolverConfig,
    t0: f64,
    y0: &Tensor<T>,
    f0: &Tensor<T>,
    span_len: f64,
) -> Result<f64>
where
    T: Scalar,
    F: FnMut(&Tensor<T>, f64) -> Result<Tensor<T>>,
{
    match cfg.initial_step {
        InitialStep::TenthOfSpan => Ok(span_len / 10.0),
        InitialStep::Heuristic => {
            let d0 = rms_scaled(y0, y0, cfg.rtol, cfg.atol);
            let d1 = rms_scaled(f0, y0, cfg.rtol, cfg.atol);
            let h0 = if d0 < 1e-5 || d1 < 1e-5 {
                1e-6
            } else {
                0.01 * d0 / d1
            };
            let h0 = h0.min(span_len);
            let y1 = combine(y0, h0, &[(1.0, f0)])?;
            let f1 = field.eval(&y1, t0 + h0)?;
            let d2 = rms_scaled(&f1.sub(f0)?, y0, cfg.rtol, cfg.atol) / h0;
            let order = cfg.method.order();
            let h1 = if d1.max(d2) <= 1e-15 {
                (h0 * 1e-3).max(1e-6)
            } else {
                (0.01 / d1.max(d2)).powf(1.0 / order)
            };
            Ok((100.0 * h0).min(h1).min(span_len))
        }
    }
}

fn adaptive<T, F>(
    field: &mut FieldEval<F>,
    h0: &Tensor<T>,
    span: (f64, f64),
    cfg: &SolverConfig,
    mut recorder: Option<&mut Recorder<T>>,
) -> Result<(Tensor<T>, usize, usize)>
where
    T: Scalar,
    F: FnMut(&Tensor<T>, f64) -> Result<Tensor<T>>,
{
    let (t0, t1) = span;
    let span_len = t1 - t0;
    let mut t = t0;
    let mut y = h0.clone();
    // dopri5 keeps the first stage across steps (FSAL).
    let mut k1 = match cfg.method {
        Method::Dopri5 => Some(field.eval(&y, t)?),
        _ => None,
    };
    let mut h = match (&k1, cfg.initial_step) {
        (Some(f0), _) => initial_step(field, cfg, t, &y, f0, span_len)?,
        (None, InitialStep::TenthOfSpan) => span_len / 10.0,
        (None, InitialStep::Heuristic) => {
            let f0 = field.eval(&y, t)?;
            initial_step(field, cfg, t, &y, &f0, span_len)?
        }
    };
    let (mut accepted, mut rejected) = (0usize, 0usize);
    while t < t1 {
        if accepted + rejected >= cfg.max_steps || h <= span_len * 1e-14 {
            return Err(Error::Divergence {
                tau: t,
                step_size: h,
                steps: accepted + rejected,
                last_state: y.to_f64_vec(),
            });
        }
        let last = t + h >= t1 - span_len * 1e-12;
        let h_try = if last { t1 - t } else { h };
        let attempt = match cfg.method {
            Method::Dopri5 => dopri5_attempt(field, t, &y, k1.as_ref().expect("fsal stage"), h_try)?,
            Method::AdaptiveHeun => heun_attempt(field, t, &y, h_try)?,
            other => return Err(Error::contract(format!("{other} is not adaptive"))),
        };
        ensure_finite(&attempt.y_new, t + h_try)?;
        let err = error_norm(&attempt.err, &y, &attempt.y_new, cfg.rtol, cfg.atol);
        let factor = if err == 0.0 {
            10.0
        } else {
            (0.9 * err.powf(-0.2)).clamp(0.2, 10.0)
        };
        if err <= 1.0 {
            let t_new = if last { t1 } else { t + h_try };
            if let Some(r) = recorder.as_deref_mut() {
                r.step(t, &y, t_new, &attempt.y_new)?;
            }
            t = t_new;
            y = attempt.y_new;
            if attempt.k_last.is_some() {
                k1 = attempt.k_last;
            }
            accepted += 1;
        } else {
            rejected += 1;
        }
        h = h_try * factor;
    }
    Ok((y, accepted, rejected))
}

/// `100 * ‖a - b‖_F / (‖b‖_F + 1e-12)`.
pub fn relative_divergence<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    Ok(100.0 * a.sub(b)?.norm() / (b.norm() + 1e-12))
}

/// Mean relative Frobenius divergence (percent) over shared trajectory
/// checkpoints; `b` is the reference.
pub fn trajectory_divergence<T: Scalar>(a: &SolverResult<T>, b: &SolverResult<T>) -> Result<f64> {
    let (Some(ta), Some(tb)) = (&a.trajectory, &b.trajectory) else {
        return Err(Error::contract("both results must carry trajectories"));
    };
    let same = ta.len() == tb.len() && ta.iter().zip(tb).all(|(p, q)| p.0 == q.0);
    if !same || ta.is_empty() {
        return Err(Error::contract(format!(
            "checkpoint sets differ: {:?} vs {:?}",
            ta.iter().map(|p| p.0).collect::<Vec<_>>(),
            tb.iter().map(|p| p.0).collect::<Vec<_>>()
        )));
    }
    let mut total = 0.0;
    for ((_, sa), (_, sb)) in ta.iter().zip(tb) {
        total += relative_divergence(sa, sb)?;
    }
    Ok(total / ta.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decay(y: &Tensor<f64>, _t: f64) -> Result<Tensor<f64>> {
        Ok(y.scale(-1.0))
    }

    fn one() -> Tensor<f64> {
        Tensor::vector(vec![1.0])
    }

    #[test]
    fn zero_field_is_identity_for_every_method() {
        let h0 = Tensor::from_f64(&[2, 2], &[1.0, -2.0, 0.5, 3.0]).unwrap();
        for cfg in [
            SolverConfig::euler(4),
            SolverConfig::rk4(3),
            SolverConfig::dopri5(1e-6, 1e-9),
            SolverConfig::adaptive_heun(1e-6, 1e-9),
        ] {
            let r = integrate(|y: &Tensor<f64>, _| Ok(Tensor::zeros(y.shape())), &h0, (0.0, 1.0), &cfg)
                .unwrap();
            assert_eq!(r.final_state, h0, "{}", cfg.method);
        }
    }

    #[test]
    fn euler_four_steps_on_decay() {
        let r = integrate(decay, &one(), (0.0, 1.0), &SolverConfig::euler(4)).unwrap();
        assert_eq!(r.final_state.item(), 0.31640625);
        assert_eq!((r.nfe, r.accepted_steps, r.rejected_steps), (4, 4, 0));
    }

    #[test]
    fn rk4_nfe_accounting() {
        let r = integrate(decay, &one(), (0.0, 1.0), &SolverConfig::rk4(5)).unwrap();
        assert_eq!(r.nfe, 20);
        assert_eq!(r.rejected_steps, 0);
    }

    #[test]
    fn dopri5_hits_analytic_value_with_fsal_accounting() {
        let r = integrate(decay, &one(), (0.0, 1.0), &SolverConfig::dopri5(1e-8, 1e-10)).unwrap();
        assert!((r.final_state.item() - (-1.0f64).exp()).abs() < 1e-7);
        assert_eq!(r.nfe, 6 * (r.accepted_steps + r.rejected_steps) + 1);
    }

    #[test]
    fn heun_accounting() {
        let r = integrate(decay, &one(), (0.0, 1.0), &SolverConfig::adaptive_heun(1e-4, 1e-7)).unwrap();
        assert_eq!(r.nfe, 2 * (r.accepted_steps + r.rejected_steps));
        assert!((r.final_state.item() - (-1.0f64).exp()).abs() < 1e-3);
    }

    #[test]
    fn stiff_blowup_reports_divergence() {
        let mut cfg = SolverConfig::dopri5(1e-10, 1e-12);
        cfg.max_steps = 5;
        let err = integrate(|y: &Tensor<f64>, _| Ok(y.scale(-500.0)), &one(), (0.0, 1.0), &cfg)
            .unwrap_err();
        match err {
            Error::Divergence { steps, last_state, .. } => {
                assert_eq!(steps, 5);
                assert_eq!(last_state.len(), 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn nan_state_names_tau() {
        let err = integrate(
            |y: &Tensor<f64>, t| Ok(if t >= 0.5 { y.map(|_| f64::NAN) } else { y.clone() }),
            &one(),
            (0.0, 1.0),
            &SolverConfig::euler(4),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteState { tau } if tau == 0.75));
    }

    #[test]
    fn rejects_bad_span_and_config() {
        assert!(integrate(decay, &one(), (1.0, 0.0), &SolverConfig::euler(4)).is_err());
        assert!(integrate(decay, &one(), (0.0, 1.0), &SolverConfig::euler(0)).is_err());
        assert!(integrate(decay, &one(), (0.0, 1.0), &SolverConfig::dopri5(0.0, 1e-6)).is_err());
    }

    #[test]
    fn wrong_output_shape_is_a_contract_error() {
        let err = integrate(
            |_: &Tensor<f64>, _| Ok(Tensor::zeros(&[2])),
            &one(),
            (0.0, 1.0),
            &SolverConfig::euler(1),
        )
        .unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn trajectory_checkpoints_and_divergence() {
        let taus = [0.0, 0.5, 1.0];
        let a = integrate(decay, &one(), (0.0, 1.0), &SolverConfig::euler(4).with_checkpoints(&taus)).unwrap();
        let traj = a.trajectory.as_ref().unwrap();
        assert_eq!(traj[0].1.item(), 1.0);
        assert_eq!(traj[1].1.item(), 0.5625);
        assert_eq!(traj[2].1.item(), 0.31640625);
        assert_eq!(trajectory_divergence(&a, &a).unwrap(), 0.0);

        let b = integrate(decay, &one(), (0.0, 1.0), &SolverConfig::dopri5(1e-8, 1e-10).with_checkpoints(&[1.0]))
            .unwrap();
        assert!(trajectory_divergence(&a, &b).is_err());
        let a1 = integrate(decay, &one(), (0.0, 1.0), &SolverConfig::euler(4).with_checkpoints(&[1.0])).unwrap();
        let d = trajectory_divergence(&a1, &b).unwrap();
        let e = (-1.0f64).exp();
        assert!((d - 100.0 * (0.31640625 - e).abs() / e).abs() < 1e-5);
        assert!((d - 13.99).abs() < 0.01);
    }

    #[test]
    fn dopri5_checkpoints_lie_on_chords_of_accepted_steps() {
        let taus = [0.25, 0.5, 0.75];
        let r = integrate(decay, &one(), (0.0, 1.0), &SolverConfig::dopri5(1e-3, 1e-6).with_checkpoints(&taus))
            .unwrap();
        assert!(r.accepted_steps <= 3);
        for (tau, y) in r.trajectory.unwrap() {
            let exact = (-tau).exp();
            // chords of a convex solution sit above it
            assert!(y.item() >= exact - 1e-6 && y.item() - exact < 0.1, "tau {tau}: {}", y.item());
        }
    }

    #[test]
    fn heuristic_initial_step_is_flagged_and_counted() {
        let mut cfg = SolverConfig::dopri5(1e-6, 1e-9);
        cfg.initial_step = InitialStep::Heuristic;
        let r = integrate(decay, &one(), (0.0, 1.0), &cfg).unwrap();
        assert_eq!(r.nfe, 6 * (r.accepted_steps + r.rejected_steps) + 2);
        assert!((r.final_state.item() - (-1.0f64).exp()).abs() < 1e-5);
    }
}
