//! Post-training measurements: solver invariance, control sweep, NFE and
//! linear probes, latency.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::corpus::SteeringTask;
use super::train::{steering_eval, SteeringRow};
use crate::error::{Error, Result};
use crate::field::ControlSignal;
use crate::model::{Model, TokenBatch};
use crate::solvers::{trajectory_divergence, Method, SolverConfig};
use crate::tensor::Scalar;

/// Taus shared by the two trajectories of the invariance test.
pub const INVARIANCE_TAUS: [f64; 4] = [0.25, 0.5, 0.75, 1.0];
pub const PROBE_TAUS: [f64; 4] = [0.0, 0.5, 0.67, 1.0];
pub const SWEEP_SLACK: f64 = 0.02;
pub const SPIKE_POINTS: f64 = 15.0;

fn control<T: Scalar>(model: &Model<T>, u: f64) -> ControlSignal<T> {
    ControlSignal::new(vec![T::of(u); model.config.control_dim])
}

/// Percent trajectory divergence of euler(4) against dopri5(1e-6, 1e-9).
pub fn solver_invariance_test<T: Scalar>(model: &Model<T>, batch: &TokenBatch, u: f64) -> Result<f64> {
    let u = control(model, u);
    let euler = SolverConfig::euler(4).with_checkpoints(&INVARIANCE_TAUS);
    let dopri = SolverConfig::dopri5(1e-6, 1e-9).with_checkpoints(&INVARIANCE_TAUS);
    let a = model.ode_trajectory(batch, &u, &euler)?;
    let b = model.ode_trajectory(batch, &u, &dopri)?;
    trajectory_divergence(&a, &b)
}

/// `-2, -1.75, ..., 2`.
pub fn sweep_grid() -> Vec<f64> {
    (0..17).map(|i| -2.0 + 0.25 * i as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub rows: Vec<SteeringRow>,
    /// Largest drop of `p_good` between neighbouring grid points.
    pub max_drop: f64,
    pub monotone: bool,
}

pub fn control_sweep<T: Scalar>(
    model: &Model<T>,
    task: &SteeringTask,
    u_grid: &[f64],
    solver: &SolverConfig,
) -> Result<SweepReport> {
    let rows = steering_eval(model, task, u_grid, solver)?.rows;
    let max_drop = rows
        .windows(2)
        .map(|w| w[0].p_good - w[1].p_good)
        .fold(0.0, f64::max);
    Ok(SweepReport {
        rows,
        max_drop,
        monotone: max_drop <= SWEEP_SLACK,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NfeCell {
    pub u: f64,
    pub solver: String,
    pub rtol: f64,
    pub atol: f64,
    pub accepted_steps: Option<usize>,
    pub rejected_steps: Option<usize>,
    pub nfe: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToleranceRow {
    pub rtol: f64,
    pub atol: f64,
    pub accepted_steps: Option<usize>,
    pub nfe: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeReport {
    pub nfe_by_u: Vec<NfeCell>,
    pub tolerance_scaling: Vec<ToleranceRow>,
    pub probe_accuracy_by_tau: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NfeProbeConfig {
    pub u_grid: Vec<f64>,
    pub solvers: Vec<Method>,
    pub rtol: f64,
    pub atol: f64,
    /// Tolerance-scaling sweep, with `atol = atol_ratio * rtol`.
    pub scaling_rtols: Vec<f64>,
    pub atol_ratio: f64,
    pub scaling_u: f64,
}

impl Default for NfeProbeConfig {
    fn default() -> Self {
        NfeProbeConfig {
            u_grid: sweep_grid(),
            solvers: vec![Method::Dopri5, Method::AdaptiveHeun],
            rtol: 1e-3,
            atol: 1e-6,
            scaling_rtols: vec![1e-3, 1e-4, 1e-5, 1e-6],
            atol_ratio: 1e-3,
            scaling_u: -1.0,
        }
    }
}

fn nfe_cell<T: Scalar>(model: &Model<T>, batch: &TokenBatch, u: f64, method: Method, rtol: f64, atol: f64) -> NfeCell {
    let res = model.ode_trajectory(batch, &control(model, u), &SolverConfig::adaptive(method, rtol, atol));
    let (accepted_steps, rejected_steps, nfe, error) = match res {
        Ok(r) => (Some(r.accepted_steps), Some(r.rejected_steps), Some(r.nfe), None),
        Err(e) => (None, None, None, Some(e.to_string())),
    };
    NfeCell {
        u,
        solver: method.to_string(),
        rtol,
        atol,
        accepted_steps,
        rejected_steps,
        nfe,
        error,
    }
}

/// Step counts per `(u, solver)` and the dopri5 tolerance-scaling rows.
/// Solver failures are recorded in the cell and do not stop the probe.
pub fn nfe_probe<T: Scalar>(
    model: &Model<T>,
    task: &SteeringTask,
    cfg: &NfeProbeConfig,
) -> Result<(Vec<NfeCell>, Vec<ToleranceRow>)> {
    let (batch, _) = task.batch(&task.prompts)?;
    let mut cells = Vec::new();
    for &u in &cfg.u_grid {
        for &m in &cfg.solvers {
            cells.push(nfe_cell(model, &batch, u, m, cfg.rtol, cfg.atol));
        }
    }
    let scaling = cfg
        .scaling_rtols
        .iter()
        .map(|&rtol| {
            let c = nfe_cell(model, &batch, cfg.scaling_u, Method::Dopri5, rtol, cfg.atol_ratio * rtol);
            ToleranceRow {
                rtol,
                atol: c.atol,
                accepted_steps: c.accepted_steps,
                nfe: c.nfe,
            }
        })
        .collect();
    Ok((cells, scaling))
}

/// Largest relative accepted-step disagreement `|a - b| / a` between two
/// solvers over shared `u` cells. `None` when a cell is missing or failed.
pub fn cross_solver_disagreement(cells: &[NfeCell], a: Method, b: Method) -> Option<f64> {
    let (a, b) = (a.to_string(), b.to_string());
    let mut worst: f64 = 0.0;
    for ca in cells.iter().filter(|c| c.solver == a) {
        let cb = cells.iter().find(|c| c.solver == b && c.u == ca.u && c.rtol == ca.rtol)?;
        let (x, y) = (ca.accepted_steps? as f64, cb.accepted_steps? as f64);
        worst = worst.max((x - y).abs() / x);
    }
    Some(worst)
}

/// Accepted steps strictly increase along the rows (ordered loose to tight).
pub fn nfe_strictly_increasing(rows: &[ToleranceRow]) -> bool {
    rows.windows(2)
        .all(|w| matches!((w[0].accepted_steps, w[1].accepted_steps), (Some(a), Some(b)) if b > a))
}

/// Accepted steps at the tightest row over the loosest.
pub fn nfe_growth(rows: &[ToleranceRow]) -> Option<f64> {
    let a = rows.first()?.accepted_steps?;
    let b = rows.last()?.accepted_steps?;
    (a > 0).then(|| b as f64 / a as f64)
}

/// Solve `(A + lambda I) x = b` for symmetric positive definite `A`.
fn ridge_solve(mut a: Vec<f64>, mut b: Vec<f64>, n: usize, lambda: f64) -> Result<Vec<f64>> {
    for i in 0..n {
        a[i * n + i] += lambda;
    }
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::contract("probe design matrix is not positive definite"));
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    for i in 0..n {
        let s: f64 = (0..i).map(|k| a[i * n + k] * b[k]).sum();
        b[i] = (b[i] - s) / a[i * n + i];
    }
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| a[k * n + i] * b[k]).sum();
        b[i] = (b[i] - s) / a[i * n + i];
    }
    Ok(b)
}

const RIDGE_LAMBDA: f64 = 1e-3;

/// Held-out accuracy (percent) of a least-squares classifier fit to `±1`
/// labels, on a seeded 75/25 split.
pub fn fit_linear_probe(features: &[Vec<f64>], labels: &[f64], seed: u64) -> Result<f64> {
    if features.len() != labels.len() || features.len() < 4 {
        return Err(Error::contract("linear probe needs at least 4 labelled samples"));
    }
    if labels.iter().all(|&l| l > 0.0) || labels.iter().all(|&l| l <= 0.0) {
        return Err(Error::contract("linear probe needs both classes"));
    }
    let dim = features[0].len() + 1;
    let mut order: Vec<usize> = (0..features.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = features.len() * 3 / 4;
    let (train, test) = order.split_at(n_train);
    let row = |i: usize| features[i].iter().copied().chain(std::iter::once(1.0));
    let mut xtx = vec![0.0; dim * dim];
    let mut xty = vec![0.0; dim];
    for &i in train {
        let x: Vec<f64> = row(i).collect();
        for r in 0..dim {
            xty[r] += x[r] * labels[i];
            for c in 0..dim {
                xtx[r * dim + c] += x[r] * x[c];
            }
        }
    }
    let w = ridge_solve(xtx, xty, dim, RIDGE_LAMBDA)?;
    let correct = test
        .iter()
        .filter(|&&i| {
            let score: f64 = row(i).zip(&w).map(|(x, w)| x * w).sum();
            (score >= 0.0) == (labels[i] > 0.0)
        })
        .count();
    Ok(100.0 * correct as f64 / test.len() as f64)
}

/// Controls whose sign is the probe label.
pub fn probe_controls() -> Vec<f64> {
    vec![-2.0, -1.5, -1.0, -0.5, 0.5, 1.0, 1.5, 2.0]
}

/// Linear separability of `sign(u)` from mean-pooled ODE states at each tau.
pub fn linear_probe<T: Scalar>(
    model: &Model<T>,
    task: &SteeringTask,
    us: &[f64],
    taus: &[f64],
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    let (batch, last) = task.batch(&task.prompts)?;
    let d = model.config.d_model;
    let solver = SolverConfig::dopri5(1e-6, 1e-9).with_checkpoints(taus);
    let mut features: Vec<Vec<Vec<f64>>> = vec![Vec::new(); taus.len()];
    let mut labels = Vec::new();
    for &u in us {
        let res = model.ode_trajectory(&batch, &control(model, u), &solver)?;
        let traj = res.trajectory.ok_or_else(|| Error::contract("trajectory not recorded"))?;
        for (k, (_, state)) in traj.iter().enumerate() {
            let s = state.data();
            for (row, &end) in last.iter().enumerate() {
                let mut pooled = vec![0.0; d];
                for pos in 0..=end {
                    let off = (row * batch.seq + pos) * d;
                    for (p, x) in pooled.iter_mut().zip(&s[off..off + d]) {
                        *p += x.as_f64();
                    }
                }
                pooled.iter_mut().for_each(|p| *p /= (end + 1) as f64);
                features[k].push(pooled);
            }
        }
        labels.extend(std::iter::repeat_n(if u > 0.0 { 1.0 } else { -1.0 }, last.len()));
    }
    taus.iter()
        .zip(&features)
        .map(|(&tau, f)| Ok((tau, fit_linear_probe(f, &labels, seed)?)))
        .collect()
}

/// Largest `acc_i - max(neighbours)` over interior taus.
pub fn max_interior_spike(acc: &[(f64, f64)]) -> f64 {
    acc.windows(3)
        .map(|w| w[1].1 - w[0].1.max(w[2].1))
        .fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Timing {
    pub median_ms: f64,
    pub std_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LatencyReport {
    pub baseline: Timing,
    pub hybrid: Timing,
    /// `hybrid / baseline` median latency.
    pub ratio: f64,
    pub pinned: bool,
}

fn timing(mut ms: Vec<f64>) -> Timing {
    ms.sort_by(f64::total_cmp);
    let n = ms.len();
    let median = if n % 2 == 1 {
        ms[n / 2]
    } else {
        0.5 * (ms[n / 2 - 1] + ms[n / 2])
    };
    let mean = ms.iter().sum::<f64>() / n as f64;
    let var = ms.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    Timing {
        median_ms: median,
        std_ms: var.sqrt(),
    }
}

/// Pin the calling thread to the first core. Returns whether pinning worked.
pub fn pin_current_thread() -> bool {
    core_affinity::get_core_ids()
        .and_then(|ids| ids.first().copied())
        .is_some_and(core_affinity::set_for_current)
}

/// Forward-pass latency on the same batch, trials interleaved between models.
pub fn latency_bench<T: Scalar>(
    baseline: &Model<T>,
    hybrid: &Model<T>,
    batch: &TokenBatch,
    solver: &SolverConfig,
    n_warmup: usize,
    n_trials: usize,
) -> Result<LatencyReport> {
    if n_trials == 0 {
        return Err(Error::contract("latency_bench needs at least one trial"));
    }
    let pinned = pin_current_thread();
    let u = control(hybrid, 1.0);
    let run_base = || baseline.logits(batch, None, solver).map(|_| ());
    let run_hyb = || hybrid.logits(batch, Some(&u), solver).map(|_| ());
    for _ in 0..n_warmup {
        run_base()?;
        run_hyb()?;
    }
    let time = |f: &dyn Fn() -> Result<()>| -> Result<f64> {
        let t = Instant::now();
        f()?;
        Ok(t.elapsed().as_secs_f64() * 1e3)
    };
    let (mut b, mut h) = (Vec::with_capacity(n_trials), Vec::with_capacity(n_trials));
    for _ in 0..n_trials {
        b.push(time(&run_base)?);
        h.push(time(&run_hyb)?);
    }
    let (baseline, hybrid) = (timing(b), timing(h));
    Ok(LatencyReport {
        ratio: hybrid.median_ms / baseline.median_ms,
        baseline,
        hybrid,
        pinned,
    })
}
