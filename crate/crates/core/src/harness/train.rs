//! Language-model pretraining and ODE-block steering.

use std::collections::VecDeque;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{sample_windows, SteeringTask};
use super::optim::AdamW;
use crate::error::{Error, Result};
use crate::field::ControlSignal;
use crate::model::{checkpoint, shift_targets, GradMode, Model, ParamGroup};
use crate::solvers::SolverConfig;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    pub explode_abs: f64,
    pub explode_rel: f64,
    pub vanish_abs: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            batch_size: 16,
            seq_len: 64,
            lr: 1e-3,
            weight_decay: 0.01,
            seed: 0,
            grad_clip: Some(1.0),
            explode_abs: 100.0,
            explode_rel: 10.0,
            vanish_abs: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.seq_len == 0 {
            return Err(Error::contract("steps, batch_size and seq_len must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::contract(format!("invalid learning rate {}", self.lr)));
        }
        Ok(())
    }
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub total_grad_norm: f64,
    /// Gradient norm of the ODE block, or of the blocks it replaces in the baseline.
    pub ode_grad_norm: f64,
    pub alpha: Option<f64>,
    pub exploded: bool,
    pub vanished: bool,
}

/// Total gradient norm below which a small ODE gradient is not called vanishing.
const VANISH_TOTAL_FLOOR: f64 = 1e-4;
const HISTORY: usize = 50;

#[derive(Debug, Clone)]
pub struct PathologyDetector {
    explode_abs: f64,
    explode_rel: f64,
    vanish_abs: f64,
    history: VecDeque<f64>,
}

impl PathologyDetector {
    pub fn new(cfg: &TrainConfig) -> Self {
        PathologyDetector {
            explode_abs: cfg.explode_abs,
            explode_rel: cfg.explode_rel,
            vanish_abs: cfg.vanish_abs,
            history: VecDeque::with_capacity(HISTORY),
        }
    }

    fn median(&self) -> Option<f64> {
        if self.history.is_empty() {
            return None;
        }
        let mut v: Vec<f64> = self.history.iter().copied().collect();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        Some(if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        })
    }

    /// Returns `(exploded, vanished)` and records `total` in the history.
    pub fn check(&mut self, total: f64, ode: f64) -> (bool, bool) {
        let rel = self.median().is_some_and(|m| total > self.explode_rel * m);
        let exploded = !total.is_finite() || total > self.explode_abs || rel;
        let vanished = ode < self.vanish_abs && total > VANISH_TOTAL_FLOOR;
        if self.history.len() == HISTORY {
            self.history.pop_front();
        }
        self.history.push_back(total);
        (exploded, vanished)
    }
}

fn ode_norm<T: Scalar>(model: &Model<T>) -> f64 {
    let target = if model.is_hybrid() {
        ParamGroup::OdeBlock
    } else {
        ParamGroup::MiddleBlocks
    };
    model.params.grad_norm(|n| model.group_of(n) == target)
}

/// Next-token pretraining. `sink` sees each record as it is produced.
///
/// A non-finite loss aborts the run; the parameters from before that step
/// are written to `abort_checkpoint` when given.
pub fn train_lm<T: Scalar>(
    model: &mut Model<T>,
    corpus: &[usize],
    cfg: &TrainConfig,
    abort_checkpoint: Option<&Path>,
    mut sink: impl FnMut(&MetricsRecord) -> Result<()>,
) -> Result<Vec<MetricsRecord>> {
    cfg.validate()?;
    if cfg.seq_len > model.config.max_seq_len {
        return Err(Error::contract(format!(
            "seq_len {} exceeds max_seq_len {}",
            cfg.seq_len, model.config.max_seq_len
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(&model.params, cfg.lr, cfg.weight_decay);
    let mut detector = PathologyDetector::new(cfg);
    let solver = model.config.solver.clone();
    let mut records = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let windows = sample_windows(corpus, cfg.batch_size, cfg.seq_len, &mut rng)?;
        let (batch, targets) = shift_targets(&windows)?;
        let alpha = model.alpha();
        let out = model.loss_and_grads(&batch, &targets, None, &solver, GradMode::Adjoint);
        let out = match out {
            Ok(o) => o,
            Err(Error::NonFiniteLoss { .. }) => {
                if let Some(path) = abort_checkpoint {
                    checkpoint::save(model, path)?;
                }
                return Err(Error::NonFiniteLoss { step });
            }
            Err(e) => return Err(e.context(format!("training step {step}"))),
        };
        let ode = ode_norm(model);
        let total = match cfg.grad_clip {
            Some(c) => AdamW::clip_grad_norm(&mut model.params, c),
            None => model.params.grad_norm(|_| true),
        };
        let (exploded, vanished) = detector.check(total, ode);
        opt.step(&mut model.params)?;
        let rec = MetricsRecord {
            step,
            loss: out.loss,
            total_grad_norm: total,
            ode_grad_norm: ode,
            alpha,
            exploded,
            vanished,
        };
        sink(&rec)?;
        records.push(rec);
    }
    Ok(records)
}

/// Settings for training the ODE block against the steering task.
#[derive(Debug, Clone, PartialEq)]
pub struct SteerConfig {
    pub steps: usize,
    pub lr: f64,
    pub grad_clip: Option<f64>,
    pub solver: SolverConfig,
    /// Control magnitude used for the two polarities.
    pub u_magnitude: f64,
}

impl Default for SteerConfig {
    fn default() -> Self {
        SteerConfig {
            steps: 200,
            lr: 3e-4,
            grad_clip: Some(1.0),
            solver: SolverConfig::euler(4),
            u_magnitude: 1.0,
        }
    }
}

/// Probability of each answer token at one control value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteeringRow {
    pub u: f64,
    pub p_good: f64,
    pub p_bad: f64,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringReport {
    pub rows: Vec<SteeringRow>,
}

impl SteeringReport {
    pub fn at(&self, u: f64) -> Option<&SteeringRow> {
        self.rows.iter().find(|r| r.u == u)
    }
}

pub const STEER_GOOD_MIN: f64 = 0.90;
pub const STEER_BAD_MIN: f64 = 0.75;

fn verdict(u: f64, p_good: f64, p_bad: f64) -> bool {
    if u > 0.0 {
        p_good >= STEER_GOOD_MIN
    } else if u < 0.0 {
        p_bad >= STEER_BAD_MIN
    } else {
        p_good > p_bad
    }
}

/// Mean `(P(good), P(bad))` over all prompts, from the softmax over the full
/// vocabulary at each answer position.
pub fn answer_probs<T: Scalar>(
    model: &Model<T>,
    task: &SteeringTask,
    u: f64,
    solver: &SolverConfig,
) -> Result<(f64, f64)> {
    let (batch, last) = task.batch(&task.prompts)?;
    let control = ControlSignal::new(vec![T::of(u); model.config.control_dim]);
    let (logits, _) = model.logits(&batch, Some(&control), solver)?;
    let v = model.config.vocab_size;
    let (mut pg, mut pb) = (0.0, 0.0);
    for (row, &pos) in last.iter().enumerate() {
        let off = (row * batch.seq + pos) * v;
        let l: Vec<f64> = logits.data()[off..off + v].iter().map(|x| x.as_f64()).collect();
        let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = l.iter().map(|x| (x - max).exp()).sum();
        pg += (l[task.good_token] - max).exp() / z;
        pb += (l[task.bad_token] - max).exp() / z;
    }
    let n = last.len() as f64;
    Ok((pg / n, pb / n))
}

pub fn steering_eval<T: Scalar>(
    model: &Model<T>,
    task: &SteeringTask,
    us: &[f64],
    solver: &SolverConfig,
) -> Result<SteeringReport> {
    let rows = us
        .iter()
        .map(|&u| {
            let (p_good, p_bad) = answer_probs(model, task, u, solver)?;
            Ok(SteeringRow {
                u,
                p_good,
                p_bad,
                success: verdict(u, p_good, p_bad),
            })
        })
        .collect::<Result<_>>()?;
    Ok(SteeringReport { rows })
}

/// Train the (already frozen) ODE block so that `+u` answers good and `-u`
/// answers bad, with both polarities weighted equally in every step.
/// Returns the report over `u ∈ {-1, 0, +1}` (scaled by `u_magnitude`).
pub fn steering_train<T: Scalar>(
    model: &mut Model<T>,
    task: &SteeringTask,
    cfg: &SteerConfig,
    mut sink: impl FnMut(&MetricsRecord) -> Result<()>,
) -> Result<SteeringReport> {
    if !model.is_hybrid() {
        return Err(Error::contract("steering needs a hybrid model"));
    }
    if model.params.iter().any(|p| p.trainable && !p.name.starts_with("ode.")) {
        return Err(Error::contract("apply set_freeze_for_steering before steering_train"));
    }
    let (batch, last) = task.batch(&task.prompts)?;
    let polarities = [
        (cfg.u_magnitude, task.targets(&batch, &last, task.good_token)),
        (-cfg.u_magnitude, task.targets(&batch, &last, task.bad_token)),
    ];
    let mut opt = AdamW::new(&model.params, cfg.lr, 0.0);
    let zero_cfg = TrainConfig::default();
    let mut detector = PathologyDetector::new(&zero_cfg);
    for step in 0..cfg.steps {
        let mut acc: Vec<Tensor<T>> = model.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        let mut loss = 0.0;
        let alpha = model.alpha();
        for (u, targets) in &polarities {
            let control = ControlSignal::new(vec![T::of(*u); model.config.control_dim]);
            let out = model
                .loss_and_grads(&batch, targets, Some(&control), &cfg.solver, GradMode::Adjoint)
                .map_err(|e| match e {
                    Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { step },
                    e => e.context(format!("steering step {step}")),
                })?;
            loss += 0.5 * out.loss;
            for (a, p) in acc.iter_mut().zip(model.params.iter()) {
                a.axpy(T::of(0.5), &p.grad)?;
            }
        }
        for (i, g) in acc.into_iter().enumerate() {
            model.params.set_grad(i, g)?;
        }
        let ode = ode_norm(model);
        let total = match cfg.grad_clip {
            Some(c) => AdamW::clip_grad_norm(&mut model.params, c),
            None => model.params.grad_norm(|_| true),
        };
        let (exploded, vanished) = detector.check(total, ode);
        opt.step(&mut model.params)?;
        sink(&MetricsRecord {
            step,
            loss,
            total_grad_norm: total,
            ode_grad_norm: ode,
            alpha,
            exploded,
            vanished,
        })?;
    }
    let m = cfg.u_magnitude;
    steering_eval(model, task, &[-m, 0.0, m], &cfg.solver)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::corpus::Tokenizer;
    use crate::model::{Arch, ModelConfig};

    fn tiny(arch: Arch) -> Model<f32> {
        let cfg = ModelConfig {
            n_layers: 3,
            d_model: 8,
            n_heads: 2,
            max_seq_len: 24,
            ode_replaces: (1, 2),
            ..ModelConfig::desk(96)
        }
        .with_arch(arch);
        Model::new(cfg, 1).unwrap()
    }

    fn small_cfg(steps: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 2,
            seq_len: 8,
            lr,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn detector_flags_follow_thresholds() {
        let mut d = PathologyDetector::new(&TrainConfig::default());
        assert_eq!(d.check(1.0, 0.5), (false, false));
        assert_eq!(d.check(5.0, 0.5), (false, false));
        assert_eq!(d.check(40.0, 0.5), (true, false));
        assert_eq!(d.check(101.0, 0.5), (true, false));
        assert_eq!(d.check(1.0, 1e-9), (false, true));
        assert_eq!(d.check(1e-5, 1e-9), (false, false));
        assert_eq!(d.check(f64::NAN, 1.0).0, true);
    }

    #[test]
    fn zero_lr_keeps_loss_constant_and_params_fixed() {
        let mut m = tiny(Arch::Hybrid);
        let before = m.params.checksum(|_| true);
        let corpus = vec![5usize; 64];
        let recs = train_lm(&mut m, &corpus, &small_cfg(4, 0.0), None, |_| Ok(())).unwrap();
        assert_eq!(recs.len(), 4);
        assert!(recs.iter().all(|r| r.loss == recs[0].loss && r.total_grad_norm > 0.0));
        assert_eq!(m.params.checksum(|_| true), before);
    }

    #[test]
    fn equal_seeds_give_identical_records() {
        let corpus: Vec<usize> = (0..500).map(|i| (i * 7 + i / 13) % 96).collect();
        let run = || {
            let mut m = tiny(Arch::Hybrid);
            train_lm(&mut m, &corpus, &small_cfg(3, 1e-3), None, |_| Ok(())).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn baseline_reports_middle_block_gradients_and_no_alpha() {
        let mut m = tiny(Arch::Baseline);
        let corpus: Vec<usize> = (0..200).map(|i| i % 50).collect();
        let recs = train_lm(&mut m, &corpus, &small_cfg(1, 1e-3), None, |_| Ok(())).unwrap();
        assert!(recs[0].alpha.is_none());
        assert!(recs[0].ode_grad_norm > 0.0);
    }

    #[test]
    fn non_finite_loss_aborts_with_checkpoint() {
        let mut m = tiny(Arch::Hybrid);
        let w = m.params.value("head.w").unwrap().map(|_| f32::INFINITY);
        m.params.set_value("head.w", w).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("abort.ckpt");
        let corpus: Vec<usize> = (0..100).map(|i| i % 9).collect();
        let err = train_lm(&mut m, &corpus, &small_cfg(2, 1e-3), Some(&path), |_| Ok(())).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { step: 0 }), "{err}");
        assert!(path.exists());
    }

    #[test]
    fn steering_requires_freeze_and_only_moves_ode_block() {
        let tok = Tokenizer::default();
        let task = SteeringTask::new(&tok).unwrap();
        let mut m = tiny(Arch::Hybrid);
        let cfg = SteerConfig {
            steps: 2,
            lr: 1e-2,
            ..SteerConfig::default()
        };
        assert!(steering_train(&mut m, &task, &cfg, |_| Ok(())).is_err());
        m.set_freeze_for_steering();
        let frozen = m.params.checksum(|n| !n.starts_with("ode."));
        let ode = m.params.checksum(|n| n.starts_with("ode."));
        let report = steering_train(&mut m, &task, &cfg, |_| Ok(())).unwrap();
        assert_eq!(report.rows.len(), 3);
        assert!(report.rows.iter().all(|r| (0.0..=1.0).contains(&r.p_good) && r.p_good + r.p_bad <= 1.0));
        assert_eq!(m.params.checksum(|n| !n.starts_with("ode.")), frozen);
        assert_ne!(m.params.checksum(|n| n.starts_with("ode.")), ode);
    }
}
