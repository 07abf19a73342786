//! End-to-end experiment settings and pipelines shared by the CLI and tests.

use std::path::Path;

use super::corpus::{generate_corpus, CorpusSpec, SteeringTask, Tokenizer};
use super::probes::NfeProbeConfig;
use super::report::MetricsWriter;
use super::train::{steering_train, train_lm, MetricsRecord, SteerConfig, SteeringReport, TrainConfig};
use crate::config::KeyValues;
use crate::error::Result;
use crate::model::{Arch, Model, ModelConfig};
use crate::solvers::{Method, SolverConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub steer: SteerConfig,
    pub corpus: CorpusSpec,
    pub probe: NfeProbeConfig,
    pub bench_warmup: usize,
    pub bench_trials: usize,
    pub bench_batch: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let vocab = Tokenizer::default().vocab_size();
        ExperimentConfig {
            model: ModelConfig::desk(vocab),
            train: TrainConfig::default(),
            steer: SteerConfig::default(),
            corpus: CorpusSpec::default(),
            probe: NfeProbeConfig::default(),
            bench_warmup: 3,
            bench_trials: 15,
            bench_batch: 8,
        }
    }
}

impl ExperimentConfig {
    /// Overlay `kv` on the defaults. Unknown keys are rejected.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        const KNOWN: &[&str] = &[
            "arch", "n_layers", "d_model", "n_heads", "vocab_size", "max_seq_len", "ode_start", "ode_end",
            "control_dim", "solver", "n_steps", "rtol", "atol", "max_steps", "train_steps", "batch_size",
            "seq_len", "lr", "weight_decay", "grad_clip", "explode_abs", "explode_rel", "vanish_abs",
            "steer_steps", "steer_lr", "corpus_chars", "review_share", "good_bias", "corpus_seed",
            "probe_rtol", "probe_atol", "bench_warmup", "bench_trials", "bench_batch",
        ];
        if let Some((k, _)) = kv.iter().find(|(k, _)| !KNOWN.contains(k)) {
            return Err(crate::Error::Config(format!("unknown config key `{k}`")));
        }
        let d = Self::default();
        let model = ModelConfig::from_kv(kv, &d.model)?;
        let clip: f64 = kv.get_or("grad_clip", d.train.grad_clip.unwrap_or(0.0))?;
        let train = TrainConfig {
            steps: kv.get_or("train_steps", d.train.steps)?,
            batch_size: kv.get_or("batch_size", d.train.batch_size)?,
            seq_len: kv.get_or("seq_len", d.train.seq_len.min(model.max_seq_len))?,
            lr: kv.get_or("lr", d.train.lr)?,
            weight_decay: kv.get_or("weight_decay", d.train.weight_decay)?,
            grad_clip: (clip > 0.0).then_some(clip),
            explode_abs: kv.get_or("explode_abs", d.train.explode_abs)?,
            explode_rel: kv.get_or("explode_rel", d.train.explode_rel)?,
            vanish_abs: kv.get_or("vanish_abs", d.train.vanish_abs)?,
            ..d.train
        };
        train.validate()?;
        let steer = SteerConfig {
            steps: kv.get_or("steer_steps", d.steer.steps)?,
            lr: kv.get_or("steer_lr", d.steer.lr)?,
            grad_clip: train.grad_clip,
            solver: model.solver.clone(),
            ..d.steer
        };
        let corpus = CorpusSpec {
            n_chars: kv.get_or("corpus_chars", d.corpus.n_chars)?,
            review_share: kv.get_or("review_share", d.corpus.review_share)?,
            good_bias: kv.get_or("good_bias", d.corpus.good_bias)?,
            seed: kv.get_or("corpus_seed", d.corpus.seed)?,
        };
        let probe = NfeProbeConfig {
            rtol: kv.get_or("probe_rtol", d.probe.rtol)?,
            atol: kv.get_or("probe_atol", d.probe.atol)?,
            ..d.probe
        };
        Ok(ExperimentConfig {
            model,
            train,
            steer,
            corpus,
            probe,
            bench_warmup: kv.get_or("bench_warmup", d.bench_warmup)?,
            bench_trials: kv.get_or("bench_trials", d.bench_trials)?,
            bench_batch: kv.get_or("bench_batch", d.bench_batch)?,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&KeyValues::load(path)?).map_err(|e| e.context(path.display().to_string()))
    }

    /// Apply CLI solver overrides to the model's solver.
    pub fn override_solver(
        &mut self,
        method: Option<Method>,
        n_steps: Option<usize>,
        rtol: Option<f64>,
        atol: Option<f64>,
    ) -> Result<()> {
        let s = &mut self.model.solver;
        if let Some(m) = method {
            s.method = m;
        }
        if let Some(n) = n_steps {
            s.n_steps = n;
        }
        if let Some(r) = rtol {
            s.rtol = r;
            self.probe.rtol = r;
        }
        if let Some(a) = atol {
            s.atol = a;
            self.probe.atol = a;
        }
        s.validate()?;
        self.steer.solver = s.clone();
        Ok(())
    }

    pub fn training_solver(&self) -> SolverConfig {
        self.model.solver.clone()
    }
}

/// Tokenised training text.
pub fn corpus_tokens(spec: &CorpusSpec) -> Result<Vec<usize>> {
    Tokenizer::default().encode(&generate_corpus(spec))
}

/// Pretrain one architecture, streaming records to `metrics` when given.
pub fn pretrain(
    cfg: &ExperimentConfig,
    arch: Arch,
    seed: u64,
    corpus: &[usize],
    metrics: Option<&Path>,
    abort_checkpoint: Option<&Path>,
) -> Result<(Model<f32>, Vec<MetricsRecord>)> {
    let mut model = Model::<f32>::new(cfg.model.clone().with_arch(arch), seed)?;
    let train = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let mut writer = metrics.map(MetricsWriter::create).transpose()?;
    let records = train_lm(&mut model, corpus, &train, abort_checkpoint, |r| match writer.as_mut() {
        Some(w) => w.write(r),
        None => Ok(()),
    })?;
    if let Some(w) = writer {
        w.finish()?;
    }
    Ok((model, records))
}

/// Freeze a pretrained hybrid and train its ODE block on the steering task.
pub fn steer(
    cfg: &ExperimentConfig,
    model: &mut Model<f32>,
    metrics: Option<&Path>,
) -> Result<SteeringReport> {
    let task = SteeringTask::new(&Tokenizer::default())?;
    model.set_freeze_for_steering();
    let mut writer = metrics.map(MetricsWriter::create).transpose()?;
    let report = steering_train(model, &task, &cfg.steer, |r| match writer.as_mut() {
        Some(w) => w.write(r),
        None => Ok(()),
    })?;
    if let Some(w) = writer {
        w.finish()?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_overlay_and_unknown_keys() {
        let kv = KeyValues::parse("d_model = 32\ntrain_steps = 7\ngrad_clip = 0\nsolver = rk4").unwrap();
        let c = ExperimentConfig::from_kv(&kv).unwrap();
        assert_eq!(c.model.d_model, 32);
        assert_eq!(c.train.steps, 7);
        assert_eq!(c.train.grad_clip, None);
        assert_eq!(c.steer.solver.method, Method::Rk4);
        assert!(ExperimentConfig::from_kv(&KeyValues::parse("bogus = 1").unwrap()).is_err());
        assert!(ExperimentConfig::from_kv(&KeyValues::parse("n_heads = 5").unwrap()).is_err());
    }

    #[test]
    fn solver_override_validates() {
        let mut c = ExperimentConfig::default();
        c.override_solver(Some(Method::Dopri5), None, Some(1e-5), None).unwrap();
        assert_eq!(c.model.solver.rtol, 1e-5);
        assert!(c.override_solver(None, None, Some(-1.0), None).is_err());
    }
}
