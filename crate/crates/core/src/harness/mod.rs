//! Training loops, experiments, probes and report output.

pub mod corpus;
pub mod experiment;
pub mod optim;
pub mod probes;
pub mod report;
pub mod train;

pub use corpus::{generate_corpus, CorpusSpec, SteeringTask, Tokenizer};
pub use optim::AdamW;
pub use probes::{control_sweep, latency_bench, linear_probe, nfe_probe, solver_invariance_test, ProbeReport};
pub use report::{save_metrics, write_csv};
pub use train::{steering_eval, steering_train, train_lm, MetricsRecord, SteerConfig, SteeringReport, TrainConfig};
