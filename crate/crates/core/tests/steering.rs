use contdepth::harness::experiment::{corpus_tokens, pretrain, steer, ExperimentConfig};
use contdepth::model::Arch;

fn balanced() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.model.n_layers = 4;
    cfg.model.d_model = 32;
    cfg.model.max_seq_len = 32;
    cfg.model.ode_replaces = (1, 3);
    cfg.train.seq_len = 32;
    cfg.train.batch_size = 8;
    cfg.train.steps = 1000;
    cfg.corpus.n_chars = 100_000;
    cfg.corpus.good_bias = 0.5;
    cfg.steer.steps = 100;
    cfg.steer.lr = 5e-3;
    cfg
}

#[test]
fn balanced_prior_steers_symmetrically() {
    let cfg = balanced();
    let corpus = corpus_tokens(&cfg.corpus).unwrap();
    let (mut model, _) = pretrain(&cfg, Arch::Hybrid, 0, &corpus, None, None).unwrap();
    let report = steer(&cfg, &mut model, None).unwrap();
    let up = report.at(1.0).unwrap().p_good;
    let down = report.at(-1.0).unwrap().p_bad;
    assert!(up > 0.5 && down > 0.5, "{up} {down}");
    assert!((up - down).abs() < 0.10, "P(good|+1) {up} vs P(bad|-1) {down}");
}
